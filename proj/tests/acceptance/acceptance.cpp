// Acceptance driver. `ssa_acceptance --criterion N` checks one criterion,
// no arguments checks all ten. One PASS/FAIL line per criterion; exit 0 only
// when every requested criterion passed.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <CLI11.hpp>

#include "ssa/config.hpp"
#include "ssa/harness.hpp"
#include "ssa/selftest.hpp"

namespace fs = std::filesystem;
using namespace ssa;

namespace {

struct Verdict {
    bool passed = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int digits = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

fs::path work_dir(int criterion) {
    const fs::path p = fs::temp_directory_path() / ("ssa_acceptance_" + std::to_string(criterion));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Criteria 1-6 reuse the selftest suites; each must pass every property and
// stay inside its time budget.
Verdict from_selftest(int criterion, double budget_seconds) {
    const auto t0 = Clock::now();
    const auto results = run_selftest({criterion});
    const double secs = since(t0);
    Verdict v{!results.empty(), ""};
    for (const auto& r : results) {
        v.passed = v.passed && r.passed;
        if (!v.detail.empty()) v.detail += "; ";
        v.detail += r.name + (r.passed ? " ok" : " FAILED") + " (" + r.detail + ")";
    }
    if (budget_seconds > 0 && secs >= budget_seconds) {
        v.passed = false;
        v.detail += "; took " + num(secs, 2) + " s, budget " + num(budget_seconds, 0) + " s";
    } else {
        v.detail += "; " + num(secs, 2) + " s";
    }
    return v;
}

RunConfig sort_config(AttentionVariant variant) {
    RunConfig c;  // defaults: l = 16, vocab 16, 2 layers, 5000 steps
    c.seed = 1;
    apply_override(c, "model.variant", std::string(to_string(variant)));
    validate(c);
    return c;
}

Verdict criterion_7() {
    const fs::path dir = work_dir(7);
    struct Outcome {
        RunMetrics m;
        double secs;
    };
    auto run = [&](AttentionVariant v) {
        const RunConfig c = sort_config(v);
        RunOptions o;
        o.out_dir = dir / std::string(to_string(v));
        o.evaluate_long = true;
        const auto t0 = Clock::now();
        Outcome out{train_run(c.model_spec(), c.task, c.optim_config(), o).metrics, 0.0};
        out.secs = since(t0);
        return out;
    };
    const Outcome sink = run(AttentionVariant::sinkhorn);
    const Outcome local = run(AttentionVariant::local);
    const bool a = sink.m.token_accuracy >= 0.95 && sink.m.exact_match >= 0.80;
    const bool b = sink.m.long_exact_match >= local.m.long_exact_match;
    const bool fast = sink.secs < 900 && local.secs < 900;
    std::string d = "(a) sinkhorn token_acc " + num(sink.m.token_accuracy) + " EM " + num(sink.m.exact_match) +
                    "; (b) at 2l sinkhorn EM " + num(sink.m.long_exact_match) + " vs local EM " +
                    num(local.m.long_exact_match) + " (token_acc " + num(sink.m.long_token_accuracy) + " vs " +
                    num(local.m.long_token_accuracy) + "); in-distribution local EM " + num(local.m.exact_match) +
                    "; " + num(sink.secs, 0) + " s + " + num(local.secs, 0) + " s";
    return {a && b && fast, d};
}

// Tiny byte-level LM on the bundled text; only N_k differs between the cells.
RunConfig charlm_config() {
    RunConfig c;
    c.seed = 1;
    const std::vector<std::pair<const char*, std::string>> settings{
        {"task.kind", "charlm"},
        {"task.text_path", (fs::path(SSA_TEST_DATA) / "corpus.txt").string()},
        {"task.context", "256"},
        {"task.n_eval_windows", "32"},
        {"model.n_layers", "2"},
        {"model.d_model", "32"},
        {"model.n_heads", "2"},
        {"model.ffn_width", "64"},
        {"model.variant", "sinkhorn"},
        {"model.block_size", "16"},
        {"model.temperature", "0.75"},
        {"optim.steps", "2000"},
        {"optim.batch_size", "8"},
        {"optim.lr", "0.0005"},
        {"optim.warmup", "400"},
        {"optim.eval_every", "500"},
        {"sweep.sinkhorn_iters", "0,5"},
    };
    for (const auto& [k, v] : settings) apply_override(c, k, v);
    validate(c);
    return c;
}

Verdict criterion_8() {
    const RunConfig c = charlm_config();
    const auto t0 = Clock::now();
    const auto rows = sweep(c.model_spec(), c.task, c.optim_config(), c.sweep.grid);
    const double secs = since(t0);
    std::ofstream(work_dir(8) / "sweep.csv") << [&] {
        std::ostringstream os;
        write_sweep_csv(os, rows);
        return os.str();
    }();
    if (rows.size() != 2 || !rows[0].ok || !rows[1].ok) {
        std::string why = "sweep failed:";
        for (const auto& r : rows)
            if (!r.ok) why += " " + r.error;
        return {false, why};
    }
    const double none = rows[0].final_metric, five = rows[1].final_metric;
    const double rel = (none - five) / five;
    return {rel >= 0.10 && secs < 3600,
            "N_k=0 loss " + num(none) + " nats/byte, N_k=5 loss " + num(five) + ", relative gap " + num(100 * rel, 1) +
                "% (need >= 10%); " + num(secs, 0) + " s"};
}

bool well_formed_sweep_csv(const std::string& csv, std::size_t expected_rows, std::string& why) {
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    const std::string header = "cell,variant,block_size,temperature,sinkhorn_iters,status,final_metric,wall_seconds";
    if (line != header) {
        why = "unexpected header '" + line + "'";
        return false;
    }
    std::size_t n = 0;
    while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 8) {
            why = "row " + std::to_string(n) + " has " + std::to_string(f.size()) + " fields";
            return false;
        }
        if (f[0] != std::to_string(n) || f[5] != "ok" || !std::isfinite(std::stod(f[6]))) {
            why = "row " + std::to_string(n) + " malformed: " + line;
            return false;
        }
        ++n;
    }
    if (n != expected_rows) {
        why = std::to_string(n) + " rows, expected " + std::to_string(expected_rows);
        return false;
    }
    return true;
}

Verdict criterion_9() {
    RunConfig c;
    apply_override(c, "sweep.temperatures", "0.25,0.5,0.75,1.0");
    apply_override(c, "optim.steps", "200");
    validate(c);
    const auto t0 = Clock::now();
    const auto rows = sweep(c.model_spec(), c.task, c.optim_config(), c.sweep.grid);
    std::ostringstream csv;
    write_sweep_csv(csv, rows);
    std::ofstream(work_dir(9) / "sweep.csv") << csv.str();
    std::string why;
    const bool ok = well_formed_sweep_csv(csv.str(), 4, why);
    std::string d = ok ? "4 cells, losses" : why;
    if (ok)
        for (const auto& r : rows) d += " tau=" + num(r.cell.temperature, 2) + ":" + num(r.final_metric);
    return {ok, d + "; " + num(since(t0), 0) + " s"};
}

Verdict criterion_10() {
    const fs::path dir = work_dir(10);
    const std::string cmd = std::string("\"") + SSA_CLI_PATH + "\" selftest --out \"" + dir.string() + "\" > \"" +
                            (dir / "selftest.log").string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream log(dir / "selftest.log");
    std::size_t pass = 0, fail = 0;
    for (std::string line; std::getline(log, line);) {
        pass += line.rfind("PASS", 0) == 0;
        fail += line.rfind("FAIL", 0) == 0;
    }
    return {code == 0 && pass > 0 && fail == 0,
            "exit " + std::to_string(code) + ", " + std::to_string(pass) + " properties passed, " + std::to_string(fail) +
                " failed"};
}

const std::vector<std::pair<std::string, std::function<Verdict()>>>& criteria() {
    static const std::vector<std::pair<std::string, std::function<Verdict()>>> all{
        {"doubly-stochastic convergence", [] { return from_selftest(1, 1.0); }},
        {"gradient fidelity", [] { return from_selftest(2, 30.0); }},
        {"causality", [] { return from_selftest(3, 10.0); }},
        {"sortcut equals dense under a hard permutation", [] { return from_selftest(4, 0.0); }},
        {"identity sort equals local attention", [] { return from_selftest(5, 0.0); }},
        {"memory accounting", [] { return from_selftest(6, 0.0); }},
        {"sorting task", criterion_7},
        {"N_k = 0 ablation direction", criterion_8},
        {"temperature sweep", criterion_9},
        {"selftest command", criterion_10},
    };
    return all;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks", "ssa_acceptance"};
    std::vector<int> which;
    app.add_option("--criterion", which, "criterion number(s), 1-10; default all")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);
    if (which.empty())
        for (int i = 1; i <= 10; ++i) which.push_back(i);

    bool all_ok = true;
    for (int n : which) {
        const auto& [name, fn] = criteria()[static_cast<std::size_t>(n - 1)];
        Verdict v;
        try {
            v = fn();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        all_ok = all_ok && v.passed;
        std::cout << (v.passed ? "PASS" : "FAIL") << " criterion " << n << " (" << name << "): " << v.detail << std::endl;
    }
    return all_ok ? 0 : 1;
}
