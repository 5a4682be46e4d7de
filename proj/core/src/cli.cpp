#include "ssa/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "ssa/harness.hpp"
#include "ssa/selftest.hpp"

namespace ssa {

namespace {

struct ParsedFlags {
    std::string command;
    std::string config_path;
    std::optional<std::string> seed, out;
    std::map<std::string, std::string> overrides;
};

// Returns nullopt when --help was handled (help text goes to `help`).
std::optional<ParsedFlags> parse_flags(const std::vector<std::string>& args, std::string* help) {
    CLI::App app{"Sparse Sinkhorn attention: training, evaluation, sweeps and memory accounting", "ssa"};
    ParsedFlags f;
    app.add_option("command", f.command, "train | eval | sweep | account | selftest")->required();
    app.add_option("--config", f.config_path, "Sectioned key = value config file");
    app.add_option("--seed", f.seed, "Run seed (model init, batches, noise)");
    app.add_option("--out", f.out, "Output directory for artifacts");
    for (const auto& key : config_keys()) {
        if (key == "seed" || key == "output_dir" || key == "command") continue;
        app.add_option_function<std::string>(
               "--" + key, [&f, key](const std::string& v) { f.overrides[key] = v; }, "override " + key)
            ->group("Config overrides");
    }
    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        *help = app.help();
        return std::nullopt;
    } catch (const CLI::ParseError& e) {
        throw ConfigError(e.what());
    }
    return f;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
    os << text;
}

std::string fixed(double v, int digits = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

void print_metrics(std::ostream& out, const RunMetrics& m, TaskKind kind) {
    out << "eval_loss " << fixed(m.eval_loss) << "  perplexity " << fixed(m.perplexity) << "  bits/token "
        << fixed(m.bits_per_token) << '\n';
    if (kind == TaskKind::sort) {
        out << "in-distribution: token_acc " << fixed(m.token_accuracy) << "  exact_match " << fixed(m.exact_match)
            << "  edit_distance " << fixed(m.edit.normalized) << '\n';
        out << "2x length:       token_acc " << fixed(m.long_token_accuracy) << "  exact_match "
            << fixed(m.long_exact_match) << "  edit_distance " << fixed(m.long_edit.normalized) << '\n';
    }
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
    RunOptions ro;
    ro.out_dir = cfg.output_dir;
    ro.on_eval = [&](const EvalLog& e) {
        out << "step " << e.step << "  held-out loss " << fixed(e.loss) << '\n' << std::flush;
    };
    const ModelSpec spec = cfg.model_spec();
    const auto result = train_run(spec, cfg.task, cfg.optim_config(), ro);
    out << "trained " << result.metrics.steps << " steps in " << fixed(result.metrics.wall_seconds, 1) << " s; final train loss "
        << fixed(result.metrics.final_train_loss) << '\n';
    print_metrics(out, result.metrics, cfg.task.kind);
    out << "artifacts in " << cfg.output_dir.string() << '\n';
    return kExitOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
    const auto path = cfg.checkpoint.empty() ? cfg.output_dir / "model.ckpt" : cfg.checkpoint;
    if (!std::filesystem::exists(path)) throw ConfigError("checkpoint '" + path.string() + "' does not exist");
    const auto [spec, params] = load_checkpoint(path);
    const RunMetrics m = evaluate(spec, params, cfg.task);
    write_text(cfg.output_dir / "eval_metrics.json", metrics_json(m) + "\n");
    out << "evaluated " << path.string() << '\n';
    print_metrics(out, m, cfg.task.kind);
    return kExitOk;
}

int cmd_sweep(const RunConfig& cfg, std::ostream& out) {
    SweepOptions so;
    so.threads = cfg.sweep.threads;
    so.evaluate_long = cfg.sweep.evaluate_long;
    const auto rows = sweep(cfg.model_spec(), cfg.task, cfg.optim_config(), cfg.sweep.grid, so);
    std::ostringstream csv;
    write_sweep_csv(csv, rows);
    write_text(cfg.output_dir / "sweep.csv", csv.str());
    out << csv.str();
    std::size_t failed = 0;
    for (const auto& r : rows) {
        if (!r.ok) {
            ++failed;
            out << "cell " << r.cell.index << " failed: " << r.error << '\n';
        }
    }
    out << rows.size() - failed << "/" << rows.size() << " cells completed; table in "
        << (cfg.output_dir / "sweep.csv").string() << '\n';
    return kExitOk;
}

int cmd_account(const RunConfig& cfg, std::ostream& out) {
    std::vector<MemoryReport> reports;
    for (AttentionVariant v : cfg.account.variants) {
        AttentionConfig a = cfg.model.attention.at(0);
        a.variant = v;
        a.block_size = cfg.account.block_size;
        a.sortcut_budget = cfg.account.sortcut_budget;
        a.n_heads = 1;
        a.head_dim = 4;
        MemoryReport r = memory_account(a, cfg.account.seq_len);
        if (cfg.account.instrument) {
            r.instrumented_entries = instrumented_entries(a, cfg.account.seq_len, derive_seed(cfg.seed, "account"));
            if (r.instrumented_entries != r.score_entries) {
                throw std::runtime_error("account: closed form " + std::to_string(r.score_entries) +
                                         " disagrees with instrumented count " +
                                         std::to_string(r.instrumented_entries) + " for " + std::string(to_string(v)));
            }
        }
        reports.push_back(r);
    }
    std::ostringstream csv;
    write_memory_csv(csv, reports);
    write_text(cfg.output_dir / "memory.csv", csv.str());
    out << "attention memory per head, l = " << cfg.account.seq_len << ", b = " << cfg.account.block_size << '\n';
    out << std::left << std::setw(10) << "variant" << std::right << std::setw(12) << "entries" << std::setw(12)
        << "formula" << std::setw(14) << "ratio_actual" << std::setw(15) << "ratio_formula" << std::setw(14)
        << "instrumented" << '\n';
    for (const auto& r : reports) {
        out << std::left << std::setw(10) << to_string(r.variant) << std::right << std::setw(12) << r.score_entries
            << std::setw(12) << r.paper_formula_units << std::setw(14) << fixed(r.ratio_actual, 2) << std::setw(15)
            << fixed(r.ratio_paper_formula, 1) << std::setw(14)
            << (cfg.account.instrument ? std::to_string(r.instrumented_entries) : std::string("-")) << '\n';
    }
    return kExitOk;
}

int cmd_selftest(std::ostream& out) {
    const auto results = run_selftest();
    const bool ok = print_results(out, results);
    std::size_t passed = 0;
    for (const auto& r : results) passed += r.passed;
    out << passed << "/" << results.size() << " properties passed\n";
    return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

RunConfig parse_args(const std::vector<std::string>& args) {
    std::string help;
    auto flags = parse_flags(args, &help);
    if (!flags) throw ConfigError(help);
    RunConfig cfg;
    if (!flags->config_path.empty()) apply_config_file(cfg, flags->config_path);
    cfg.command = parse_command(flags->command);
    if (flags->seed) apply_override(cfg, "seed", *flags->seed);
    if (flags->out) apply_override(cfg, "output_dir", *flags->out);
    // n_layers first: it copies layer 0's attention settings to every layer.
    if (auto it = flags->overrides.find("model.n_layers"); it != flags->overrides.end())
        apply_override(cfg, it->first, it->second);
    for (const auto& [k, v] : flags->overrides)
        if (k != "model.n_layers") apply_override(cfg, k, v);
    return cfg;
}

int dispatch(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    try {
        validate(cfg);
        std::filesystem::create_directories(cfg.output_dir);
        write_text(cfg.output_dir / "config.resolved.ini", cfg.to_text());
        switch (cfg.command) {
            case Command::train: return cmd_train(cfg, out);
            case Command::eval: return cmd_eval(cfg, out);
            case Command::sweep: return cmd_sweep(cfg, out);
            case Command::account: return cmd_account(cfg, out);
            case Command::selftest: return cmd_selftest(out);
        }
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DivergenceError& e) {
        err << "diverged: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const std::exception& e) {
        err << "runtime error: " << e.what() << '\n';
        return kExitRuntime;
    }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    try {
        std::string help;
        if (!parse_flags(args, &help)) {
            out << help;
            return kExitOk;
        }
        cfg = parse_args(args);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    }
    return dispatch(cfg, out, err);
}

}  // namespace ssa
