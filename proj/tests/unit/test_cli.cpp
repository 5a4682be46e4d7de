#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssa/cli.hpp"
#include "ssa/config.hpp"

using namespace ssa;
namespace fs = std::filesystem;

namespace {
fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("ssa_cli_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct Run {
    int code;
    std::string out, err;
};
Run run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

// A small sorting run that finishes in a second or two.
std::vector<std::string> tiny_train(const fs::path& out) {
    return {"train",           "--out",                 out.string(),     "--model.d_model", "8",
            "--model.n_heads", "1",                     "--model.n_layers", "1",             "--model.ffn_width",
            "16",              "--model.block_size",    "2",              "--task.train_len", "4",
            "--task.eval_len", "8",                     "--task.vocab_size", "4",            "--task.n_train",
            "64",              "--task.n_eval",         "16",             "--optim.steps",   "10",
            "--optim.batch_size", "8",                  "--optim.eval_every", "5"};
}
}  // namespace

TEST_SUITE("cli") {
    TEST_CASE("an empty config is valid and equals the defaults") {
        const RunConfig c = parse_config_text("");
        CHECK(c == RunConfig{});
        CHECK_NOTHROW(validate(c));
    }

    TEST_CASE("config text: sections, comments, round trip") {
        const RunConfig c = parse_config_text(
            "seed = 9  # run seed\n"
            "[model]\nblock_size = 8\ntemperature = 0.5\nvariant = sortcut\n"
            "[optim]\nlr = 0.001\n"
            "[sweep]\ntemperatures = 0.25, 0.5\n");
        CHECK(c.seed == 9);
        CHECK(c.model.attention[0].block_size == 8);
        CHECK(c.model.attention[1].block_size == 8);
        CHECK(c.model.attention[0].sinkhorn.temperature == 0.5);
        CHECK(c.model.attention[0].variant == AttentionVariant::sortcut);
        CHECK(c.optim.lr == 0.001);
        CHECK(c.sweep.grid.temperatures == std::vector<double>{0.25, 0.5});
        CHECK(parse_config_text(c.to_text()) == c);
        CHECK(parse_config_text(RunConfig{}.to_text()) == RunConfig{});
    }

    TEST_CASE("unknown and malformed keys are rejected by name") {
        try {
            parse_config_text("[model]\nblok_size = 4\n");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("blok_size") != std::string::npos);
        }
        CHECK_THROWS_AS(parse_config_text("[modle]\nblock_size = 4\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("[optim]\nlr = fast\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("[model]\nblock_size\n"), ConfigError);
        RunConfig c;
        CHECK_THROWS_AS(apply_override(c, "model.nope", "1"), ConfigError);
    }

    TEST_CASE("cross-field validation") {
        RunConfig c;
        apply_override(c, "model.block_size", "5");
        CHECK_THROWS_AS(validate(c), ConfigError);
        RunConfig d;
        apply_override(d, "model.n_heads", "3");
        CHECK_THROWS_AS(validate(d), ConfigError);
        RunConfig e;
        apply_override(e, "task.kind", "charlm");
        CHECK_THROWS_AS(validate(e), ConfigError);
    }

    TEST_CASE("flags override the config file, which overrides defaults") {
        const fs::path dir = scratch("layering");
        fs::create_directories(dir);
        std::ofstream(dir / "run.ini") << "seed = 5\n[model]\nblock_size = 8\ntemperature = 0.5\n";
        const RunConfig c = parse_args({"train", "--config", (dir / "run.ini").string(), "--model.block_size", "4",
                                        "--seed", "7"});
        CHECK(c.seed == 7);
        CHECK(c.model.attention[0].block_size == 4);
        CHECK(c.model.attention[0].sinkhorn.temperature == 0.5);
        CHECK(c.optim.lr == OptimConfig{}.lr);
        CHECK(c.model_spec().attention[0].sinkhorn.seed == derive_seed(7, "sinkhorn"));
        fs::remove_all(dir);
    }

    TEST_CASE("exit codes") {
        CHECK(run({"train", "--model.blok_size", "4"}).code == kExitConfig);
        CHECK(run({"frobnicate"}).code == kExitConfig);
        CHECK(run({"train", "--config", "/nonexistent/run.ini"}).code == kExitConfig);
        const fs::path dir = scratch("exit");
        CHECK(run({"eval", "--out", dir.string()}).code == kExitConfig);  // no checkpoint yet
        CHECK(run({"train", "--out", "/proc/no_such_dir/x"}).code == kExitRuntime);
        fs::remove_all(dir);
    }

    TEST_CASE("account prints the footnote ratio") {
        const fs::path dir = scratch("account");
        const Run r = run({"account", "--out", dir.string()});
        CHECK(r.code == kExitOk);
        CHECK(r.out.find("240.9") != std::string::npos);
        CHECK(fs::exists(dir / "memory.csv"));
        fs::remove_all(dir);
    }

    TEST_CASE("selftest exits cleanly") {
        const fs::path dir = scratch("selftest");
        const Run r = run({"selftest", "--out", dir.string()});
        CHECK(r.code == kExitOk);
        CHECK(r.out.find("FAIL") == std::string::npos);
        fs::remove_all(dir);
    }

    TEST_CASE("a very large learning rate exits with the divergence code") {
        const fs::path dir = scratch("diverge");
        const Run r = run({"train", "--out", dir.string(), "--optim.lr", "10", "--optim.steps", "500"});
        CHECK(r.code == kExitDivergence);
        CHECK(r.err.find("diverged") != std::string::npos);
        fs::remove_all(dir);
    }

    TEST_CASE("repeated runs write byte-identical artifacts; eval reloads the checkpoint") {
        const fs::path a = scratch("repro_a"), b = scratch("repro_b");
        REQUIRE(run(tiny_train(a)).code == kExitOk);
        REQUIRE(run(tiny_train(b)).code == kExitOk);
        for (const char* f : {"history.csv", "metrics.json", "model.ckpt"}) {
            CAPTURE(f);
            CHECK(!slurp(a / f).empty());
            CHECK(slurp(a / f) == slurp(b / f));
        }
        auto args = tiny_train(a);
        args[0] = "eval";
        const Run e = run(args);
        CHECK(e.code == kExitOk);
        CHECK(fs::exists(a / "eval_metrics.json"));
        const RunConfig resolved = parse_config_text(slurp(a / "config.resolved.ini"));
        CHECK(resolved.command == Command::eval);
        CHECK(resolved.optim.steps == 10);
        fs::remove_all(a);
        fs::remove_all(b);
    }
}
