#include "ssa/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace ssa {

std::string_view to_string(Command c) {
    switch (c) {
        case Command::train: return "train";
        case Command::eval: return "eval";
        case Command::sweep: return "sweep";
        case Command::account: return "account";
        case Command::selftest: return "selftest";
    }
    return "train";
}

Command parse_command(std::string_view s) {
    for (Command c : {Command::train, Command::eval, Command::sweep, Command::account, Command::selftest})
        if (to_string(c) == s) return c;
    throw ConfigError("unknown command '" + std::string(s) + "' (expected train, eval, sweep, account or selftest)");
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::string fmt(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

template <typename T>
T num(std::string_view key, std::string_view text) {
    const std::string t = trim(text);
    T value{};
    auto res = std::from_chars(t.data(), t.data() + t.size(), value);
    if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
        throw ConfigError("'" + std::string(key) + "': cannot parse '" + std::string(text) + "' as a number");
    }
    return value;
}

bool flag(std::string_view key, std::string_view text) {
    const std::string t = trim(text);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw ConfigError("'" + std::string(key) + "': expected true or false, got '" + std::string(text) + "'");
}

std::vector<std::string> split_list(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
    for (const auto& s : out)
        if (s.empty()) throw ConfigError("empty element in list '" + std::string(text) + "'");
    return out;
}

template <typename T, typename F>
std::vector<T> parse_list(std::string_view text, F&& one) {
    std::vector<T> out;
    for (const auto& s : split_list(text)) out.push_back(one(s));
    return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& v, F&& one) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += one(v[i]);
    }
    return s;
}

// Re-throw enum parse failures from the core as config errors.
template <typename F>
auto enum_value(std::string_view key, F&& f) {
    try {
        return f();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("'" + std::string(key) + "': " + e.what());
    }
}

struct Key {
    std::string name;  // "section.key" or top-level "key"
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

// Shared attention settings live in every layer; reads come from layer 0.
template <typename F>
void each_layer(RunConfig& c, F&& f) {
    for (auto& a : c.model.attention) f(a);
}

const std::vector<Key>& keys() {
    static const std::vector<Key> table = [] {
        std::vector<Key> k;
        auto add = [&](std::string name, auto set, auto get) { k.push_back({std::move(name), set, get}); };
        const auto& A = [](const RunConfig& c) -> const AttentionConfig& { return c.model.attention.at(0); };

        add("command", [](RunConfig& c, std::string_view v) { c.command = parse_command(trim(v)); },
            [](const RunConfig& c) { return std::string(to_string(c.command)); });
        add("seed", [](RunConfig& c, std::string_view v) { c.seed = num<std::uint64_t>("seed", v); },
            [](const RunConfig& c) { return std::to_string(c.seed); });
        add("output_dir", [](RunConfig& c, std::string_view v) { c.output_dir = trim(v); },
            [](const RunConfig& c) { return c.output_dir.string(); });
        add("checkpoint", [](RunConfig& c, std::string_view v) { c.checkpoint = trim(v); },
            [](const RunConfig& c) { return c.checkpoint.string(); });

        // [model]
        add("model.d_model", [](RunConfig& c, std::string_view v) { c.model.d_model = num<std::size_t>("model.d_model", v); },
            [](const RunConfig& c) { return fmt(c.model.d_model); });
        add("model.n_layers",
            [](RunConfig& c, std::string_view v) {
                const auto n = num<std::size_t>("model.n_layers", v);
                if (n == 0) throw ConfigError("'model.n_layers' must be positive");
                const AttentionConfig proto = c.model.attention.at(0);
                c.model.n_layers = n;
                c.model.attention.assign(n, proto);
            },
            [](const RunConfig& c) { return fmt(c.model.n_layers); });
        add("model.ffn_width",
            [](RunConfig& c, std::string_view v) { c.model.ffn_width = num<std::size_t>("model.ffn_width", v); },
            [](const RunConfig& c) { return fmt(c.model.ffn_width); });
        add("model.tie_embeddings",
            [](RunConfig& c, std::string_view v) { c.model.tie_embeddings = flag("model.tie_embeddings", v); },
            [](const RunConfig& c) { return fmt(c.model.tie_embeddings); });
        add("model.variant",
            [](RunConfig& c, std::string_view v) {
                const auto x = enum_value("model.variant", [&] { return parse_attention_variant(trim(v)); });
                each_layer(c, [&](AttentionConfig& a) { a.variant = x; });
            },
            [A](const RunConfig& c) { return std::string(to_string(A(c).variant)); });
        add("model.block_size",
            [](RunConfig& c, std::string_view v) {
                const auto x = num<std::size_t>("model.block_size", v);
                each_layer(c, [&](AttentionConfig& a) { a.block_size = x; });
            },
            [A](const RunConfig& c) { return fmt(A(c).block_size); });
        add("model.n_heads",
            [](RunConfig& c, std::string_view v) {
                const auto x = num<std::size_t>("model.n_heads", v);
                if (x == 0) throw ConfigError("'model.n_heads' must be positive");
                each_layer(c, [&](AttentionConfig& a) { a.n_heads = x; });
            },
            [A](const RunConfig& c) { return fmt(A(c).n_heads); });
        add("model.temperature",
            [](RunConfig& c, std::string_view v) {
                const auto x = num<double>("model.temperature", v);
                each_layer(c, [&](AttentionConfig& a) { a.sinkhorn.temperature = x; });
            },
            [A](const RunConfig& c) { return fmt(A(c).sinkhorn.temperature); });
        add("model.sinkhorn_iters",
            [](RunConfig& c, std::string_view v) {
                const auto x = num<int>("model.sinkhorn_iters", v);
                each_layer(c, [&](AttentionConfig& a) { a.sinkhorn.n_iters = x; });
            },
            [A](const RunConfig& c) { return std::to_string(A(c).sinkhorn.n_iters); });
        add("model.gumbel",
            [](RunConfig& c, std::string_view v) {
                const auto x = flag("model.gumbel", v);
                each_layer(c, [&](AttentionConfig& a) { a.sinkhorn.gumbel = x; });
            },
            [A](const RunConfig& c) { return fmt(A(c).sinkhorn.gumbel); });
        add("model.sortcut_budget",
            [](RunConfig& c, std::string_view v) {
                const auto x = num<std::size_t>("model.sortcut_budget", v);
                each_layer(c, [&](AttentionConfig& a) { a.sortcut_budget = x; });
            },
            [A](const RunConfig& c) { return fmt(A(c).sortcut_budget); });
        add("model.sort_net",
            [](RunConfig& c, std::string_view v) {
                const auto x = enum_value("model.sort_net", [&] { return parse_sort_net_variant(trim(v)); });
                each_layer(c, [&](AttentionConfig& a) { a.sort_net = x; });
            },
            [A](const RunConfig& c) { return std::string(to_string(A(c).sort_net)); });
        add("model.summed_logits",
            [](RunConfig& c, std::string_view v) {
                const auto x = flag("model.summed_logits", v);
                each_layer(c, [&](AttentionConfig& a) { a.summed_logits = x; });
            },
            [A](const RunConfig& c) { return fmt(A(c).summed_logits); });
        add("model.strict_causal_pool",
            [](RunConfig& c, std::string_view v) {
                const auto x = flag("model.strict_causal_pool", v);
                each_layer(c, [&](AttentionConfig& a) { a.strict_causal_pool = x; });
            },
            [A](const RunConfig& c) { return fmt(A(c).strict_causal_pool); });

        // [task]
        add("task.kind",
            [](RunConfig& c, std::string_view v) {
                c.task.kind = enum_value("task.kind", [&] { return parse_task_kind(trim(v)); });
            },
            [](const RunConfig& c) { return std::string(to_string(c.task.kind)); });
        add("task.train_len", [](RunConfig& c, std::string_view v) { c.task.sort.train_len = num<std::size_t>("task.train_len", v); },
            [](const RunConfig& c) { return fmt(c.task.sort.train_len); });
        add("task.eval_len", [](RunConfig& c, std::string_view v) { c.task.sort.eval_len = num<std::size_t>("task.eval_len", v); },
            [](const RunConfig& c) { return fmt(c.task.sort.eval_len); });
        add("task.vocab_size",
            [](RunConfig& c, std::string_view v) { c.task.sort.vocab_size = num<std::size_t>("task.vocab_size", v); },
            [](const RunConfig& c) { return fmt(c.task.sort.vocab_size); });
        add("task.n_train", [](RunConfig& c, std::string_view v) { c.task.sort.n_train = num<std::size_t>("task.n_train", v); },
            [](const RunConfig& c) { return fmt(c.task.sort.n_train); });
        add("task.n_eval", [](RunConfig& c, std::string_view v) { c.task.sort.n_eval = num<std::size_t>("task.n_eval", v); },
            [](const RunConfig& c) { return fmt(c.task.sort.n_eval); });
        add("task.data_seed",
            [](RunConfig& c, std::string_view v) { c.task.sort.seed = num<std::uint64_t>("task.data_seed", v); },
            [](const RunConfig& c) { return std::to_string(c.task.sort.seed); });
        add("task.text_path", [](RunConfig& c, std::string_view v) { c.task.charlm.text_path = trim(v); },
            [](const RunConfig& c) { return c.task.charlm.text_path.string(); });
        add("task.context", [](RunConfig& c, std::string_view v) { c.task.charlm.context = num<std::size_t>("task.context", v); },
            [](const RunConfig& c) { return fmt(c.task.charlm.context); });
        add("task.eval_fraction",
            [](RunConfig& c, std::string_view v) { c.task.charlm.eval_fraction = num<double>("task.eval_fraction", v); },
            [](const RunConfig& c) { return fmt(c.task.charlm.eval_fraction); });
        add("task.n_eval_windows",
            [](RunConfig& c, std::string_view v) {
                c.task.charlm.n_eval_windows = num<std::size_t>("task.n_eval_windows", v);
            },
            [](const RunConfig& c) { return fmt(c.task.charlm.n_eval_windows); });

        // [optim]
        add("optim.steps", [](RunConfig& c, std::string_view v) { c.optim.steps = num<std::size_t>("optim.steps", v); },
            [](const RunConfig& c) { return fmt(c.optim.steps); });
        add("optim.batch_size",
            [](RunConfig& c, std::string_view v) { c.optim.batch_size = num<std::size_t>("optim.batch_size", v); },
            [](const RunConfig& c) { return fmt(c.optim.batch_size); });
        add("optim.lr", [](RunConfig& c, std::string_view v) { c.optim.lr = num<double>("optim.lr", v); },
            [](const RunConfig& c) { return fmt(c.optim.lr); });
        add("optim.beta1", [](RunConfig& c, std::string_view v) { c.optim.beta1 = num<double>("optim.beta1", v); },
            [](const RunConfig& c) { return fmt(c.optim.beta1); });
        add("optim.beta2", [](RunConfig& c, std::string_view v) { c.optim.beta2 = num<double>("optim.beta2", v); },
            [](const RunConfig& c) { return fmt(c.optim.beta2); });
        add("optim.eps", [](RunConfig& c, std::string_view v) { c.optim.eps = num<double>("optim.eps", v); },
            [](const RunConfig& c) { return fmt(c.optim.eps); });
        add("optim.warmup", [](RunConfig& c, std::string_view v) { c.optim.warmup = num<std::size_t>("optim.warmup", v); },
            [](const RunConfig& c) { return fmt(c.optim.warmup); });
        add("optim.clip_norm", [](RunConfig& c, std::string_view v) { c.optim.clip_norm = num<double>("optim.clip_norm", v); },
            [](const RunConfig& c) { return fmt(c.optim.clip_norm); });
        add("optim.eval_every",
            [](RunConfig& c, std::string_view v) { c.optim.eval_every = num<std::size_t>("optim.eval_every", v); },
            [](const RunConfig& c) { return fmt(c.optim.eval_every); });

        add("optim.divergence_factor",
            [](RunConfig& c, std::string_view v) {
                c.optim.divergence_factor = num<double>("optim.divergence_factor", v);
            },
            [](const RunConfig& c) { return fmt(c.optim.divergence_factor); });

        // [sweep]
        add("sweep.temperatures",
            [](RunConfig& c, std::string_view v) {
                c.sweep.grid.temperatures =
                    parse_list<double>(v, [](const std::string& s) { return num<double>("sweep.temperatures", s); });
            },
            [](const RunConfig& c) { return join(c.sweep.grid.temperatures, [](double x) { return fmt(x); }); });
        add("sweep.sinkhorn_iters",
            [](RunConfig& c, std::string_view v) {
                c.sweep.grid.sinkhorn_iters =
                    parse_list<int>(v, [](const std::string& s) { return num<int>("sweep.sinkhorn_iters", s); });
            },
            [](const RunConfig& c) { return join(c.sweep.grid.sinkhorn_iters, [](int x) { return std::to_string(x); }); });
        add("sweep.block_sizes",
            [](RunConfig& c, std::string_view v) {
                c.sweep.grid.block_sizes = parse_list<std::size_t>(
                    v, [](const std::string& s) { return num<std::size_t>("sweep.block_sizes", s); });
            },
            [](const RunConfig& c) { return join(c.sweep.grid.block_sizes, [](std::size_t x) { return fmt(x); }); });
        add("sweep.variants",
            [](RunConfig& c, std::string_view v) {
                c.sweep.grid.variants = parse_list<AttentionVariant>(v, [](const std::string& s) {
                    return enum_value("sweep.variants", [&] { return parse_attention_variant(s); });
                });
            },
            [](const RunConfig& c) {
                return join(c.sweep.grid.variants, [](AttentionVariant x) { return std::string(to_string(x)); });
            });
        add("sweep.threads", [](RunConfig& c, std::string_view v) { c.sweep.threads = num<std::size_t>("sweep.threads", v); },
            [](const RunConfig& c) { return fmt(c.sweep.threads); });
        add("sweep.evaluate_long",
            [](RunConfig& c, std::string_view v) { c.sweep.evaluate_long = flag("sweep.evaluate_long", v); },
            [](const RunConfig& c) { return fmt(c.sweep.evaluate_long); });

        // [account]
        add("account.seq_len",
            [](RunConfig& c, std::string_view v) { c.account.seq_len = num<std::size_t>("account.seq_len", v); },
            [](const RunConfig& c) { return fmt(c.account.seq_len); });
        add("account.block_size",
            [](RunConfig& c, std::string_view v) { c.account.block_size = num<std::size_t>("account.block_size", v); },
            [](const RunConfig& c) { return fmt(c.account.block_size); });
        add("account.sortcut_budget",
            [](RunConfig& c, std::string_view v) {
                c.account.sortcut_budget = num<std::size_t>("account.sortcut_budget", v);
            },
            [](const RunConfig& c) { return fmt(c.account.sortcut_budget); });
        add("account.variants",
            [](RunConfig& c, std::string_view v) {
                c.account.variants = parse_list<AttentionVariant>(v, [](const std::string& s) {
                    return enum_value("account.variants", [&] { return parse_attention_variant(s); });
                });
            },
            [](const RunConfig& c) {
                return join(c.account.variants, [](AttentionVariant x) { return std::string(to_string(x)); });
            });
        add("account.instrument",
            [](RunConfig& c, std::string_view v) { c.account.instrument = flag("account.instrument", v); },
            [](const RunConfig& c) { return fmt(c.account.instrument); });
        return k;
    }();
    return table;
}

const Key& find_key(std::string_view name) {
    for (const auto& k : keys())
        if (k.name == name) return k;
    throw ConfigError("unknown configuration key '" + std::string(name) + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& k : keys()) out.push_back(k.name);
    return out;
}

void apply_override(RunConfig& cfg, std::string_view key, std::string_view value) { find_key(key).set(cfg, value); }

void apply_config_text(RunConfig& cfg, std::string_view text, std::string_view origin) {
    std::istringstream is{std::string(text)};
    std::string raw, section;
    std::size_t lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        const auto where = [&] { return std::string(origin) + ":" + std::to_string(lineno) + ": "; };
        std::string line = raw;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where() + "malformed section header '" + line + "'");
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            if (section != "model" && section != "task" && section != "optim" && section != "sweep" &&
                section != "account") {
                throw ConfigError(where() + "unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where() + "expected 'key = value', got '" + line + "'");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        try {
            apply_override(cfg, section.empty() ? key : section + "." + key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where() + e.what());
        }
    }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    apply_config_text(cfg, ss.str(), path.string());
}

RunConfig parse_config_text(std::string_view text) {
    RunConfig cfg;
    apply_config_text(cfg, text);
    return cfg;
}

std::string RunConfig::to_text() const {
    std::ostringstream os;
    std::string section;
    for (const auto& k : keys()) {
        const auto dot = k.name.find('.');
        const std::string s = dot == std::string::npos ? "" : k.name.substr(0, dot);
        if (s != section) {
            os << "\n[" << s << "]\n";
            section = s;
        }
        os << (dot == std::string::npos ? k.name : k.name.substr(dot + 1)) << " = " << k.get(*this) << '\n';
    }
    return os.str();
}

ModelSpec RunConfig::model_spec() const {
    ModelSpec spec = model;
    for (auto& a : spec.attention) {
        a.head_dim = a.n_heads ? spec.d_model / a.n_heads : 0;
        a.sinkhorn.seed = derive_seed(seed, "sinkhorn");
    }
    return fit_spec_to_task(spec, task);
}

OptimConfig RunConfig::optim_config() const {
    OptimConfig o = optim;
    o.seed = seed;
    return o;
}

void validate(const RunConfig& cfg) {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    const auto& a = cfg.model.attention.at(0);
    if (cfg.model.d_model == 0 || cfg.model.d_model % a.n_heads != 0) {
        fail("model.d_model (" + std::to_string(cfg.model.d_model) + ") must be a positive multiple of model.n_heads (" +
             std::to_string(a.n_heads) + ")");
    }
    if (a.block_size == 0) fail("model.block_size must be positive");
    if (cfg.optim.batch_size == 0) fail("optim.batch_size must be positive");
    if (!(cfg.optim.lr > 0.0)) fail("optim.lr must be positive");
    if (cfg.sweep.threads == 0) fail("sweep.threads must be positive");
    try {
        const ModelSpec spec = cfg.model_spec();
        spec.validate();
        if (cfg.task.kind == TaskKind::sort) {
            cfg.task.sort.validate();
            const std::size_t m = spec.block_multiple();
            for (std::size_t len : {cfg.task.sort.train_len, cfg.task.sort.eval_len})
                if (len % m != 0)
                    fail("sequence length " + std::to_string(len) + " is not a multiple of block size " +
                         std::to_string(m));
        } else {
            if (cfg.task.charlm.text_path.empty()) fail("task.text_path is required for task.kind = charlm");
            if (cfg.task.charlm.context % spec.block_multiple() != 0)
                fail("task.context must be a multiple of model.block_size");
        }
        for (const auto& l : spec.attention)
            if (l.uses_sorting()) l.sinkhorn.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    if (cfg.command == Command::account &&
        (cfg.account.block_size == 0 || cfg.account.seq_len % cfg.account.block_size != 0)) {
        fail("account.seq_len must be a positive multiple of account.block_size");
    }
}

}  // namespace ssa
