#include "ssa/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <json.hpp>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

namespace ssa {

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : stream) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::uint64_t z = seed ^ h;  // splitmix64 finaliser
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ---- sorting task ---------------------------------------------------------

void SortTaskSpec::validate() const {
    if (vocab_size < 2) throw std::invalid_argument("sort task: vocab_size must be at least 2");
    if (train_len == 0) throw std::invalid_argument("sort task: train_len must be positive");
    if (eval_len < train_len) {
        throw std::invalid_argument("sort task: eval_len (" + std::to_string(eval_len) + ") must be >= train_len (" +
                                    std::to_string(train_len) + ")");
    }
}

namespace {

std::vector<SortExample> sample_sort(std::size_t n, std::size_t len, std::size_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> sym(0, static_cast<int>(vocab) - 1);
    std::vector<SortExample> out(n);
    for (auto& ex : out) {
        ex.input.resize(len);
        for (auto& t : ex.input) t = sym(rng) + kSymbolOffset;
        ex.target = ex.input;
        std::stable_sort(ex.target.begin(), ex.target.end());
    }
    return out;
}

}  // namespace

SortTaskData gen_sort_task(const SortTaskSpec& spec) {
    spec.validate();
    SortTaskData d;
    d.train = sample_sort(spec.n_train, spec.train_len, spec.vocab_size, derive_seed(spec.seed, "data.train"));
    d.eval_in = sample_sort(spec.n_eval, spec.train_len, spec.vocab_size, derive_seed(spec.seed, "data.eval_in"));
    d.eval_long = sample_sort(spec.n_eval, spec.eval_len, spec.vocab_size, derive_seed(spec.seed, "data.eval_long"));
    return d;
}

Batch make_sort_batch(std::span<const SortExample> examples) {
    if (examples.empty()) throw std::invalid_argument("make_sort_batch: no examples");
    const std::size_t L = examples[0].target.size();
    const std::size_t Ls = examples[0].input.size();
    Batch b;
    b.batch = examples.size();
    b.len = L;
    b.source_len = Ls;
    b.token_ids.reserve(b.batch * L);
    b.target_ids.reserve(b.batch * L);
    b.source_ids.reserve(b.batch * Ls);
    for (const auto& ex : examples) {
        if (ex.target.size() != L || ex.input.size() != Ls) throw ShapeError("make_sort_batch: ragged examples");
        b.source_ids.insert(b.source_ids.end(), ex.input.begin(), ex.input.end());
        b.token_ids.push_back(kBosId);
        b.token_ids.insert(b.token_ids.end(), ex.target.begin(), ex.target.end() - 1);
        b.target_ids.insert(b.target_ids.end(), ex.target.begin(), ex.target.end());
    }
    b.loss_mask.assign(b.batch * L, 1.0);
    return b;
}

// ---- metrics --------------------------------------------------------------

double exact_match(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& target) {
    if (pred.size() != target.size()) throw std::invalid_argument("exact_match: prediction and target counts differ");
    if (pred.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == target[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

std::size_t levenshtein(std::span<const int> a, std::span<const int> b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    std::iota(prev.begin(), prev.end(), std::size_t{0});
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] != b[j - 1]);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

EditDistance edit_distance(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& target) {
    if (pred.size() != target.size()) throw std::invalid_argument("edit_distance: prediction and target counts differ");
    EditDistance e;
    if (pred.empty()) return e;
    double total = 0.0, total_len = 0.0, sum_norm = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(levenshtein(pred[i], target[i]));
        const double n = static_cast<double>(std::max<std::size_t>(target[i].size(), 1));
        sum_norm += d / n;
        total += d;
        total_len += n;
    }
    e.normalized = sum_norm / static_cast<double>(pred.size());
    e.corpus = total / total_len;
    return e;
}

double token_accuracy(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& target) {
    if (pred.size() != target.size()) throw std::invalid_argument("token_accuracy: prediction and target counts differ");
    std::size_t hits = 0, total = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const std::size_t n = target[i].size();
        for (std::size_t j = 0; j < n; ++j) hits += j < pred[i].size() && pred[i][j] == target[i][j];
        total += n;
    }
    return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

// ---- character corpus -----------------------------------------------------

CharCorpus load_char_corpus(const CharLmSpec& spec) {
    std::ifstream is(spec.text_path, std::ios::binary);
    if (!is) throw std::runtime_error("char corpus: cannot open '" + spec.text_path.string() + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (!(spec.eval_fraction > 0.0 && spec.eval_fraction < 1.0)) {
        throw std::invalid_argument("char corpus: eval_fraction must lie in (0, 1)");
    }
    const std::size_t n_eval = static_cast<std::size_t>(static_cast<double>(bytes.size()) * spec.eval_fraction);
    const std::size_t n_train = bytes.size() - n_eval;
    if (n_train < spec.context + 2 || n_eval < spec.context + 2) {
        throw std::invalid_argument("char corpus: '" + spec.text_path.string() + "' is too short for context " +
                                    std::to_string(spec.context));
    }
    CharCorpus c;
    c.train.reserve(n_train);
    c.eval.reserve(n_eval);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const int id = static_cast<int>(static_cast<unsigned char>(bytes[i])) + 1;
        (i < n_train ? c.train : c.eval).push_back(id);
    }
    return c;
}

namespace {

Batch char_batch(const std::vector<int>& text, std::span<const std::size_t> starts, std::size_t context) {
    Batch b;
    b.batch = starts.size();
    b.len = context;
    for (auto s : starts) {
        b.token_ids.insert(b.token_ids.end(), text.begin() + static_cast<std::ptrdiff_t>(s),
                           text.begin() + static_cast<std::ptrdiff_t>(s + context));
        b.target_ids.insert(b.target_ids.end(), text.begin() + static_cast<std::ptrdiff_t>(s + 1),
                            text.begin() + static_cast<std::ptrdiff_t>(s + context + 1));
    }
    b.loss_mask.assign(b.batch * context, 1.0);
    return b;
}

std::vector<std::size_t> eval_window_starts(const std::vector<int>& text, const CharLmSpec& spec) {
    const std::size_t span = text.size() - spec.context - 1;
    const std::size_t n = std::max<std::size_t>(1, spec.n_eval_windows);
    std::vector<std::size_t> starts;
    for (std::size_t i = 0; i < n; ++i) starts.push_back(n == 1 ? 0 : span * i / (n - 1));
    return starts;
}

}  // namespace

// ---- training ---------------------------------------------------------------

std::string_view to_string(TaskKind k) { return k == TaskKind::sort ? "sort" : "charlm"; }

TaskKind parse_task_kind(std::string_view s) {
    if (s == "sort") return TaskKind::sort;
    if (s == "charlm") return TaskKind::charlm;
    throw std::invalid_argument("unknown task kind '" + std::string(s) + "'");
}

DivergenceError::DivergenceError(std::size_t step, double loss)
    : std::runtime_error("training diverged at step " + std::to_string(step) + ": loss = " + std::to_string(loss)),
      step_(step) {}

ModelSpec fit_spec_to_task(ModelSpec spec, const TaskConfig& task) {
    if (task.kind == TaskKind::sort) {
        spec.architecture = Architecture::seq2seq;
        spec.vocab_size = task.sort.model_vocab();
        spec.max_len = std::max(task.sort.train_len, task.sort.eval_len);
    } else {
        spec.architecture = Architecture::decoder_only;
        spec.vocab_size = kByteVocab;
        spec.max_len = task.charlm.context;
    }
    return spec;
}

namespace {

void check_spec_for_task(const ModelSpec& spec, const TaskConfig& task) {
    spec.validate();
    if (task.kind == TaskKind::sort) {
        if (spec.architecture != Architecture::seq2seq) throw std::invalid_argument("train: the sorting task needs a seq2seq model");
        if (spec.vocab_size < task.sort.model_vocab()) throw std::invalid_argument("train: model vocabulary too small for the task");
        if (spec.max_len < task.sort.eval_len) throw std::invalid_argument("train: max_len shorter than eval_len");
    } else {
        if (spec.architecture != Architecture::decoder_only) throw std::invalid_argument("train: char LM needs a decoder-only model");
        if (spec.vocab_size < kByteVocab) throw std::invalid_argument("train: char LM needs a byte vocabulary of 257");
        if (spec.max_len < task.charlm.context) throw std::invalid_argument("train: max_len shorter than context");
    }
}

double teacher_forced_loss(const ModelSpec& spec, const ModelParams& params, std::span<const SortExample> examples) {
    NoGradGuard no_grad;
    constexpr std::size_t chunk = 250;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < examples.size(); i += chunk) {
        const auto part = examples.subspan(i, std::min(chunk, examples.size() - i));
        const Batch b = make_sort_batch(part);
        const Tensor logits = forward(spec, params, b).logits;
        total += cross_entropy(logits, b.target_ids, b.loss_mask).item() * static_cast<double>(part.size());
        count += part.size();
    }
    return total / static_cast<double>(count);
}

double char_eval_loss(const ModelSpec& spec, const ModelParams& params, const CharCorpus& corpus,
                      const CharLmSpec& cspec) {
    NoGradGuard no_grad;
    const auto starts = eval_window_starts(corpus.eval, cspec);
    constexpr std::size_t chunk = 16;
    double total = 0.0;
    for (std::size_t i = 0; i < starts.size(); i += chunk) {
        const auto part = std::span(starts).subspan(i, std::min(chunk, starts.size() - i));
        const Batch b = char_batch(corpus.eval, part, cspec.context);
        total += cross_entropy(forward(spec, params, b).logits, b.target_ids, b.loss_mask).item() *
                 static_cast<double>(part.size());
    }
    return total / static_cast<double>(starts.size());
}

struct DecodeScores {
    double token_accuracy = 0.0;
    double exact_match = 0.0;
    EditDistance edit{};
};

DecodeScores decode_scores(const ModelSpec& spec, const ModelParams& params, const std::vector<SortExample>& examples) {
    constexpr std::size_t chunk = 250;
    std::vector<std::vector<int>> preds, targets;
    for (std::size_t i = 0; i < examples.size(); i += chunk) {
        std::vector<std::vector<int>> sources;
        for (std::size_t j = i; j < std::min(examples.size(), i + chunk); ++j) {
            sources.push_back(examples[j].input);
            targets.push_back(examples[j].target);
        }
        auto out = greedy_decode(spec, params, sources, examples[i].target.size(), kBosId);
        for (auto& o : out) preds.push_back(std::move(o));
    }
    return {token_accuracy(preds, targets), exact_match(preds, targets), edit_distance(preds, targets)};
}

RunMetrics evaluate_impl(const ModelSpec& spec, const ModelParams& params, const TaskConfig& task,
                         bool evaluate_long, const SortTaskData* sort_data, const CharCorpus* corpus) {
    RunMetrics m;
    if (task.kind == TaskKind::sort) {
        m.eval_loss = teacher_forced_loss(spec, params, sort_data->eval_in);
        const auto in = decode_scores(spec, params, sort_data->eval_in);
        m.token_accuracy = in.token_accuracy;
        m.exact_match = in.exact_match;
        m.edit = in.edit;
        if (evaluate_long) {
            const auto lg = decode_scores(spec, params, sort_data->eval_long);
            m.long_token_accuracy = lg.token_accuracy;
            m.long_exact_match = lg.exact_match;
            m.long_edit = lg.edit;
        }
    } else {
        m.eval_loss = char_eval_loss(spec, params, *corpus, task.charlm);
    }
    m.perplexity = std::exp(m.eval_loss);
    m.bits_per_token = m.eval_loss / std::numbers::ln2;
    return m;
}

}  // namespace

RunMetrics evaluate(const ModelSpec& spec, const ModelParams& params, const TaskConfig& task, bool evaluate_long) {
    check_spec_for_task(spec, task);
    if (task.kind == TaskKind::sort) {
        const SortTaskData data = gen_sort_task(task.sort);
        return evaluate_impl(spec, params, task, evaluate_long, &data, nullptr);
    }
    const CharCorpus corpus = load_char_corpus(task.charlm);
    return evaluate_impl(spec, params, task, evaluate_long, nullptr, &corpus);
}

TrainResult train_run(const ModelSpec& spec, const TaskConfig& task, const OptimConfig& opt, const RunOptions& options) {
    check_spec_for_task(spec, task);
    if (opt.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
    const auto t0 = std::chrono::steady_clock::now();

    SortTaskData sort_data;
    CharCorpus corpus;
    if (task.kind == TaskKind::sort) {
        sort_data = gen_sort_task(task.sort);
        if (sort_data.train.empty()) throw std::invalid_argument("train: sorting task has no training examples");
    } else {
        corpus = load_char_corpus(task.charlm);
    }

    std::mt19937_64 init_rng(derive_seed(opt.seed, "init"));
    std::mt19937_64 gumbel_rng(derive_seed(opt.seed, "gumbel"));
    std::mt19937_64 batch_rng(derive_seed(opt.seed, "batch"));
    ModelParams params = ModelParams::init(spec, init_rng);
    std::vector<Tensor> plist = params.parameters();
    AdamState adam;
    const AdamConfig adam_cfg{opt.beta1, opt.beta2, opt.eps};

    // Small fixed slice of held-out data for interval evaluation.
    const std::size_t probe_n = std::min<std::size_t>(200, sort_data.eval_in.size());
    CharLmSpec probe_spec = task.charlm;
    probe_spec.n_eval_windows = std::min<std::size_t>(8, task.charlm.n_eval_windows);

    const double max_loss = opt.divergence_factor * std::log(static_cast<double>(spec.vocab_size));
    RunMetrics m;
    for (std::size_t step = 1; step <= opt.steps; ++step) {
        Tape::current().clear();
        for (auto& p : plist) p.zero_grad();

        Batch batch;
        if (task.kind == TaskKind::sort) {
            std::uniform_int_distribution<std::size_t> pick(0, sort_data.train.size() - 1);
            std::vector<SortExample> chosen;
            chosen.reserve(opt.batch_size);
            for (std::size_t i = 0; i < opt.batch_size; ++i) chosen.push_back(sort_data.train[pick(batch_rng)]);
            batch = make_sort_batch(chosen);
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, corpus.train.size() - task.charlm.context - 1);
            std::vector<std::size_t> starts(opt.batch_size);
            for (auto& s : starts) s = pick(batch_rng);
            batch = char_batch(corpus.train, starts, task.charlm.context);
        }

        const ForwardContext ctx{true, &gumbel_rng};
        const auto out = forward(spec, params, batch, ctx);
        const Tensor loss = cross_entropy(out.logits, batch.target_ids, batch.loss_mask);
        const double lv = loss.item();
        if (!std::isfinite(lv) || (max_loss > 0.0 && lv > max_loss)) {
            Tape::current().clear();
            throw DivergenceError(step, lv);
        }
        backward(loss);
        if (opt.clip_norm > 0.0) clip_grad_norm(plist, opt.clip_norm);
        const double lr = warmup_rsqrt_lr(opt.lr, step, opt.warmup);
        adam_step(plist, adam, lr, adam_cfg);
        for (const auto& p : plist) {
            for (double w : p.data())
                if (!std::isfinite(w)) throw DivergenceError(step, std::numeric_limits<double>::quiet_NaN());
        }

        const StepLog log{step, lv, lr};
        m.history.push_back(log);
        m.attention_entries = out.attention_entries;
        if (options.on_step) options.on_step(log);

        if (opt.eval_every > 0 && (step % opt.eval_every == 0 || step == opt.steps)) {
            EvalLog e{step, 0.0};
            if (task.kind == TaskKind::sort)
                e.loss = teacher_forced_loss(spec, params, std::span(sort_data.eval_in).first(probe_n));
            else
                e.loss = char_eval_loss(spec, params, corpus, probe_spec);
            m.evals.push_back(e);
            if (options.on_eval) options.on_eval(e);
        }
    }
    Tape::current().clear();
    for (auto& p : plist) p.zero_grad();

    const RunMetrics final = evaluate_impl(spec, params, task, options.evaluate_long,
                                           task.kind == TaskKind::sort ? &sort_data : nullptr,
                                           task.kind == TaskKind::charlm ? &corpus : nullptr);
    auto history = std::move(m.history);
    auto evals = std::move(m.evals);
    auto entries = std::move(m.attention_entries);
    m = final;
    m.history = std::move(history);
    m.evals = std::move(evals);
    m.attention_entries = std::move(entries);
    m.steps = opt.steps;
    if (!m.history.empty()) {
        const std::size_t tail = std::min<std::size_t>(50, m.history.size());
        double s = 0.0;
        for (std::size_t i = m.history.size() - tail; i < m.history.size(); ++i) s += m.history[i].loss;
        m.final_train_loss = s / static_cast<double>(tail);
    }
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (options.out_dir) {
        std::filesystem::create_directories(*options.out_dir);
        std::ofstream hist(*options.out_dir / "history.csv");
        write_history_csv(hist, m.history);
        std::ofstream mj(*options.out_dir / "metrics.json");
        mj << metrics_json(m) << '\n';
        save_checkpoint(*options.out_dir / "model.ckpt", spec, params);
    }
    return {std::move(m), std::move(params)};
}

namespace {
std::string csv_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}
}  // namespace

void write_history_csv(std::ostream& os, const std::vector<StepLog>& history) {
    os << "step,loss,lr\n";
    for (const auto& h : history) os << h.step << ',' << csv_double(h.loss) << ',' << csv_double(h.lr) << '\n';
}

std::string metrics_json(const RunMetrics& m) {
    nlohmann::ordered_json j;
    j["steps"] = m.steps;
    j["final_train_loss"] = m.final_train_loss;
    j["eval_loss"] = m.eval_loss;
    j["perplexity"] = m.perplexity;
    j["bits_per_token"] = m.bits_per_token;
    j["token_accuracy"] = m.token_accuracy;
    j["exact_match"] = m.exact_match;
    j["edit_distance"] = m.edit.normalized;
    j["edit_distance_corpus"] = m.edit.corpus;
    j["long_token_accuracy"] = m.long_token_accuracy;
    j["long_exact_match"] = m.long_exact_match;
    j["long_edit_distance"] = m.long_edit.normalized;
    j["long_edit_distance_corpus"] = m.long_edit.corpus;
    j["attention_entries_per_layer"] = m.attention_entries;
    nlohmann::ordered_json evals = nlohmann::ordered_json::array();
    for (const auto& e : m.evals) evals.push_back({{"step", e.step}, {"loss", e.loss}});
    j["evals"] = evals;
    return j.dump(2);
}

// ---- sweeps ---------------------------------------------------------------

std::vector<SweepCell> expand_grid(const SweepGrid& grid, const ModelSpec& base) {
    if (base.attention.empty()) throw std::invalid_argument("sweep: base spec has no layers");
    const AttentionConfig& a = base.attention[0];
    const auto temps = grid.temperatures.empty() ? std::vector<double>{a.sinkhorn.temperature} : grid.temperatures;
    const auto iters = grid.sinkhorn_iters.empty() ? std::vector<int>{a.sinkhorn.n_iters} : grid.sinkhorn_iters;
    const auto blocks = grid.block_sizes.empty() ? std::vector<std::size_t>{a.block_size} : grid.block_sizes;
    const auto variants = grid.variants.empty() ? std::vector<AttentionVariant>{a.variant} : grid.variants;
    std::vector<SweepCell> cells;
    for (auto v : variants)
        for (auto b : blocks)
            for (auto t : temps)
                for (auto k : iters) cells.push_back({cells.size(), t, k, b, v});
    return cells;
}

ModelSpec apply_cell(ModelSpec spec, const SweepCell& cell) {
    for (auto& a : spec.attention) {
        a.variant = cell.variant;
        a.block_size = cell.block_size;
        a.sinkhorn.temperature = cell.temperature;
        a.sinkhorn.n_iters = cell.sinkhorn_iters;
    }
    return spec;
}

std::vector<SweepRow> sweep(const ModelSpec& base, const TaskConfig& task, const OptimConfig& opt,
                            const SweepGrid& grid, const SweepOptions& options) {
    const auto cells = expand_grid(grid, base);
    std::vector<std::size_t> order = options.order;
    if (order.empty()) {
        order.resize(cells.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
    }
    if (order.size() != cells.size()) throw std::invalid_argument("sweep: execution order must list every cell once");
    std::vector<SweepRow> rows(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < order.size(); i = next++) {
            const SweepCell& cell = cells.at(order[i]);
            SweepRow row;
            row.cell = cell;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                RunOptions ro;
                ro.evaluate_long = options.evaluate_long;
                auto result = train_run(apply_cell(base, cell), task, opt, ro);
                row.ok = true;
                row.final_metric = result.metrics.eval_loss;
                row.metrics = std::move(result.metrics);
            } catch (const std::exception& e) {
                row.ok = false;
                row.error = e.what();
                row.final_metric = std::numeric_limits<double>::quiet_NaN();
            }
            row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            rows[cell.index] = std::move(row);
        }
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(options.threads, cells.size()));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
    os << "cell,variant,block_size,temperature,sinkhorn_iters,status,final_metric,wall_seconds\n";
    for (const auto& r : rows) {
        os << r.cell.index << ',' << to_string(r.cell.variant) << ',' << r.cell.block_size << ','
           << csv_double(r.cell.temperature) << ',' << r.cell.sinkhorn_iters << ',' << (r.ok ? "ok" : "failed") << ','
           << csv_double(r.final_metric) << ',' << csv_double(r.wall_seconds) << '\n';
    }
}

// ---- memory accounting ----------------------------------------------------

MemoryReport memory_account(const AttentionConfig& cfg, std::size_t seq_len) {
    if (cfg.block_size == 0 || seq_len % cfg.block_size != 0) {
        throw std::invalid_argument("memory_account: sequence length " + std::to_string(seq_len) +
                                    " is not a multiple of block size " + std::to_string(cfg.block_size));
    }
    MemoryReport r;
    r.variant = cfg.variant;
    r.seq_len = seq_len;
    r.block_size = cfg.block_size;
    r.n_blocks = seq_len / cfg.block_size;
    const std::size_t b = cfg.block_size, nb = r.n_blocks, l = seq_len;
    r.budget = cfg.variant == AttentionVariant::sortcut ? cfg.sortcut_budget : 0;
    r.dense_entries = l * l;
    const std::size_t sinkhorn_entries =
        cfg.summed_logits ? nb * b * b + nb * nb : nb * (2 * b * b) + nb * nb;
    switch (cfg.variant) {
        case AttentionVariant::dense:
            r.score_entries = l * l;
            r.paper_formula_units = l * l;
            break;
        case AttentionVariant::local:
            r.score_entries = nb * b * b;
            r.paper_formula_units = b * b;
            break;
        case AttentionVariant::sinkhorn:
            r.score_entries = sinkhorn_entries;
            r.paper_formula_units = b * b + nb * nb;
            break;
        case AttentionVariant::sortcut:
            r.score_entries = l * r.budget * b + nb * nb;
            r.paper_formula_units = l * r.budget * b + nb * nb;
            break;
        case AttentionVariant::mixture:
            r.score_entries = sinkhorn_entries + l * l;
            r.paper_formula_units = l * l + b * b + nb * nb;
            break;
    }
    r.ratio_actual = static_cast<double>(r.dense_entries) / static_cast<double>(r.score_entries);
    r.ratio_paper_formula = static_cast<double>(r.dense_entries) / static_cast<double>(r.paper_formula_units);
    return r;
}

std::size_t instrumented_entries(const AttentionConfig& cfg, std::size_t seq_len, std::uint64_t seed) {
    NoGradGuard no_grad;
    AttentionConfig small = cfg;
    small.n_heads = 1;
    small.head_dim = std::min<std::size_t>(cfg.head_dim, 4);
    small.validate(seq_len);
    std::mt19937_64 rng(seed);
    const std::size_t nb = seq_len / small.block_size;
    const AttentionParams params = AttentionParams::init(small, std::max<std::size_t>(nb, 1), rng);
    std::normal_distribution<double> dist;
    std::vector<double> x(seq_len * small.d_model());
    for (auto& v : x) v = dist(rng);
    const auto out = multihead(Tensor({1, seq_len, small.d_model()}, std::move(x)), small, params, AttentionContext{});
    return out.attention_entry_count;
}

void write_memory_csv(std::ostream& os, const std::vector<MemoryReport>& reports) {
    os << "variant,seq_len,block_size,n_blocks,budget,score_entries,dense_entries,paper_formula_units,"
          "ratio_actual,ratio_paper_formula,instrumented_entries\n";
    for (const auto& r : reports) {
        os << to_string(r.variant) << ',' << r.seq_len << ',' << r.block_size << ',' << r.n_blocks << ',' << r.budget << ','
           << r.score_entries << ',' << r.dense_entries << ',' << r.paper_formula_units << ','
           << csv_double(r.ratio_actual) << ',' << csv_double(r.ratio_paper_formula) << ',' << r.instrumented_entries
           << '\n';
    }
}

}  // namespace ssa
