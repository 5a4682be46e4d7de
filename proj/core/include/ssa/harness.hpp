#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ssa/attention.hpp"
#include "ssa/model.hpp"

namespace ssa {

// Deterministic child seed for a named random stream ("data", "init",
// "gumbel", ...), so changing one stream leaves the others untouched.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

// ---- sorting task ---------------------------------------------------------

// Sort-task vocabulary: 0 = padding, 1 = begin-of-sequence, symbols from 2.
inline constexpr int kBosId = 1;
inline constexpr int kSymbolOffset = 2;

struct SortTaskSpec {
    std::size_t train_len = 16;
    std::size_t eval_len = 32;
    std::size_t vocab_size = 16;
    std::size_t n_train = 10000;
    std::size_t n_eval = 1000;
    std::uint64_t seed = 1;

    void validate() const;
    std::size_t model_vocab() const { return vocab_size + kSymbolOffset; }
};

// Symbols are stored as model token ids (offset by kSymbolOffset).
struct SortExample {
    std::vector<int> input;
    std::vector<int> target;
};

struct SortTaskData {
    std::vector<SortExample> train;
    std::vector<SortExample> eval_in;    // train_len, held out
    std::vector<SortExample> eval_long;  // eval_len
};

SortTaskData gen_sort_task(const SortTaskSpec& spec);

// Teacher-forced seq2seq batch: decoder input is BOS followed by the target
// shifted right by one.
Batch make_sort_batch(std::span<const SortExample> examples);

// ---- metrics --------------------------------------------------------------

double exact_match(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& target);
std::size_t levenshtein(std::span<const int> a, std::span<const int> b);

struct EditDistance {
    double normalized = 0.0;  // mean over pairs of distance / target length
    double corpus = 0.0;      // total distance / total target length
};
EditDistance edit_distance(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& target);
double token_accuracy(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& target);

// ---- character language model ---------------------------------------------

struct CharLmSpec {
    std::filesystem::path text_path;
    std::size_t context = 256;
    double eval_fraction = 0.1;
    std::size_t n_eval_windows = 32;
};

// Byte-level ids: byte value + 1, so that 0 stays the padding id.
inline constexpr std::size_t kByteVocab = 257;

struct CharCorpus {
    std::vector<int> train;
    std::vector<int> eval;
};

CharCorpus load_char_corpus(const CharLmSpec& spec);

// ---- training ---------------------------------------------------------------

enum class TaskKind { sort, charlm };
std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view s);

struct TaskConfig {
    TaskKind kind = TaskKind::sort;
    SortTaskSpec sort{};
    CharLmSpec charlm{};
};

struct OptimConfig {
    std::size_t steps = 5000;
    std::size_t batch_size = 32;
    double lr = 2e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    std::size_t warmup = 400;
    double clip_norm = 1.0;
    std::size_t eval_every = 500;
    // A step whose loss is non-finite or above divergence_factor * ln(vocab),
    // i.e. far worse than uniform guessing, aborts the run (0 = only non-finite).
    double divergence_factor = 10.0;
    std::uint64_t seed = 1;
};

struct StepLog {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct EvalLog {
    std::size_t step = 0;
    double loss = 0.0;
};

struct RunMetrics {
    std::vector<StepLog> history;
    std::vector<EvalLog> evals;
    std::size_t steps = 0;
    double final_train_loss = 0.0;  // mean of the last few logged steps
    double eval_loss = 0.0;         // teacher-forced, nats per token
    double perplexity = 0.0;
    double bits_per_token = 0.0;
    // Sorting task, greedy decoding.
    double token_accuracy = 0.0;
    double exact_match = 0.0;
    EditDistance edit{};
    double long_token_accuracy = 0.0;
    double long_exact_match = 0.0;
    EditDistance long_edit{};
    std::vector<std::size_t> attention_entries;
    double wall_seconds = 0.0;
};

class DivergenceError : public std::runtime_error {
   public:
    DivergenceError(std::size_t step, double loss);
    std::size_t step() const { return step_; }

   private:
    std::size_t step_;
};

struct RunOptions {
    std::optional<std::filesystem::path> out_dir;  // history.csv, metrics.json, model.ckpt
    std::function<void(const StepLog&)> on_step;
    std::function<void(const EvalLog&)> on_eval;
    bool evaluate_long = true;  // sorting task: also decode eval_len sequences
};

struct TrainResult {
    RunMetrics metrics;
    ModelParams params;
};

// Sets vocab_size/max_len of `spec` to what the task needs.
ModelSpec fit_spec_to_task(ModelSpec spec, const TaskConfig& task);

TrainResult train_run(const ModelSpec& spec, const TaskConfig& task, const OptimConfig& opt,
                      const RunOptions& options = {});

// Evaluates trained parameters on the task's held-out data.
RunMetrics evaluate(const ModelSpec& spec, const ModelParams& params, const TaskConfig& task,
                    bool evaluate_long = true);

void write_history_csv(std::ostream& os, const std::vector<StepLog>& history);
std::string metrics_json(const RunMetrics& m);

// ---- sweeps ---------------------------------------------------------------

struct SweepGrid {
    std::vector<double> temperatures;
    std::vector<int> sinkhorn_iters;
    std::vector<std::size_t> block_sizes;
    std::vector<AttentionVariant> variants;
};

struct SweepCell {
    std::size_t index = 0;
    double temperature = 0.0;
    int sinkhorn_iters = 0;
    std::size_t block_size = 0;
    AttentionVariant variant = AttentionVariant::sinkhorn;
};

struct SweepRow {
    SweepCell cell;
    bool ok = false;
    std::string error;
    double final_metric = 0.0;  // held-out teacher-forced loss (nats/token)
    double wall_seconds = 0.0;
    RunMetrics metrics;
};

// Cartesian product; an empty axis keeps the base spec's value.
std::vector<SweepCell> expand_grid(const SweepGrid& grid, const ModelSpec& base);
ModelSpec apply_cell(ModelSpec spec, const SweepCell& cell);

struct SweepOptions {
    std::size_t threads = 1;
    // Execution order of cell indices; defaults to ascending.
    std::vector<std::size_t> order;
    bool evaluate_long = false;
};

// One train_run per cell; a failing cell is recorded and the sweep goes on.
// Rows come back sorted by cell index whatever the execution order.
std::vector<SweepRow> sweep(const ModelSpec& base, const TaskConfig& task, const OptimConfig& opt,
                            const SweepGrid& grid, const SweepOptions& options = {});

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

// ---- attention memory accounting -----------------------------------------

struct MemoryReport {
    AttentionVariant variant = AttentionVariant::dense;
    std::size_t seq_len = 0;
    std::size_t block_size = 0;
    std::size_t n_blocks = 0;
    std::size_t budget = 0;
    std::size_t score_entries = 0;        // closed form, per head per sequence
    std::size_t dense_entries = 0;        // seq_len^2
    std::size_t paper_formula_units = 0;  // b^2 + N_B^2 style asymptotic units
    double ratio_actual = 0.0;            // dense / score_entries
    double ratio_paper_formula = 0.0;     // dense / paper_formula_units
    std::size_t instrumented_entries = 0; // measured in a forward pass (0 = not measured)
};

MemoryReport memory_account(const AttentionConfig& cfg, std::size_t seq_len);

// Runs one multihead forward pass on random input and returns the score
// entries it materialised per head per sequence.
std::size_t instrumented_entries(const AttentionConfig& cfg, std::size_t seq_len, std::uint64_t seed = 7);

void write_memory_csv(std::ostream& os, const std::vector<MemoryReport>& reports);

}  // namespace ssa
