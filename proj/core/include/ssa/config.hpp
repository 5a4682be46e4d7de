#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ssa/attention.hpp"
#include "ssa/harness.hpp"
#include "ssa/model.hpp"

namespace ssa {

enum class Command { train, eval, sweep, account, selftest };
std::string_view to_string(Command c);
Command parse_command(std::string_view s);

struct AccountConfig {
    std::size_t seq_len = 1024;
    std::size_t block_size = 64;
    std::size_t sortcut_budget = 1;
    std::vector<AttentionVariant> variants{AttentionVariant::dense, AttentionVariant::local, AttentionVariant::sinkhorn,
                                           AttentionVariant::sortcut, AttentionVariant::mixture};
    bool instrument = true;
};

struct SweepConfig {
    SweepGrid grid{};
    std::size_t threads = 1;
    bool evaluate_long = false;
};

// Every layer shares one attention configuration; vocab_size, max_len and
// architecture of `model` follow from the task (see model_spec()).
struct RunConfig {
    Command command = Command::train;
    std::uint64_t seed = 1;
    std::filesystem::path output_dir = "runs/latest";
    std::filesystem::path checkpoint;  // eval: defaults to <output_dir>/model.ckpt
    ModelSpec model = ModelSpec::uniform(AttentionConfig{}, 2);
    TaskConfig task{};
    OptimConfig optim{};
    SweepConfig sweep{};
    AccountConfig account{};

    // Resolved model spec for the task, with optim/task seeds applied.
    ModelSpec model_spec() const;
    OptimConfig optim_config() const;

    // Canonical sectioned text; parse_config_text(to_text()) == *this.
    std::string to_text() const;
    bool operator==(const RunConfig& other) const { return to_text() == other.to_text(); }
};

class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Applies "key = value" lines under "[section]" headers on top of `cfg`.
// '#' starts a comment. Unknown keys and malformed values throw ConfigError.
void apply_config_text(RunConfig& cfg, std::string_view text, std::string_view origin = "<text>");
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);
// `key` is "section.name" (or a bare top-level name such as "seed").
void apply_override(RunConfig& cfg, std::string_view key, std::string_view value);

RunConfig parse_config_text(std::string_view text);

// Every accepted dotted key, in canonical order.
std::vector<std::string> config_keys();

// Cross-field checks (block sizes divide lengths, d_model = heads * head_dim, ...).
void validate(const RunConfig& cfg);

}  // namespace ssa
