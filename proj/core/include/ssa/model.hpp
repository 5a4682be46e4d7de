#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssa/attention.hpp"
#include "ssa/tensor.hpp"

namespace ssa {

enum class Architecture { decoder_only, encoder_only, seq2seq };

std::string_view to_string(Architecture a);
Architecture parse_architecture(std::string_view s);

// Token id 0 is reserved for padding in every vocabulary.
inline constexpr int kPadId = 0;

struct ModelSpec {
    std::size_t vocab_size = 18;
    std::size_t d_model = 32;
    std::size_t n_layers = 2;
    std::size_t ffn_width = 64;
    std::size_t max_len = 32;
    bool tie_embeddings = true;
    Architecture architecture = Architecture::seq2seq;
    std::vector<AttentionConfig> attention;  // one per layer

    static ModelSpec uniform(const AttentionConfig& cfg, std::size_t n_layers);

    void validate() const;
    // Self-attention configuration of encoder (or decoder) layer `i`; decoder
    // layers are always causal and fall back from sortcut to sinkhorn.
    AttentionConfig encoder_attention(std::size_t i) const;
    AttentionConfig decoder_attention(std::size_t i) const;
    // Smallest length multiple every layer's block size divides.
    std::size_t block_multiple() const;
    std::size_t max_blocks() const;

    // Canonical "key=value" lines; from_text(to_text()) reproduces the spec.
    std::string to_text() const;
    static ModelSpec from_text(std::string_view text);
    bool operator==(const ModelSpec& other) const { return to_text() == other.to_text(); }
};

struct LayerParams {
    Tensor ln1_g, ln1_b;
    AttentionParams self_attn;
    Tensor lnc_g, lnc_b;        // decoder layers of seq2seq only
    AttentionParams cross_attn;  // decoder layers of seq2seq only
    Tensor ln2_g, ln2_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct ModelParams {
    Tensor embedding;  // [vocab, d]
    Tensor output;     // [d, vocab], untied models only
    std::vector<LayerParams> encoder;
    std::vector<LayerParams> decoder;
    Tensor enc_ln_g, enc_ln_b, dec_ln_g, dec_ln_b;

    static ModelParams init(const ModelSpec& spec, std::mt19937_64& rng);
    static ModelParams zeros(const ModelSpec& spec);

    // Declaration order; this is the checkpoint order.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;
};

// Row-major [batch, len] token grids. For seq2seq, `source_ids` feeds the
// encoder and `token_ids` is the shifted decoder input.
struct Batch {
    std::size_t batch = 0;
    std::size_t len = 0;
    std::vector<int> token_ids;
    std::vector<int> target_ids;
    std::vector<double> loss_mask;
    std::size_t source_len = 0;
    std::vector<int> source_ids;

    void validate(const ModelSpec& spec) const;
};

struct ForwardContext {
    bool training = false;
    std::mt19937_64* gumbel_rng = nullptr;
};

struct ModelOutput {
    Tensor logits;  // [batch, len, vocab]
    // Self-attention score entries per head per sequence, one per layer
    // (encoder layers first).
    std::vector<std::size_t> attention_entries;
};

ModelOutput forward(const ModelSpec& spec, const ModelParams& params, const Batch& batch,
                    const ForwardContext& ctx = {});

Tensor sinusoidal_positions(std::size_t len, std::size_t d_model);

// Mean masked token negative log-likelihood (nats).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> mask);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
};

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::size_t step = 0;
};

// One bias-corrected Adam update; tensors without a gradient count as zero.
void adam_step(std::span<Tensor> params, AdamState& state, double lr, const AdamConfig& cfg = {});

// Linear warmup then inverse square-root decay; step counts from 1.
double warmup_rsqrt_lr(double base_lr, std::size_t step, std::size_t warmup);

// Scales gradients so their global norm is at most `max_norm`; returns the
// norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

// Greedy autoregressive decoding for seq2seq models. `sources` holds
// batch x source_len ids; every output starts from `bos_id`.
std::vector<std::vector<int>> greedy_decode(const ModelSpec& spec, const ModelParams& params,
                                            const std::vector<std::vector<int>>& sources, std::size_t out_len,
                                            int bos_id);

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ModelParams& params);
std::pair<ModelSpec, ModelParams> load_checkpoint(const std::filesystem::path& path);

}  // namespace ssa
