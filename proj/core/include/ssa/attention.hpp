#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "ssa/sinkhorn.hpp"
#include "ssa/sort_net.hpp"
#include "ssa/tensor.hpp"

namespace ssa {

enum class AttentionVariant { dense, local, sinkhorn, sortcut, mixture };

std::string_view to_string(AttentionVariant v);
AttentionVariant parse_attention_variant(std::string_view s);

struct AttentionConfig {
    AttentionVariant variant = AttentionVariant::sinkhorn;
    std::size_t block_size = 4;
    std::size_t n_heads = 2;
    std::size_t head_dim = 16;
    bool causal = false;
    SinkhornConfig sinkhorn{};
    std::size_t sortcut_budget = 1;  // blocks kept after sorting
    SortNetVariant sort_net = SortNetVariant::linear;
    // Sorted and local scores summed into b shared slots feeding sorted values,
    // instead of 2b separate slots under one softmax.
    bool summed_logits = false;
    bool strict_causal_pool = false;

    std::size_t d_model() const { return n_heads * head_dim; }
    bool uses_sorting() const {
        return variant == AttentionVariant::sinkhorn || variant == AttentionVariant::sortcut ||
               variant == AttentionVariant::mixture;
    }
    // Throws when the configuration cannot run on sequences of `seq_len`.
    void validate(std::size_t seq_len) const;
};

struct HeadOutput {
    Tensor y;                               // [..., seq_len, head_dim]
    std::size_t attention_entry_count = 0;  // score entries materialised per sequence
};

// Number of valid (unpadded) keys for each sequence of a flattened batch.
// Sequence n of the flattened [batch * heads] axis belongs to batch row n / heads.
struct KeyPadding {
    std::vector<std::size_t> lengths;
    std::size_t heads = 1;

    bool empty() const { return lengths.empty(); }
    std::size_t valid(std::size_t n, std::size_t seq_len) const {
        return lengths.empty() ? seq_len : lengths[n / heads];
    }
};

// [..., seq_len, d] <-> [..., N_B, b*d]
Tensor blockify(const Tensor& x, std::size_t block_size);
Tensor deblockify(const Tensor& x, std::size_t block_size);

// deblockify(exp(S.logits) * blockify(x)); S may be batched to match x.
// The attention heads also accept a single [N_B, N_B] matrix for a batch.
Tensor apply_sort(const SortMatrix& s, const Tensor& x, std::size_t block_size);

// Q, K, V: [..., seq_len, head_dim]. Scores are scaled by 1/sqrt(head_dim).
HeadOutput dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal,
                           const KeyPadding& pad = {});
HeadOutput local_block_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t block_size,
                                 bool causal, const KeyPadding& pad = {});

struct SinkhornHeadOptions {
    bool causal = false;
    bool summed_logits = false;
};

HeadOutput sinkhorn_attention_head(const Tensor& q, const Tensor& k, const Tensor& v, const SortMatrix& s,
                                   std::size_t block_size, const SinkhornHeadOptions& opts,
                                   const KeyPadding& pad = {});
HeadOutput sortcut_attention(const Tensor& q, const Tensor& k, const Tensor& v, const SortMatrix& s,
                             std::size_t block_size, std::size_t budget, const KeyPadding& pad = {});
HeadOutput mixture_attention(const Tensor& q, const Tensor& k, const Tensor& v, const SortMatrix& s,
                             std::size_t block_size, const SinkhornHeadOptions& opts, const KeyPadding& pad = {});

struct AttentionParams {
    Tensor w_q, w_k, w_v;  // [d, d]
    Tensor w_o;            // [d, d]  (F_H)
    std::vector<SortNetParams> sort_nets;  // one per head when sorting is used

    static AttentionParams init(const AttentionConfig& cfg, std::size_t max_blocks, std::mt19937_64& rng);
    std::vector<Tensor> parameters() const;
};

struct AttentionContext {
    bool training = false;
    std::mt19937_64* gumbel_rng = nullptr;  // noise source when training with Gumbel enabled
};

struct MultiheadOutput {
    Tensor y;                               // [batch, seq_len, d]
    std::size_t attention_entry_count = 0;  // per head, per sequence
};

// Self-attention over x [batch, seq_len, d] with per-head sort networks.
// `key_lengths` (optional, one per batch row) marks right padding.
MultiheadOutput multihead(const Tensor& x, const AttentionConfig& cfg, const AttentionParams& params,
                          const AttentionContext& ctx, std::span<const std::size_t> key_lengths = {});

// Dense attention of x [batch, tq, d] over memory [batch, tk, d].
MultiheadOutput cross_attention(const Tensor& x, const Tensor& memory, std::size_t n_heads,
                                const AttentionParams& params, std::span<const std::size_t> memory_lengths = {});

}  // namespace ssa
