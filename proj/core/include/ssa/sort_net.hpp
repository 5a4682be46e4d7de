#pragma once

#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ssa/sinkhorn.hpp"
#include "ssa/tensor.hpp"

namespace ssa {

struct BlockPartition {
    std::size_t seq_len = 0;
    std::size_t block_size = 1;

    // Throws unless block_size divides seq_len.
    static BlockPartition make(std::size_t seq_len, std::size_t block_size);
    std::size_t n_blocks() const { return seq_len / block_size; }
};

// Sorting-network families, strongest first in the ablation table:
//   linear             P(x) = x W_B + b_B
//   relu_only          P(x) = relu(x W_B + b_B)
//   two_layer          P(x) = relu(x W_P + b_P) W_B + b_B
//   two_layer_sigmoid  P(x) = sigmoid(sigmoid(x W_P + b_P) W_B + b_B)
enum class SortNetVariant { linear, relu_only, two_layer, two_layer_sigmoid };

std::string_view to_string(SortNetVariant v);
SortNetVariant parse_sort_net_variant(std::string_view s);

struct SortNetParams {
    SortNetVariant variant = SortNetVariant::linear;
    Tensor w_p;  // [d, d]        two-layer variants only
    Tensor b_p;  // [d]
    Tensor w_b;  // [d, max_blocks]
    Tensor b_b;  // [max_blocks]

    // Gaussian weights (std 0.02), zero biases. `max_blocks` bounds the
    // number of blocks of any sequence the network will see; shorter
    // sequences use the leading columns of W_B.
    static SortNetParams init(SortNetVariant variant, std::size_t d_model, std::size_t max_blocks, std::mt19937_64& rng);
    static SortNetParams zeros(SortNetVariant variant, std::size_t d_model, std::size_t max_blocks);

    std::size_t max_blocks() const { return w_b.shape()[1]; }
    bool uses_hidden_layer() const {
        return variant == SortNetVariant::two_layer || variant == SortNetVariant::two_layer_sigmoid;
    }
    std::vector<Tensor> parameters() const;
};

// x [..., seq_len, d] -> [..., n_blocks, d]; row i sums the tokens of block i.
Tensor block_pool_sum(const Tensor& x, const BlockPartition& part);

// Row i is the prefix sum through the first token of block i (token i*b).
// With `strict` the prefix stops just before that token, so row 0 is zero.
Tensor block_pool_causal(const Tensor& x, const BlockPartition& part, bool strict = false);

// pooled [..., N_B, d] -> [..., N_B, N_B]
Tensor sort_logits(const Tensor& pooled, const SortNetParams& params);

struct SortNetOptions {
    bool causal = false;
    bool strict_causal_pool = false;
};

// pool -> logits -> (causal) Sinkhorn. `noise`, when given, replaces the
// cfg-seeded draw.
SortMatrix generate_sort_matrix(const Tensor& x, const SortNetParams& params, const BlockPartition& part,
                                const SinkhornConfig& cfg, const SortNetOptions& opts, const Tensor* noise = nullptr);

}  // namespace ssa
