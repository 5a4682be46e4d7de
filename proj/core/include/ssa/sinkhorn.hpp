#pragma once

#include <cstdint>
#include <random>

#include "ssa/tensor.hpp"

namespace ssa {

struct SinkhornConfig {
    double temperature = 0.75;
    int n_iters = 5;
    bool gumbel = true;
    std::uint64_t seed = 0;

    void validate() const;
};

// Relaxed block permutation. `logits` is the log-domain matrix (or a batch of
// matrices [..., N_B, N_B]); exp(logits) is the doubly-stochastic estimate.
struct SortMatrix {
    Tensor logits;
    int n_iters = 0;
    double temperature = 1.0;
    bool causal = false;

    Tensor probabilities() const { return exp(logits); }
    std::size_t n_blocks() const { return logits.shape().back(); }
};

// Standard Gumbel samples -log(-log(u)); a constant, never differentiated.
Tensor gumbel_noise(const Shape& shape, std::mt19937_64& rng);
Tensor gumbel_noise(const Shape& shape, std::uint64_t seed);

// Alternating row/column normalisation in the log domain on (R + noise) / tau.
// Noise is drawn from cfg.seed when cfg.gumbel is set; the overload taking an
// explicit noise tensor ignores cfg.gumbel/cfg.seed. With n_iters == 0 the
// scaled logits are returned without normalisation.
SortMatrix sinkhorn_normalize(const Tensor& r, const SinkhornConfig& cfg);
SortMatrix sinkhorn_normalize(const Tensor& r, const SinkhornConfig& cfg, const Tensor& noise);

// Causal balancing: destination row i may draw only from source blocks j <= i.
// Forbidden entries are pinned to kMaskedLogit before each step and in the
// result. The column step for row i only sees rows <= i, so row i never
// depends on logits of later rows. A closing row step makes the result
// row-stochastic.
SortMatrix causal_sinkhorn_normalize(const Tensor& r, const SinkhornConfig& cfg);
SortMatrix causal_sinkhorn_normalize(const Tensor& r, const SinkhornConfig& cfg, const Tensor& noise);

// Lower-triangular support pattern for an N x N block matrix (1 = forbidden).
Mask causal_block_mask(std::size_t n_blocks);

// Exact maximum-weight assignment by enumeration; ties resolve to the
// lexicographically smallest permutation. Limited to N <= 10.
inline constexpr std::size_t kHardRoundMaxBlocks = 10;
Tensor hard_round(const Tensor& weights);
Tensor hard_round(const SortMatrix& s);

}  // namespace ssa
