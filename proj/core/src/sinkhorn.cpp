#include "ssa/sinkhorn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace ssa {

void SinkhornConfig::validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw std::invalid_argument("sinkhorn: temperature must be positive and finite, got " + std::to_string(temperature));
    }
    if (n_iters < 0) throw std::invalid_argument("sinkhorn: n_iters must be >= 0, got " + std::to_string(n_iters));
}

Tensor gumbel_noise(const Shape& shape, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> v(numel(shape));
    constexpr double tiny = std::numeric_limits<double>::min();
    for (auto& x : v) {
        const double u = std::clamp(unif(rng), tiny, 1.0 - 1e-16);
        x = -std::log(-std::log(u));
    }
    return Tensor(shape, std::move(v), false);
}

Tensor gumbel_noise(const Shape& shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return gumbel_noise(shape, rng);
}

namespace {

void check_square(const Tensor& r, const char* op) {
    const auto& s = r.shape();
    if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2]) {
        throw ShapeError(std::string(op) + ": expected square trailing matrix, got " + shape_str(s));
    }
}

Tensor scaled_logits(const Tensor& r, const SinkhornConfig& cfg, const Tensor* noise) {
    Tensor x = r;
    if (noise) {
        if (noise->shape() != r.shape()) {
            throw ShapeError("sinkhorn: noise shape " + shape_str(noise->shape()) + " differs from logits " + shape_str(r.shape()));
        }
        x = add(x, *noise);
    }
    return scale(x, 1.0 / cfg.temperature);
}

SortMatrix normalize_impl(const Tensor& r, const SinkhornConfig& cfg, const Tensor* noise) {
    check_square(r, "sinkhorn_normalize");
    cfg.validate();
    Tensor l = scaled_logits(r, cfg, noise);
    for (int k = 0; k < cfg.n_iters; ++k) {
        l = sub(l, logsumexp(l, -1, true));  // rows
        l = sub(l, logsumexp(l, -2, true));  // columns
    }
    return {l, cfg.n_iters, cfg.temperature, false};
}

SortMatrix causal_impl(const Tensor& r, const SinkhornConfig& cfg, const Tensor* noise) {
    check_square(r, "causal_sinkhorn_normalize");
    cfg.validate();
    const Mask mask = causal_block_mask(r.shape().back());
    Tensor l = masked_fill(scaled_logits(r, cfg, noise), mask, kMaskedLogit);
    for (int k = 0; k < cfg.n_iters; ++k) {
        l = masked_fill(sub(l, logsumexp(l, -1, true)), mask, kMaskedLogit);
        l = masked_fill(sub(l, logcumsumexp(l, -2)), mask, kMaskedLogit);
    }
    // A lower-triangular matrix cannot be doubly stochastic short of the
    // identity; finish on a row step so every sorted block is a convex mix.
    if (cfg.n_iters > 0) l = masked_fill(sub(l, logsumexp(l, -1, true)), mask, kMaskedLogit);
    return {l, cfg.n_iters, cfg.temperature, true};
}

}  // namespace

SortMatrix sinkhorn_normalize(const Tensor& r, const SinkhornConfig& cfg) {
    if (cfg.gumbel) {
        const Tensor noise = gumbel_noise(r.shape(), cfg.seed);
        return normalize_impl(r, cfg, &noise);
    }
    return normalize_impl(r, cfg, nullptr);
}

SortMatrix sinkhorn_normalize(const Tensor& r, const SinkhornConfig& cfg, const Tensor& noise) {
    return normalize_impl(r, cfg, &noise);
}

SortMatrix causal_sinkhorn_normalize(const Tensor& r, const SinkhornConfig& cfg) {
    if (cfg.gumbel) {
        const Tensor noise = gumbel_noise(r.shape(), cfg.seed);
        return causal_impl(r, cfg, &noise);
    }
    return causal_impl(r, cfg, nullptr);
}

SortMatrix causal_sinkhorn_normalize(const Tensor& r, const SinkhornConfig& cfg, const Tensor& noise) {
    return causal_impl(r, cfg, &noise);
}

Mask causal_block_mask(std::size_t n_blocks) {
    Mask m{{n_blocks, n_blocks}, std::vector<std::uint8_t>(n_blocks * n_blocks, 0)};
    for (std::size_t i = 0; i < n_blocks; ++i)
        for (std::size_t j = i + 1; j < n_blocks; ++j) m.bits[i * n_blocks + j] = 1;
    return m;
}

Tensor hard_round(const Tensor& weights) {
    const auto& s = weights.shape();
    if (s.size() != 2 || s[0] != s[1]) throw ShapeError("hard_round: expected a square matrix, got " + shape_str(s));
    const std::size_t n = s[0];
    if (n > kHardRoundMaxBlocks) {
        throw std::invalid_argument("hard_round: " + std::to_string(n) + " blocks exceeds the exact limit of " +
                                    std::to_string(kHardRoundMaxBlocks) + "; keep the relaxed matrix instead");
    }
    const auto w = weights.data();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::vector<std::size_t> best = perm;
    double best_score = -std::numeric_limits<double>::infinity();
    do {
        double score = 0.0;
        for (std::size_t i = 0; i < n; ++i) score += w[i * n + perm[i]];
        if (score > best_score) {
            best_score = score;
            best = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    std::vector<double> out(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) out[i * n + best[i]] = 1.0;
    return Tensor({n, n}, std::move(out));
}

Tensor hard_round(const SortMatrix& s) {
    NoGradGuard guard;
    return hard_round(s.probabilities());
}

}  // namespace ssa
