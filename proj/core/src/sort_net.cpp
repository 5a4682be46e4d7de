#include "ssa/sort_net.hpp"

#include <stdexcept>

namespace ssa {

BlockPartition BlockPartition::make(std::size_t seq_len, std::size_t block_size) {
    if (block_size == 0) throw std::invalid_argument("block partition: block size must be positive");
    if (seq_len % block_size != 0) {
        throw std::invalid_argument("block partition: sequence length " + std::to_string(seq_len) +
                                    " is not a multiple of block size " + std::to_string(block_size));
    }
    return {seq_len, block_size};
}

std::string_view to_string(SortNetVariant v) {
    switch (v) {
        case SortNetVariant::linear: return "linear";
        case SortNetVariant::relu_only: return "relu_only";
        case SortNetVariant::two_layer: return "two_layer";
        case SortNetVariant::two_layer_sigmoid: return "two_layer_sigmoid";
    }
    return "linear";
}

SortNetVariant parse_sort_net_variant(std::string_view s) {
    if (s == "linear") return SortNetVariant::linear;
    if (s == "relu_only") return SortNetVariant::relu_only;
    if (s == "two_layer") return SortNetVariant::two_layer;
    if (s == "two_layer_sigmoid") return SortNetVariant::two_layer_sigmoid;
    throw std::invalid_argument("unknown sort net variant '" + std::string(s) + "'");
}

namespace {
Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), true);
}
}  // namespace

SortNetParams SortNetParams::init(SortNetVariant variant, std::size_t d_model, std::size_t max_blocks,
                                  std::mt19937_64& rng) {
    SortNetParams p;
    p.variant = variant;
    p.w_p = gaussian({d_model, d_model}, 0.02, rng);
    p.b_p = Tensor::zeros({d_model}, true);
    p.w_b = gaussian({d_model, max_blocks}, 0.02, rng);
    p.b_b = Tensor::zeros({max_blocks}, true);
    return p;
}

SortNetParams SortNetParams::zeros(SortNetVariant variant, std::size_t d_model, std::size_t max_blocks) {
    SortNetParams p;
    p.variant = variant;
    p.w_p = Tensor::zeros({d_model, d_model}, true);
    p.b_p = Tensor::zeros({d_model}, true);
    p.w_b = Tensor::zeros({d_model, max_blocks}, true);
    p.b_b = Tensor::zeros({max_blocks}, true);
    return p;
}

std::vector<Tensor> SortNetParams::parameters() const {
    if (uses_hidden_layer()) return {w_p, b_p, w_b, b_b};
    return {w_b, b_b};
}

namespace {

Shape blocked_shape(const Tensor& x, const BlockPartition& part, const char* op) {
    const Shape& s = x.shape();
    if (s.size() < 2) throw ShapeError(std::string(op) + ": expected [..., seq_len, d], got " + shape_str(s));
    if (s[s.size() - 2] != part.seq_len) {
        throw ShapeError(std::string(op) + ": sequence length " + std::to_string(s[s.size() - 2]) +
                         " does not match partition length " + std::to_string(part.seq_len));
    }
    Shape out(s.begin(), s.end() - 2);
    out.push_back(part.n_blocks());
    out.push_back(part.block_size);
    out.push_back(s.back());
    return out;
}

Shape pooled_shape(const Shape& blocked) {
    Shape out(blocked.begin(), blocked.end() - 2);
    out.push_back(blocked.back());
    return out;
}

}  // namespace

Tensor block_pool_sum(const Tensor& x, const BlockPartition& part) {
    return sum(reshape(x, blocked_shape(x, part, "block_pool_sum")), -2, false);
}

Tensor block_pool_causal(const Tensor& x, const BlockPartition& part, bool strict) {
    const Shape blocked = blocked_shape(x, part, "block_pool_causal");
    Tensor prefix = cumsum(x, -2);
    if (strict) prefix = sub(prefix, x);
    Tensor firsts = slice(reshape(prefix, blocked), -2, 0, 1);
    return reshape(firsts, pooled_shape(blocked));
}

Tensor sort_logits(const Tensor& pooled, const SortNetParams& params) {
    const Shape& s = pooled.shape();
    if (s.size() < 2) throw ShapeError("sort_logits: expected [..., N_B, d], got " + shape_str(s));
    const std::size_t n_blocks = s[s.size() - 2];
    const std::size_t d = s.back();
    if (params.w_b.shape()[0] != d) {
        throw ShapeError("sort_logits: pooled width " + std::to_string(d) + " does not match W_B " +
                         shape_str(params.w_b.shape()));
    }
    if (n_blocks > params.max_blocks()) {
        throw ShapeError("sort_logits: " + std::to_string(n_blocks) + " blocks exceed the network's capacity of " +
                         std::to_string(params.max_blocks()));
    }
    const Tensor w_b = n_blocks == params.max_blocks() ? params.w_b : slice(params.w_b, 1, 0, n_blocks);
    const Tensor b_b = n_blocks == params.max_blocks() ? params.b_b : slice(params.b_b, 0, 0, n_blocks);

    Tensor h = pooled;
    if (params.uses_hidden_layer()) {
        if (params.w_p.shape() != Shape{d, d}) {
            throw ShapeError("sort_logits: W_P " + shape_str(params.w_p.shape()) + " must be " + shape_str({d, d}));
        }
        h = add(matmul(h, params.w_p), params.b_p);
        h = params.variant == SortNetVariant::two_layer ? relu(h) : sigmoid(h);
    }
    Tensor out = add(matmul(h, w_b), b_b);
    switch (params.variant) {
        case SortNetVariant::relu_only: return relu(out);
        case SortNetVariant::two_layer_sigmoid: return sigmoid(out);
        default: return out;
    }
}

SortMatrix generate_sort_matrix(const Tensor& x, const SortNetParams& params, const BlockPartition& part,
                                const SinkhornConfig& cfg, const SortNetOptions& opts, const Tensor* noise) {
    const Tensor pooled =
        opts.causal ? block_pool_causal(x, part, opts.strict_causal_pool) : block_pool_sum(x, part);
    const Tensor r = sort_logits(pooled, params);
    if (opts.causal) return noise ? causal_sinkhorn_normalize(r, cfg, *noise) : causal_sinkhorn_normalize(r, cfg);
    return noise ? sinkhorn_normalize(r, cfg, *noise) : sinkhorn_normalize(r, cfg);
}

}  // namespace ssa
