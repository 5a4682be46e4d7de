#include "ssa/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ssa {

std::string_view to_string(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::dense: return "dense";
        case AttentionVariant::local: return "local";
        case AttentionVariant::sinkhorn: return "sinkhorn";
        case AttentionVariant::sortcut: return "sortcut";
        case AttentionVariant::mixture: return "mixture";
    }
    return "dense";
}

AttentionVariant parse_attention_variant(std::string_view s) {
    if (s == "dense") return AttentionVariant::dense;
    if (s == "local") return AttentionVariant::local;
    if (s == "sinkhorn") return AttentionVariant::sinkhorn;
    if (s == "sortcut") return AttentionVariant::sortcut;
    if (s == "mixture") return AttentionVariant::mixture;
    throw std::invalid_argument("unknown attention variant '" + std::string(s) + "'");
}

void AttentionConfig::validate(std::size_t seq_len) const {
    if (n_heads == 0 || head_dim == 0) throw std::invalid_argument("attention: heads and head_dim must be positive");
    if (block_size == 0) throw std::invalid_argument("attention: block size must be positive");
    if (variant != AttentionVariant::dense && seq_len % block_size != 0) {
        throw std::invalid_argument("attention: sequence length " + std::to_string(seq_len) +
                                    " is not a multiple of block size " + std::to_string(block_size));
    }
    if (variant == AttentionVariant::sortcut) {
        if (causal) throw std::invalid_argument("attention: sortcut cannot be used with causal masking");
        const std::size_t n_blocks = seq_len / block_size;
        if (sortcut_budget < 1 || sortcut_budget > n_blocks) {
            throw std::invalid_argument("attention: sortcut budget " + std::to_string(sortcut_budget) +
                                        " outside [1, " + std::to_string(n_blocks) + "]");
        }
    }
    if (uses_sorting()) sinkhorn.validate();
}

// ---- reshaping ------------------------------------------------------------

Tensor blockify(const Tensor& x, std::size_t block_size) {
    const Shape& s = x.shape();
    if (s.size() < 2) throw ShapeError("blockify: expected [..., seq_len, d], got " + shape_str(s));
    const std::size_t len = s[s.size() - 2];
    if (block_size == 0 || len % block_size != 0) {
        throw ShapeError("blockify: sequence length " + std::to_string(len) + " is not a multiple of block size " +
                         std::to_string(block_size));
    }
    Shape out(s.begin(), s.end() - 2);
    out.push_back(len / block_size);
    out.push_back(block_size * s.back());
    return reshape(x, std::move(out));
}

Tensor deblockify(const Tensor& x, std::size_t block_size) {
    const Shape& s = x.shape();
    if (s.size() < 2 || block_size == 0 || s.back() % block_size != 0) {
        throw ShapeError("deblockify: width of " + shape_str(s) + " is not a multiple of block size " +
                         std::to_string(block_size));
    }
    Shape out(s.begin(), s.end() - 2);
    out.push_back(s[s.size() - 2] * block_size);
    out.push_back(s.back() / block_size);
    return reshape(x, std::move(out));
}

Tensor apply_sort(const SortMatrix& s, const Tensor& x, std::size_t block_size) {
    const Tensor blocks = blockify(x, block_size);
    const Shape& sb = blocks.shape();
    const Shape& ss = s.logits.shape();
    const std::size_t n_blocks = sb[sb.size() - 2];
    if (ss.size() != sb.size() || ss.back() != n_blocks || !std::equal(ss.begin(), ss.end() - 1, sb.begin())) {
        throw ShapeError("apply_sort: sort matrix " + shape_str(ss) + " does not match blocked input " + shape_str(sb));
    }
    return deblockify(matmul(s.probabilities(), blocks), block_size);
}

// ---- heads ----------------------------------------------------------------

namespace {

struct Flat {
    std::size_t n = 1;  // flattened leading dims
    std::size_t len = 0;
    std::size_t dim = 0;
    Shape original;
};

Flat flat_of(const Tensor& t, const char* op) {
    const Shape& s = t.shape();
    if (s.size() < 2) throw ShapeError(std::string(op) + ": expected [..., seq_len, head_dim], got " + shape_str(s));
    Flat f;
    f.len = s[s.size() - 2];
    f.dim = s.back();
    f.n = t.numel() / (f.len * f.dim);
    f.original = s;
    return f;
}

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* op) {
    if (q.shape() != k.shape() || k.shape() != v.shape()) {
        throw ShapeError(std::string(op) + ": Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                         shape_str(v.shape()) + " must share one shape");
    }
}

Tensor to3(const Tensor& t, const Flat& f) { return reshape(t, {f.n, f.len, f.dim}); }

Tensor restore(const Tensor& y, const Flat& f) { return reshape(y, f.original); }

double score_scale(std::size_t head_dim) { return 1.0 / std::sqrt(static_cast<double>(head_dim)); }

// Multiplies padded key/value rows by zero.
Tensor zero_padded_rows(const Tensor& t3, const KeyPadding& pad) {
    if (pad.empty()) return t3;
    const auto& s = t3.shape();
    const std::size_t n = s[0], len = s[1];
    std::vector<double> keep(n * len, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = pad.valid(i, len); j < len; ++j) keep[i * len + j] = 0.0;
    return mul(t3, Tensor({n, len, 1}, std::move(keep)));
}

void check_padding(const KeyPadding& pad, std::size_t n, const char* op) {
    if (!pad.empty() && pad.lengths.size() * pad.heads != n) {
        throw ShapeError(std::string(op) + ": padding describes " + std::to_string(pad.lengths.size() * pad.heads) +
                         " sequences but the batch has " + std::to_string(n));
    }
}

SortMatrix sort3(const SortMatrix& s, const Flat& f, std::size_t block_size, const char* op) {
    const std::size_t n_blocks = f.len / block_size;
    if (s.logits.rank() == 2 && f.n > 1 && s.logits.shape()[0] == n_blocks && s.logits.shape()[1] == n_blocks) {
        // One matrix shared by every sequence of the batch.
        SortMatrix out = s;
        out.logits = add(Tensor::zeros({f.n, 1, 1}), s.logits);
        return out;
    }
    if (s.logits.numel() != f.n * n_blocks * n_blocks || s.logits.shape().back() != n_blocks) {
        throw ShapeError(std::string(op) + ": sort matrix " + shape_str(s.logits.shape()) + " does not provide " +
                         std::to_string(f.n) + " matrices of " + std::to_string(n_blocks) + "x" +
                         std::to_string(n_blocks));
    }
    SortMatrix out = s;
    out.logits = reshape(s.logits, {f.n, n_blocks, n_blocks});
    return out;
}

}  // namespace

HeadOutput dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal, const KeyPadding& pad) {
    check_qkv(q, k, v, "dense_attention");
    const Flat f = flat_of(q, "dense_attention");
    check_padding(pad, f.n, "dense_attention");
    const std::size_t len = f.len;
    Tensor scores = scale(matmul(to3(q, f), to3(k, f), true), score_scale(f.dim));
    if (!pad.empty()) {
        Mask m{{f.n, len, len}, std::vector<std::uint8_t>(f.n * len * len, 0)};
        for (std::size_t b = 0; b < f.n; ++b) {
            const std::size_t valid = pad.valid(b, len);
            for (std::size_t i = 0; i < len; ++i)
                for (std::size_t j = 0; j < len; ++j) m.bits[(b * len + i) * len + j] = (causal && j > i) || j >= valid;
        }
        scores = masked_fill(scores, m, kMaskedLogit);
    } else if (causal) {
        Mask m{{1, len, len}, std::vector<std::uint8_t>(len * len, 0)};
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = i + 1; j < len; ++j) m.bits[i * len + j] = 1;
        scores = masked_fill(scores, m, kMaskedLogit);
    }
    const std::size_t entries = scores.numel() / f.n;
    Tensor y = matmul(softmax(scores), to3(v, f));
    return {restore(y, f), entries};
}

HeadOutput local_block_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t block_size, bool causal,
                                 const KeyPadding& pad) {
    check_qkv(q, k, v, "local_block_attention");
    const Flat f = flat_of(q, "local_block_attention");
    check_padding(pad, f.n, "local_block_attention");
    const BlockPartition part = BlockPartition::make(f.len, block_size);
    const std::size_t nb = part.n_blocks(), b = block_size;
    const Shape blocked{f.n * nb, b, f.dim};
    Tensor scores = scale(matmul(reshape(q, blocked), reshape(k, blocked), true), score_scale(f.dim));
    if (!pad.empty()) {
        Mask m{{f.n * nb, b, b}, std::vector<std::uint8_t>(f.n * nb * b * b, 0)};
        for (std::size_t s = 0; s < f.n; ++s) {
            const std::size_t valid = pad.valid(s, f.len);
            for (std::size_t blk = 0; blk < nb; ++blk)
                for (std::size_t r = 0; r < b; ++r)
                    for (std::size_t c = 0; c < b; ++c)
                        m.bits[((s * nb + blk) * b + r) * b + c] = (causal && c > r) || blk * b + c >= valid;
        }
        scores = masked_fill(scores, m, kMaskedLogit);
    } else if (causal) {
        Mask m{{1, b, b}, std::vector<std::uint8_t>(b * b, 0)};
        for (std::size_t r = 0; r < b; ++r)
            for (std::size_t c = r + 1; c < b; ++c) m.bits[r * b + c] = 1;
        scores = masked_fill(scores, m, kMaskedLogit);
    }
    const std::size_t entries = scores.numel() / f.n;
    Tensor y = matmul(softmax(scores), reshape(v, blocked));
    return {restore(y, f), entries};
}

HeadOutput sinkhorn_attention_head(const Tensor& q, const Tensor& k, const Tensor& v, const SortMatrix& s,
                                   std::size_t block_size, const SinkhornHeadOptions& opts, const KeyPadding& pad) {
    check_qkv(q, k, v, "sinkhorn_attention_head");
    if (s.causal != opts.causal) {
        throw std::invalid_argument(std::string("sinkhorn_attention_head: ") +
                                    (opts.causal ? "causal attention needs a causally balanced sort matrix"
                                                 : "a causally balanced sort matrix was given to non-causal attention"));
    }
    const Flat f = flat_of(q, "sinkhorn_attention_head");
    check_padding(pad, f.n, "sinkhorn_attention_head");
    const BlockPartition part = BlockPartition::make(f.len, block_size);
    const std::size_t nb = part.n_blocks(), b = block_size;
    const SortMatrix s3 = sort3(s, f, block_size, "sinkhorn_attention_head");
    const std::size_t sort_entries = nb * nb;

    const Tensor k3 = zero_padded_rows(to3(k, f), pad);
    const Tensor v3 = zero_padded_rows(to3(v, f), pad);
    const Shape blocked{f.n * nb, b, f.dim};
    const Tensor qb = reshape(q, blocked);
    const Tensor kb = reshape(k3, blocked);
    const Tensor vb = reshape(v3, blocked);
    const Tensor ks = reshape(apply_sort(s3, k3, b), blocked);
    const Tensor vs = reshape(apply_sort(s3, v3, b), blocked);
    const double sc = score_scale(f.dim);

    if (opts.summed_logits) {
        Tensor scores = scale(add(matmul(qb, ks, true), matmul(qb, kb, true)), sc);
        if (opts.causal) {
            Mask m{{1, b, b}, std::vector<std::uint8_t>(b * b, 0)};
            for (std::size_t r = 0; r < b; ++r)
                for (std::size_t c = r + 1; c < b; ++c) m.bits[r * b + c] = 1;
            scores = masked_fill(scores, m, kMaskedLogit);
        }
        const std::size_t entries = scores.numel() / f.n + sort_entries;
        return {restore(matmul(softmax(scores), vs), f), entries};
    }

    // One softmax over [sorted block | own block]: 2b key slots per query.
    const Tensor keys = concat({ks, kb}, 1);
    const Tensor values = concat({vs, vb}, 1);
    Tensor scores = scale(matmul(qb, keys, true), sc);
    if (!pad.empty()) {
        Mask m{{f.n * nb, b, 2 * b}, std::vector<std::uint8_t>(f.n * nb * b * 2 * b, 0)};
        for (std::size_t seq = 0; seq < f.n; ++seq) {
            const std::size_t valid = pad.valid(seq, f.len);
            for (std::size_t blk = 0; blk < nb; ++blk)
                for (std::size_t r = 0; r < b; ++r)
                    for (std::size_t c = 0; c < 2 * b; ++c) {
                        const bool future = opts.causal && (c % b) > r;
                        const bool padded = c >= b && blk * b + (c - b) >= valid;
                        m.bits[((seq * nb + blk) * b + r) * 2 * b + c] = future || padded;
                    }
        }
        scores = masked_fill(scores, m, kMaskedLogit);
    } else if (opts.causal) {
        Mask m{{1, b, 2 * b}, std::vector<std::uint8_t>(b * 2 * b, 0)};
        for (std::size_t r = 0; r < b; ++r)
            for (std::size_t c = 0; c < 2 * b; ++c) m.bits[r * 2 * b + c] = (c % b) > r;
        scores = masked_fill(scores, m, kMaskedLogit);
    }
    const std::size_t entries = scores.numel() / f.n + sort_entries;
    return {restore(matmul(softmax(scores), values), f), entries};
}

HeadOutput sortcut_attention(const Tensor& q, const Tensor& k, const Tensor& v, const SortMatrix& s,
                             std::size_t block_size, std::size_t budget, const KeyPadding& pad) {
    check_qkv(q, k, v, "sortcut_attention");
    if (s.causal) throw std::invalid_argument("sortcut_attention: truncation after sorting is only defined for non-causal attention");
    const Flat f = flat_of(q, "sortcut_attention");
    check_padding(pad, f.n, "sortcut_attention");
    const BlockPartition part = BlockPartition::make(f.len, block_size);
    if (budget < 1 || budget > part.n_blocks()) {
        throw std::invalid_argument("sortcut_attention: budget " + std::to_string(budget) + " outside [1, " +
                                    std::to_string(part.n_blocks()) + "]");
    }
    const SortMatrix s3 = sort3(s, f, block_size, "sortcut_attention");
    const std::size_t keep = budget * block_size;
    const Tensor ks = slice(apply_sort(s3, zero_padded_rows(to3(k, f), pad), block_size), 1, 0, keep);
    const Tensor vs = slice(apply_sort(s3, zero_padded_rows(to3(v, f), pad), block_size), 1, 0, keep);
    const Tensor scores = scale(matmul(to3(q, f), ks, true), score_scale(f.dim));
    const std::size_t entries = scores.numel() / f.n + part.n_blocks() * part.n_blocks();
    return {restore(matmul(softmax(scores), vs), f), entries};
}

HeadOutput mixture_attention(const Tensor& q, const Tensor& k, const Tensor& v, const SortMatrix& s,
                             std::size_t block_size, const SinkhornHeadOptions& opts, const KeyPadding& pad) {
    HeadOutput sorted = sinkhorn_attention_head(q, k, v, s, block_size, opts, pad);
    HeadOutput dense = dense_attention(q, k, v, opts.causal, pad);
    return {add(sorted.y, dense.y), sorted.attention_entry_count + dense.attention_entry_count};
}

// ---- multihead ------------------------------------------------------------

namespace {

Tensor xavier(Shape shape, std::mt19937_64& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(shape[0] + shape[1]));
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), true);
}

// [B, L, H*dh] -> [B*H, L, dh]
Tensor split_heads(const Tensor& x, std::size_t heads) {
    const Shape& s = x.shape();
    const std::size_t B = s[0], L = s[1], d = s[2], dh = d / heads;
    return reshape(permute(reshape(x, {B, L, heads, dh}), {0, 2, 1, 3}), {B * heads, L, dh});
}

// [B*H, L, dh] -> [B, L, H*dh]
Tensor merge_heads(const Tensor& y, std::size_t batch, std::size_t heads) {
    const Shape& s = y.shape();
    const std::size_t L = s[1], dh = s[2];
    return reshape(permute(reshape(y, {batch, heads, L, dh}), {0, 2, 1, 3}), {batch, L, heads * dh});
}

KeyPadding padding_of(std::span<const std::size_t> lengths, std::size_t heads) {
    KeyPadding p;
    p.lengths.assign(lengths.begin(), lengths.end());
    p.heads = heads;
    return p;
}

}  // namespace

AttentionParams AttentionParams::init(const AttentionConfig& cfg, std::size_t max_blocks, std::mt19937_64& rng) {
    const std::size_t d = cfg.d_model();
    AttentionParams p;
    p.w_q = xavier({d, d}, rng);
    p.w_k = xavier({d, d}, rng);
    p.w_v = xavier({d, d}, rng);
    p.w_o = xavier({d, d}, rng);
    if (cfg.uses_sorting()) {
        for (std::size_t h = 0; h < cfg.n_heads; ++h) p.sort_nets.push_back(SortNetParams::init(cfg.sort_net, d, max_blocks, rng));
    }
    return p;
}

std::vector<Tensor> AttentionParams::parameters() const {
    std::vector<Tensor> out{w_q, w_k, w_v, w_o};
    for (const auto& s : sort_nets)
        for (auto& t : s.parameters()) out.push_back(t);
    return out;
}

MultiheadOutput multihead(const Tensor& x, const AttentionConfig& cfg, const AttentionParams& params,
                          const AttentionContext& ctx, std::span<const std::size_t> key_lengths) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw ShapeError("multihead: expected [batch, seq_len, d], got " + shape_str(s));
    const std::size_t B = s[0], L = s[1], d = s[2];
    if (d != cfg.d_model()) {
        throw ShapeError("multihead: model width " + std::to_string(d) + " is not heads (" + std::to_string(cfg.n_heads) +
                         ") x head_dim (" + std::to_string(cfg.head_dim) + ")");
    }
    if (!key_lengths.empty() && key_lengths.size() != B) throw ShapeError("multihead: one key length per batch row required");
    cfg.validate(L);
    const std::size_t H = cfg.n_heads;

    const Tensor q = split_heads(matmul(x, params.w_q), H);
    const Tensor k = split_heads(matmul(x, params.w_k), H);
    const Tensor v = split_heads(matmul(x, params.w_v), H);
    const KeyPadding pad = padding_of(key_lengths, H);

    HeadOutput out;
    if (cfg.variant == AttentionVariant::dense) {
        out = dense_attention(q, k, v, cfg.causal, pad);
    } else if (cfg.variant == AttentionVariant::local) {
        out = local_block_attention(q, k, v, cfg.block_size, cfg.causal, pad);
    } else {
        if (params.sort_nets.size() != H) throw std::invalid_argument("multihead: one sort network per head is required");
        const BlockPartition part = BlockPartition::make(L, cfg.block_size);
        const std::size_t nb = part.n_blocks();
        Tensor pool_in = x;
        if (!key_lengths.empty()) {
            std::vector<double> keep(B * L, 1.0);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = key_lengths[b]; j < L; ++j) keep[b * L + j] = 0.0;
            pool_in = mul(x, Tensor({B, L, 1}, std::move(keep)));
        }
        const Tensor pooled = cfg.causal ? block_pool_causal(pool_in, part, cfg.strict_causal_pool)
                                         : block_pool_sum(pool_in, part);
        std::vector<Tensor> per_head;
        per_head.reserve(H);
        for (std::size_t h = 0; h < H; ++h) per_head.push_back(reshape(sort_logits(pooled, params.sort_nets[h]), {B, 1, nb, nb}));
        const Tensor r = reshape(H == 1 ? per_head[0] : concat(per_head, 1), {B * H, nb, nb});

        SinkhornConfig sk = cfg.sinkhorn;
        const bool noisy = ctx.training && sk.gumbel && ctx.gumbel_rng != nullptr;
        sk.gumbel = false;
        SortMatrix sm;
        if (noisy) {
            const Tensor noise = gumbel_noise(r.shape(), *ctx.gumbel_rng);
            sm = cfg.causal ? causal_sinkhorn_normalize(r, sk, noise) : sinkhorn_normalize(r, sk, noise);
        } else {
            sm = cfg.causal ? causal_sinkhorn_normalize(r, sk) : sinkhorn_normalize(r, sk);
        }
        const SinkhornHeadOptions opts{cfg.causal, cfg.summed_logits};
        switch (cfg.variant) {
            case AttentionVariant::sinkhorn: out = sinkhorn_attention_head(q, k, v, sm, cfg.block_size, opts, pad); break;
            case AttentionVariant::sortcut:
                out = sortcut_attention(q, k, v, sm, cfg.block_size, cfg.sortcut_budget, pad);
                break;
            case AttentionVariant::mixture: out = mixture_attention(q, k, v, sm, cfg.block_size, opts, pad); break;
            default: break;
        }
    }
    return {matmul(merge_heads(out.y, B, H), params.w_o), out.attention_entry_count};
}

MultiheadOutput cross_attention(const Tensor& x, const Tensor& memory, std::size_t n_heads,
                                const AttentionParams& params, std::span<const std::size_t> memory_lengths) {
    const Shape& sx = x.shape();
    const Shape& sm = memory.shape();
    if (sx.size() != 3 || sm.size() != 3 || sx[0] != sm[0] || sx[2] != sm[2]) {
        throw ShapeError("cross_attention: query " + shape_str(sx) + " and memory " + shape_str(sm) + " do not conform");
    }
    const std::size_t B = sx[0], Lq = sx[1], Lk = sm[1], d = sx[2];
    if (n_heads == 0 || d % n_heads != 0) throw ShapeError("cross_attention: width not divisible by head count");
    const std::size_t H = n_heads, dh = d / H;
    const Tensor q = split_heads(matmul(x, params.w_q), H);
    const Tensor k = split_heads(matmul(memory, params.w_k), H);
    const Tensor v = split_heads(matmul(memory, params.w_v), H);
    Tensor scores = scale(matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));  // [B*H, Lq, Lk]
    if (!memory_lengths.empty()) {
        if (memory_lengths.size() != B) throw ShapeError("cross_attention: one memory length per batch row required");
        Mask m{{B * H, 1, Lk}, std::vector<std::uint8_t>(B * H * Lk, 0)};
        for (std::size_t n = 0; n < B * H; ++n)
            for (std::size_t j = memory_lengths[n / H]; j < Lk; ++j) m.bits[n * Lk + j] = 1;
        scores = masked_fill(scores, m, kMaskedLogit);
    }
    const Tensor y = matmul(softmax(scores), v);
    return {matmul(merge_heads(y, B, H), params.w_o), Lq * Lk};
}

}  // namespace ssa
