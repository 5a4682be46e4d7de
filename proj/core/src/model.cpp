#include "ssa/model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ssa {

std::string_view to_string(Architecture a) {
    switch (a) {
        case Architecture::decoder_only: return "decoder_only";
        case Architecture::encoder_only: return "encoder_only";
        case Architecture::seq2seq: return "seq2seq";
    }
    return "seq2seq";
}

Architecture parse_architecture(std::string_view s) {
    if (s == "decoder_only") return Architecture::decoder_only;
    if (s == "encoder_only") return Architecture::encoder_only;
    if (s == "seq2seq") return Architecture::seq2seq;
    throw std::invalid_argument("unknown architecture '" + std::string(s) + "'");
}

// ---- spec -----------------------------------------------------------------

ModelSpec ModelSpec::uniform(const AttentionConfig& cfg, std::size_t n_layers) {
    ModelSpec s;
    s.n_layers = n_layers;
    s.d_model = cfg.d_model();
    s.attention.assign(n_layers, cfg);
    return s;
}

void ModelSpec::validate() const {
    if (vocab_size < 2) throw std::invalid_argument("model: vocab_size must be at least 2");
    if (n_layers == 0) throw std::invalid_argument("model: n_layers must be positive");
    if (attention.size() != n_layers) {
        throw std::invalid_argument("model: " + std::to_string(attention.size()) + " attention configs for " +
                                    std::to_string(n_layers) + " layers");
    }
    for (std::size_t i = 0; i < n_layers; ++i) {
        const auto& a = attention[i];
        if (a.d_model() != d_model) {
            throw std::invalid_argument("model: layer " + std::to_string(i) + " heads x head_dim = " +
                                        std::to_string(a.d_model()) + " but d_model = " + std::to_string(d_model));
        }
        if (a.block_size == 0) throw std::invalid_argument("model: block size must be positive");
        if (a.variant == AttentionVariant::sortcut && architecture == Architecture::decoder_only) {
            throw std::invalid_argument("model: sortcut attention cannot be used in a decoder-only model");
        }
        if (a.uses_sorting()) a.sinkhorn.validate();
    }
    if (ffn_width == 0 || max_len == 0) throw std::invalid_argument("model: ffn_width and max_len must be positive");
}

AttentionConfig ModelSpec::encoder_attention(std::size_t i) const {
    AttentionConfig c = attention.at(i);
    c.causal = false;
    return c;
}

AttentionConfig ModelSpec::decoder_attention(std::size_t i) const {
    AttentionConfig c = attention.at(i);
    c.causal = true;
    if (c.variant == AttentionVariant::sortcut) c.variant = AttentionVariant::sinkhorn;
    return c;
}

std::size_t ModelSpec::block_multiple() const {
    std::size_t m = 1;
    for (const auto& a : attention)
        if (a.variant != AttentionVariant::dense) m = std::lcm(m, a.block_size);
    return m;
}

std::size_t ModelSpec::max_blocks() const {
    std::size_t nb = 1;
    const std::size_t m = block_multiple();
    const std::size_t padded = (max_len + m - 1) / m * m;
    for (const auto& a : attention) nb = std::max(nb, padded / a.block_size);
    return nb;
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T value{};
    auto res = std::from_chars(text.data(), text.data() + text.size(), value);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
        throw std::invalid_argument("model spec: '" + key + "' has malformed value '" + text + "'");
    }
    return value;
}

bool parse_flag(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw std::invalid_argument("model spec: '" + key + "' expects true/false, got '" + text + "'");
}

}  // namespace

std::string ModelSpec::to_text() const {
    std::ostringstream os;
    os << "vocab_size=" << vocab_size << '\n'
       << "d_model=" << d_model << '\n'
       << "n_layers=" << n_layers << '\n'
       << "ffn_width=" << ffn_width << '\n'
       << "max_len=" << max_len << '\n'
       << "tie_embeddings=" << (tie_embeddings ? "true" : "false") << '\n'
       << "architecture=" << to_string(architecture) << '\n';
    for (std::size_t i = 0; i < attention.size(); ++i) {
        const auto& a = attention[i];
        const std::string p = "layer." + std::to_string(i) + ".";
        os << p << "variant=" << to_string(a.variant) << '\n'
           << p << "block_size=" << a.block_size << '\n'
           << p << "n_heads=" << a.n_heads << '\n'
           << p << "head_dim=" << a.head_dim << '\n'
           << p << "causal=" << (a.causal ? "true" : "false") << '\n'
           << p << "temperature=" << fmt_double(a.sinkhorn.temperature) << '\n'
           << p << "sinkhorn_iters=" << a.sinkhorn.n_iters << '\n'
           << p << "gumbel=" << (a.sinkhorn.gumbel ? "true" : "false") << '\n'
           << p << "sinkhorn_seed=" << a.sinkhorn.seed << '\n'
           << p << "sortcut_budget=" << a.sortcut_budget << '\n'
           << p << "sort_net=" << to_string(a.sort_net) << '\n'
           << p << "summed_logits=" << (a.summed_logits ? "true" : "false") << '\n'
           << p << "strict_causal_pool=" << (a.strict_causal_pool ? "true" : "false") << '\n';
    }
    return os.str();
}

ModelSpec ModelSpec::from_text(std::string_view text) {
    std::map<std::string, std::string> kv;
    std::istringstream is{std::string(text)};
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("model spec: line without '=': " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto take = [&](const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw std::invalid_argument("model spec: missing key '" + key + "'");
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    ModelSpec s;
    s.vocab_size = parse_number<std::size_t>("vocab_size", take("vocab_size"));
    s.d_model = parse_number<std::size_t>("d_model", take("d_model"));
    s.n_layers = parse_number<std::size_t>("n_layers", take("n_layers"));
    s.ffn_width = parse_number<std::size_t>("ffn_width", take("ffn_width"));
    s.max_len = parse_number<std::size_t>("max_len", take("max_len"));
    s.tie_embeddings = parse_flag("tie_embeddings", take("tie_embeddings"));
    s.architecture = parse_architecture(take("architecture"));
    for (std::size_t i = 0; i < s.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        AttentionConfig a;
        a.variant = parse_attention_variant(take(p + "variant"));
        a.block_size = parse_number<std::size_t>(p + "block_size", take(p + "block_size"));
        a.n_heads = parse_number<std::size_t>(p + "n_heads", take(p + "n_heads"));
        a.head_dim = parse_number<std::size_t>(p + "head_dim", take(p + "head_dim"));
        a.causal = parse_flag(p + "causal", take(p + "causal"));
        a.sinkhorn.temperature = parse_number<double>(p + "temperature", take(p + "temperature"));
        a.sinkhorn.n_iters = parse_number<int>(p + "sinkhorn_iters", take(p + "sinkhorn_iters"));
        a.sinkhorn.gumbel = parse_flag(p + "gumbel", take(p + "gumbel"));
        a.sinkhorn.seed = parse_number<std::uint64_t>(p + "sinkhorn_seed", take(p + "sinkhorn_seed"));
        a.sortcut_budget = parse_number<std::size_t>(p + "sortcut_budget", take(p + "sortcut_budget"));
        a.sort_net = parse_sort_net_variant(take(p + "sort_net"));
        a.summed_logits = parse_flag(p + "summed_logits", take(p + "summed_logits"));
        a.strict_causal_pool = parse_flag(p + "strict_causal_pool", take(p + "strict_causal_pool"));
        s.attention.push_back(a);
    }
    if (!kv.empty()) throw std::invalid_argument("model spec: unknown key '" + kv.begin()->first + "'");
    return s;
}

// ---- parameters -----------------------------------------------------------

namespace {

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), true);
}

Tensor glorot(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    return normal({in, out}, std::sqrt(2.0 / static_cast<double>(in + out)), rng);
}

LayerParams init_layer(const ModelSpec& spec, const AttentionConfig& cfg, bool with_cross, std::mt19937_64& rng) {
    const std::size_t d = spec.d_model, f = spec.ffn_width;
    LayerParams p;
    p.ln1_g = Tensor::full({d}, 1.0, true);
    p.ln1_b = Tensor::zeros({d}, true);
    p.self_attn = AttentionParams::init(cfg, spec.max_blocks(), rng);
    if (with_cross) {
        p.lnc_g = Tensor::full({d}, 1.0, true);
        p.lnc_b = Tensor::zeros({d}, true);
        AttentionConfig dense = cfg;
        dense.variant = AttentionVariant::dense;
        p.cross_attn = AttentionParams::init(dense, spec.max_blocks(), rng);
    }
    p.ln2_g = Tensor::full({d}, 1.0, true);
    p.ln2_b = Tensor::zeros({d}, true);
    p.ffn_w1 = glorot(d, f, rng);
    p.ffn_b1 = Tensor::zeros({f}, true);
    p.ffn_w2 = glorot(f, d, rng);
    p.ffn_b2 = Tensor::zeros({d}, true);
    return p;
}

void push_attention(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                    const AttentionParams& a) {
    out.emplace_back(prefix + "w_q", a.w_q);
    out.emplace_back(prefix + "w_k", a.w_k);
    out.emplace_back(prefix + "w_v", a.w_v);
    out.emplace_back(prefix + "w_o", a.w_o);
    for (std::size_t h = 0; h < a.sort_nets.size(); ++h) {
        const auto& s = a.sort_nets[h];
        const std::string p = prefix + "sort" + std::to_string(h) + ".";
        out.emplace_back(p + "w_p", s.w_p);
        out.emplace_back(p + "b_p", s.b_p);
        out.emplace_back(p + "w_b", s.w_b);
        out.emplace_back(p + "b_b", s.b_b);
    }
}

void push_layer(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix, const LayerParams& l) {
    out.emplace_back(prefix + "ln1_g", l.ln1_g);
    out.emplace_back(prefix + "ln1_b", l.ln1_b);
    push_attention(out, prefix + "self.", l.self_attn);
    if (l.lnc_g.defined()) {
        out.emplace_back(prefix + "lnc_g", l.lnc_g);
        out.emplace_back(prefix + "lnc_b", l.lnc_b);
        push_attention(out, prefix + "cross.", l.cross_attn);
    }
    out.emplace_back(prefix + "ln2_g", l.ln2_g);
    out.emplace_back(prefix + "ln2_b", l.ln2_b);
    out.emplace_back(prefix + "ffn_w1", l.ffn_w1);
    out.emplace_back(prefix + "ffn_b1", l.ffn_b1);
    out.emplace_back(prefix + "ffn_w2", l.ffn_w2);
    out.emplace_back(prefix + "ffn_b2", l.ffn_b2);
}

bool has_encoder(const ModelSpec& s) { return s.architecture != Architecture::decoder_only; }
bool has_decoder(const ModelSpec& s) { return s.architecture != Architecture::encoder_only; }

}  // namespace

ModelParams ModelParams::init(const ModelSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    const std::size_t d = spec.d_model, V = spec.vocab_size;
    ModelParams p;
    p.embedding = normal({V, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    if (!spec.tie_embeddings) p.output = glorot(d, V, rng);
    if (has_encoder(spec)) {
        for (std::size_t i = 0; i < spec.n_layers; ++i) p.encoder.push_back(init_layer(spec, spec.encoder_attention(i), false, rng));
        p.enc_ln_g = Tensor::full({d}, 1.0, true);
        p.enc_ln_b = Tensor::zeros({d}, true);
    }
    if (has_decoder(spec)) {
        const bool cross = spec.architecture == Architecture::seq2seq;
        for (std::size_t i = 0; i < spec.n_layers; ++i) p.decoder.push_back(init_layer(spec, spec.decoder_attention(i), cross, rng));
        p.dec_ln_g = Tensor::full({d}, 1.0, true);
        p.dec_ln_b = Tensor::zeros({d}, true);
    }
    return p;
}

ModelParams ModelParams::zeros(const ModelSpec& spec) {
    std::mt19937_64 rng(0);
    ModelParams p = init(spec, rng);
    for (auto& [name, t] : p.named_parameters()) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding", embedding);
    if (output.defined()) out.emplace_back("output", output);
    for (std::size_t i = 0; i < encoder.size(); ++i) push_layer(out, "enc." + std::to_string(i) + ".", encoder[i]);
    if (enc_ln_g.defined()) {
        out.emplace_back("enc_ln_g", enc_ln_g);
        out.emplace_back("enc_ln_b", enc_ln_b);
    }
    for (std::size_t i = 0; i < decoder.size(); ++i) push_layer(out, "dec." + std::to_string(i) + ".", decoder[i]);
    if (dec_ln_g.defined()) {
        out.emplace_back("dec_ln_g", dec_ln_g);
        out.emplace_back("dec_ln_b", dec_ln_b);
    }
    return out;
}

std::vector<Tensor> ModelParams::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

// ---- forward --------------------------------------------------------------

void Batch::validate(const ModelSpec& spec) const {
    auto check_ids = [&](const std::vector<int>& ids, std::size_t expected, const char* what) {
        if (ids.size() != expected) {
            throw ShapeError(std::string("batch: ") + what + " has " + std::to_string(ids.size()) + " ids, expected " +
                             std::to_string(expected));
        }
        for (int id : ids)
            if (id < 0 || static_cast<std::size_t>(id) >= spec.vocab_size) {
                throw ShapeError(std::string("batch: ") + what + " id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(spec.vocab_size));
            }
    };
    if (batch == 0 || len == 0) throw ShapeError("batch: empty batch");
    if (len > spec.max_len) {
        throw ShapeError("batch: length " + std::to_string(len) + " exceeds max_len " + std::to_string(spec.max_len));
    }
    check_ids(token_ids, batch * len, "token_ids");
    if (!target_ids.empty()) check_ids(target_ids, batch * len, "target_ids");
    if (!loss_mask.empty() && loss_mask.size() != batch * len) throw ShapeError("batch: loss_mask size mismatch");
    if (spec.architecture == Architecture::seq2seq) {
        if (source_len == 0) throw ShapeError("batch: seq2seq model needs source ids");
        if (source_len > spec.max_len) throw ShapeError("batch: source length exceeds max_len");
        check_ids(source_ids, batch * source_len, "source_ids");
    }
}

Tensor sinusoidal_positions(std::size_t len, std::size_t d_model) {
    std::vector<double> pe(len * d_model);
    for (std::size_t pos = 0; pos < len; ++pos) {
        for (std::size_t i = 0; i < d_model; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d_model));
            pe[pos * d_model + i] = (i % 2 == 0) ? std::sin(static_cast<double>(pos) * rate)
                                                 : std::cos(static_cast<double>(pos) * rate);
        }
    }
    return Tensor({len, d_model}, std::move(pe));
}

namespace {

std::size_t padded_length(const ModelSpec& spec, std::size_t len) {
    const std::size_t m = spec.block_multiple();
    return (len + m - 1) / m * m;
}

Tensor embed(const ModelSpec& spec, const ModelParams& p, const std::vector<int>& ids, std::size_t batch,
             std::size_t len, std::size_t padded) {
    std::vector<int> full(batch * padded, kPadId);
    for (std::size_t b = 0; b < batch; ++b) std::copy_n(ids.begin() + b * len, len, full.begin() + b * padded);
    const std::size_t d = spec.d_model;
    Tensor x = reshape(gather_rows(p.embedding, full), {batch, padded, d});
    x = scale(x, std::sqrt(static_cast<double>(d)));
    return add(x, sinusoidal_positions(padded, d));
}

Tensor feed_forward(const LayerParams& l, const Tensor& x) {
    return add(matmul(relu(add(matmul(x, l.ffn_w1), l.ffn_b1)), l.ffn_w2), l.ffn_b2);
}

struct StackResult {
    Tensor h;
    std::vector<std::size_t> entries;
};

StackResult run_encoder(const ModelSpec& spec, const ModelParams& p, const Tensor& x0,
                        std::span<const std::size_t> lengths, const AttentionContext& actx) {
    Tensor x = x0;
    std::vector<std::size_t> entries;
    for (std::size_t i = 0; i < p.encoder.size(); ++i) {
        const auto& l = p.encoder[i];
        auto att = multihead(layer_norm(x, l.ln1_g, l.ln1_b), spec.encoder_attention(i), l.self_attn, actx, lengths);
        entries.push_back(att.attention_entry_count);
        x = add(x, att.y);
        x = add(x, feed_forward(l, layer_norm(x, l.ln2_g, l.ln2_b)));
    }
    return {layer_norm(x, p.enc_ln_g, p.enc_ln_b), entries};
}

StackResult run_decoder(const ModelSpec& spec, const ModelParams& p, const Tensor& x0,
                        std::span<const std::size_t> lengths, const Tensor* memory,
                        std::span<const std::size_t> memory_lengths, const AttentionContext& actx) {
    Tensor x = x0;
    std::vector<std::size_t> entries;
    for (std::size_t i = 0; i < p.decoder.size(); ++i) {
        const auto& l = p.decoder[i];
        const AttentionConfig cfg = spec.decoder_attention(i);
        auto att = multihead(layer_norm(x, l.ln1_g, l.ln1_b), cfg, l.self_attn, actx, lengths);
        entries.push_back(att.attention_entry_count);
        x = add(x, att.y);
        if (memory) {
            auto cross = cross_attention(layer_norm(x, l.lnc_g, l.lnc_b), *memory, cfg.n_heads, l.cross_attn, memory_lengths);
            x = add(x, cross.y);
        }
        x = add(x, feed_forward(l, layer_norm(x, l.ln2_g, l.ln2_b)));
    }
    return {layer_norm(x, p.dec_ln_g, p.dec_ln_b), entries};
}

Tensor project(const ModelParams& p, const Tensor& h) {
    return p.output.defined() ? matmul(h, p.output) : matmul(h, p.embedding, true);
}

std::vector<std::size_t> lengths_if_padded(std::size_t batch, std::size_t len, std::size_t padded) {
    if (padded == len) return {};
    return std::vector<std::size_t>(batch, len);
}

}  // namespace

ModelOutput forward(const ModelSpec& spec, const ModelParams& params, const Batch& batch, const ForwardContext& ctx) {
    batch.validate(spec);
    const AttentionContext actx{ctx.training, ctx.gumbel_rng};
    const std::size_t B = batch.batch, L = batch.len;
    const std::size_t Lp = padded_length(spec, L);
    const auto lengths = lengths_if_padded(B, L, Lp);

    ModelOutput out;
    Tensor h;
    if (spec.architecture == Architecture::encoder_only) {
        auto enc = run_encoder(spec, params, embed(spec, params, batch.token_ids, B, L, Lp), lengths, actx);
        h = enc.h;
        out.attention_entries = enc.entries;
    } else if (spec.architecture == Architecture::decoder_only) {
        auto dec = run_decoder(spec, params, embed(spec, params, batch.token_ids, B, L, Lp), lengths, nullptr, {}, actx);
        h = dec.h;
        out.attention_entries = dec.entries;
    } else {
        const std::size_t Ls = batch.source_len;
        const std::size_t Lsp = padded_length(spec, Ls);
        const auto src_lengths = lengths_if_padded(B, Ls, Lsp);
        auto enc = run_encoder(spec, params, embed(spec, params, batch.source_ids, B, Ls, Lsp), src_lengths, actx);
        auto dec = run_decoder(spec, params, embed(spec, params, batch.token_ids, B, L, Lp), lengths, &enc.h,
                               src_lengths, actx);
        h = dec.h;
        out.attention_entries = enc.entries;
        out.attention_entries.insert(out.attention_entries.end(), dec.entries.begin(), dec.entries.end());
    }
    Tensor logits = project(params, h);
    if (Lp != L) logits = slice(logits, 1, 0, L);
    out.logits = logits;
    return out;
}

// ---- loss and optimisation ------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> mask) {
    const std::size_t V = logits.shape().back();
    const std::size_t rows = logits.numel() / V;
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                         " positions of " + shape_str(logits.shape()));
    }
    std::vector<double> w(rows, 1.0);
    if (!mask.empty()) {
        if (mask.size() != rows) throw ShapeError("cross_entropy: mask size does not match targets");
        w.assign(mask.begin(), mask.end());
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (total <= 0.0) throw std::invalid_argument("cross_entropy: loss mask selects no positions");
    const auto lv = logits.data();
    std::vector<double> probs(lv.size());
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = lv.data() + r * V;
        const double mx = *std::max_element(x, x + V);
        double s = 0.0;
        for (std::size_t j = 0; j < V; ++j) s += (probs[r * V + j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < V; ++j) probs[r * V + j] /= s;
        const int t = targets[r];
        if (t < 0 || static_cast<std::size_t>(t) >= V) throw ShapeError("cross_entropy: target id out of range");
        if (w[r] != 0.0) loss += w[r] * (mx + std::log(s) - x[t]);
    }
    loss /= total;
    std::vector<int> tgt(targets.begin(), targets.end());
    return make_result("cross_entropy", {1}, {loss}, {logits},
                       [probs = std::move(probs), w = std::move(w), tgt = std::move(tgt), V, total](Node& self) {
                           Node* p = self.parents[0].get();
                           if (!p->requires_grad) return;
                           auto g = p->grad_buffer();
                           const double up = self.grad[0] / total;
                           for (std::size_t r = 0; r < tgt.size(); ++r) {
                               if (w[r] == 0.0) continue;
                               const double k = up * w[r];
                               for (std::size_t j = 0; j < V; ++j) g[r * V + j] += k * probs[r * V + j];
                               g[r * V + static_cast<std::size_t>(tgt[r])] -= k;
                           }
                       });
}

void adam_step(std::span<Tensor> params, AdamState& state, double lr, const AdamConfig& cfg) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw std::invalid_argument("adam: state does not match parameter list");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != params[i].numel()) throw std::invalid_argument("adam: state shape mismatch");
        if (!params[i].has_grad()) continue;
        const auto g = params[i].grad();
        auto w = params[i].mutable_data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            w[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

double warmup_rsqrt_lr(double base_lr, std::size_t step, std::size_t warmup) {
    const double s = static_cast<double>(std::max<std::size_t>(step, 1));
    if (warmup == 0) return base_lr;
    const double w = static_cast<double>(warmup);
    return base_lr * std::min(s / w, std::sqrt(w / s));
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        if (p.has_grad())
            for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double k = max_norm / norm;
        for (auto& p : params)
            if (p.has_grad())
                for (auto& g : p.node()->grad) g *= k;
    }
    return norm;
}

// ---- decoding -------------------------------------------------------------

std::vector<std::vector<int>> greedy_decode(const ModelSpec& spec, const ModelParams& params,
                                            const std::vector<std::vector<int>>& sources, std::size_t out_len,
                                            int bos_id) {
    if (spec.architecture != Architecture::seq2seq) throw std::invalid_argument("greedy_decode: needs a seq2seq model");
    if (sources.empty()) return {};
    NoGradGuard no_grad;
    const std::size_t B = sources.size();
    const std::size_t Ls = sources[0].size();
    std::vector<int> src;
    src.reserve(B * Ls);
    for (const auto& s : sources) {
        if (s.size() != Ls) throw ShapeError("greedy_decode: sources must share one length");
        src.insert(src.end(), s.begin(), s.end());
    }
    Batch probe;
    probe.batch = B;
    probe.len = out_len;
    probe.token_ids.assign(B * out_len, kPadId);
    probe.source_len = Ls;
    probe.source_ids = src;
    probe.validate(spec);

    const AttentionContext actx{};
    const std::size_t Lsp = padded_length(spec, Ls);
    const auto src_lengths = lengths_if_padded(B, Ls, Lsp);
    const auto enc = run_encoder(spec, params, embed(spec, params, src, B, Ls, Lsp), src_lengths, actx);

    const std::size_t Lp = padded_length(spec, out_len);
    const auto lengths = lengths_if_padded(B, out_len, Lp);
    std::vector<int> dec_in(B * out_len, kPadId);
    for (std::size_t b = 0; b < B; ++b) dec_in[b * out_len] = bos_id;
    std::vector<std::vector<int>> out(B, std::vector<int>(out_len, kPadId));
    const std::size_t V = spec.vocab_size;
    for (std::size_t t = 0; t < out_len; ++t) {
        // Later positions hold padding; causal masking keeps them out of step t.
        const auto dec = run_decoder(spec, params, embed(spec, params, dec_in, B, out_len, Lp), lengths, &enc.h,
                                     src_lengths, actx);
        const Tensor logits = project(params, slice(dec.h, 1, t, t + 1));  // [B, 1, V]
        const auto lv = logits.data();
        for (std::size_t b = 0; b < B; ++b) {
            const double* row = lv.data() + b * V;
            const int best = static_cast<int>(std::max_element(row, row + V) - row);
            out[b][t] = best;
            if (t + 1 < out_len) dec_in[b * out_len + t + 1] = best;
        }
    }
    return out;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'S', 'S', 'A', 'C', 'K', 'P', 'T', '1'};

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ModelParams& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path.string() + "' for writing");
    os.write(kMagic, sizeof(kMagic));
    const std::string header = spec.to_text();
    write_u64(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    const auto named = params.named_parameters();
    write_u64(os, named.size());
    for (const auto& [name, t] : named) {
        write_u64(os, t.rank());
        for (auto d : t.shape()) write_u64(os, d);
        for (double x : t.data()) write_u64(os, std::bit_cast<std::uint64_t>(x));
    }
    if (!os) throw std::runtime_error("checkpoint: write to '" + path.string() + "' failed");
}

std::pair<ModelSpec, ModelParams> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path.string() + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("checkpoint: bad magic in '" + path.string() + "'");
    const auto header_len = read_u64(is);
    std::string header(header_len, '\0');
    if (!is.read(header.data(), static_cast<std::streamsize>(header_len))) throw std::runtime_error("checkpoint: truncated header");
    ModelSpec spec = ModelSpec::from_text(header);
    ModelParams params = ModelParams::zeros(spec);
    auto named = params.named_parameters();
    if (read_u64(is) != named.size()) throw std::runtime_error("checkpoint: parameter count does not match spec");
    for (auto& [name, t] : named) {
        const auto rank = read_u64(is);
        Shape shape(rank);
        for (auto& d : shape) d = read_u64(is);
        if (shape != t.shape()) {
            throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                     shape_str(t.shape()));
        }
        for (auto& x : t.mutable_data()) x = std::bit_cast<double>(read_u64(is));
    }
    return {spec, params};
}

}  // namespace ssa
