#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "ssa/model.hpp"

using namespace ssa;

namespace {
ModelSpec small_spec(Architecture arch, AttentionVariant variant = AttentionVariant::sinkhorn) {
    AttentionConfig a;
    a.variant = variant;
    a.block_size = 2;
    a.n_heads = 2;
    a.head_dim = 4;
    a.sinkhorn.n_iters = 3;
    ModelSpec s = ModelSpec::uniform(a, 1);
    s.vocab_size = 16;
    s.d_model = 8;
    s.ffn_width = 16;
    s.max_len = 8;
    s.architecture = arch;
    return s;
}

Batch lm_batch(std::size_t batch, std::size_t len, std::uint64_t seed, std::size_t vocab = 16) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> tok(1, static_cast<int>(vocab) - 1);
    Batch b;
    b.batch = batch;
    b.len = len;
    for (std::size_t i = 0; i < batch * len; ++i) {
        b.token_ids.push_back(tok(rng));
        b.target_ids.push_back(tok(rng));
        b.loss_mask.push_back(1.0);
    }
    return b;
}

Batch s2s_batch(std::size_t batch, std::size_t len, std::uint64_t seed) {
    Batch b = lm_batch(batch, len, seed);
    const Batch src = lm_batch(batch, len, seed + 100);
    b.source_len = len;
    b.source_ids = src.token_ids;
    return b;
}
}  // namespace

TEST_SUITE("model_stack") {
    TEST_CASE("zero weights give uniform predictions and loss ln(vocab)") {
        for (auto arch : {Architecture::decoder_only, Architecture::seq2seq}) {
            const ModelSpec spec = small_spec(arch);
            const ModelParams p = ModelParams::zeros(spec);
            const Batch b = arch == Architecture::seq2seq ? s2s_batch(2, 4, 1) : lm_batch(2, 4, 1);
            const ModelOutput out = forward(spec, p, b);
            CHECK(out.logits.shape() == Shape{2, 4, 16});
            for (double l : out.logits.data()) CHECK(l == doctest::Approx(0.0));
            const double ce = cross_entropy(out.logits, b.target_ids, b.loss_mask).item();
            CHECK(ce == doctest::Approx(2.772588722239781).epsilon(1e-12));
        }
    }

    TEST_CASE("cross entropy: oracle, large margin, zero mask") {
        std::mt19937_64 rng(2);
        const auto logits = oracle::random_mat(6, 5, rng, 2.0);
        const std::vector<int> targets{0, 4, 2, 2, 1, 3};
        const std::vector<double> mask{1, 1, 0, 1, 0.5, 1};
        CHECK(cross_entropy(oracle::from_mat(logits), targets, mask).item() ==
              doctest::Approx(oracle::cross_entropy(logits, targets, mask)).epsilon(1e-12));

        oracle::Mat sharp(3, std::vector<double>(4, 0.0));
        for (std::size_t i = 0; i < 3; ++i) sharp[i][i] = 60.0;
        CHECK(cross_entropy(oracle::from_mat(sharp), std::vector<int>{0, 1, 2}, std::vector<double>{1, 1, 1}).item() <
              1e-20);
        CHECK_THROWS(cross_entropy(oracle::from_mat(sharp), std::vector<int>{0, 1, 2}, std::vector<double>{0, 0, 0}));
    }

    TEST_CASE("adam: zero gradients do not move parameters; first step is -lr*sign(g)") {
        Tensor w = Tensor::vector({1.0, -2.0, 0.5}, true);
        backward(sum_all(scale(w, 0.0)));
        std::vector<Tensor> ps{w};
        AdamState st;
        adam_step(ps, st, 0.1);
        CHECK(std::vector<double>(w.data().begin(), w.data().end()) == std::vector<double>{1.0, -2.0, 0.5});

        Tensor u = Tensor::vector({1.0, -2.0, 0.5}, true);
        backward(sum_all(mul(Tensor::vector({3.0, -0.2, 7.0}), u)));
        std::vector<Tensor> pu{u};
        AdamState su;
        adam_step(pu, su, 0.1);
        CHECK(u.data()[0] == doctest::Approx(0.9).epsilon(1e-9));
        CHECK(u.data()[1] == doctest::Approx(-1.9).epsilon(1e-9));
        CHECK(u.data()[2] == doctest::Approx(0.4).epsilon(1e-9));
    }

    TEST_CASE("adam second step follows the bias-corrected moments") {
        Tensor u = Tensor::vector({0.0}, true);
        std::vector<Tensor> pu{u};
        AdamState s;
        const AdamConfig cfg{0.9, 0.98, 1e-9};
        double m = 0, v = 0, w = 0;
        for (int t = 1; t <= 3; ++t) {
            const double g = 1.0 + t;
            u.zero_grad();
            backward(scale(sum_all(u), g));
            adam_step(pu, s, 0.01, cfg);
            m = 0.9 * m + 0.1 * g;
            v = 0.98 * v + 0.02 * g * g;
            w -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.98, t))) + 1e-9);
            CHECK(u.data()[0] == doctest::Approx(w).epsilon(1e-12));
        }
    }

    TEST_CASE("learning-rate schedule and gradient clipping") {
        CHECK(warmup_rsqrt_lr(1.0, 1, 4) == doctest::Approx(0.25));
        CHECK(warmup_rsqrt_lr(1.0, 4, 4) == doctest::Approx(1.0));
        CHECK(warmup_rsqrt_lr(1.0, 16, 4) == doctest::Approx(0.5));
        CHECK(warmup_rsqrt_lr(0.3, 7, 0) == doctest::Approx(0.3));

        Tensor a = Tensor::vector({0.0, 0.0}, true);
        backward(sum_all(mul(Tensor::vector({3.0, 4.0}), a)));
        std::vector<Tensor> ps{a};
        CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
        CHECK(a.grad()[0] == doctest::Approx(0.6));
        CHECK(a.grad()[1] == doctest::Approx(0.8));
        CHECK(clip_grad_norm(ps, 10.0) == doctest::Approx(1.0));
        CHECK(a.grad()[0] == doctest::Approx(0.6));
    }

    TEST_CASE("spec text round-trip and validation") {
        ModelSpec s = small_spec(Architecture::seq2seq);
        s.attention[0].sinkhorn.temperature = 0.625;
        s.attention[0].sort_net = SortNetVariant::two_layer_sigmoid;
        CHECK(ModelSpec::from_text(s.to_text()) == s);
        ModelSpec bad = s;
        bad.d_model = 9;
        CHECK_THROWS(bad.validate());
        CHECK(s.decoder_attention(0).causal);
        ModelSpec sc = small_spec(Architecture::seq2seq, AttentionVariant::sortcut);
        CHECK(sc.decoder_attention(0).variant == AttentionVariant::sinkhorn);
        CHECK(sc.encoder_attention(0).variant == AttentionVariant::sortcut);
    }

    TEST_CASE("checkpoint round trip is exact") {
        const ModelSpec spec = small_spec(Architecture::seq2seq);
        std::mt19937_64 rng(3);
        const ModelParams p = ModelParams::init(spec, rng);
        const auto path = std::filesystem::temp_directory_path() / "ssa_model_test.ckpt";
        save_checkpoint(path, spec, p);
        const auto [spec2, p2] = load_checkpoint(path);
        CHECK(spec2 == spec);
        const auto a = p.named_parameters(), b = p2.named_parameters();
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].first == b[i].first);
            CHECK(std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin(),
                             b[i].second.data().end()));
        }
        std::filesystem::remove(path);
        CHECK_THROWS(load_checkpoint(path));
    }

    TEST_CASE("decoder-only prefix outputs ignore later tokens") {
        const ModelSpec spec = small_spec(Architecture::decoder_only);
        std::mt19937_64 rng(4);
        const ModelParams p = ModelParams::init(spec, rng);
        Batch a = lm_batch(1, 8, 5);
        const Tensor la = forward(spec, p, a).logits;
        a.token_ids[6] = a.token_ids[6] % 15 + 1;
        const Tensor lb = forward(spec, p, a).logits;
        for (std::size_t k = 0; k < 6 * 16; ++k) CHECK(la.data()[k] == lb.data()[k]);
    }

    TEST_CASE("model gradients agree with finite differences") {
        for (auto arch : {Architecture::decoder_only, Architecture::seq2seq}) {
            const ModelSpec spec = small_spec(arch);
            std::mt19937_64 rng(6);
            const ModelParams p = ModelParams::init(spec, rng);
            const Batch b = arch == Architecture::seq2seq ? s2s_batch(1, 4, 7) : lm_batch(1, 4, 7);
            auto f = [&] { return cross_entropy(forward(spec, p, b).logits, b.target_ids, b.loss_mask); };
            // The column step nearly cancels a shift of whole logit columns, so
            // the non-causal sort-net bias gets gradients near 1e-11 where a
            // relative error only measures round-off. Those are compared in
            // absolute terms.
            std::vector<Tensor> checked, tiny;
            for (const auto& [name, t] : p.named_parameters())
                (name.rfind("enc.", 0) == 0 && name.ends_with(".b_b") ? tiny : checked).push_back(t);
            CHECK(finite_diff_check(f, checked) < 1e-3);
            if (!tiny.empty()) CHECK(oracle::fd_abs_error(f, tiny) < 1e-9);
        }
    }

    TEST_CASE("greedy decoding matches step-by-step argmax of the forward pass") {
        const ModelSpec spec = small_spec(Architecture::seq2seq);
        std::mt19937_64 rng(8);
        const ModelParams p = ModelParams::init(spec, rng);
        const std::vector<std::vector<int>> src{{3, 4, 5, 6}, {9, 2, 2, 7}};
        const auto out = greedy_decode(spec, p, src, 4, 1);
        REQUIRE(out.size() == 2);
        for (std::size_t r = 0; r < 2; ++r) {
            REQUIRE(out[r].size() == 4);
            std::vector<int> prefix{1};
            for (std::size_t t = 0; t < 4; ++t) {
                Batch b;
                b.batch = 1;
                b.len = 4;
                b.token_ids.assign(4, kPadId);
                std::copy(prefix.begin(), prefix.end(), b.token_ids.begin());
                b.target_ids.assign(4, 0);
                b.loss_mask.assign(4, 1.0);
                b.source_len = 4;
                b.source_ids = src[r];
                const Tensor lg = forward(spec, p, b).logits;
                int best = 0;
                for (int v = 1; v < 16; ++v)
                    if (lg.at({0, t, static_cast<std::size_t>(v)}) > lg.at({0, t, static_cast<std::size_t>(best)})) best = v;
                CHECK(out[r][t] == best);
                prefix.push_back(best);
            }
        }
    }

    TEST_CASE("batch validation names the problem") {
        const ModelSpec spec = small_spec(Architecture::decoder_only);
        Batch b = lm_batch(1, 4, 9);
        b.token_ids[0] = 99;
        CHECK_THROWS(b.validate(spec));
        Batch c = lm_batch(1, 4, 9);
        c.target_ids.pop_back();
        CHECK_THROWS(forward(spec, ModelParams::zeros(spec), c));
    }
}
