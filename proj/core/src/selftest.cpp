#include "ssa/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "ssa/attention.hpp"
#include "ssa/harness.hpp"
#include "ssa/model.hpp"
#include "ssa/sinkhorn.hpp"
#include "ssa/sort_net.hpp"

namespace ssa {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt_g(double v) {
    std::ostringstream os;
    os << std::setprecision(4) << v;
    return os.str();
}

Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    std::normal_distribution<double> d(0.0, stddev);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = d(rng);
    return Tensor(std::move(shape), std::move(v));
}

// Scalar probe sum(y * w) with fixed random weights, so every output
// coordinate contributes to the gradient with a distinct factor.
Tensor probe(const Tensor& y, const Tensor& w) { return sum_all(mul(y, w)); }

// Permutation matrix in log form: 0 on the chosen entries, masked elsewhere.
SortMatrix hard_sort(const std::vector<std::size_t>& perm, bool causal) {
    const std::size_t n = perm.size();
    std::vector<double> v(n * n, kMaskedLogit);
    for (std::size_t i = 0; i < n; ++i) v[i * n + perm[i]] = 0.0;
    return SortMatrix{Tensor({n, n}, std::move(v)), 0, 1.0, causal};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace

std::vector<PropertyResult> check_doubly_stochastic() {
    const auto t0 = Clock::now();
    SinkhornConfig cfg;
    cfg.temperature = 1.0;
    cfg.n_iters = 20;
    cfg.gumbel = false;
    std::size_t ok = 0;
    double worst = 0.0;
    NoGradGuard ng;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        const Tensor p = sinkhorn_normalize(randn({8, 8}, rng), cfg).probabilities();
        const Tensor rows = sum(p, 1), cols = sum(p, 0);
        bool good = true;
        for (const Tensor* t : {&rows, &cols}) {
            for (double s : t->data()) {
                worst = std::max(worst, std::abs(s - 1.0));
                good = good && s >= 0.99 && s <= 1.01;
            }
        }
        ok += good;
    }
    const double secs = since(t0);
    return {{1, "sinkhorn rows and columns sum to 1 (8x8, tau 1, 20 iterations)", ok == 100 && secs < 1.0,
             std::to_string(ok) + "/100 seeds, max |sum-1| = " + fmt_g(worst) + ", " + fmt_g(secs) + " s", secs}};
}

std::vector<PropertyResult> check_gradients() {
    std::vector<PropertyResult> out;
    const auto suite_t0 = Clock::now();
    auto record = [&](const std::string& name, double err, double tol, Clock::time_point t0) {
        out.push_back({2, "gradient check: " + name, err <= tol,
                       "max rel err " + fmt_g(err) + " (tol " + fmt_g(tol) + ")", since(t0)});
    };
    std::mt19937_64 rng(11);

    {
        const auto t0 = Clock::now();
        SinkhornConfig cfg;
        cfg.n_iters = 5;
        const Tensor noise = gumbel_noise({5, 5}, rng);
        const Tensor w = randn({5, 5}, rng);
        const Tensor r = randn({5, 5}, rng);
        const double e1 = finite_diff_check([&](const Tensor& x) { return probe(sinkhorn_normalize(x, cfg, noise).probabilities(), w); }, r);
        const double e2 = finite_diff_check(
            [&](const Tensor& x) { return probe(causal_sinkhorn_normalize(x, cfg, noise).probabilities(), w); }, r);
        record("sinkhorn_normalize", e1, 1e-4, t0);
        record("causal_sinkhorn_normalize", e2, 1e-4, t0);
    }
    {
        const auto t0 = Clock::now();
        const std::size_t len = 8, d = 6, b = 2;
        const BlockPartition part = BlockPartition::make(len, b);
        SinkhornConfig cfg;
        double worst = 0.0;
        for (auto variant : {SortNetVariant::linear, SortNetVariant::two_layer, SortNetVariant::two_layer_sigmoid}) {
            SortNetParams p = SortNetParams::init(variant, d, part.n_blocks(), rng);
            // Larger weights than the default init so the check is not dominated by near-zero logits.
            for (Tensor* t : {&p.w_p, &p.b_p, &p.w_b, &p.b_b}) {
                if (!t->defined()) continue;
                *t = randn(t->shape(), rng, 0.5);
            }
            const Tensor x = randn({len, d}, rng).clone_leaf(true);
            const Tensor noise = gumbel_noise({part.n_blocks(), part.n_blocks()}, rng);
            const Tensor w = randn({part.n_blocks(), part.n_blocks()}, rng);
            for (bool causal : {false, true}) {
                auto params = p.parameters();
                params.push_back(x);
                worst = std::max(worst, finite_diff_check(
                                            [&] {
                                                return probe(generate_sort_matrix(x, p, part, cfg, {causal, false}, &noise)
                                                                 .probabilities(),
                                                             w);
                                            },
                                            params));
            }
        }
        record("generate_sort_matrix", worst, 1e-4, t0);
    }
    {
        const std::size_t len = 8, dh = 4, b = 2, nb = len / b;
        SinkhornConfig cfg;
        const Tensor q = randn({len, dh}, rng).clone_leaf(true);
        const Tensor k = randn({len, dh}, rng).clone_leaf(true);
        const Tensor v = randn({len, dh}, rng).clone_leaf(true);
        const Tensor r = randn({nb, nb}, rng).clone_leaf(true);
        const Tensor noise = gumbel_noise({nb, nb}, rng);
        const Tensor w = randn({len, dh}, rng);
        const std::vector<Tensor> params{q, k, v, r};

        auto t0 = Clock::now();
        double worst = 0.0;
        for (bool causal : {false, true}) {
            for (bool summed : {false, true}) {
                worst = std::max(worst, finite_diff_check(
                                            [&] {
                                                const SortMatrix s = causal ? causal_sinkhorn_normalize(r, cfg, noise)
                                                                            : sinkhorn_normalize(r, cfg, noise);
                                                return probe(sinkhorn_attention_head(q, k, v, s, b, {causal, summed}).y, w);
                                            },
                                            params));
            }
        }
        record("sinkhorn_attention_head", worst, 1e-4, t0);

        t0 = Clock::now();
        worst = 0.0;
        for (std::size_t budget : {std::size_t{1}, std::size_t{2}}) {
            worst = std::max(worst, finite_diff_check(
                                        [&] {
                                            return probe(
                                                sortcut_attention(q, k, v, sinkhorn_normalize(r, cfg, noise), b, budget).y, w);
                                        },
                                        params));
        }
        record("sortcut_attention", worst, 1e-4, t0);
    }
    {
        const auto t0 = Clock::now();
        double worst = 0.0;
        for (Architecture arch : {Architecture::seq2seq, Architecture::decoder_only}) {
            AttentionConfig a;
            a.variant = AttentionVariant::sinkhorn;
            a.block_size = 2;
            a.n_heads = 2;
            a.head_dim = 3;
            ModelSpec spec = ModelSpec::uniform(a, 1);
            spec.vocab_size = 7;
            spec.ffn_width = 8;
            spec.max_len = 6;
            spec.architecture = arch;
            std::mt19937_64 init(5);
            const ModelParams mp = ModelParams::init(spec, init);
            Batch batch;
            batch.batch = 2;
            batch.len = 6;
            batch.token_ids = {1, 3, 4, 5, 2, 6, 1, 2, 2, 6, 5, 3};
            batch.target_ids = {3, 4, 5, 2, 6, 6, 2, 2, 6, 5, 3, 4};
            batch.loss_mask.assign(12, 1.0);
            if (arch == Architecture::seq2seq) {
                batch.source_len = 4;
                batch.source_ids = {6, 5, 4, 3, 2, 3, 6, 2};
            }
            worst = std::max(worst, finite_diff_check(
                                        [&] { return cross_entropy(forward(spec, mp, batch).logits, batch.target_ids, batch.loss_mask); },
                                        mp.parameters()));
        }
        record("one-layer model (all parameters)", worst, 1e-3, t0);
    }
    const double secs = since(suite_t0);
    out.push_back({2, "gradient suite runtime under 30 s", secs < 30.0, fmt_g(secs) + " s", secs});
    return out;
}

std::vector<PropertyResult> check_causality() {
    const auto t0 = Clock::now();
    const std::size_t len = 16, b = 4;
    AttentionConfig a;
    a.variant = AttentionVariant::sinkhorn;
    a.block_size = b;
    a.n_heads = 2;
    a.head_dim = 4;
    ModelSpec spec = ModelSpec::uniform(a, 2);
    spec.vocab_size = 12;
    spec.ffn_width = 16;
    spec.max_len = len;
    spec.architecture = Architecture::decoder_only;

    std::size_t violations = 0, checks = 0;
    NoGradGuard ng;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        const ModelParams mp = ModelParams::init(spec, rng);
        std::uniform_int_distribution<int> tok(1, static_cast<int>(spec.vocab_size) - 1);
        Batch base;
        base.batch = 1;
        base.len = len;
        for (std::size_t i = 0; i < len; ++i) base.token_ids.push_back(tok(rng));
        base.target_ids.assign(len, 1);
        base.loss_mask.assign(len, 1.0);
        for (bool training : {false, true}) {
            // Same noise stream for the reference and every perturbed run.
            auto run = [&](const Batch& bt) {
                std::mt19937_64 g(seed + 1000);
                return forward(spec, mp, bt, ForwardContext{training, &g}).logits;
            };
            const Tensor ref = run(base);
            const std::size_t v = spec.vocab_size;
            for (std::size_t t = 0; t < len; ++t) {
                Batch pert = base;
                pert.token_ids[t] = 1 + pert.token_ids[t] % static_cast<int>(v - 1);
                const Tensor y = run(pert);
                ++checks;
                if (std::memcmp(ref.data().data(), y.data().data(), t * v * sizeof(double)) != 0) ++violations;
            }
        }
    }
    const double secs = since(t0);
    return {{3, "causal decoder: earlier outputs bit-identical under perturbation (l 16, b 4)",
             violations == 0 && secs < 10.0,
             std::to_string(checks - violations) + "/" + std::to_string(checks) + " perturbations clean, " +
                 fmt_g(secs) + " s",
             secs}};
}

std::vector<PropertyResult> check_sortcut_dense() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    NoGradGuard ng;
    for (std::size_t len : {std::size_t{8}, std::size_t{16}}) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            std::mt19937_64 rng(seed * 31 + len);
            const std::size_t b = 2 + 2 * (seed % 2), nb = len / b, dh = 5;
            std::vector<std::size_t> perm(nb);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            std::shuffle(perm.begin(), perm.end(), rng);
            const Tensor q = randn({len, dh}, rng), k = randn({len, dh}, rng), v = randn({len, dh}, rng);
            const Tensor y1 = sortcut_attention(q, k, v, hard_sort(perm, false), b, nb).y;
            const Tensor y2 = dense_attention(q, k, v, false).y;
            worst = std::max(worst, max_abs_diff(y1, y2));
        }
    }
    return {{4, "sortcut with hard permutation and full budget equals dense attention", worst <= 1e-10,
             "max |diff| = " + fmt_g(worst) + " over l in {8,16}, 10 seeds", since(t0)}};
}

std::vector<PropertyResult> check_identity_sort() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    NoGradGuard ng;
    std::size_t cases = 0;
    for (std::size_t len : {std::size_t{8}, std::size_t{16}, std::size_t{24}}) {
        for (std::size_t b : {std::size_t{2}, std::size_t{4}}) {
            for (bool causal : {false, true}) {
                for (std::uint64_t seed = 0; seed < 5; ++seed) {
                    std::mt19937_64 rng(seed * 97 + len * 7 + b);
                    const std::size_t nb = len / b, dh = 4;
                    std::vector<std::size_t> id(nb);
                    std::iota(id.begin(), id.end(), std::size_t{0});
                    const Tensor q = randn({2, len, dh}, rng), k = randn({2, len, dh}, rng),
                                 v = randn({2, len, dh}, rng);
                    const Tensor y1 = sinkhorn_attention_head(q, k, v, hard_sort(id, causal), b, {causal, false}).y;
                    const Tensor y2 = local_block_attention(q, k, v, b, causal).y;
                    worst = std::max(worst, max_abs_diff(y1, y2));
                    ++cases;
                }
            }
        }
    }
    return {{5, "identity sort: sinkhorn attention equals local block attention", worst <= 1e-10,
             "max |diff| = " + fmt_g(worst) + " over " + std::to_string(cases) + " cases", since(t0)}};
}

std::vector<PropertyResult> check_memory_footnote() {
    std::vector<PropertyResult> out;
    auto t0 = Clock::now();
    AttentionConfig cfg;
    cfg.variant = AttentionVariant::sinkhorn;
    cfg.block_size = 64;
    const MemoryReport r = memory_account(cfg, 1024);
    const std::size_t measured = instrumented_entries(cfg, 1024);
    out.push_back({6, "paper-formula memory ratio (l 1024, b 64) in [236, 245]",
                   r.ratio_paper_formula >= 236.0 && r.ratio_paper_formula <= 245.0,
                   "ratio " + fmt_g(r.ratio_paper_formula) + " (" + std::to_string(r.dense_entries) + " / " +
                       std::to_string(r.paper_formula_units) + ")",
                   since(t0)});
    out.push_back({6, "actual-entry memory ratio (l 1024, b 64) within 7.98 +- 0.02",
                   std::abs(r.ratio_actual - 7.98) <= 0.02,
                   "ratio " + fmt_g(r.ratio_actual) + " (" + std::to_string(r.dense_entries) + " / " +
                       std::to_string(r.score_entries) + ")",
                   since(t0)});
    out.push_back({6, "closed-form sinkhorn entries match an instrumented forward pass", measured == r.score_entries,
                   "closed form " + std::to_string(r.score_entries) + ", instrumented " + std::to_string(measured),
                   since(t0)});

    t0 = Clock::now();
    std::mt19937_64 rng(2024);
    std::size_t matched = 0, total = 0;
    std::string first_bad;
    const AttentionVariant variants[] = {AttentionVariant::dense, AttentionVariant::local, AttentionVariant::sinkhorn,
                                         AttentionVariant::sortcut, AttentionVariant::mixture};
    for (int shape = 0; shape < 10; ++shape) {
        std::uniform_int_distribution<std::size_t> pick_b(1, 8), pick_nb(1, 8);
        AttentionConfig c;
        c.block_size = pick_b(rng);
        const std::size_t nb = pick_nb(rng), len = c.block_size * nb;
        c.sortcut_budget = std::uniform_int_distribution<std::size_t>(1, nb)(rng);
        c.summed_logits = shape % 3 == 2;
        for (AttentionVariant v : variants) {
            c.variant = v;
            const std::size_t closed = memory_account(c, len).score_entries;
            const std::size_t got = instrumented_entries(c, len, rng());
            ++total;
            if (closed == got) {
                ++matched;
            } else if (first_bad.empty()) {
                first_bad = "; first mismatch " + std::string(to_string(v)) + " l=" + std::to_string(len) +
                            " b=" + std::to_string(c.block_size);
            }
        }
    }
    out.push_back({6, "closed-form entries match instrumented counts on 10 random shapes x 5 variants",
                   matched == total, std::to_string(matched) + "/" + std::to_string(total) + " match" + first_bad,
                   since(t0)});
    return out;
}

std::vector<PropertyResult> run_selftest(const std::vector<int>& criteria) {
    using Suite = std::vector<PropertyResult> (*)();
    const std::pair<int, Suite> suites[] = {{1, check_doubly_stochastic}, {2, check_gradients},
                                            {3, check_causality},         {4, check_sortcut_dense},
                                            {5, check_identity_sort},     {6, check_memory_footnote}};
    std::vector<PropertyResult> out;
    for (const auto& [id, fn] : suites) {
        if (!criteria.empty() && std::find(criteria.begin(), criteria.end(), id) == criteria.end()) continue;
        try {
            for (auto& r : fn()) out.push_back(std::move(r));
        } catch (const std::exception& e) {
            out.push_back({id, "suite raised an exception", false, e.what(), 0.0});
        }
    }
    return out;
}

bool print_results(std::ostream& os, const std::vector<PropertyResult>& results) {
    bool all = true;
    for (const auto& r : results) {
        all = all && r.passed;
        os << (r.passed ? "PASS" : "FAIL") << " [" << r.criterion << "] " << r.name << ": " << r.detail << '\n';
    }
    return all;
}

}  // namespace ssa
