#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ssa/sinkhorn.hpp"

using namespace ssa;

namespace {
SinkhornConfig plain(double tau, int iters) {
    SinkhornConfig c;
    c.temperature = tau;
    c.n_iters = iters;
    c.gumbel = false;
    return c;
}
}  // namespace

TEST_SUITE("sinkhorn_ops") {
    TEST_CASE("gumbel noise: determinism and Euler-Mascheroni mean") {
        const Tensor a = gumbel_noise({4, 4}, std::uint64_t{9});
        const Tensor b = gumbel_noise({4, 4}, std::uint64_t{9});
        CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
        const Tensor big = gumbel_noise({100000}, std::uint64_t{1});
        double mean = 0.0;
        for (double v : big.data()) mean += v;
        mean /= 100000.0;
        CHECK(std::abs(mean - 0.5772156649) < 0.01);
    }

    TEST_CASE("disabled noise equals an explicit zero-noise draw") {
        const Tensor r = Tensor::matrix({{0.3, -1.0}, {2.0, 0.1}});
        const SinkhornConfig cfg = plain(0.75, 3);
        const Tensor a = sinkhorn_normalize(r, cfg).logits;
        const Tensor b = sinkhorn_normalize(r, cfg, Tensor::zeros({2, 2})).logits;
        CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    }

    TEST_CASE("symmetric zero logits normalise to one half") {
        const Tensor p = sinkhorn_normalize(Tensor::zeros({2, 2}), plain(1.0, 1)).probabilities();
        for (double v : p.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
    }

    TEST_CASE("one row step already balances log([[2,1],[1,2]])") {
        const Tensor r = Tensor::matrix({{std::log(2.0), 0.0}, {0.0, std::log(2.0)}});
        const Tensor p = sinkhorn_normalize(r, plain(1.0, 1)).probabilities();
        CHECK(p.at({0, 0}) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
        CHECK(p.at({0, 1}) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
        CHECK(p.at({1, 0}) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
        CHECK(p.at({1, 1}) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    }

    TEST_CASE("low temperature sharpens a dominant diagonal") {
        const Tensor p = sinkhorn_normalize(Tensor::matrix({{5, 0}, {0, 5}}), plain(0.05, 20)).probabilities();
        CHECK(p.at({0, 0}) >= 0.99);
        CHECK(p.at({1, 1}) >= 0.99);
    }

    TEST_CASE("log-domain result matches the probability-space oracle") {
        std::mt19937_64 rng(7);
        for (int iters : {1, 3, 7}) {
            const auto r = oracle::random_mat(6, 6, rng);
            const auto want = oracle::sinkhorn(r, 0.7, iters);
            const auto got = oracle::to_mat(sinkhorn_normalize(oracle::from_mat(r), plain(0.7, iters)).probabilities());
            CHECK(oracle::max_abs_diff(got, want) < 1e-12);
        }
    }

    TEST_CASE("zero iterations return the scaled logits unnormalised") {
        const Tensor r = Tensor::matrix({{1, 2}, {3, 4}});
        const Tensor noise = Tensor::matrix({{0.5, 0}, {0, -0.5}});
        const Tensor l = sinkhorn_normalize(r, plain(0.5, 0), noise).logits;
        CHECK(l.at({0, 0}) == doctest::Approx(3.0));
        CHECK(l.at({0, 1}) == doctest::Approx(4.0));
        CHECK(l.at({1, 0}) == doctest::Approx(6.0));
        CHECK(l.at({1, 1}) == doctest::Approx(7.0));
    }

    TEST_CASE("negative iteration counts and non-positive temperatures are rejected") {
        CHECK_THROWS(sinkhorn_normalize(Tensor::zeros({2, 2}), plain(1.0, -1)));
        CHECK_THROWS(sinkhorn_normalize(Tensor::zeros({2, 2}), plain(0.0, 1)));
        CHECK_THROWS_AS(sinkhorn_normalize(Tensor::zeros({2, 3}), plain(1.0, 1)), ShapeError);
    }

    TEST_CASE("row/column deviation shrinks with more iterations on average") {
        double prev = 1e9;
        for (int iters : {1, 2, 5, 10, 20}) {
            double total = 0.0;
            for (std::uint64_t seed = 0; seed < 100; ++seed) {
                std::mt19937_64 rng(seed);
                const Tensor p = sinkhorn_normalize(oracle::from_mat(oracle::random_mat(8, 8, rng)), plain(1.0, iters))
                                     .probabilities();
                double dev = 0.0;
                const Tensor cols = sum(p, 0), rows = sum(p, 1);
                for (double s : cols.data()) dev = std::max(dev, std::abs(s - 1.0));
                for (double s : rows.data()) dev = std::max(dev, std::abs(s - 1.0));
                total += dev;
            }
            CHECK(total <= prev + 1e-12);
            prev = total;
        }
    }

    TEST_CASE("minimum diagonal mass grows as temperature falls") {
        const Tensor r = Tensor::matrix({{2.0, 0.5, 0.1}, {0.3, 2.0, 0.4}, {0.2, 0.6, 2.0}});
        double prev = 0.0;
        for (double tau : {1.0, 0.5, 0.1, 0.05}) {
            const Tensor p = sinkhorn_normalize(r, plain(tau, 20)).probabilities();
            const double m = std::min({p.at({0, 0}), p.at({1, 1}), p.at({2, 2})});
            CHECK(m >= prev);
            prev = m;
        }
    }

    TEST_CASE("gradients agree with finite differences for 1 and 5 iterations") {
        std::mt19937_64 rng(8);
        const Tensor c = oracle::from_mat(oracle::random_mat(5, 5, rng));
        const Tensor r = oracle::from_mat(oracle::random_mat(5, 5, rng));
        const Tensor noise = gumbel_noise({5, 5}, rng);
        for (int iters : {1, 5}) {
            SinkhornConfig cfg = plain(0.75, iters);
            CHECK(finite_diff_check([&](const Tensor& x) { return sum_all(mul(sinkhorn_normalize(x, cfg, noise).probabilities(), c)); }, r) < 1e-4);
            CHECK(finite_diff_check([&](const Tensor& x) { return sum_all(mul(causal_sinkhorn_normalize(x, cfg, noise).probabilities(), c)); }, r) < 1e-4);
        }
    }

    TEST_CASE("causal balancing of two blocks") {
        const Tensor p = causal_sinkhorn_normalize(Tensor::zeros({2, 2}), plain(1.0, 5)).probabilities();
        // Frozen from the probability-space oracle: prefix column steps, closing row step.
        CHECK(p.at({0, 0}) == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(p.at({0, 1}) == 0.0);
        CHECK(p.at({1, 0}) == doctest::Approx(0.08333333333333336).epsilon(1e-12));
        CHECK(p.at({1, 1}) == doctest::Approx(0.9166666666666667).epsilon(1e-12));
    }

    TEST_CASE("causal balancing of three blocks matches the oracle") {
        const Tensor p = causal_sinkhorn_normalize(Tensor::zeros({3, 3}), plain(1.0, 5)).probabilities();
        CHECK(p.at({2, 0}) == doctest::Approx(0.02320883850391952).epsilon(1e-12));
        CHECK(p.at({2, 1}) == doctest::Approx(0.10513282744671223).epsilon(1e-12));
        CHECK(p.at({2, 2}) == doctest::Approx(0.8716583340493682).epsilon(1e-12));
        std::mt19937_64 rng(3);
        for (int iters : {1, 4}) {
            const auto r = oracle::random_mat(5, 5, rng);
            const auto want = oracle::causal_sinkhorn(r, 0.6, iters);
            const auto got =
                oracle::to_mat(causal_sinkhorn_normalize(oracle::from_mat(r), plain(0.6, iters)).probabilities());
            CHECK(oracle::max_abs_diff(got, want) < 1e-12);
        }
    }

    TEST_CASE("single block and strict upper support") {
        const Tensor one = causal_sinkhorn_normalize(Tensor::matrix({{0.7}}), plain(1.0, 3)).probabilities();
        CHECK(one.item() == doctest::Approx(1.0));
        std::mt19937_64 rng(4);
        const Tensor p = causal_sinkhorn_normalize(oracle::from_mat(oracle::random_mat(6, 6, rng, 5.0)), plain(0.3, 7))
                             .probabilities();
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = i + 1; j < 6; ++j) CHECK(p.at({i, j}) < 1e-40);
    }

    TEST_CASE("causal rows never see later rows") {
        std::mt19937_64 rng(5);
        auto r = oracle::random_mat(6, 6, rng);
        const Tensor a = causal_sinkhorn_normalize(oracle::from_mat(r), plain(0.75, 5)).logits;
        for (auto& x : r[4]) x += 3.0;
        const Tensor b = causal_sinkhorn_normalize(oracle::from_mat(r), plain(0.75, 5)).logits;
        for (std::size_t k = 0; k < 4 * 6; ++k) CHECK(a.data()[k] == b.data()[k]);
    }

    TEST_CASE("hard rounding") {
        const Tensor keep = hard_round(Tensor::matrix({{0.9, 0.1}, {0.1, 0.9}}));
        CHECK(std::vector<double>(keep.data().begin(), keep.data().end()) == std::vector<double>{1, 0, 0, 1});
        const Tensor swap = hard_round(Tensor::matrix({{0.1, 0.9}, {0.9, 0.1}}));
        CHECK(std::vector<double>(swap.data().begin(), swap.data().end()) == std::vector<double>{0, 1, 1, 0});
        const Tensor tie = hard_round(Tensor::full({3, 3}, 1.0 / 3.0));
        CHECK(std::vector<double>(tie.data().begin(), tie.data().end()) == std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
        CHECK_THROWS(hard_round(Tensor::zeros({11, 11})));
    }
}
