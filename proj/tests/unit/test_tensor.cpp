#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ssa/tensor.hpp"

using namespace ssa;

namespace {
void check_close(std::span<const double> got, std::initializer_list<double> want, double tol = 1e-12) {
    REQUIRE(got.size() == want.size());
    std::size_t i = 0;
    for (double w : want) CHECK(got[i++] == doctest::Approx(w).epsilon(tol));
}
}  // namespace

TEST_SUITE("tensor_core") {
    TEST_CASE("matmul by identity returns the left operand") {
        const Tensor y = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{1, 0}, {0, 1}}));
        CHECK(y.shape() == Shape{2, 2});
        check_close(y.data(), {1, 2, 3, 4});
    }

    TEST_CASE("row softmax of equal logits is uniform") { check_close(softmax(Tensor::matrix({{0, 0}})).data(), {0.5, 0.5}); }

    TEST_CASE("cumulative sum along axis 0") {
        const Tensor y = cumsum(Tensor::matrix({{1}, {2}, {3}}), 0);
        check_close(y.data(), {1, 3, 6});
    }

    TEST_CASE("gradient of a sum of squares") {
        Tensor x = Tensor::vector({1, 2, 3}, true);
        backward(sum_all(mul(x, x)));
        check_close(x.grad(), {2, 4, 6});
    }

    TEST_CASE("gradient of logsumexp is the softmax") {
        Tensor x = Tensor::vector({0, 0}, true);
        backward(logsumexp(x, 0));
        check_close(x.grad(), {0.5, 0.5});
    }

    TEST_CASE("backward rejects a non-scalar loss") {
        Tensor x = Tensor::vector({1, 2}, true);
        CHECK_THROWS(backward(mul(x, x)));
        Tape::current().clear();
    }

    TEST_CASE("shape errors name the primitive and both shapes") {
        try {
            matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
            FAIL("expected a shape error");
        } catch (const ShapeError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("matmul") != std::string::npos);
            CHECK(msg.find("[2, 3]") != std::string::npos);
        }
        CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);
    }

    TEST_CASE("finite differences: exact quadratic, constant function") {
        std::mt19937_64 rng(1);
        const Tensor x = oracle::from_mat(oracle::random_mat(1, 3, rng));
        CHECK(finite_diff_check([](const Tensor& t) { return sum_all(mul(t, t)); }, x) < 1e-6);
        CHECK(finite_diff_check([](const Tensor&) { return Tensor::scalar(3.0); }, x) == 0.0);
    }

    TEST_CASE("composite graph gradient agrees with finite differences") {
        std::mt19937_64 rng(2);
        const Tensor x = oracle::from_mat(oracle::random_mat(4, 5, rng));
        const Tensor w = oracle::from_mat(oracle::random_mat(5, 3, rng)).clone_leaf(true);
        const Tensor g = oracle::from_mat(oracle::random_mat(1, 5, rng));
        auto f = [&](const Tensor& t) {
            Tensor h = layer_norm(t, reshape(g, {5}), Tensor::zeros({5}));
            h = concat({sigmoid(h), relu(h)}, 0);
            Tensor z = matmul(slice(h, 0, 1, 7), w);
            z = divide(exp(scale(z, 0.3)), add_scalar(mul(z, z), 1.0));
            return add(mean_all(log(softmax(z))), sum_all(logcumsumexp(z, 0)));
        };
        CHECK(finite_diff_check(f, x) < 1e-4);
        CHECK(finite_diff_check([&] { return f(x); }, std::vector<Tensor>{w}) < 1e-4);
    }

    TEST_CASE("matmul matches the loop oracle across kernel paths") {
        std::mt19937_64 rng(3);
        // Small products use the plain loops, large ones the BLAS path.
        for (auto [m, k, n] : {std::tuple{3, 4, 5}, std::tuple{40, 50, 30}}) {
            const auto a = oracle::random_mat(m, k, rng), b = oracle::random_mat(k, n, rng);
            const auto want = oracle::matmul(a, b);
            CHECK(oracle::max_abs_diff(oracle::to_mat(matmul(oracle::from_mat(a), oracle::from_mat(b))), want) < 1e-12);
            CHECK(oracle::max_abs_diff(
                      oracle::to_mat(matmul(oracle::from_mat(a), oracle::from_mat(oracle::transpose(b)), true)), want) <
                  1e-12);
        }
    }

    TEST_CASE("batched matmul gradients agree with finite differences") {
        std::mt19937_64 rng(4);
        for (std::size_t m : {std::size_t{3}, std::size_t{40}}) {
            const Tensor a = Tensor({2, m, 30}, oracle::random_mat(1, 2 * m * 30, rng)[0]).clone_leaf(true);
            const Tensor b = Tensor({2, 20, 30}, oracle::random_mat(1, 2 * 20 * 30, rng)[0]).clone_leaf(true);
            const Tensor shared = oracle::from_mat(oracle::random_mat(30, 20, rng)).clone_leaf(true);
            const Tensor w = Tensor({2, m, 20}, oracle::random_mat(1, 2 * m * 20, rng)[0]);
            auto f = [&] { return sum_all(mul(add(matmul(a, b, true), matmul(a, shared)), w)); };
            CHECK(finite_diff_check(f, {a, b, shared}) < 1e-5);
        }
    }

    TEST_CASE("broadcast add reduces gradients onto the smaller operand") {
        Tensor a = Tensor::zeros({2, 3}, true);
        Tensor b = Tensor::vector({1, 2, 3}, true);
        backward(sum_all(add(a, b)));
        check_close(b.grad(), {2, 2, 2});
        check_close(a.grad(), {1, 1, 1, 1, 1, 1});
    }

    TEST_CASE("logcumsumexp matches log of cumulative exp sums") {
        const Tensor x = Tensor::matrix({{0.5, -1.0}, {2.0, 0.0}, {-3.0, 1.0}});
        const Tensor y = logcumsumexp(x, 0);
        check_close(y.data(), {0.5, -1.0, std::log(std::exp(0.5) + std::exp(2.0)), std::log(std::exp(-1.0) + 1.0),
                               std::log(std::exp(0.5) + std::exp(2.0) + std::exp(-3.0)),
                               std::log(std::exp(-1.0) + 1.0 + std::exp(1.0))});
    }

    TEST_CASE("masked_fill pins selected entries and stops their gradient") {
        Tensor x = Tensor::matrix({{1, 2}, {3, 4}}, true);
        const Mask m{{2, 2}, {0, 1, 0, 0}};
        const Tensor y = masked_fill(x, m, kMaskedLogit);
        check_close(y.data(), {1, kMaskedLogit, 3, 4});
        backward(sum_all(y));
        check_close(x.grad(), {1, 0, 1, 1});
        CHECK(std::exp(kMaskedLogit) == 0.0);
    }

    TEST_CASE("gather_rows accumulates gradient for repeated ids") {
        Tensor table = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}, true);
        const std::vector<int> ids{2, 0, 2};
        const Tensor g = gather_rows(table, ids);
        check_close(g.data(), {5, 6, 1, 2, 5, 6});
        backward(sum_all(g));
        check_close(table.grad(), {1, 1, 0, 0, 2, 2});
    }

    TEST_CASE("layer_norm matches the mean/variance oracle") {
        const Tensor x = Tensor::matrix({{1, 2, 3, 6}});
        const Tensor y = layer_norm(x, Tensor::full({4}, 2.0), Tensor::full({4}, 0.5), 0.0);
        const double mean = 3.0, var = (4 + 1 + 0 + 9) / 4.0, sd = std::sqrt(var);
        check_close(y.data(), {2 * (1 - mean) / sd + 0.5, 2 * (2 - mean) / sd + 0.5, 2 * (3 - mean) / sd + 0.5,
                               2 * (6 - mean) / sd + 0.5});
    }

    TEST_CASE("permute and reshape round-trip values") {
        std::mt19937_64 rng(5);
        const Tensor x = Tensor({2, 3, 4}, oracle::random_mat(1, 24, rng)[0]);
        const Tensor y = permute(permute(x, {2, 0, 1}), {1, 2, 0});
        CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
        CHECK(permute(x, {2, 0, 1}).shape() == Shape{4, 2, 3});
        CHECK(permute(x, {0, 2, 1}).at({1, 3, 2}) == x.at({1, 2, 3}));
        CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);
    }

    TEST_CASE("no-grad guard records nothing") {
        Tensor x = Tensor::vector({1, 2}, true);
        {
            NoGradGuard g;
            const Tensor y = mul(x, x);
            CHECK_FALSE(y.requires_grad());
        }
        CHECK(Tape::current().size() == 0);
    }
}
