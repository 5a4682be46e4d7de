#pragma once
// Straight-line reference computations on plain row-major vectors. They share
// no code with the library and favour obviousness over speed.

#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "ssa/tensor.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const ssa::Tensor& t);  // rank-2 tensor
ssa::Tensor from_mat(const Mat& m);
Mat random_mat(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev = 1.0);

Mat matmul(const Mat& a, const Mat& b);
Mat transpose(const Mat& a);

// Probability-space Sinkhorn: P = exp(R / tau), then k x (rows, columns).
Mat sinkhorn(const Mat& r, double tau, int iters);
// Lower-triangular support; column step over rows <= i; closing row step.
Mat causal_sinkhorn(const Mat& r, double tau, int iters);

// softmax over an explicit list of (key, value) slots for one query row.
std::vector<double> slot_attention(const std::vector<double>& q, const Mat& keys, const Mat& values, double scale);

Mat dense_attention(const Mat& q, const Mat& k, const Mat& v, bool causal);
Mat block_local_attention(const Mat& q, const Mat& k, const Mat& v, std::size_t b, bool causal);

double cross_entropy(const Mat& logits, const std::vector<int>& targets, const std::vector<double>& mask);

// Full-table edit distance.
std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b);

double max_abs_diff(const Mat& a, const Mat& b);

// Largest |analytic - central difference| over the parameters' coordinates.
// For gradients so small that a relative error only measures round-off.
double fd_abs_error(const std::function<ssa::Tensor()>& f, std::vector<ssa::Tensor> params, double step = 1e-5);

}  // namespace oracle
