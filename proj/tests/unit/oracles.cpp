#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace oracle {

Mat to_mat(const ssa::Tensor& t) {
    if (t.rank() != 2) throw std::invalid_argument("to_mat: rank-2 tensor expected");
    const std::size_t r = t.shape()[0], c = t.shape()[1];
    Mat m(r, std::vector<double>(c));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) m[i][j] = t.data()[i * c + j];
    return m;
}

ssa::Tensor from_mat(const Mat& m) {
    std::vector<double> v;
    for (const auto& row : m) v.insert(v.end(), row.begin(), row.end());
    return ssa::Tensor({m.size(), m.empty() ? 0 : m[0].size()}, std::move(v));
}

Mat random_mat(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    Mat m(rows, std::vector<double>(cols));
    for (auto& row : m)
        for (auto& x : row) x = d(rng);
    return m;
}

Mat matmul(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b[0].size(); ++j)
            for (std::size_t p = 0; p < b.size(); ++p) c[i][j] += a[i][p] * b[p][j];
    return c;
}

Mat transpose(const Mat& a) {
    Mat t(a[0].size(), std::vector<double>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
    return t;
}

namespace {
void normalize_rows(Mat& p) {
    for (auto& row : p) {
        double s = 0.0;
        for (double x : row) s += x;
        for (double& x : row) x /= s;
    }
}
}  // namespace

Mat sinkhorn(const Mat& r, double tau, int iters) {
    const std::size_t n = r.size();
    Mat p(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) p[i][j] = std::exp(r[i][j] / tau);
    for (int it = 0; it < iters; ++it) {
        normalize_rows(p);
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += p[i][j];
            for (std::size_t i = 0; i < n; ++i) p[i][j] /= s;
        }
    }
    return p;
}

Mat causal_sinkhorn(const Mat& r, double tau, int iters) {
    const std::size_t n = r.size();
    Mat p(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) p[i][j] = std::exp(r[i][j] / tau);
    for (int it = 0; it < iters; ++it) {
        normalize_rows(p);
        Mat q = p;
        for (std::size_t j = 0; j < n; ++j) {
            double prefix = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                prefix += p[i][j];
                if (j <= i) q[i][j] = p[i][j] / prefix;
            }
        }
        p = q;
    }
    if (iters > 0) normalize_rows(p);
    return p;
}

std::vector<double> slot_attention(const std::vector<double>& q, const Mat& keys, const Mat& values, double scale) {
    std::vector<double> logits(keys.size());
    for (std::size_t s = 0; s < keys.size(); ++s) {
        double dot = 0.0;
        for (std::size_t d = 0; d < q.size(); ++d) dot += q[d] * keys[s][d];
        logits[s] = dot * scale;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& l : logits) z += (l = std::exp(l - mx));
    std::vector<double> out(values[0].size(), 0.0);
    for (std::size_t s = 0; s < keys.size(); ++s)
        for (std::size_t d = 0; d < out.size(); ++d) out[d] += logits[s] / z * values[s][d];
    return out;
}

Mat dense_attention(const Mat& q, const Mat& k, const Mat& v, bool causal) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
    Mat out;
    for (std::size_t i = 0; i < q.size(); ++i) {
        const std::size_t n = causal ? i + 1 : k.size();
        out.push_back(slot_attention(q[i], Mat(k.begin(), k.begin() + n), Mat(v.begin(), v.begin() + n), scale));
    }
    return out;
}

Mat block_local_attention(const Mat& q, const Mat& k, const Mat& v, std::size_t b, bool causal) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
    Mat out;
    for (std::size_t i = 0; i < q.size(); ++i) {
        const std::size_t start = i / b * b;
        const std::size_t end = causal ? i + 1 : start + b;
        out.push_back(
            slot_attention(q[i], Mat(k.begin() + start, k.begin() + end), Mat(v.begin() + start, v.begin() + end), scale));
    }
    return out;
}

double cross_entropy(const Mat& logits, const std::vector<int>& targets, const std::vector<double>& mask) {
    double total = 0.0, weight = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        double z = 0.0;
        for (double l : logits[i]) z += std::exp(l);
        total += mask[i] * (std::log(z) - logits[i][static_cast<std::size_t>(targets[i])]);
        weight += mask[i];
    }
    return total / weight;
}

std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i)
        for (std::size_t j = 1; j <= b.size(); ++j)
            d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    return d[a.size()][b.size()];
}

double max_abs_diff(const Mat& a, const Mat& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
    return m;
}

double fd_abs_error(const std::function<ssa::Tensor()>& f, std::vector<ssa::Tensor> params, double step) {
    for (auto& p : params) {
        p.zero_grad();
        p.set_requires_grad(true);
    }
    ssa::backward(f());
    double worst = 0.0;
    ssa::NoGradGuard no_grad;
    for (auto& p : params) {
        const std::vector<double> g(p.grad().begin(), p.grad().end());
        auto w = p.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double saved = w[i];
            w[i] = saved + step;
            const double up = f().item();
            w[i] = saved - step;
            const double down = f().item();
            w[i] = saved;
            worst = std::max(worst, std::abs(g[i] - (up - down) / (2 * step)));
        }
    }
    return worst;
}

}  // namespace oracle
