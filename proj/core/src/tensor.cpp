#include "ssa/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace ssa {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::span<double> Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    if (ssa::numel(shape) != data.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                         std::to_string(ssa::numel(shape)) + " values but " +
                         std::to_string(data.size()) + " were supplied");
    }
    node_ = std::make_shared<Node>();
    node_->op = "leaf";
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = ssa::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
    return Tensor({values.size()}, std::vector<double>(values), requires_grad);
}

Tensor Tensor::from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

const Shape& Tensor::shape() const {
    if (!node_) throw std::logic_error("tensor: use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(int axis) const {
    const auto r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return shape()[static_cast<std::size_t>(a)];
}

std::span<const double> Tensor::data() const {
    if (!node_) throw std::logic_error("tensor: use of undefined tensor");
    return node_->value;
}

std::span<double> Tensor::mutable_data() {
    if (!node_) throw std::logic_error("tensor: use of undefined tensor");
    return node_->value;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return data()[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw ShapeError("at: index rank does not match " + shape_str(s));
    std::size_t flat = 0;
    std::size_t k = 0;
    for (auto i : index) {
        if (i >= s[k]) throw ShapeError("at: index out of range for " + shape_str(s));
        flat = flat * s[k] + i;
        ++k;
    }
    return data()[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->value, false); }
Tensor Tensor::clone_leaf(bool requires_grad) const { return Tensor(shape(), node_->value, requires_grad); }

bool Mask::any() const {
    return std::any_of(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; });
}

// ---- Tape -----------------------------------------------------------------

namespace {
thread_local bool g_grad_enabled = true;
}

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(NodePtr node) { nodes_.push_back(std::move(node)); }

void Tape::clear() { nodes_.clear(); }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) throw std::logic_error("backward: loss does not depend on any tensor requiring grad");
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (n.grad.empty() || !n.backward) continue;
        n.backward(n);
    }
    clear();
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(std::string_view op, Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
                   BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->op = std::string(op);
    node->shape = std::move(shape);
    node->value = std::move(value);
    const bool track = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                                     [](const Tensor& p) { return p.requires_grad(); });
    if (track) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node_ptr());
        node->backward = std::move(backward);
        Tape::current().record(node);
    }
    return Tensor::from_node(std::move(node));
}

Tensor make_result(std::string_view op, Shape shape, std::vector<double> value, std::initializer_list<Tensor> parents,
                   BackwardFn backward) {
    return make_result(op, std::move(shape), std::move(value), std::vector<Tensor>(parents), std::move(backward));
}

// ---- helpers --------------------------------------------------------------

namespace {

std::size_t normalize_axis(int axis, std::size_t rank, std::string_view op) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
    }
    return static_cast<std::size_t>(a);
}

// A tensor viewed as [outer, n, inner] around one axis.
struct AxisView {
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
    v.n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}

Node* parent(Node& self, std::size_t i) { return self.parents[i].get(); }

// Below this many multiply-adds the plain loops beat the BLAS call overhead.
constexpr std::size_t kBlasMinWork = 16384;

bool use_blas(std::size_t m, std::size_t n, std::size_t k) { return m * n * k >= kBlasMinWork; }

int blas_int(std::size_t v) { return static_cast<int>(v); }

// out[r, c] += a[r, k] * b[k, c]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    if (use_blas(m, n, k)) {
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(m), blas_int(n), blas_int(k), 1.0, a,
                    blas_int(k), b, blas_int(n), 1.0, c, blas_int(n));
        return;
    }
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// out[r, c] += sum_k a[r, k] * b[c, k]
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    if (use_blas(m, n, k)) {
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(m), blas_int(n), blas_int(k), 1.0, a,
                    blas_int(k), b, blas_int(k), 1.0, c, blas_int(n));
        return;
    }
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// out[p, q] += sum_r a[r, p] * b[r, q]   (a is r x m, b is r x n)
void gemm_tn(std::size_t m, std::size_t n, std::size_t r, const double* a, const double* b, double* c) {
    if (use_blas(m, n, r)) {
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(m), blas_int(n), blas_int(r), 1.0, a,
                    blas_int(m), b, blas_int(n), 1.0, c, blas_int(n));
        return;
    }
    for (std::size_t row = 0; row < r; ++row) {
        const double* arow = a + row * m;
        const double* brow = b + row * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Flat source offset of every output element for an operand broadcast to `out`.
std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
    const std::size_t r = out.size();
    std::vector<std::size_t> stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = r; i-- > 0;) {
        const std::size_t si = i + src.size() >= r ? i + src.size() - r : SIZE_MAX;
        if (si != SIZE_MAX) {
            stride[i] = src[si] == 1 ? 0 : s;
            s *= src[si];
        }
    }
    std::vector<std::size_t> idx(numel(out));
    std::vector<std::size_t> counter(r, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < idx.size(); ++flat) {
        idx[flat] = off;
        for (std::size_t d = r; d-- > 0;) {
            ++counter[d];
            off += stride[d];
            if (counter[d] < out[d]) break;
            off -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    return idx;
}

enum class BinOp { add, sub, mul, div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, std::string_view name) {
    const Shape out_shape = a.shape() == b.shape() ? a.shape() : broadcast_shape(a.shape(), b.shape(), name);
    const std::size_t n = numel(out_shape);
    const bool same = a.shape() == out_shape && b.shape() == out_shape;
    std::vector<std::size_t> ia, ib;
    if (!same) {
        ia = broadcast_index(a.shape(), out_shape);
        ib = broadcast_index(b.shape(), out_shape);
    }
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[same ? i : ia[i]];
        const double y = bv[same ? i : ib[i]];
        switch (op) {
            case BinOp::add: out[i] = x + y; break;
            case BinOp::sub: out[i] = x - y; break;
            case BinOp::mul: out[i] = x * y; break;
            case BinOp::div: out[i] = x / y; break;
        }
    }
    return make_result(name, out_shape, std::move(out), {a, b},
                       [op, same, ia = std::move(ia), ib = std::move(ib)](Node& self) {
                           Node* pa = parent(self, 0);
                           Node* pb = parent(self, 1);
                           const auto& g = self.grad;
                           const std::size_t n = g.size();
                           if (pa->requires_grad) {
                               auto ga = pa->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                   const std::size_t j = same ? i : ia[i];
                                   const std::size_t k = same ? i : ib[i];
                                   switch (op) {
                                       case BinOp::add:
                                       case BinOp::sub: ga[j] += g[i]; break;
                                       case BinOp::mul: ga[j] += g[i] * pb->value[k]; break;
                                       case BinOp::div: ga[j] += g[i] / pb->value[k]; break;
                                   }
                               }
                           }
                           if (pb->requires_grad) {
                               auto gb = pb->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                   const std::size_t j = same ? i : ia[i];
                                   const std::size_t k = same ? i : ib[i];
                                   switch (op) {
                                       case BinOp::add: gb[k] += g[i]; break;
                                       case BinOp::sub: gb[k] -= g[i]; break;
                                       case BinOp::mul: gb[k] += g[i] * pa->value[j]; break;
                                       case BinOp::div: {
                                           const double y = pb->value[k];
                                           gb[k] -= g[i] * pa->value[j] / (y * y);
                                           break;
                                       }
                                   }
                               }
                           }
                       });
}

// Elementwise map whose derivative is expressed through input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, std::string_view name, Fwd fwd, Deriv deriv) {
    const auto av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    return make_result(name, a.shape(), std::move(out), {a}, [deriv](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * deriv(p->value[i], self.value[i]);
    });
}

}  // namespace

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    auto fail = [&] {
        throw ShapeError(std::string("matmul") + (transpose_b ? " (transposed rhs)" : "") + ": cannot multiply " +
                         shape_str(sa) + " by " + shape_str(sb));
    };
    if (sa.size() < 2 || sb.size() < 2) fail();
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t k = sa.back();
    const std::size_t kb = transpose_b ? sb.back() : sb[sb.size() - 2];
    const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
    if (k != kb) fail();

    const bool shared = sb.size() == 2;
    std::size_t batch = 1;
    if (!shared) {
        if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) fail();
        for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
    }
    // A shared right operand lets every leading row fold into one product.
    const std::size_t rows = shared ? numel(sa) / k : m;
    const std::size_t batches = shared ? 1 : batch;

    Shape out_shape(sa.begin(), sa.end() - 1);
    out_shape.push_back(n);
    std::vector<double> out(numel(out_shape), 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t t = 0; t < batches; ++t) {
        const double* at = A + t * rows * k;
        const double* bt = B + (shared ? 0 : t * k * n);
        double* ct = out.data() + t * rows * n;
        if (transpose_b)
            gemm_nt(rows, n, k, at, bt, ct);
        else
            gemm_nn(rows, n, k, at, bt, ct);
    }
    return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                       [rows, batches, k, n, shared, transpose_b](Node& self) {
                           Node* pa = parent(self, 0);
                           Node* pb = parent(self, 1);
                           const double* G = self.grad.data();
                           for (std::size_t t = 0; t < batches; ++t) {
                               const double* gt = G + t * rows * n;
                               const double* at = pa->value.data() + t * rows * k;
                               const double* bt = pb->value.data() + (shared ? 0 : t * k * n);
                               if (pa->requires_grad) {
                                   double* ga = pa->grad_buffer().data() + t * rows * k;
                                   if (transpose_b)
                                       gemm_nn(rows, k, n, gt, bt, ga);  // dA = dC * B
                                   else
                                       gemm_nt(rows, k, n, gt, bt, ga);  // dA = dC * B^T
                               }
                               if (pb->requires_grad) {
                                   double* gb = pb->grad_buffer().data() + (shared ? 0 : t * k * n);
                                   if (transpose_b)
                                       gemm_tn(n, k, rows, gt, at, gb);  // dB = dC^T * A
                                   else
                                       gemm_tn(k, n, rows, at, gt, gb);  // dB = A^T * dC
                               }
                           }
                       });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    const Shape& s = a.shape();
    const std::size_t r = s.size();
    if (axes.size() != r) throw ShapeError("permute: " + std::to_string(axes.size()) + " axes for shape " + shape_str(s));
    std::vector<bool> seen(r, false);
    for (auto ax : axes) {
        if (ax >= r || seen[ax]) throw ShapeError("permute: invalid axis order for shape " + shape_str(s));
        seen[ax] = true;
    }
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
    Shape out_shape(r);
    std::vector<std::size_t> stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = s[axes[i]];
        stride[i] = in_stride[axes[i]];
    }
    const std::size_t n = numel(s);
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> counter(r, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        src[flat] = off;
        for (std::size_t d = r; d-- > 0;) {
            ++counter[d];
            off += stride[d];
            if (counter[d] < out_shape[d]) break;
            off -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    const auto av = a.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = av[src[i]];
    return make_result("permute", std::move(out_shape), std::move(out), {a}, [src = std::move(src)](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        for (std::size_t i = 0; i < src.size(); ++i) gp[src[i]] += self.grad[i];
    });
}

Tensor transpose(const Tensor& a) {
    const std::size_t r = a.rank();
    if (r < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(a.shape()));
    std::vector<std::size_t> axes(r);
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    std::swap(axes[r - 1], axes[r - 2]);
    return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }
Tensor divide(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::div, "divide"); }

Tensor exp(const Tensor& a) {
    return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
    return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                 [](double, double y) { return y * (1.0 - y); });
}

Tensor negate(const Tensor& a) {
    return unary(a, "negate", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(a, "scale", [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(a, "add_scalar", [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor softmax(const Tensor& a) {
    if (a.rank() == 0) throw ShapeError("softmax: scalar input");
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.numel() / n;
    const auto av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * n;
        double* y = out.data() + r * n;
        const double mx = *std::max_element(x, x + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += (y[j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < n; ++j) y[j] /= s;
    }
    return make_result("softmax", a.shape(), std::move(out), {a}, [rows, n](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * n;
            const double* g = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) gp[r * n + j] += y[j] * (g[j] - dot);
        }
    });
}

Tensor logsumexp(const Tensor& a, int axis, bool keepdim) {
    const std::size_t ax = normalize_axis(axis, a.rank(), "logsumexp");
    const AxisView v = axis_view(a.shape(), ax);
    const auto av = a.data();
    std::vector<double> out(v.outer * v.inner);
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
            const double* x = av.data() + o * v.n * v.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < v.n; ++k) mx = std::max(mx, x[k * v.inner]);
            double s = 0.0;
            for (std::size_t k = 0; k < v.n; ++k) s += std::exp(x[k * v.inner] - mx);
            out[o * v.inner + i] = mx + std::log(s);
        }
    }
    Shape out_shape = a.shape();
    if (keepdim)
        out_shape[ax] = 1;
    else
        out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    if (out_shape.empty()) out_shape = {1};
    return make_result("logsumexp", std::move(out_shape), std::move(out), {a}, [v](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        for (std::size_t o = 0; o < v.outer; ++o) {
            for (std::size_t i = 0; i < v.inner; ++i) {
                const double lse = self.value[o * v.inner + i];
                const double g = self.grad[o * v.inner + i];
                for (std::size_t k = 0; k < v.n; ++k) {
                    const std::size_t idx = o * v.n * v.inner + k * v.inner + i;
                    gp[idx] += g * std::exp(p->value[idx] - lse);
                }
            }
        }
    });
}

Tensor logcumsumexp(const Tensor& a, int axis) {
    const std::size_t ax = normalize_axis(axis, a.rank(), "logcumsumexp");
    const AxisView v = axis_view(a.shape(), ax);
    const auto av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
            const std::size_t base = o * v.n * v.inner + i;
            double run = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < v.n; ++k) {
                const double x = av[base + k * v.inner];
                const double hi = std::max(run, x);
                run = hi + std::log(std::exp(run - hi) + std::exp(x - hi));
                out[base + k * v.inner] = run;
            }
        }
    }
    return make_result("logcumsumexp", a.shape(), std::move(out), {a}, [v](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        // d out[m] / d x[k] = exp(x[k] - out[m]) for m >= k.
        for (std::size_t o = 0; o < v.outer; ++o) {
            for (std::size_t i = 0; i < v.inner; ++i) {
                const std::size_t base = o * v.n * v.inner + i;
                for (std::size_t k = 0; k < v.n; ++k) {
                    const double x = p->value[base + k * v.inner];
                    double acc = 0.0;
                    for (std::size_t m = k; m < v.n; ++m) {
                        acc += self.grad[base + m * v.inner] * std::exp(x - self.value[base + m * v.inner]);
                    }
                    gp[base + k * v.inner] += acc;
                }
            }
        }
    });
}

Tensor cumsum(const Tensor& a, int axis) {
    const std::size_t ax = normalize_axis(axis, a.rank(), "cumsum");
    const AxisView v = axis_view(a.shape(), ax);
    const auto av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
            const std::size_t base = o * v.n * v.inner + i;
            double run = 0.0;
            for (std::size_t k = 0; k < v.n; ++k) out[base + k * v.inner] = (run += av[base + k * v.inner]);
        }
    }
    return make_result("cumsum", a.shape(), std::move(out), {a}, [v](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        for (std::size_t o = 0; o < v.outer; ++o) {
            for (std::size_t i = 0; i < v.inner; ++i) {
                const std::size_t base = o * v.n * v.inner + i;
                double run = 0.0;
                for (std::size_t k = v.n; k-- > 0;) gp[base + k * v.inner] += (run += self.grad[base + k * v.inner]);
            }
        }
    });
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
    const std::size_t ax = normalize_axis(axis, a.rank(), "sum");
    const AxisView v = axis_view(a.shape(), ax);
    const auto av = a.data();
    std::vector<double> out(v.outer * v.inner, 0.0);
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t k = 0; k < v.n; ++k)
            for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += av[(o * v.n + k) * v.inner + i];
    Shape out_shape = a.shape();
    if (keepdim)
        out_shape[ax] = 1;
    else
        out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    if (out_shape.empty()) out_shape = {1};
    return make_result("sum", std::move(out_shape), std::move(out), {a}, [v](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t k = 0; k < v.n; ++k)
                for (std::size_t i = 0; i < v.inner; ++i) gp[(o * v.n + k) * v.inner + i] += self.grad[o * v.inner + i];
    });
}

Tensor sum_all(const Tensor& a) {
    const auto av = a.data();
    const double s = std::accumulate(av.begin(), av.end(), 0.0);
    return make_result("sum_all", {1}, {s}, {a}, [](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        for (auto& g : gp) g += self.grad[0];
    });
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    const std::size_t ax = normalize_axis(axis, s0.size(), "concat");
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == s0[i];
        if (!ok) throw ShapeError("concat: shapes " + shape_str(s0) + " and " + shape_str(s) + " differ off axis " + std::to_string(ax));
        widths.push_back(s[ax]);
        total += s[ax];
    }
    Shape out_shape = s0;
    out_shape[ax] = total;
    const AxisView v = axis_view(out_shape, ax);
    std::vector<double> out(numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t t = 0; t < parts.size(); ++t) {
        const auto pv = parts[t].data();
        const std::size_t w = widths[t] * v.inner;
        for (std::size_t o = 0; o < v.outer; ++o)
            std::copy_n(pv.data() + o * w, w, out.data() + o * v.n * v.inner + offset * v.inner);
        offset += widths[t];
    }
    return make_result("concat", std::move(out_shape), std::move(out), parts, [v, widths](Node& self) {
        std::size_t offset = 0;
        for (std::size_t t = 0; t < widths.size(); ++t) {
            Node* p = parent(self, t);
            const std::size_t w = widths[t] * v.inner;
            if (p->requires_grad) {
                auto gp = p->grad_buffer();
                for (std::size_t o = 0; o < v.outer; ++o) {
                    const double* src = self.grad.data() + o * v.n * v.inner + offset * v.inner;
                    double* dst = gp.data() + o * w;
                    for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
                }
            }
            offset += widths[t];
        }
    });
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = normalize_axis(axis, a.rank(), "slice");
    const Shape& s = a.shape();
    if (begin > end || end > s[ax]) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                         std::to_string(ax) + " of " + shape_str(s));
    }
    const AxisView v = axis_view(s, ax);
    Shape out_shape = s;
    out_shape[ax] = end - begin;
    const std::size_t w = (end - begin) * v.inner;
    std::vector<double> out(numel(out_shape));
    const auto av = a.data();
    for (std::size_t o = 0; o < v.outer; ++o)
        std::copy_n(av.data() + o * v.n * v.inner + begin * v.inner, w, out.data() + o * w);
    return make_result("slice", std::move(out_shape), std::move(out), {a}, [v, begin, w](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        for (std::size_t o = 0; o < v.outer; ++o) {
            double* dst = gp.data() + o * v.n * v.inner + begin * v.inner;
            const double* src = self.grad.data() + o * w;
            for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
        }
    });
}

Tensor masked_fill(const Tensor& a, const Mask& mask, double value) {
    if (mask.bits.size() != numel(mask.shape)) throw ShapeError("masked_fill: mask bits do not match mask shape");
    const Shape out_shape = broadcast_shape(a.shape(), mask.shape, "masked_fill");
    if (out_shape != a.shape()) {
        throw ShapeError("masked_fill: mask " + shape_str(mask.shape) + " does not broadcast onto " + shape_str(a.shape()));
    }
    std::vector<std::uint8_t> full(a.numel());
    if (mask.shape == a.shape()) {
        full = mask.bits;
    } else {
        const auto idx = broadcast_index(mask.shape, a.shape());
        for (std::size_t i = 0; i < full.size(); ++i) full[i] = mask.bits[idx[i]];
    }
    const auto av = a.data();
    std::vector<double> out(av.begin(), av.end());
    for (std::size_t i = 0; i < out.size(); ++i)
        if (full[i]) out[i] = value;
    return make_result("masked_fill", a.shape(), std::move(out), {a}, [full = std::move(full)](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i)
            if (!full[i]) gp[i] += self.grad[i];
    });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
    const std::size_t rows = table.shape()[0];
    const std::size_t d = table.shape()[1];
    std::vector<int> idv(ids.begin(), ids.end());
    std::vector<double> out(idv.size() * d);
    const auto tv = table.data();
    for (std::size_t i = 0; i < idv.size(); ++i) {
        if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= rows) {
            throw ShapeError("gather_rows: id " + std::to_string(idv[i]) + " outside table of " + std::to_string(rows) + " rows");
        }
        std::copy_n(tv.data() + static_cast<std::size_t>(idv[i]) * d, d, out.data() + i * d);
    }
    return make_result("gather_rows", {idv.size(), d}, std::move(out), {table}, [idv = std::move(idv), d](Node& self) {
        Node* p = parent(self, 0);
        if (!p->requires_grad) return;
        auto gp = p->grad_buffer();
        for (std::size_t i = 0; i < idv.size(); ++i) {
            double* dst = gp.data() + static_cast<std::size_t>(idv[i]) * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += self.grad[i * d + j];
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = x.shape().back();
    if (gamma.numel() != d || beta.numel() != d) {
        throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                         " do not match feature size of " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    const auto xv = x.data();
    const auto gv = gamma.data();
    const auto bv = beta.data();
    std::vector<double> out(xv.size());
    std::vector<double> xhat(xv.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xr[j] - mean) * inv_std[r];
            out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
        }
    }
    return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                       [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                           Node* px = parent(self, 0);
                           Node* pg = parent(self, 1);
                           Node* pb = parent(self, 2);
                           const double* G = self.grad.data();
                           if (pg->requires_grad) {
                               auto gg = pg->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < d; ++j) gg[j] += G[r * d + j] * xhat[r * d + j];
                           }
                           if (pb->requires_grad) {
                               auto gb = pb->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < d; ++j) gb[j] += G[r * d + j];
                           }
                           if (px->requires_grad) {
                               auto gx = px->grad_buffer();
                               const double inv_d = 1.0 / static_cast<double>(d);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   double mean_g = 0.0, mean_gx = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double dxh = G[r * d + j] * pg->value[j];
                                       mean_g += dxh;
                                       mean_gx += dxh * xhat[r * d + j];
                                   }
                                   mean_g *= inv_d;
                                   mean_gx *= inv_d;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double dxh = G[r * d + j] * pg->value[j];
                                       gx[r * d + j] += inv_std[r] * (dxh - mean_g - xhat[r * d + j] * mean_gx);
                                   }
                               }
                           }
                       });
}

// ---- gradient oracle ------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
    Tensor leaf = x.clone_leaf(true);
    return finite_diff_check([&] { return f(leaf); }, std::vector<Tensor>{leaf}, step);
}

double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double step) {
    if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be positive");
    for (auto& p : params) {
        p.zero_grad();
        p.set_requires_grad(true);
    }
    Tape::current().clear();
    std::vector<std::vector<double>> analytic;
    {
        Tensor y = f();
        if (y.numel() != 1) throw ShapeError("finite_diff_check: f must return a scalar, got " + shape_str(y.shape()));
        if (y.requires_grad()) backward(y);
        Tape::current().clear();
        for (auto& p : params) {
            if (p.has_grad())
                analytic.emplace_back(p.grad().begin(), p.grad().end());
            else
                analytic.emplace_back(p.numel(), 0.0);
        }
    }
    NoGradGuard guard;
    double worst = 0.0;
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto data = params[t].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + step;
            const double fp = f().item();
            data[i] = saved - step;
            const double fm = f().item();
            data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * step);
            const double err = std::abs(analytic[t][i] - numeric) / (std::abs(numeric) + 1e-8);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace ssa
