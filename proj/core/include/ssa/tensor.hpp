#pragma once

// Dense double-precision tensors with define-by-run reverse-mode differentiation.
//
// Every differentiable primitive records a node on the calling thread's Tape
// when at least one input requires a gradient. Tape::backward walks the tape
// in reverse recording order, which is a valid topological order because a
// node can only be created after its parents.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ssa {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
    std::string op;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    BackwardFn backward;

    // Zero-initialised gradient buffer, allocated on first use.
    std::span<double> grad_buffer();
};

class Tensor {
   public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // Built from nested rows; handy for small literals in tests.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false);
    static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    // Negative axes count from the back.
    std::size_t dim(int axis) const;
    std::size_t numel() const { return data().size(); }

    std::span<const double> data() const;
    // Writable view; only meaningful on leaves (parameters, inputs).
    std::span<double> mutable_data();
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Same values, cut from the graph.
    Tensor detach() const;
    // Fresh leaf holding a copy of the values.
    Tensor clone_leaf(bool requires_grad) const;

    Node* node() const { return node_.get(); }
    const NodePtr& node_ptr() const { return node_; }

    static Tensor from_node(NodePtr node);

   private:
    NodePtr node_;
};

// Ordered record of the differentiable operations executed on this thread.
class Tape {
   public:
    static Tape& current();

    void record(NodePtr node);
    void clear();
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and propagates through the recorded
    // operations in reverse order. The tape is cleared afterwards.
    void backward(const Tensor& loss);

   private:
    std::vector<NodePtr> nodes_;
};

void backward(const Tensor& loss);

bool grad_enabled();

class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

// Builds the result of a custom primitive. The node is recorded on the tape
// only when gradients are enabled and one of the parents requires a gradient;
// otherwise `backward` is dropped.
Tensor make_result(std::string_view op, Shape shape, std::vector<double> value,
                   std::initializer_list<Tensor> parents, BackwardFn backward);
Tensor make_result(std::string_view op, Shape shape, std::vector<double> value,
                   const std::vector<Tensor>& parents, BackwardFn backward);

// Boolean selection pattern for masked_fill; broadcast against the target
// shape with the usual trailing-dimension rules.
struct Mask {
    Shape shape;
    std::vector<std::uint8_t> bits;

    static Mask none(const Shape& shape) { return {shape, std::vector<std::uint8_t>(ssa::numel(shape), 0)}; }
    bool any() const;
};

// Additive-mask constant; exp() of it underflows to exactly zero.
inline constexpr double kMaskedLogit = -1e9;

// ---- primitives -----------------------------------------------------------

// a[..., m, k] x b[k, n]          (shared right operand)
// a[..., m, k] x b[..., k, n]     (batched, identical leading dims)
// With transpose_b the right operand is read as [..., n, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& a, Shape shape);

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor negate(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor softmax(const Tensor& a);  // along the last axis
Tensor logsumexp(const Tensor& a, int axis, bool keepdim = true);
// out[i] = log(sum_{k <= i} exp(a[k])) along `axis`.
Tensor logcumsumexp(const Tensor& a, int axis);
Tensor cumsum(const Tensor& a, int axis);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);

Tensor masked_fill(const Tensor& a, const Mask& mask, double value);

// Rows of `table` ([V, d]) selected by `ids`; result [ids.size(), d].
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

// Normalises over the last axis, then applies gamma/beta of shape [d].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator-(const Tensor& a) { return negate(a); }

// ---- gradient oracle ------------------------------------------------------

// Max over coordinates of |analytic - central| / (|central| + 1e-8) for the
// scalar function f at x.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step = 1e-5);

// Same check over every coordinate of a set of leaf parameters that `f`
// closes over. Parameter values are restored before returning.
double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         double step = 1e-5);

}  // namespace ssa
