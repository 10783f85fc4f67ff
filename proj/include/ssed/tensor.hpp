#pragma once

// Minimal reverse-mode differentiable array engine.
//
// Tensors are row-major float64 arrays. Every operation that touches a tensor
// with requires_grad() appends its output node to the thread's active Tape;
// backward() walks the tape in reverse and accumulates gradients into every
// leaf that requested them. There is no broadcasting: shapes must line up
// exactly, and explicit ops (expand, reshape, permute) do the alignment.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ssed/random.hpp"

namespace ssed {

using Shape = std::vector<std::size_t>;

/// Tensor storage. Vectorized Eigen loops peel by address, so an unaligned
/// base would make the last bits of reductions depend on the allocator.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

inline std::size_t numel(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b)
{
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                     to_string(b));
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const std::string& why)
{
    throw ShapeError(std::string(op) + ": shape " + to_string(a) + " " + why);
}

struct Node {
    Shape shape;
    std::shared_ptr<Buffer> value;
    Buffer grad;
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    std::size_t size() const { return value->size(); }
    const double* v() const { return value->data(); }
    double* g()
    {
        if (grad.empty()) grad.assign(value->size(), 0.0);
        return grad.data();
    }
    Node& in(std::size_t i) { return *inputs[i]; }
};

inline thread_local bool grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

}  // namespace detail

/// Ordered record of executed operations. Nodes are appended as they are
/// produced, so the record is already in topological order.
class Tape {
public:
    static Tape& current()
    {
        thread_local Tape tape;
        return tape;
    }

    void record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    void clear() { nodes_.clear(); }

    const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }

private:
    std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, Buffer data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>())
    {
        if (numel(shape) != data.size())
            throw ShapeError("Tensor: shape " + to_string(shape) + " holds " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(data.size()));
        node_->shape = std::move(shape);
        node_->value = std::make_shared<Buffer>(std::move(data));
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, const std::vector<double>& data, bool requires_grad = false)
        : Tensor(std::move(shape), Buffer(data.begin(), data.end()), requires_grad)
    {
    }

    Tensor(Shape shape, std::initializer_list<double> data, bool requires_grad = false)
        : Tensor(std::move(shape), Buffer(data), requires_grad)
    {
    }

    static Tensor zeros(Shape shape, bool requires_grad = false)
    {
        auto n = numel(shape);
        return Tensor(std::move(shape), Buffer(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false)
    {
        auto n = numel(shape);
        return Tensor(std::move(shape), Buffer(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false)
    {
        return Tensor({}, {value}, requires_grad);
    }

    static Tensor from_node(std::shared_ptr<detail::Node> node)
    {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->size(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->leaf; }

    std::span<const double> data() const { return {node_->value->data(), node_->value->size()}; }

    /// In-place access for leaves (parameters, inputs). Mutating a tensor that
    /// already feeds a recorded operation invalidates that record.
    std::span<double> mutable_data()
    {
        if (!node_->leaf) throw std::logic_error("mutable_data: only leaf tensors are mutable");
        return {node_->value->data(), node_->value->size()};
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return {node_->grad.data(), node_->grad.size()}; }
    std::span<double> mutable_grad() { return {node_->g(), node_->size()}; }
    void zero_grad() { node_->grad.clear(); }

    double item() const
    {
        if (size() != 1) throw ShapeError("item: tensor " + to_string(shape()) + " is not scalar");
        return (*node_->value)[0];
    }

    double operator[](std::size_t i) const { return (*node_->value)[i]; }

    /// Leaf sharing this tensor's storage with an independent gradient buffer.
    Tensor alias_leaf(bool requires_grad = true) const
    {
        auto n = std::make_shared<detail::Node>();
        n->shape = node_->shape;
        n->value = node_->value;
        n->requires_grad = requires_grad;
        return from_node(std::move(n));
    }

    /// Deep copy detached from any tape.
    Tensor clone(bool requires_grad = false) const
    {
        return Tensor(shape(), Buffer(data().begin(), data().end()), requires_grad);
    }

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline std::shared_ptr<Node> make_output(Shape shape, Buffer value,
                                         std::initializer_list<const Tensor*> inputs,
                                         std::function<void(Node&)> backward)
{
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::make_shared<Buffer>(std::move(value));
    node->leaf = false;
    bool track = false;
    if (grad_enabled)
        for (auto* t : inputs) track = track || t->requires_grad();
    if (track) {
        node->requires_grad = true;
        for (auto* t : inputs) node->inputs.push_back(t->node());
        node->backward = std::move(backward);
        Tape::current().record(node);
    }
    return node;
}

inline Tensor make_result(Shape shape, Buffer value,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward)
{
    return Tensor::from_node(make_output(std::move(shape), std::move(value), inputs,
                                         std::move(backward)));
}

inline std::vector<std::size_t> strides_of(const Shape& s)
{
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

/// outer x axis x inner decomposition around `axis`.
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis)
{
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

inline void require_same(const char* op, const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

template <class F>
Tensor unary(const Tensor& a, F f, std::function<void(Node&)> backward)
{
    Buffer out(a.size());
    const double* x = a.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
    return make_result(a.shape(), std::move(out), {&a}, std::move(backward));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b)
{
    detail::require_same("add", a, b);
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            auto& in = self.in(k);
            if (!in.requires_grad) continue;
            double* g = in.g();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b)
{
    detail::require_same("sub", a, b);
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
        auto& x = self.in(0);
        auto& y = self.in(1);
        if (x.requires_grad) {
            double* g = x.g();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (y.requires_grad) {
            double* g = y.g();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b)
{
    detail::require_same("mul", a, b);
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
        auto& x = self.in(0);
        auto& y = self.in(1);
        if (x.requires_grad) {
            double* g = x.g();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y.v()[i];
        }
        if (y.requires_grad) {
            double* g = y.g();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x.v()[i];
        }
    });
}

/// scale * a + shift
inline Tensor affine(const Tensor& a, double scale, double shift = 0.0)
{
    return detail::unary(a, [=](double x) { return scale * x + shift; },
                         [scale](detail::Node& self) {
                             double* g = self.in(0).g();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 g[i] += scale * self.grad[i];
                         });
}

inline Tensor sigmoid(const Tensor& a)
{
    return detail::unary(
        a,
        [](double x) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](detail::Node& self) {
            double* g = self.in(0).g();
            const double* y = self.v();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                g[i] += self.grad[i] * y[i] * (1.0 - y[i]);
        });
}

inline Tensor tanh(const Tensor& a)
{
    return detail::unary(a, [](double x) { return std::tanh(x); }, [](detail::Node& self) {
        double* g = self.in(0).g();
        const double* y = self.v();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] += self.grad[i] * (1.0 - y[i] * y[i]);
    });
}

inline Tensor relu(const Tensor& a)
{
    return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](detail::Node& self) {
        auto& in = self.in(0);
        double* g = in.g();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (in.v()[i] > 0) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a)
{
    double s = 0;
    for (double x : a.data()) s += x;
    return detail::make_result({}, {s}, {&a}, [](detail::Node& self) {
        double* g = self.in(0).g();
        double gs = self.grad[0];
        for (std::size_t i = 0; i < self.in(0).size(); ++i) g[i] += gs;
    });
}

inline Tensor mean(const Tensor& a)
{
    if (a.size() == 0) throw ShapeError("mean: empty tensor");
    double s = 0;
    for (double x : a.data()) s += x;
    double n = static_cast<double>(a.size());
    return detail::make_result({}, {s / n}, {&a}, [n](detail::Node& self) {
        double* g = self.in(0).g();
        double gs = self.grad[0] / n;
        for (std::size_t i = 0; i < self.in(0).size(); ++i) g[i] += gs;
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape)
{
    if (numel(shape) != a.size())
        detail::shape_fail("reshape", a.shape(), shape);
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = a.node()->value;  // storage is immutable past construction
    node->leaf = false;
    if (detail::grad_enabled && a.requires_grad()) {
        node->requires_grad = true;
        node->inputs.push_back(a.node());
        node->backward = [](detail::Node& self) {
            double* g = self.in(0).g();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        };
        Tape::current().record(node);
    }
    return Tensor::from_node(std::move(node));
}

/// General axis permutation: output axis i is input axis perm[i].
inline Tensor permute(const Tensor& a, std::vector<std::size_t> perm)
{
    const auto& s = a.shape();
    if (perm.size() != s.size()) detail::shape_fail("permute", s, "rank does not match permutation");
    {
        auto sorted = perm;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i)
            if (sorted[i] != i) detail::shape_fail("permute", s, "invalid permutation");
    }
    Shape out_shape(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[perm[i]];
    auto in_strides = detail::strides_of(s);
    std::vector<std::size_t> src_stride(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) src_stride[i] = in_strides[perm[i]];

    // index map: out flat position -> in flat position
    auto n = a.size();
    auto index = std::make_shared<std::vector<std::size_t>>(n);
    {
        std::vector<std::size_t> ctr(s.size(), 0);
        std::size_t src = 0;
        for (std::size_t o = 0; o < n; ++o) {
            (*index)[o] = src;
            for (std::size_t d = s.size(); d-- > 0;) {
                ++ctr[d];
                src += src_stride[d];
                if (ctr[d] < out_shape[d]) break;
                src -= src_stride[d] * ctr[d];
                ctr[d] = 0;
            }
        }
    }
    Buffer out(n);
    const double* x = a.data().data();
    for (std::size_t o = 0; o < n; ++o) out[o] = x[(*index)[o]];
    return detail::make_result(std::move(out_shape), std::move(out), {&a},
                               [index](detail::Node& self) {
                                   double* g = self.in(0).g();
                                   for (std::size_t o = 0; o < self.grad.size(); ++o)
                                       g[(*index)[o]] += self.grad[o];
                               });
}

inline Tensor transpose(const Tensor& a)
{
    if (a.rank() != 2) detail::shape_fail("transpose", a.shape(), "is not a matrix");
    return permute(a, {1, 0});
}

/// Inserts a new axis at `axis` holding `count` copies of `a`.
inline Tensor expand(const Tensor& a, std::size_t axis, std::size_t count)
{
    if (axis > a.rank()) detail::shape_fail("expand", a.shape(), "axis out of range");
    Shape out_shape = a.shape();
    out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (std::size_t i = axis; i < a.rank(); ++i) inner *= a.shape()[i];
    Buffer out(outer * count * inner);
    const double* x = a.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < count; ++c)
            std::copy_n(x + o * inner, inner, out.data() + (o * count + c) * inner);
    return detail::make_result(std::move(out_shape), std::move(out), {&a},
                               [outer, count, inner](detail::Node& self) {
                                   double* g = self.in(0).g();
                                   for (std::size_t o = 0; o < outer; ++o)
                                       for (std::size_t c = 0; c < count; ++c) {
                                           const double* src =
                                               self.grad.data() + (o * count + c) * inner;
                                           for (std::size_t i = 0; i < inner; ++i)
                                               g[o * inner + i] += src[i];
                                       }
                               });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis)
{
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) detail::shape_fail("concat", ref, "axis out of range");
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        Shape a = p.shape(), b = ref;
        if (a.size() != b.size()) detail::shape_fail("concat", p.shape(), ref);
        a[axis] = b[axis] = 0;
        if (a != b) detail::shape_fail("concat", p.shape(), ref);
        out_shape[axis] += p.shape()[axis];
    }
    auto sp = detail::split_at(out_shape, axis);
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.shape()[axis] * sp.inner);
    std::size_t row = sp.len * sp.inner;
    Buffer out(sp.outer * row);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const double* x = parts[k].data().data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(x + o * widths[k], widths[k], out.data() + o * row + off);
        off += widths[k];
    }

    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(out_shape);
    node->value = std::make_shared<Buffer>(std::move(out));
    node->leaf = false;
    bool track = false;
    if (detail::grad_enabled)
        for (const auto& p : parts) track = track || p.requires_grad();
    if (track) {
        node->requires_grad = true;
        for (const auto& p : parts) node->inputs.push_back(p.node());
        node->backward = [widths, row, outer = sp.outer](detail::Node& self) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                auto& in = self.in(k);
                if (in.requires_grad) {
                    double* g = in.g();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const double* src = self.grad.data() + o * row + off;
                        for (std::size_t i = 0; i < widths[k]; ++i) g[o * widths[k] + i] += src[i];
                    }
                }
                off += widths[k];
            }
        };
        Tape::current().record(node);
    }
    return Tensor::from_node(std::move(node));
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length)
{
    if (axis >= a.rank() || start + length > a.shape()[axis])
        detail::shape_fail("slice", a.shape(), "slice range out of bounds");
    auto sp = detail::split_at(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape[axis] = length;
    std::size_t in_row = sp.len * sp.inner, out_row = length * sp.inner, off = start * sp.inner;
    Buffer out(sp.outer * out_row);
    const double* x = a.data().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(x + o * in_row + off, out_row, out.data() + o * out_row);
    return detail::make_result(std::move(out_shape), std::move(out), {&a},
                               [=, outer = sp.outer](detail::Node& self) {
                                   double* g = self.in(0).g();
                                   for (std::size_t o = 0; o < outer; ++o)
                                       for (std::size_t i = 0; i < out_row; ++i)
                                           g[o * in_row + off + i] += self.grad[o * out_row + i];
                               });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr std::size_t kLazyProductLimit = 32 * 32 * 32;
}

/// [M,K] x [K,N] -> [M,N]
inline Tensor matmul(const Tensor& a, const Tensor& b)
{
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        detail::shape_fail("matmul", a.shape(), b.shape());
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Buffer out(M * N, 0.0);
    {
        detail::MapC A(a.data().data(), M, K), B(b.data().data(), K, N);
        detail::MapM C(out.data(), M, N);
        C.noalias() = A * B;
    }
    return detail::make_result({M, N}, std::move(out), {&a, &b}, [M, K, N](detail::Node& self) {
        auto& x = self.in(0);
        auto& y = self.in(1);
        detail::MapC G(self.grad.data(), M, N);
        if (x.requires_grad) {
            detail::MapM GA(x.g(), M, K);
            GA.noalias() += G * detail::MapC(y.v(), K, N).transpose();
        }
        if (y.requires_grad) {
            detail::MapM GB(y.g(), K, N);
            GB.noalias() += detail::MapC(x.v(), M, K).transpose() * G;
        }
    });
}

/// Gram matrix a a^T of an [M,K] matrix. Each off-diagonal pair is computed
/// once and mirrored, so the result is exactly symmetric.
inline Tensor gram(const Tensor& a)
{
    if (a.rank() != 2) detail::shape_fail("gram", a.shape(), "is not a matrix");
    const std::size_t M = a.dim(0), K = a.dim(1);
    Buffer out(M * M);
    {
        detail::MapC A(a.data().data(), M, K);
        detail::MapM C(out.data(), M, M);
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = i; j < M; ++j) C(i, j) = C(j, i) = A.row(i).dot(A.row(j));
    }
    return detail::make_result({M, M}, std::move(out), {&a}, [M, K](detail::Node& self) {
        auto& x = self.in(0);
        if (!x.requires_grad) return;
        detail::MapC G(self.grad.data(), M, M), A(x.v(), M, K);
        detail::MapM(x.g(), M, K).noalias() += (G + G.transpose()) * A;
    });
}

/// Batched matmul. [B,M,K] x [B,K,N] -> [B,M,N]; with transpose_b the second
/// operand is [B,N,K] and is used transposed.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false)
{
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
        a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1)))
        detail::shape_fail(transpose_b ? "bmm(transpose_b)" : "bmm", a.shape(), b.shape());
    const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2);
    const std::size_t N = transpose_b ? b.dim(1) : b.dim(2);
    Buffer out(B * M * N);
    // Small per-batch products skip Eigen's cache blocking, which dominates at these sizes.
    const bool small = M * N * K <= detail::kLazyProductLimit;
    for (std::size_t i = 0; i < B; ++i) {
        detail::MapC A(a.data().data() + i * M * K, M, K);
        detail::MapM C(out.data() + i * M * N, M, N);
        if (transpose_b) {
            detail::MapC Bt(b.data().data() + i * N * K, N, K);
            if (small) C.noalias() = A.lazyProduct(Bt.transpose());
            else C.noalias() = A * Bt.transpose();
        } else {
            detail::MapC Bm(b.data().data() + i * K * N, K, N);
            if (small) C.noalias() = A.lazyProduct(Bm);
            else C.noalias() = A * Bm;
        }
    }
    return detail::make_result(
        {B, M, N}, std::move(out), {&a, &b}, [B, M, K, N, transpose_b, small](detail::Node& self) {
            auto& x = self.in(0);
            auto& y = self.in(1);
            double* gx = x.requires_grad ? x.g() : nullptr;
            double* gy = y.requires_grad ? y.g() : nullptr;
            auto acc = [small](auto&& dst, const auto& lhs, const auto& rhs) {
                if (small) dst.noalias() += lhs.lazyProduct(rhs);
                else dst.noalias() += lhs * rhs;
            };
            for (std::size_t i = 0; i < B; ++i) {
                detail::MapC G(self.grad.data() + i * M * N, M, N);
                detail::MapC A(x.v() + i * M * K, M, K);
                if (transpose_b) {
                    detail::MapC Bt(y.v() + i * N * K, N, K);
                    if (gx) acc(detail::MapM(gx + i * M * K, M, K), G, Bt);
                    if (gy) acc(detail::MapM(gy + i * N * K, N, K), G.transpose(), A);
                } else {
                    detail::MapC Bm(y.v() + i * K * N, K, N);
                    if (gx) acc(detail::MapM(gx + i * M * K, M, K), G, Bm.transpose());
                    if (gy) acc(detail::MapM(gy + i * K * N, K, N), A.transpose(), G);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization, attention and regularization
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& a, std::size_t axis)
{
    if (axis >= a.rank()) detail::shape_fail("softmax", a.shape(), "axis out of range");
    auto sp = detail::split_at(a.shape(), axis);
    Buffer out(a.size());
    const double* x = a.data().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            std::size_t base = o * sp.len * sp.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < sp.len; ++k) mx = std::max(mx, x[base + k * sp.inner]);
            double s = 0;
            for (std::size_t k = 0; k < sp.len; ++k) {
                double e = std::exp(x[base + k * sp.inner] - mx);
                out[base + k * sp.inner] = e;
                s += e;
            }
            for (std::size_t k = 0; k < sp.len; ++k) out[base + k * sp.inner] /= s;
        }
    return detail::make_result(a.shape(), std::move(out), {&a}, [sp](detail::Node& self) {
        double* g = self.in(0).g();
        const double* y = self.v();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t in = 0; in < sp.inner; ++in) {
                std::size_t base = o * sp.len * sp.inner + in;
                double dot = 0;
                for (std::size_t k = 0; k < sp.len; ++k) {
                    auto i = base + k * sp.inner;
                    dot += self.grad[i] * y[i];
                }
                for (std::size_t k = 0; k < sp.len; ++k) {
                    auto i = base + k * sp.inner;
                    g[i] += y[i] * (self.grad[i] - dot);
                }
            }
    });
}

/// Normalizes over the last axis, then applies per-feature gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5)
{
    if (x.rank() == 0 || gain.shape() != Shape{x.shape().back()} || bias.shape() != gain.shape())
        detail::shape_fail("layer_norm", x.shape(), gain.shape());
    const std::size_t D = x.shape().back(), rows = x.size() / D;
    Buffer out(x.size());
    auto xhat = std::make_shared<Buffer>(x.size());
    auto inv_std = std::make_shared<Buffer>(rows);
    const double* xv = x.data().data();
    const double* gv = gain.data().data();
    const double* bv = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv + r * D;
        double mu = 0;
        for (std::size_t j = 0; j < D; ++j) mu += row[j];
        mu /= static_cast<double>(D);
        double var = 0;
        for (std::size_t j = 0; j < D; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(D);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < D; ++j) {
            double h = (row[j] - mu) * is;
            (*xhat)[r * D + j] = h;
            out[r * D + j] = h * gv[j] + bv[j];
        }
    }
    return detail::make_result(
        x.shape(), std::move(out), {&x, &gain, &bias},
        [D, rows, xhat, inv_std](detail::Node& self) {
            auto& xin = self.in(0);
            auto& gin = self.in(1);
            auto& bin = self.in(2);
            const double* gv = gin.v();
            if (gin.requires_grad || bin.requires_grad) {
                double* gg = gin.requires_grad ? gin.g() : nullptr;
                double* gb = bin.requires_grad ? bin.g() : nullptr;
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < D; ++j) {
                        double go = self.grad[r * D + j];
                        if (gg) gg[j] += go * (*xhat)[r * D + j];
                        if (gb) gb[j] += go;
                    }
            }
            if (xin.requires_grad) {
                double* gx = xin.g();
                const double n = static_cast<double>(D);
                for (std::size_t r = 0; r < rows; ++r) {
                    double s1 = 0, s2 = 0;
                    for (std::size_t j = 0; j < D; ++j) {
                        double gh = self.grad[r * D + j] * gv[j];
                        s1 += gh;
                        s2 += gh * (*xhat)[r * D + j];
                    }
                    for (std::size_t j = 0; j < D; ++j) {
                        double gh = self.grad[r * D + j] * gv[j];
                        gx[r * D + j] +=
                            (*inv_std)[r] * (gh - s1 / n - (*xhat)[r * D + j] * s2 / n);
                    }
                }
            }
        });
}

/// Inverted dropout: kept entries are scaled by 1/(1-p) during training, so
/// evaluation mode is the identity.
inline Tensor dropout(const Tensor& a, double p, bool train, Rng& rng)
{
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: rate must lie in [0,1)");
    if (!train || p == 0.0) return a;
    auto mask = std::make_shared<Buffer>(a.size());
    // Keep iff a raw 64-bit draw falls below (1-p) * 2^64.
    const auto cut = static_cast<Rng::result_type>(std::ldexp(1.0 - p, 64));
    const double s = 1.0 / (1.0 - p);
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*mask)[i] = rng() < cut ? s : 0.0;
        out[i] = a[i] * (*mask)[i];
    }
    return detail::make_result(a.shape(), std::move(out), {&a}, [mask](detail::Node& self) {
        double* g = self.in(0).g();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
    });
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

/// x[..., K] W[K, N] + b[N] over the flattened leading axes.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b = nullptr)
{
    if (x.rank() == 0 || w.rank() != 2 || x.shape().back() != w.dim(0))
        detail::shape_fail("linear", x.shape(), w.shape());
    const std::size_t K = w.dim(0), N = w.dim(1), rows = x.size() / K;
    Tensor y = matmul(reshape(x, {rows, K}), w);
    if (b) {
        if (b->shape() != Shape{N}) detail::shape_fail("linear(bias)", b->shape(), w.shape());
        y = add(y, expand(*b, 0, rows));
    }
    Shape out = x.shape();
    out.back() = N;
    return reshape(y, std::move(out));
}

/// softmax(q kᵀ / sqrt(d_k)) v for q, k of shape [S, L, d_k] and v of shape
/// [S, L, d_v]. The attention weights are returned through `weights` when
/// provided. Without weight dropout the whole product is one fused node that
/// keeps only the [S, L, L] probabilities for the backward pass.
inline Tensor scaled_dot_product(const Tensor& q, const Tensor& k, const Tensor& v,
                                 double dropout_rate = 0.0, bool train = false,
                                 Rng* rng = nullptr, Tensor* weights = nullptr)
{
    if (q.rank() != 3 || q.shape() != k.shape() || v.rank() != 3 || v.dim(0) != q.dim(0) ||
        v.dim(1) != q.dim(1))
        detail::shape_fail("scaled_dot_product", q.shape(), k.shape());
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(2)));
    if (train && dropout_rate > 0.0) {
        if (!rng) throw std::invalid_argument("scaled_dot_product: dropout needs an rng");
        Tensor alpha = softmax(affine(bmm(q, k, true), scale), 2);
        if (weights) *weights = alpha;
        return bmm(dropout(alpha, dropout_rate, true, *rng), v);
    }
    const std::size_t S = q.dim(0), L = q.dim(1), dk = q.dim(2), dv = v.dim(2);
    auto probs = std::make_shared<Buffer>(S * L * L);
    Buffer out(S * L * dv);
    for (std::size_t s = 0; s < S; ++s) {
        detail::MapC Q(q.data().data() + s * L * dk, L, dk), K(k.data().data() + s * L * dk, L, dk);
        detail::MapC V(v.data().data() + s * L * dv, L, dv);
        detail::MapM P(probs->data() + s * L * L, L, L);
        P.noalias() = Q.lazyProduct(K.transpose());
        for (std::size_t i = 0; i < L; ++i) {
            auto row = P.row(static_cast<Eigen::Index>(i)).array();
            row = ((row - row.maxCoeff()) * scale).exp();
            row /= row.sum();
        }
        detail::MapM(out.data() + s * L * dv, L, dv).noalias() = P.lazyProduct(V);
    }
    if (weights) *weights = Tensor({S, L, L}, *probs);
    return detail::make_result(
        {S, L, dv}, std::move(out), {&q, &k, &v}, [=](detail::Node& self) {
            auto& nq = self.in(0);
            auto& nk = self.in(1);
            auto& nv = self.in(2);
            double* gq = nq.requires_grad ? nq.g() : nullptr;
            double* gk = nk.requires_grad ? nk.g() : nullptr;
            double* gv = nv.requires_grad ? nv.g() : nullptr;
            detail::RowMat dP(L, L);
            for (std::size_t s = 0; s < S; ++s) {
                detail::MapC G(self.grad.data() + s * L * dv, L, dv);
                detail::MapC P(probs->data() + s * L * L, L, L);
                detail::MapC V(nv.v() + s * L * dv, L, dv);
                if (gv) detail::MapM(gv + s * L * dv, L, dv).noalias() += P.transpose().lazyProduct(G);
                if (!gq && !gk) continue;
                dP.noalias() = G.lazyProduct(V.transpose());
                for (std::size_t i = 0; i < L; ++i) {
                    auto r = static_cast<Eigen::Index>(i);
                    const double dot = dP.row(r).dot(P.row(r));
                    dP.row(r).array() = P.row(r).array() * (dP.row(r).array() - dot) * scale;
                }
                detail::MapC Q(nq.v() + s * L * dk, L, dk), K(nk.v() + s * L * dk, L, dk);
                if (gq) detail::MapM(gq + s * L * dk, L, dk).noalias() += dP.lazyProduct(K);
                if (gk) detail::MapM(gk + s * L * dk, L, dk).noalias() += dP.transpose().lazyProduct(Q);
            }
        });
}

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

/// Propagates d(loss)/d(leaf) into every requires_grad leaf reachable from
/// `loss`, then clears the active tape.
inline void backward(const Tensor& loss)
{
    if (loss.size() != 1)
        throw ShapeError("backward: loss must be scalar, got " + to_string(loss.shape()));
    auto& tape = Tape::current();
    if (tape.empty() || !loss.requires_grad())
        throw std::logic_error("backward: loss is not connected to any recorded operation");
    loss.node()->g()[0] += 1.0;
    const auto& nodes = tape.nodes();
    for (std::size_t i = nodes.size(); i-- > 0;) {
        auto& n = *nodes[i];
        if (!n.grad.empty() && n.backward) n.backward(n);
    }
    tape.clear();
}

/// Max over entries of |analytic - central| / (|analytic| + |central| + 1e-12)
/// for a scalar function of the given leaves.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                         double step = 1e-5)
{
    for (auto& l : leaves) {
        if (!l.is_leaf() || !l.requires_grad())
            throw std::invalid_argument("grad_check: inputs must be requires_grad leaves");
        l.zero_grad();
    }
    Tape::current().clear();
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw std::domain_error("grad_check: non-finite loss");
    backward(loss);

    double worst = 0.0;
    NoGradGuard guard;
    for (auto& l : leaves) {
        Buffer analytic(l.size(), 0.0);
        if (l.has_grad()) std::copy(l.grad().begin(), l.grad().end(), analytic.begin());
        auto x = l.mutable_data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double keep = x[i];
            x[i] = keep + step;
            const double up = f().item();
            x[i] = keep - step;
            const double down = f().item();
            x[i] = keep;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw std::domain_error("grad_check: non-finite function value");
            const double central = (up - down) / (2.0 * step);
            const double rel =
                std::abs(analytic[i] - central) / (std::abs(analytic[i]) + std::abs(central) + 1e-12);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         double step = 1e-5)
{
    return grad_check([&] { return f(x); }, std::vector<Tensor>{x}, step);
}

}  // namespace ssed
