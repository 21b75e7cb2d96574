#pragma once

// Dense f64 tensor with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Every op that sees at least
// one input with requires_grad (and runs with grad mode enabled) records its
// inputs and a backward closure on the output node; backward() linearises
// the reachable graph into a GradTape and replays it in reverse topological
// order. Gradients accumulate with += and are retained on every node that
// requires grad, so intermediate tensors can be inspected after backward.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ew/errors.hpp"
#include "ew/rng.hpp"

namespace ew {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first written
    bool requires_grad = false;
    bool detached = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), 0.0);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), v);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                                 shape_str(shape));
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape));
        for (auto& x : d) x = stddev * rng.normal();
        return from(std::move(shape), std::move(d), requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    const std::vector<double>& values() const { return node_->data; }

    /// In-place access for optimizers and initialisers; only legal on leaves.
    std::span<double> mutable_data() {
        if (!node_->inputs.empty()) throw StateError("mutable_data on a non-leaf tensor");
        return node_->data;
    }

    double item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    double operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    bool detached() const { return node_->detached; }
    const char* op() const { return node_->op; }

    /// Gradient buffer; all-zero when nothing was ever written.
    const std::vector<double>& grad() const { return node_->ensure_grad(); }

    double grad_norm() const {
        double s = 0.0;
        for (double g : node_->grad) s += g * g;
        return std::sqrt(s);
    }

    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

    /// Identity of the underlying node; stable while any handle is alive.
    const void* id() const { return node_.get(); }

    bool same_node(const Tensor& o) const { return node_ == o.node_; }

    long use_count() const { return node_.use_count(); }

    detail::Node& node() const { return *node_; }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>, const char*,
                              std::function<void(detail::Node&)>);
    friend Tensor detach(const Tensor&);

    std::shared_ptr<detail::Node> node_;
};

/// Builds an op output. The backward closure is kept only if grad mode is on
/// and some input requires grad.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, const char* op,
                          std::function<void(detail::Node&)> backward) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool any = false;
    if (grad_enabled())
        for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
        n->requires_grad = true;
        n->inputs.reserve(inputs.size());
        for (auto& t : inputs) n->inputs.push_back(t.node_ptr());
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

/// Same values, no backward edge. The result is flagged detached and never receives a gradient.
inline Tensor detach(const Tensor& x) {
    auto n = std::make_shared<detail::Node>();
    n->shape = x.shape();
    n->data = x.values();
    n->detached = true;
    n->op = "detach";
    return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// Tape

/// Reverse-topological linearisation of the graph reachable from a root.
class GradTape {
public:
    struct Entry {
        detail::Node* node;
        const char* op;
        std::vector<const detail::Node*> inputs;
    };

    static GradTape record(const Tensor& root) {
        GradTape tape;
        std::unordered_set<detail::Node*> seen;
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        std::vector<detail::Node*> post;
        auto* r = &root.node();
        if (!r->requires_grad) return tape;
        stack.emplace_back(r, 0);
        seen.insert(r);
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->inputs.size()) {
                auto* child = n->inputs[next++].get();
                if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            } else {
                post.push_back(n);
                stack.pop_back();
            }
        }
        tape.entries_.reserve(post.size());
        for (auto it = post.rbegin(); it != post.rend(); ++it) {
            Entry e{*it, (*it)->op, {}};
            for (const auto& in : (*it)->inputs) e.inputs.push_back(in.get());
            tape.entries_.push_back(std::move(e));
        }
        return tape;
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    void replay() const {
        for (const auto& e : entries_) {
            if (e.node->backward) {
                e.node->ensure_grad();
                e.node->backward(*e.node);
            }
        }
    }

private:
    std::vector<Entry> entries_;
};

/// Seeds d(root)/d(root) = 1 and propagates. Root must be a scalar.
inline void backward(const Tensor& root) {
    if (root.numel() != 1) throw DimensionError("backward() needs a scalar root, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;
    auto tape = GradTape::record(root);
    root.node().ensure_grad()[0] += 1.0;
    tape.replay();
}

namespace detail {

inline std::vector<double>* grad_of(Node& self, std::size_t i) {
    auto& in = *self.inputs[i];
    if (!in.requires_grad) return nullptr;
    return &in.ensure_grad();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

inline void require_rank(const Tensor& a, std::size_t r, const char* op) {
    if (a.rank() != r)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                             shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result(a.shape(), std::move(out), {a, b}, "add", [](detail::Node& self) {
        for (std::size_t k = 0; k < 2; ++k)
            if (auto* g = detail::grad_of(self, k))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return make_result(a.shape(), std::move(out), {a, b}, "sub", [](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result(a.shape(), std::move(out), {a, b}, "mul", [](detail::Node& self) {
        const auto& av = self.inputs[0]->data;
        const auto& bv = self.inputs[1]->data;
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
        if (auto* g = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return make_result(a.shape(), std::move(out), {a}, "scale", [s](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
    });
}

/// SiLU, x * sigmoid(x). The one nonlinearity in the artifact.
inline Tensor silu(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
    return make_result(x.shape(), std::move(out), {x}, "silu", [](detail::Node& self) {
        const auto& xv = self.inputs[0]->data;
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-xv[i]));
                (*g)[i] += self.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
            }
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_result({}, {s}, {a}, "sum", [](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (auto& x : *g) x += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw DimensionError("mean of empty tensor");
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_result({}, {s * inv}, {a}, "mean", [inv](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (auto& x : *g) x += self.grad[0] * inv;
    });
}

/// Mean over one axis; the axis is removed from the output shape.
inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) throw DimensionError("mean_axis: axis out of range for " + shape_str(a.shape()));
    const auto& s = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    if (n == 0) throw DimensionError("mean_axis over empty axis");
    Shape os;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) os.push_back(s[i]);
    std::vector<double> out(outer * inner, 0.0);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += a[(o * n + k) * inner + i] * inv;
    return make_result(std::move(os), std::move(out), {a}, "mean_axis", [outer, inner, n, inv](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t k = 0; k < n; ++k)
                    for (std::size_t i = 0; i < inner; ++i)
                        (*g)[(o * n + k) * inner + i] += self.grad[o * inner + i] * inv;
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    return make_result(std::move(shape), a.values(), {a}, "reshape", [](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    });
}

/// out[i] = a[index[i]]; general permutation / slicing / tiling primitive.
inline Tensor gather(const Tensor& a, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
    if (shape_numel(shape) != index->size()) throw DimensionError("gather: index length does not match shape");
    std::vector<double> out(index->size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto j = (*index)[i];
        if (j >= a.numel()) throw DimensionError("gather: index out of range");
        out[i] = a[j];
    }
    return make_result(std::move(shape), std::move(out), {a}, "gather", [index](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < index->size(); ++i) (*g)[(*index)[i]] += self.grad[i];
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return make_result({n, m}, std::move(out), {a}, "transpose", [m, n](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j * m + i];
    });
}

/// Rows [begin, begin+count) along axis 0.
inline Tensor rows(const Tensor& a, std::size_t begin, std::size_t count) {
    if (a.rank() == 0 || begin + count > a.dim(0))
        throw DimensionError("rows: range out of bounds for " + shape_str(a.shape()));
    const std::size_t stride = a.dim(0) ? a.numel() / a.dim(0) : 0;
    Shape s = a.shape();
    s[0] = count;
    std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                            a.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
    return make_result(std::move(s), std::move(out), {a}, "rows", [begin, stride](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[begin * stride + i] += self.grad[i];
    });
}

/// Concatenation along axis 0 (the token axis).
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows of nothing");
    Shape s = parts[0].shape();
    if (s.empty()) throw DimensionError("concat_rows needs rank >= 1");
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape ps = p.shape();
        if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1))
            throw DimensionError("concat_rows: trailing shape mismatch " + shape_str(ps) + " vs " + shape_str(s));
        total += ps[0];
    }
    s[0] = total;
    std::vector<double> out;
    out.reserve(shape_numel(s));
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(out.size());
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    return make_result(std::move(s), std::move(out), parts, "concat_rows", [offsets](detail::Node& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k)
            if (auto* g = detail::grad_of(self, k))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[k] + i];
    });
}

/// Columns [begin, begin+count) of a 2-D tensor.
inline Tensor columns(const Tensor& a, std::size_t begin, std::size_t count) {
    detail::require_rank(a, 2, "columns");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (begin + count > n) throw DimensionError("columns: range out of bounds for " + shape_str(a.shape()));
    std::vector<double> out(m * count);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a[i * n + begin + j];
    return make_result({m, count}, std::move(out), {a}, "columns", [m, n, begin, count](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < count; ++j) (*g)[i * n + begin + j] += self.grad[i * count + j];
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols of nothing");
    const std::size_t m = parts[0].dim(0);
    std::size_t n = 0;
    std::vector<std::size_t> offs;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_cols");
        if (p.dim(0) != m) throw DimensionError("concat_cols: row count mismatch");
        offs.push_back(n);
        n += p.dim(1);
    }
    std::vector<double> out(m * n);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const std::size_t w = parts[k].dim(1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * n + offs[k] + j] = parts[k][i * w + j];
    }
    return make_result({m, n}, std::move(out), parts, "concat_cols", [m, n, offs](detail::Node& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k)
            if (auto* g = detail::grad_of(self, k)) {
                const std::size_t w = self.inputs[k]->shape[1];
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += self.grad[i * n + offs[k] + j];
            }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const auto m = static_cast<Eigen::Index>(a.dim(0)), k = static_cast<Eigen::Index>(a.dim(1)),
               n = static_cast<Eigen::Index>(b.dim(1));
    std::vector<double> out(static_cast<std::size_t>(m * n));
    detail::MutMap(out.data(), m, n).noalias() =
        detail::ConstMap(a.data().data(), m, k) * detail::ConstMap(b.data().data(), k, n);
    return make_result({a.dim(0), b.dim(1)}, std::move(out), {a, b}, "matmul", [m, k, n](detail::Node& self) {
        const detail::ConstMap A(self.inputs[0]->data.data(), m, k), B(self.inputs[1]->data.data(), k, n);
        const detail::ConstMap G(self.grad.data(), m, n);
        if (auto* ga = detail::grad_of(self, 0)) detail::MutMap(ga->data(), m, k).noalias() += G * B.transpose();
        if (auto* gb = detail::grad_of(self, 1)) detail::MutMap(gb->data(), k, n).noalias() += A.transpose() * G;
    });
}

/// a [m x k] times b^T for b [n x k], without materialising the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const auto m = static_cast<Eigen::Index>(a.dim(0)), k = static_cast<Eigen::Index>(a.dim(1)),
               n = static_cast<Eigen::Index>(b.dim(0));
    std::vector<double> out(static_cast<std::size_t>(m * n));
    detail::MutMap(out.data(), m, n).noalias() =
        detail::ConstMap(a.data().data(), m, k) * detail::ConstMap(b.data().data(), n, k).transpose();
    return make_result({a.dim(0), b.dim(0)}, std::move(out), {a, b}, "matmul_nt", [m, k, n](detail::Node& self) {
        const detail::ConstMap A(self.inputs[0]->data.data(), m, k), B(self.inputs[1]->data.data(), n, k);
        const detail::ConstMap G(self.grad.data(), m, n);
        if (auto* ga = detail::grad_of(self, 0)) detail::MutMap(ga->data(), m, k).noalias() += G * B;
        if (auto* gb = detail::grad_of(self, 1)) detail::MutMap(gb->data(), n, k).noalias() += G.transpose() * A;
    });
}

/// x[..., n] + b[n], broadcasting b over every leading index.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() == 0 || b.numel() != x.shape().back())
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
    const std::size_t n = b.numel();
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % n];
    return make_result(x.shape(), std::move(out), {x, b}, "add_bias", [n](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % n] += self.grad[i];
    });
}

/// Softmax along `axis`, stabilised by subtracting the running max.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
    const auto& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            auto at = [&](std::size_t k) { return (o * n + k) * inner + i; };
            double mx = -INFINITY;
            for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[at(k)]);
            double z = 0.0;
            for (std::size_t k = 0; k < n; ++k) z += (out[at(k)] = std::exp(x[at(k)] - mx));
            for (std::size_t k = 0; k < n; ++k) out[at(k)] /= z;
        }
    auto y = make_result(x.shape(), std::move(out), {x}, "softmax", {});
    if (y.requires_grad())
        y.node().backward = [outer, inner, n](detail::Node& self) {
            auto* g = detail::grad_of(self, 0);
            if (!g) return;
            const auto& Y = self.data;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    auto at = [&](std::size_t k) { return (o * n + k) * inner + i; };
                    double dot = 0.0;
                    for (std::size_t k = 0; k < n; ++k) dot += self.grad[at(k)] * Y[at(k)];
                    for (std::size_t k = 0; k < n; ++k) (*g)[at(k)] += Y[at(k)] * (self.grad[at(k)] - dot);
                }
        };
    return y;
}

/// Row softmax of scale * x where row i of a [T x N] score matrix only sees columns
/// j <= prefix + i; hidden entries come out exactly 0. This is attention over
/// `prefix` cached keys followed by a block-causal query block.
inline Tensor causal_softmax(const Tensor& x, double scale, std::size_t prefix) {
    if (x.rank() != 2 || x.dim(1) < prefix + x.dim(0))
        throw DimensionError("causal_softmax: " + shape_str(x.shape()) + " cannot hold a prefix of " +
                             std::to_string(prefix) + " plus the query block");
    const std::size_t T = x.dim(0), N = x.dim(1);
    std::vector<double> out(x.numel(), 0.0);
    const double* X = x.data().data();
    for (std::size_t i = 0; i < T; ++i) {
        const std::size_t vis = prefix + i + 1;
        const double* xr = X + i * N;
        double* yr = out.data() + i * N;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < vis; ++j) mx = std::max(mx, scale * xr[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < vis; ++j) z += (yr[j] = std::exp(scale * xr[j] - mx));
        for (std::size_t j = 0; j < vis; ++j) yr[j] /= z;
    }
    return make_result(x.shape(), std::move(out), {x}, "causal_softmax", [T, N, prefix, scale](detail::Node& self) {
        auto* g = detail::grad_of(self, 0);
        if (!g) return;
        const auto& Y = self.data;
        for (std::size_t i = 0; i < T; ++i) {
            const std::size_t vis = prefix + i + 1;
            double dot = 0.0;
            for (std::size_t j = 0; j < vis; ++j) dot += self.grad[i * N + j] * Y[i * N + j];
            for (std::size_t j = 0; j < vis; ++j) (*g)[i * N + j] += scale * Y[i * N + j] * (self.grad[i * N + j] - dot);
        }
    });
}

/// Layer normalisation over the last axis with affine gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (x.rank() == 0) throw DimensionError("layer_norm on a scalar");
    const std::size_t n = x.shape().back();
    if (gamma.numel() != n || beta.numel() != n) throw DimensionError("layer_norm: gamma/beta width mismatch");
    const std::size_t m = x.numel() / n;
    std::vector<double> out(x.numel()), xhat(x.numel()), rstd(m);
    for (std::size_t r = 0; r < m; ++r) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += x[r * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (x[r * n + j] - mu) * (x[r * n + j] - mu);
        var /= static_cast<double>(n);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[r * n + j] = (x[r * n + j] - mu) * rstd[r];
            out[r * n + j] = xhat[r * n + j] * gamma[j] + beta[j];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
                       [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
                           const auto& G = self.grad;
                           const auto& gam = self.inputs[1]->data;
                           if (auto* gx = detail::grad_of(self, 0))
                               for (std::size_t r = 0; r < m; ++r) {
                                   double s1 = 0.0, s2 = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) {
                                       const double d = G[r * n + j] * gam[j];
                                       s1 += d;
                                       s2 += d * xhat[r * n + j];
                                   }
                                   s1 /= static_cast<double>(n);
                                   s2 /= static_cast<double>(n);
                                   for (std::size_t j = 0; j < n; ++j) {
                                       const double d = G[r * n + j] * gam[j];
                                       (*gx)[r * n + j] += rstd[r] * (d - s1 - xhat[r * n + j] * s2);
                                   }
                               }
                           if (auto* gg = detail::grad_of(self, 1))
                               for (std::size_t i = 0; i < G.size(); ++i) (*gg)[i % n] += G[i] * xhat[i];
                           if (auto* gb = detail::grad_of(self, 2))
                               for (std::size_t i = 0; i < G.size(); ++i) (*gb)[i % n] += G[i];
                       });
}

/// 2-D convolution with "same" zero padding over x laid out [C_in x H x W x B]
/// (B is a trailing batch axis, e.g. time). Weight [C_out x C_in x k x k], k odd.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0 ||
        bias.numel() != w.dim(0))
        throw DimensionError("conv2d: incompatible shapes x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) +
                             " b" + shape_str(bias.shape()));
    const std::size_t ci = x.dim(0), H = x.dim(1), W = x.dim(2), B = x.dim(3);
    const std::size_t co = w.dim(0), k = w.dim(2);
    const long r = static_cast<long>(k / 2);
    auto xi = [=](std::size_t c, std::size_t y, std::size_t xx) { return ((c * H + y) * W + xx) * B; };
    auto wi = [=](std::size_t o, std::size_t c, std::size_t ky, std::size_t kx) { return ((o * ci + c) * k + ky) * k + kx; };
    std::vector<double> out(co * H * W * B);
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
                double* op = out.data() + ((o * H + y) * W + xx) * B;
                for (std::size_t b = 0; b < B; ++b) op[b] = bias[o];
                for (std::size_t c = 0; c < ci; ++c)
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const long sy = static_cast<long>(y) + static_cast<long>(ky) - r;
                        if (sy < 0 || sy >= static_cast<long>(H)) continue;
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const long sx = static_cast<long>(xx) + static_cast<long>(kx) - r;
                            if (sx < 0 || sx >= static_cast<long>(W)) continue;
                            const double wv = w[wi(o, c, ky, kx)];
                            const double* ip = x.data().data() + xi(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
                            for (std::size_t b = 0; b < B; ++b) op[b] += wv * ip[b];
                        }
                    }
            }
    return make_result({co, H, W, B}, std::move(out), {x, w, bias}, "conv2d",
                       [=](detail::Node& self) {
                           const auto& X = self.inputs[0]->data;
                           const auto& Wt = self.inputs[1]->data;
                           const auto& G = self.grad;
                           auto* gx = detail::grad_of(self, 0);
                           auto* gw = detail::grad_of(self, 1);
                           auto* gb = detail::grad_of(self, 2);
                           for (std::size_t o = 0; o < co; ++o)
                               for (std::size_t y = 0; y < H; ++y)
                                   for (std::size_t xx = 0; xx < W; ++xx) {
                                       const double* gp = G.data() + ((o * H + y) * W + xx) * B;
                                       if (gb)
                                           for (std::size_t b = 0; b < B; ++b) (*gb)[o] += gp[b];
                                       for (std::size_t c = 0; c < ci; ++c)
                                           for (std::size_t ky = 0; ky < k; ++ky) {
                                               const long sy = static_cast<long>(y) + static_cast<long>(ky) - r;
                                               if (sy < 0 || sy >= static_cast<long>(H)) continue;
                                               for (std::size_t kx = 0; kx < k; ++kx) {
                                                   const long sx = static_cast<long>(xx) + static_cast<long>(kx) - r;
                                                   if (sx < 0 || sx >= static_cast<long>(W)) continue;
                                                   const std::size_t base =
                                                       xi(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
                                                   const std::size_t widx = wi(o, c, ky, kx);
                                                   if (gw) {
                                                       double s = 0.0;
                                                       for (std::size_t b = 0; b < B; ++b) s += gp[b] * X[base + b];
                                                       (*gw)[widx] += s;
                                                   }
                                                   if (gx) {
                                                       const double wv = Wt[widx];
                                                       for (std::size_t b = 0; b < B; ++b) (*gx)[base + b] += wv * gp[b];
                                                   }
                                               }
                                           }
                                   }
                       });
}

/// Norm floor below which cosine similarity is rejected.
inline constexpr double kCosineNormFloor = 1e-12;

/// <a,b> / (|a| |b|), treating both tensors as flat vectors.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "cosine_similarity");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const double na = std::sqrt(aa), nb = std::sqrt(bb);
    if (na < kCosineNormFloor || nb < kCosineNormFloor)
        throw DegenerateNormError("cosine_similarity: norm below floor (|a|=" + std::to_string(na) +
                                  ", |b|=" + std::to_string(nb) + ")");
    const double c = ab / (na * nb);
    return make_result({}, {c}, {a, b}, "cosine", [na, nb, c](detail::Node& self) {
        const auto& A = self.inputs[0]->data;
        const auto& B = self.inputs[1]->data;
        const double g = self.grad[0];
        if (auto* ga = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < A.size(); ++i) (*ga)[i] += g * (B[i] / (na * nb) - c * A[i] / (na * na));
        if (auto* gb = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < B.size(); ++i) (*gb)[i] += g * (A[i] / (na * nb) - c * B[i] / (nb * nb));
    });
}

/// Summary used in NaN diagnostics.
inline std::string tensor_stats(const Tensor& t) {
    double mn = INFINITY, mx = -INFINITY, s = 0.0;
    std::size_t nonfinite = 0;
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            ++nonfinite;
            continue;
        }
        mn = std::min(mn, v);
        mx = std::max(mx, v);
        s += v;
    }
    std::ostringstream os;
    os << "shape=" << shape_str(t.shape()) << " op=" << t.op() << " min=" << mn << " max=" << mx
       << " mean=" << (t.numel() ? s / static_cast<double>(t.numel()) : 0.0) << " nonfinite=" << nonfinite;
    return os.str();
}

}  // namespace ew
