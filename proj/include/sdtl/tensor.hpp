#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sdtl/errors.hpp"
#include "sdtl/rng.hpp"

namespace sdtl {

using Shape = std::vector<int>;

inline int numel_of(const Shape& s) {
    int n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Graph recording is on by default; inference paths switch it off so long
// sampling loops do not retain node history.
inline bool& autograd_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    NoGradGuard() : prev_(autograd_enabled()) { autograd_enabled() = false; }
    ~NoGradGuard() { autograd_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class Real>
struct TensorNode {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // persistent, populated by backward() when requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Scatters this node's adjoint into the parent adjoint buffers
    // (one buffer per parent, same order as `parents`).
    std::function<void(const std::vector<Real>&, const std::vector<std::vector<Real>*>&)> backprop;
};

// Dense row-major n-dimensional array with reverse-mode autodiff. Copies are
// shallow handles onto a shared node, torch-style. Real is float for training
// and double for gradient checking.
template <class Real>
class Tensor {
public:
    using value_type = Real;

    Tensor() : node_(std::make_shared<TensorNode<Real>>()) {}

    explicit Tensor(Shape shape, Real fill = Real(0))
        : node_(std::make_shared<TensorNode<Real>>()) {
        node_->shape = std::move(shape);
        node_->data.assign(static_cast<size_t>(numel_of(node_->shape)), fill);
    }

    static Tensor from(Shape shape, std::vector<Real> values) {
        if (static_cast<int>(values.size()) != numel_of(shape))
            throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                                 " values do not fill shape " + shape_str(shape));
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(values);
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Real(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), Real(1)); }
    static Tensor full(Shape shape, Real v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(Real v) { return Tensor({1}, v); }

    static Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
        Tensor t(std::move(shape));
        rng.fill_normal(t.node_->data, scale);
        return t;
    }

    static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        rng.fill_uniform(t.node_->data, lo, hi);
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int numel() const { return static_cast<int>(node_->data.size()); }
    bool defined() const { return !node_->shape.empty(); }

    std::vector<Real>& data() { return node_->data; }
    const std::vector<Real>& data() const { return node_->data; }

    Real& at(int i) { return node_->data[static_cast<size_t>(i)]; }
    Real at(int i) const { return node_->data[static_cast<size_t>(i)]; }
    Real& at(int i, int j) { return node_->data[static_cast<size_t>(i * dim(1) + j)]; }
    Real at(int i, int j) const { return node_->data[static_cast<size_t>(i * dim(1) + j)]; }
    Real& at(int c, int y, int x) {
        return node_->data[static_cast<size_t>((c * dim(1) + y) * dim(2) + x)];
    }
    Real at(int c, int y, int x) const {
        return node_->data[static_cast<size_t>((c * dim(1) + y) * dim(2) + x)];
    }

    Real item() const {
        if (numel() != 1)
            throw ContractError("item(): tensor has shape " + shape_str(shape()) +
                                ", expected a scalar");
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v = true) {
        node_->requires_grad = v;
        return *this;
    }

    // True when backward() has gradients to push through this tensor.
    bool in_graph() const { return node_->requires_grad || !node_->parents.empty(); }

    std::vector<Real>& grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->data.size(), Real(0));
        return node_->grad;
    }
    const std::vector<Real>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.assign(node_->data.size(), Real(0)); }

    // Copy of the values with no graph attachment.
    Tensor detach() const {
        Tensor t;
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        return t;
    }

    std::shared_ptr<TensorNode<Real>> node() const { return node_; }

private:
    std::shared_ptr<TensorNode<Real>> node_;
};

namespace detail {

template <class Real>
inline bool track(std::initializer_list<const Tensor<Real>*> inputs) {
    if (!autograd_enabled()) return false;
    for (const Tensor<Real>* t : inputs)
        if (t->in_graph()) return true;
    return false;
}

// numpy trailing-dimension broadcast: shapes are right-aligned and every
// pair of dims must match or one of them must be 1.
struct BroadcastPlan {
    Shape out;
    std::vector<int> stride_a, stride_b;  // per out-dim element strides, 0 on broadcast dims
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    const int ra = static_cast<int>(a.size());
    const int rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    BroadcastPlan plan;
    plan.out.assign(static_cast<size_t>(r), 1);
    for (int i = 0; i < r; ++i) {
        int da = i < r - ra ? 1 : a[static_cast<size_t>(i - (r - ra))];
        int db = i < r - rb ? 1 : b[static_cast<size_t>(i - (r - rb))];
        if (da != db && da != 1 && db != 1)
            throw DimensionError(std::string(op) + ": cannot broadcast shapes " + shape_str(a) +
                                 " and " + shape_str(b));
        plan.out[static_cast<size_t>(i)] = std::max(da, db);
    }
    auto strides_for = [&](const Shape& s) {
        std::vector<int> st(static_cast<size_t>(r), 0);
        int rs = static_cast<int>(s.size());
        int acc = 1;
        for (int i = rs - 1; i >= 0; --i) {
            int out_i = i + (r - rs);
            st[static_cast<size_t>(out_i)] = (s[static_cast<size_t>(i)] == 1) ? 0 : acc;
            acc *= s[static_cast<size_t>(i)];
        }
        return st;
    };
    plan.stride_a = strides_for(a);
    plan.stride_b = strides_for(b);
    return plan;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <class Fn>
inline void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
    const int r = static_cast<int>(plan.out.size());
    const int n = numel_of(plan.out);
    std::vector<int> idx(static_cast<size_t>(r), 0);
    int ia = 0, ib = 0;
    for (int io = 0; io < n; ++io) {
        fn(io, ia, ib);
        for (int d = r - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            ia += plan.stride_a[static_cast<size_t>(d)];
            ib += plan.stride_b[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < plan.out[static_cast<size_t>(d)]) break;
            ia -= plan.stride_a[static_cast<size_t>(d)] * plan.out[static_cast<size_t>(d)];
            ib -= plan.stride_b[static_cast<size_t>(d)] * plan.out[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

// Reverse topological sweep from a scalar loss. Adjoints live in per-call
// buffers, so running backward twice on a retained graph accumulates exactly
// twice the gradient into every requires_grad tensor.
template <class Real>
void backward(const Tensor<Real>& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_str(loss.shape()));

    using NodeT = TensorNode<Real>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    // iterative post-order DFS over parent edges
    std::vector<std::pair<NodeT*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    std::unordered_map<NodeT*, std::vector<Real>> adjoint;
    adjoint[loss.node().get()] = {Real(1)};

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* node = *it;
        auto found = adjoint.find(node);
        if (found == adjoint.end()) continue;
        std::vector<Real>& adj = found->second;
        if (node->backprop) {
            std::vector<std::vector<Real>*> parent_adj;
            parent_adj.reserve(node->parents.size());
            for (auto& p : node->parents) {
                std::vector<Real>& buf = adjoint[p.get()];
                if (buf.empty()) buf.assign(p->data.size(), Real(0));
                parent_adj.push_back(&buf);
            }
            node->backprop(adj, parent_adj);
        }
        if (node->requires_grad) {
            if (node->grad.empty()) node->grad.assign(node->data.size(), Real(0));
            for (size_t i = 0; i < adj.size(); ++i) node->grad[i] += adj[i];
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise suite

namespace detail {

template <class Real, class F, class DF>
Tensor<Real> unary_op(const Tensor<Real>& x, F f, DF df) {
    Tensor<Real> out(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < xd.size(); ++i) od[i] = f(xd[i]);
    if (track<Real>({&x})) {
        auto xn = x.node();
        auto on = out.node();
        on->parents = {xn};
        on->backprop = [xn, on, df](const std::vector<Real>& adj,
                                    const std::vector<std::vector<Real>*>& padj) {
            auto& gx = *padj[0];
            for (size_t i = 0; i < adj.size(); ++i)
                gx[i] += df(xn->data[i], on->data[i]) * adj[i];
        };
    }
    return out;
}

// dfa/dfb give d(out)/d(a) and d(out)/d(b) from the input values.
template <class Real, class F, class DFa, class DFb>
Tensor<Real> binary_op(const Tensor<Real>& a, const Tensor<Real>& b, const char* name, F f,
                       DFa dfa, DFb dfb) {
    BroadcastPlan plan = broadcast_plan(a.shape(), b.shape(), name);
    Tensor<Real> out(plan.out);
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for_each_broadcast(plan, [&](int io, int ia, int ib) { od[static_cast<size_t>(io)] = f(ad[static_cast<size_t>(ia)], bd[static_cast<size_t>(ib)]); });
    if (track<Real>({&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        on->parents = {an, bn};
        on->backprop = [an, bn, plan, dfa, dfb](const std::vector<Real>& adj,
                                                const std::vector<std::vector<Real>*>& padj) {
            auto& ga = *padj[0];
            auto& gb = *padj[1];
            for_each_broadcast(plan, [&](int io, int ia, int ib) {
                Real av = an->data[static_cast<size_t>(ia)];
                Real bv = bn->data[static_cast<size_t>(ib)];
                Real g = adj[static_cast<size_t>(io)];
                ga[static_cast<size_t>(ia)] += dfa(av, bv) * g;
                gb[static_cast<size_t>(ib)] += dfb(av, bv) * g;
            });
        };
    }
    return out;
}

}  // namespace detail

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_op(
        a, b, "add", [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real(1); },
        [](Real, Real) { return Real(1); });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_op(
        a, b, "sub", [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real(1); },
        [](Real, Real) { return Real(-1); });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_op(
        a, b, "mul", [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
        [](Real x, Real) { return x; });
}

template <class Real>
Tensor<Real> scalar_mul(const Tensor<Real>& x, Real s) {
    return detail::unary_op(
        x, [s](Real v) { return v * s; }, [s](Real, Real) { return s; });
}

template <class Real>
Tensor<Real> scalar_add(const Tensor<Real>& x, Real s) {
    return detail::unary_op(
        x, [s](Real v) { return v + s; }, [](Real, Real) { return Real(1); });
}

template <class Real>
Tensor<Real> neg(const Tensor<Real>& x) {
    return scalar_mul(x, Real(-1));
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
        [](Real, Real y) { return y * (Real(1) - y); });
}

// exact GELU, x * Phi(x)
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::unary_op(
        x,
        [](Real v) {
            return static_cast<Real>(0.5 * static_cast<double>(v) *
                                     (1.0 + std::erf(static_cast<double>(v) * inv_sqrt2)));
        },
        [](Real v, Real) {
            double xv = static_cast<double>(v);
            double phi = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
            return static_cast<Real>(phi + xv * pdf);
        });
}

template <class Real>
Tensor<Real> exp_elem(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

template <class Real>
Tensor<Real> sqrt_elem(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return std::sqrt(v); },
        [](Real, Real y) { return Real(0.5) / y; });
}

template <class Real>
Tensor<Real> abs_elem(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return std::abs(v); },
        [](Real v, Real) { return v >= Real(0) ? Real(1) : Real(-1); });
}

template <class Real>
Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) { return add(a, b); }
template <class Real>
Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) { return sub(a, b); }
template <class Real>
Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) { return mul(a, b); }
template <class Real>
Tensor<Real> operator*(const Tensor<Real>& a, Real s) { return scalar_mul(a, s); }
template <class Real>
Tensor<Real> operator*(Real s, const Tensor<Real>& a) { return scalar_mul(a, s); }

// ---------------------------------------------------------------------------
// reductions

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x) {
    Tensor<Real> out({1});
    Real acc = 0;
    for (Real v : x.data()) acc += v;
    out.at(0) = acc;
    if (detail::track<Real>({&x})) {
        auto on = out.node();
        on->parents = {x.node()};
        on->backprop = [](const std::vector<Real>& adj,
                          const std::vector<std::vector<Real>*>& padj) {
            for (Real& g : *padj[0]) g += adj[0];
        };
    }
    return out;
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& x) {
    return scalar_mul(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

template <class Real>
Tensor<Real> mse(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mse: shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
    Tensor<Real> d = sub(a, b);
    return mean(mul(d, d));
}

template <class Real>
Tensor<Real> l1(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("l1: shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
    return mean(abs_elem(sub(a, b)));
}

// ---------------------------------------------------------------------------
// shape ops

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape new_shape) {
    if (numel_of(new_shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(new_shape));
    Tensor<Real> out = Tensor<Real>::from(std::move(new_shape), x.data());
    if (detail::track<Real>({&x})) {
        auto on = out.node();
        on->parents = {x.node()};
        on->backprop = [](const std::vector<Real>& adj,
                          const std::vector<std::vector<Real>*>& padj) {
            auto& g = *padj[0];
            for (size_t i = 0; i < adj.size(); ++i) g[i] += adj[i];
        };
    }
    return out;
}

// out.data[i] = x.data[map[i]] for a bijective index map; shared by the
// layout-permuting ops (transpose, token/image reshapes, patchify).
template <class Real>
Tensor<Real> gather_bijection(const Tensor<Real>& x, Shape out_shape, std::vector<int> map) {
    Tensor<Real> out(std::move(out_shape));
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < map.size(); ++i) od[i] = xd[static_cast<size_t>(map[i])];
    if (detail::track<Real>({&x})) {
        auto on = out.node();
        on->parents = {x.node()};
        auto shared_map = std::make_shared<std::vector<int>>(std::move(map));
        on->backprop = [shared_map](const std::vector<Real>& adj,
                                    const std::vector<std::vector<Real>*>& padj) {
            auto& g = *padj[0];
            const auto& m = *shared_map;
            for (size_t i = 0; i < adj.size(); ++i) g[static_cast<size_t>(m[i])] += adj[i];
        };
    }
    return out;
}

template <class Real>
Tensor<Real> transpose2d(const Tensor<Real>& x) {
    if (x.rank() != 2)
        throw DimensionError("transpose2d: expected a matrix, got " + shape_str(x.shape()));
    const int m = x.dim(0), n = x.dim(1);
    std::vector<int> map(static_cast<size_t>(m * n));
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i) map[static_cast<size_t>(j * m + i)] = i * n + j;
    return gather_bijection(x, {n, m}, std::move(map));
}

// C x H x W  ->  (H*W) x C token layout
template <class Real>
Tensor<Real> image_to_tokens(const Tensor<Real>& x) {
    if (x.rank() != 3)
        throw DimensionError("image_to_tokens: expected CxHxW, got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int n = h * w;
    std::vector<int> map(static_cast<size_t>(n * c));
    for (int t = 0; t < n; ++t)
        for (int ch = 0; ch < c; ++ch) map[static_cast<size_t>(t * c + ch)] = ch * n + t;
    return gather_bijection(x, {n, c}, std::move(map));
}

// (H*W) x C  ->  C x H x W
template <class Real>
Tensor<Real> tokens_to_image(const Tensor<Real>& x, int h, int w) {
    if (x.rank() != 2 || x.dim(0) != h * w)
        throw DimensionError("tokens_to_image: " + shape_str(x.shape()) +
                             " does not match grid " + std::to_string(h) + "x" + std::to_string(w));
    const int c = x.dim(1), n = h * w;
    std::vector<int> map(static_cast<size_t>(n * c));
    for (int ch = 0; ch < c; ++ch)
        for (int t = 0; t < n; ++t) map[static_cast<size_t>(ch * n + t)] = t * c + ch;
    return gather_bijection(x, {c, h, w}, std::move(map));
}

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    const int r = static_cast<int>(s0.size());
    if (axis < 0 || axis >= r)
        throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(s0));
    int axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != r)
            throw DimensionError("concat: rank mismatch between " + shape_str(s0) + " and " +
                                 shape_str(p.shape()));
        for (int d = 0; d < r; ++d)
            if (d != axis && p.dim(d) != s0[static_cast<size_t>(d)])
                throw DimensionError("concat: shapes " + shape_str(s0) + " and " +
                                     shape_str(p.shape()) + " differ off-axis");
        axis_total += p.dim(axis);
    }
    Shape out_shape = s0;
    out_shape[static_cast<size_t>(axis)] = axis_total;

    int outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= s0[static_cast<size_t>(d)];

    Tensor<Real> out(out_shape);
    auto& od = out.data();
    int offset = 0;
    for (const auto& p : parts) {
        const int pa = p.dim(axis);
        const auto& pd = p.data();
        for (int o = 0; o < outer; ++o)
            std::copy(pd.begin() + o * pa * inner, pd.begin() + (o + 1) * pa * inner,
                      od.begin() + (o * axis_total + offset) * inner);
        offset += pa;
    }

    bool need_grad = false;
    if (autograd_enabled())
        for (const auto& p : parts)
            if (p.in_graph()) need_grad = true;
    if (need_grad) {
        auto on = out.node();
        std::vector<int> axis_sizes;
        for (const auto& p : parts) {
            on->parents.push_back(p.node());
            axis_sizes.push_back(p.dim(axis));
        }
        on->backprop = [outer, inner, axis_total, axis_sizes](
                           const std::vector<Real>& adj,
                           const std::vector<std::vector<Real>*>& padj) {
            int offset = 0;
            for (size_t k = 0; k < axis_sizes.size(); ++k) {
                const int pa = axis_sizes[k];
                auto& g = *padj[k];
                for (int o = 0; o < outer; ++o) {
                    const Real* src = adj.data() + (o * axis_total + offset) * inner;
                    Real* dst = g.data() + o * pa * inner;
                    for (int i = 0; i < pa * inner; ++i) dst[i] += src[i];
                }
                offset += pa;
            }
        };
    }
    return out;
}

template <class Real>
Tensor<Real> slice(const Tensor<Real>& x, int axis, int start, int end) {
    const int r = x.rank();
    if (axis < 0 || axis >= r)
        throw DimensionError("slice: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(x.shape()));
    if (start < 0 || end > x.dim(axis) || start >= end)
        throw DimensionError("slice: range [" + std::to_string(start) + "," +
                             std::to_string(end) + ") invalid for " + shape_str(x.shape()));
    int outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);
    const int in_axis = x.dim(axis);
    const int out_axis = end - start;

    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = out_axis;
    std::vector<int> map(static_cast<size_t>(outer * out_axis * inner));
    int k = 0;
    for (int o = 0; o < outer; ++o)
        for (int a = start; a < end; ++a)
            for (int i = 0; i < inner; ++i) map[static_cast<size_t>(k++)] = (o * in_axis + a) * inner + i;
    // not a bijection onto the input, but scatter-add backward is still exact
    return gather_bijection(x, std::move(out_shape), std::move(map));
}

// ---------------------------------------------------------------------------
// matmul / softmax / layer_norm

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul: expected matrices, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<Real> out({m, n});
    const Real* ad = a.data().data();
    const Real* bd = b.data().data();
    Real* od = out.data().data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const Real av = ad[i * k + p];
            if (av == Real(0)) continue;
            const Real* brow = bd + p * n;
            Real* orow = od + i * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (detail::track<Real>({&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        on->parents = {an, bn};
        on->backprop = [an, bn, m, k, n](const std::vector<Real>& adj,
                                         const std::vector<std::vector<Real>*>& padj) {
            auto& ga = *padj[0];
            auto& gb = *padj[1];
            // dA = dC . B^T
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const Real g = adj[static_cast<size_t>(i * n + j)];
                    if (g == Real(0)) continue;
                    for (int p = 0; p < k; ++p)
                        ga[static_cast<size_t>(i * k + p)] += g * bn->data[static_cast<size_t>(p * n + j)];
                }
            // dB = A^T . dC
            for (int p = 0; p < k; ++p)
                for (int i = 0; i < m; ++i) {
                    const Real av = an->data[static_cast<size_t>(i * k + p)];
                    if (av == Real(0)) continue;
                    for (int j = 0; j < n; ++j)
                        gb[static_cast<size_t>(p * n + j)] += av * adj[static_cast<size_t>(i * n + j)];
                }
        };
    }
    return out;
}

// numerically stabilized softmax along `axis`
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x, int axis) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
    int outer = 1, inner = 1;
    const int n = x.dim(axis);
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);

    Tensor<Real> out(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (int o = 0; o < outer; ++o) {
        for (int i = 0; i < inner; ++i) {
            const int base = o * n * inner + i;
            Real mx = xd[static_cast<size_t>(base)];
            for (int j = 1; j < n; ++j) mx = std::max(mx, xd[static_cast<size_t>(base + j * inner)]);
            Real z = 0;
            for (int j = 0; j < n; ++j) {
                Real e = std::exp(xd[static_cast<size_t>(base + j * inner)] - mx);
                od[static_cast<size_t>(base + j * inner)] = e;
                z += e;
            }
            const Real invz = Real(1) / z;
            for (int j = 0; j < n; ++j) od[static_cast<size_t>(base + j * inner)] *= invz;
        }
    }
    if (detail::track<Real>({&x})) {
        auto on = out.node();
        on->parents = {x.node()};
        on->backprop = [outer, inner, n, on](const std::vector<Real>& adj,
                                             const std::vector<std::vector<Real>*>& padj) {
            auto& g = *padj[0];
            for (int o = 0; o < outer; ++o)
                for (int i = 0; i < inner; ++i) {
                    const int base = o * n * inner + i;
                    Real dot = 0;
                    for (int j = 0; j < n; ++j) {
                        const size_t at = static_cast<size_t>(base + j * inner);
                        dot += adj[at] * on->data[at];
                    }
                    for (int j = 0; j < n; ++j) {
                        const size_t at = static_cast<size_t>(base + j * inner);
                        g[at] += on->data[at] * (adj[at] - dot);
                    }
                }
        };
    }
    return out;
}

// layer normalization over the last axis, gain/bias of that axis length
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = Real(1e-5)) {
    const int r = x.rank();
    if (r < 1) throw DimensionError("layer_norm: input has no axes");
    const int n = x.dim(r - 1);
    if (gain.numel() != n || bias.numel() != n)
        throw DimensionError("layer_norm: gain/bias length must be " + std::to_string(n) +
                             ", got " + shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    const int rows = x.numel() / n;

    Tensor<Real> out(x.shape());
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    auto& od = out.data();
    std::vector<Real> inv_std(static_cast<size_t>(rows)), mu(static_cast<size_t>(rows));
    for (int row = 0; row < rows; ++row) {
        const Real* xr = xd.data() + row * n;
        Real m = 0;
        for (int j = 0; j < n; ++j) m += xr[j];
        m /= static_cast<Real>(n);
        Real var = 0;
        for (int j = 0; j < n; ++j) {
            Real d = xr[j] - m;
            var += d * d;
        }
        var /= static_cast<Real>(n);
        const Real is = Real(1) / std::sqrt(var + eps);
        mu[static_cast<size_t>(row)] = m;
        inv_std[static_cast<size_t>(row)] = is;
        Real* orow = od.data() + row * n;
        for (int j = 0; j < n; ++j) orow[j] = (xr[j] - m) * is * gd[static_cast<size_t>(j)] + bd[static_cast<size_t>(j)];
    }
    if (detail::track<Real>({&x, &gain, &bias})) {
        auto xn = x.node();
        auto gn = gain.node();
        auto on = out.node();
        on->parents = {xn, gn, bias.node()};
        on->backprop = [xn, gn, rows, n, mu, inv_std](
                           const std::vector<Real>& adj,
                           const std::vector<std::vector<Real>*>& padj) {
            auto& gx = *padj[0];
            auto& gg = *padj[1];
            auto& gb = *padj[2];
            for (int row = 0; row < rows; ++row) {
                const Real* xr = xn->data.data() + row * n;
                const Real* ar = adj.data() + row * n;
                const Real m = mu[static_cast<size_t>(row)];
                const Real is = inv_std[static_cast<size_t>(row)];
                // dxhat, plus the two row means needed for dx
                Real mean_dxhat = 0, mean_dxhat_xhat = 0;
                for (int j = 0; j < n; ++j) {
                    const Real xhat = (xr[j] - m) * is;
                    const Real dxhat = ar[j] * gn->data[static_cast<size_t>(j)];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                    gg[static_cast<size_t>(j)] += ar[j] * xhat;
                    gb[static_cast<size_t>(j)] += ar[j];
                }
                mean_dxhat /= static_cast<Real>(n);
                mean_dxhat_xhat /= static_cast<Real>(n);
                for (int j = 0; j < n; ++j) {
                    const Real xhat = (xr[j] - m) * is;
                    const Real dxhat = ar[j] * gn->data[static_cast<size_t>(j)];
                    gx[static_cast<size_t>(row * n + j)] += is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d / pooling

// Cross-correlation (no kernel flip): x is Cin x H x W, w is Cout x Cin x k x k.
template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& bias,
                    int stride = 1, int pad = 0) {
    if (x.rank() != 3 || w.rank() != 4)
        throw DimensionError("conv2d: expected CxHxW input and OxIxKxK weights, got " +
                             shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin)
        throw DimensionError("conv2d: weight expects " + std::to_string(w.dim(1)) +
                             " input channels, input has " + std::to_string(cin));
    if (w.dim(2) != w.dim(3) || k % 2 == 0)
        throw ConfigError("conv2d: kernel must be square with odd size, got " +
                          shape_str(w.shape()));
    if (bias.numel() != cout)
        throw DimensionError("conv2d: bias length " + std::to_string(bias.numel()) +
                             " != output channels " + std::to_string(cout));
    if ((h + 2 * pad - k) % stride != 0 || (wd + 2 * pad - k) % stride != 0)
        throw ConfigError("conv2d: non-integer output size for input " + shape_str(x.shape()) +
                          ", k=" + std::to_string(k) + ", stride=" + std::to_string(stride) +
                          ", pad=" + std::to_string(pad));
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wd + 2 * pad - k) / stride + 1;

    Tensor<Real> out({cout, ho, wo});
    const Real* xd = x.data().data();
    const Real* wdp = w.data().data();
    const Real* bd = bias.data().data();
    Real* od = out.data().data();
    for (int oc = 0; oc < cout; ++oc) {
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                Real acc = bd[oc];
                const int iy0 = oy * stride - pad;
                const int ix0 = ox * stride - pad;
                for (int ic = 0; ic < cin; ++ic) {
                    const Real* xplane = xd + ic * h * wd;
                    const Real* wk = wdp + ((oc * cin + ic) * k) * k;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= wd) continue;
                            acc += wk[ky * k + kx] * xplane[iy * wd + ix];
                        }
                    }
                }
                od[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    if (detail::track<Real>({&x, &w, &bias})) {
        auto xn = x.node();
        auto wn = w.node();
        auto on = out.node();
        on->parents = {xn, wn, bias.node()};
        on->backprop = [xn, wn, cin, cout, h, wd, k, ho, wo, stride, pad](
                           const std::vector<Real>& adj,
                           const std::vector<std::vector<Real>*>& padj) {
            auto& gx = *padj[0];
            auto& gw = *padj[1];
            auto& gb = *padj[2];
            for (int oc = 0; oc < cout; ++oc) {
                for (int oy = 0; oy < ho; ++oy) {
                    for (int ox = 0; ox < wo; ++ox) {
                        const Real g = adj[static_cast<size_t>((oc * ho + oy) * wo + ox)];
                        if (g == Real(0)) continue;
                        gb[static_cast<size_t>(oc)] += g;
                        const int iy0 = oy * stride - pad;
                        const int ix0 = ox * stride - pad;
                        for (int ic = 0; ic < cin; ++ic) {
                            const Real* xplane = xn->data.data() + ic * h * wd;
                            const Real* wk = wn->data.data() + ((oc * cin + ic) * k) * k;
                            Real* gxp = gx.data() + ic * h * wd;
                            Real* gwp = gw.data() + ((oc * cin + ic) * k) * k;
                            for (int ky = 0; ky < k; ++ky) {
                                const int iy = iy0 + ky;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < k; ++kx) {
                                    const int ix = ix0 + kx;
                                    if (ix < 0 || ix >= wd) continue;
                                    gxp[iy * wd + ix] += g * wk[ky * k + kx];
                                    gwp[ky * k + kx] += g * xplane[iy * wd + ix];
                                }
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

// C x H x W -> per-channel spatial mean, shape [C]
template <class Real>
Tensor<Real> global_avg_pool(const Tensor<Real>& x) {
    if (x.rank() != 3)
        throw DimensionError("global_avg_pool: expected CxHxW, got " + shape_str(x.shape()));
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor<Real> out({c});
    const auto& xd = x.data();
    for (int ch = 0; ch < c; ++ch) {
        Real acc = 0;
        for (int i = 0; i < hw; ++i) acc += xd[static_cast<size_t>(ch * hw + i)];
        out.at(ch) = acc / static_cast<Real>(hw);
    }
    if (detail::track<Real>({&x})) {
        auto on = out.node();
        on->parents = {x.node()};
        on->backprop = [c, hw](const std::vector<Real>& adj,
                               const std::vector<std::vector<Real>*>& padj) {
            auto& g = *padj[0];
            const Real inv = Real(1) / static_cast<Real>(hw);
            for (int ch = 0; ch < c; ++ch) {
                const Real gv = adj[static_cast<size_t>(ch)] * inv;
                for (int i = 0; i < hw; ++i) g[static_cast<size_t>(ch * hw + i)] += gv;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// finite differences (verification oracle; only ever calls forward code)

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate of x.
// f re-evaluates the forward pass and must be deterministic.
template <class Real, class F>
std::vector<Real> finite_diff_grad(F&& f, Tensor<Real>& x, Real h = Real(1e-5)) {
    std::vector<Real> g(x.data().size());
    for (size_t i = 0; i < x.data().size(); ++i) {
        const Real orig = x.data()[i];
        x.data()[i] = orig + h;
        const Real fp = f();
        x.data()[i] = orig - h;
        const Real fm = f();
        x.data()[i] = orig;
        g[i] = (fp - fm) / (Real(2) * h);
    }
    return g;
}

// max over coordinates of |a-n| / max(|a|, |n|, floor); the floor keeps the
// metric meaningful where the true gradient is near zero.
template <class Real>
double max_rel_error(const std::vector<Real>& analytic, const std::vector<Real>& numeric,
                     double floor = 1e-2) {
    double worst = 0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        const double a = static_cast<double>(analytic[i]);
        const double n = static_cast<double>(numeric[i]);
        const double denom = std::max({std::abs(a), std::abs(n), floor});
        worst = std::max(worst, std::abs(a - n) / denom);
    }
    return worst;
}

}  // namespace sdtl
