#include "augsearch/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "augsearch/errors.hpp"

namespace augsearch::ad {

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const {
    if (!tape_) throw UsageError("value() on an unbound Var");
    return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

void Tape::check_owner(const Var& v) const {
    if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size()) {
        throw UsageError("Var does not belong to this tape");
    }
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    if (consumed_) throw UsageError("cannot record on a consumed tape");
    if (!value.all_finite()) throw NumericError("leaf tensor holds non-finite values");
    nodes_.push_back(Node{std::move(value), {}, false, requires_grad, nullptr});
    return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> parents, BackwardFn backward) {
    if (consumed_) throw UsageError("cannot record on a consumed tape");
    if (!value.all_finite()) {
        throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                           to_string(value.shape()));
    }
    bool rg = false;
    for (const Var& p : parents) {
        check_owner(p);
        rg = rg || nodes_[p.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, false, rg, rg ? std::move(backward) : nullptr});
    return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

void Tape::backward(const Var& loss) {
    check_owner(loss);
    if (consumed_) throw UsageError("backward on a consumed tape");
    if (loss.size() != 1) {
        throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    consumed_ = true;
    Node& root = nodes_[loss.id()];
    if (!root.requires_grad) return;
    root.grad = Tensor(root.value.shape(), 1.0);
    root.has_grad = true;
    for (NodeId id = loss.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.has_grad && n.backward) n.backward(*this, n.value, n.grad);
    }
}

Tensor Tape::grad(const Var& v) const {
    check_owner(v);
    const Node& n = nodes_[v.id()];
    return n.has_grad ? n.grad : Tensor(n.value.shape(), 0.0);
}

Tensor& Tape::grad_buffer(const Var& v) {
    Node& n = nodes_[v.id()];
    if (!n.has_grad) {
        n.grad = Tensor(n.value.shape(), 0.0);
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::accumulate(const Var& v, const Tensor& g) {
    if (!v.requires_grad()) return;
    grad_buffer(v) += g;
}

// ---------------------------------------------------------------------------
// helpers

namespace {

Tape& same_tape(const Var& a, const Var& b, std::string_view op) {
    if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
        throw UsageError(std::string(op) + ": operands live on different tapes");
    }
    return a.tape();
}

struct Broadcast {
    Shape out;
    std::vector<std::size_t> a_stride;
    std::vector<std::size_t> b_stride;
    bool same = false;
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, std::string_view op) {
    Broadcast p;
    if (a == b) {
        p.out = a;
        p.same = true;
        return p;
    }
    const std::size_t r = std::max(a.size(), b.size());
    p.out.assign(r, 1);
    p.a_stride.assign(r, 0);
    p.b_stride.assign(r, 0);
    const auto as = contiguous_strides(a);
    const auto bs = contiguous_strides(b);
    for (std::size_t i = 0; i < r; ++i) {
        const std::ptrdiff_t ai = static_cast<std::ptrdiff_t>(i + a.size()) - static_cast<std::ptrdiff_t>(r);
        const std::ptrdiff_t bi = static_cast<std::ptrdiff_t>(i + b.size()) - static_cast<std::ptrdiff_t>(r);
        const std::size_t da = ai >= 0 ? a[ai] : 1;
        const std::size_t db = bi >= 0 ? b[bi] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                             to_string(b));
        }
        p.out[i] = std::max(da, db);
        if (ai >= 0 && da != 1) p.a_stride[i] = as[ai];
        if (bi >= 0 && db != 1) p.b_stride[i] = bs[bi];
    }
    return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
    const std::size_t n = numel(p.out);
    if (p.same) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    const std::size_t r = p.out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ai = 0, bi = 0;
    for (std::size_t o = 0; o < n; ++o) {
        f(o, ai, bi);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            ai += p.a_stride[d];
            bi += p.b_stride[d];
            if (idx[d] < p.out[d]) break;
            ai -= p.a_stride[d] * idx[d];
            bi -= p.b_stride[d] * idx[d];
            idx[d] = 0;
        }
    }
}

// Binary elementwise op; bwd(x, y, out) returns (d out/dx, d out/dy).
template <typename Fwd, typename Bwd>
Var binary(std::string_view op, const Var& a, const Var& b, Fwd fwd, Bwd bwd) {
    Tape& tape = same_tape(a, b, op);
    const Broadcast plan = plan_broadcast(a.shape(), b.shape(), op);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(plan.out);
    for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
    const Var parents[] = {a, b};
    return tape.record(op, std::move(out), parents,
                       [a, b, plan, bwd](Tape& t, const Tensor& y, const Tensor& g) {
                           const Tensor& x1 = a.value();
                           const Tensor& x2 = b.value();
                           Tensor* ga = a.requires_grad() ? &t.grad_buffer(a) : nullptr;
                           Tensor* gb = b.requires_grad() ? &t.grad_buffer(b) : nullptr;
                           for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                               const auto [da, db] = bwd(x1[i], x2[j], y[o]);
                               if (ga) (*ga)[i] += g[o] * da;
                               if (gb) (*gb)[j] += g[o] * db;
                           });
                       });
}

// Unary elementwise op; df(x, y) is dy/dx.
template <typename Fwd, typename Dfn>
Var unary(std::string_view op, const Var& a, Fwd f, Dfn df) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    const Var parents[] = {a};
    return a.tape().record(op, std::move(out), parents, [a, df](Tape& t, const Tensor& y, const Tensor& g) {
        Tensor& ga = t.grad_buffer(a);
        const Tensor& x = a.value();
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
    });
}

struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, std::string_view op) {
    if (axis >= s.size()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         to_string(s));
    }
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// arithmetic

Var add(const Var& a, const Var& b) {
    return binary("add", a, b, [](double x, double y) { return x + y; },
                  [](double, double, double) { return std::pair{1.0, 1.0}; });
}

Var sub(const Var& a, const Var& b) {
    return binary("sub", a, b, [](double x, double y) { return x - y; },
                  [](double, double, double) { return std::pair{1.0, -1.0}; });
}

Var mul(const Var& a, const Var& b) {
    return binary("mul", a, b, [](double x, double y) { return x * y; },
                  [](double x, double y, double) { return std::pair{y, x}; });
}

Var div(const Var& a, const Var& b) {
    return binary("div", a, b, [](double x, double y) { return x / y; },
                  [](double, double y, double z) { return std::pair{1.0 / y, -z / y}; });
}

Var neg(const Var& a) {
    return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(const Var& a, double c) {
    return unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
    return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var matmul(const Var& a, const Var& b) {
    Tape& tape = same_tape(a, b, "matmul");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
        throw ShapeError("matmul: incompatible shapes " + to_string(as) + " and " + to_string(bs));
    }
    const std::size_t m = as[0], k = as[1], n = bs[1];
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
        }
    const Var parents[] = {a, b};
    return tape.record("matmul", std::move(out), parents, [a, b, m, k, n](Tape& t, const Tensor&, const Tensor& g) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        if (a.requires_grad()) {
            Tensor& ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
                    ga[i * k + p] += s;
                }
        }
        if (b.requires_grad()) {
            Tensor& gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                }
        }
    });
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities

Var exp(const Var& a) {
    return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
    for (double v : a.value().values()) {
        if (!(v > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(v));
    }
    return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sigmoid(const Var& a) {
    return unary(
        "sigmoid", a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Var relu(const Var& a) {
    return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var clamp(const Var& a, double lo, double hi) {
    if (lo > hi) throw DomainError("clamp: lo > hi");
    return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                 [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var softmax(const Var& a) {
    const Tensor& av = a.value();
    if (av.rank() == 0) throw ShapeError("softmax: needs at least one axis");
    const std::size_t cols = av.shape().back();
    const std::size_t rows = cols == 0 ? 0 : av.size() / cols;
    Tensor out(av.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * cols;
        double* y = out.data() + r * cols;
        const double mx = *std::max_element(x, x + cols);
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += (y[c] = std::exp(x[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) y[c] /= s;
    }
    const Var parents[] = {a};
    return a.tape().record("softmax", std::move(out), parents, [a, rows, cols](Tape& t, const Tensor& y, const Tensor& g) {
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t o = r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[o + c] * y[o + c];
            for (std::size_t c = 0; c < cols; ++c) ga[o + c] += y[o + c] * (g[o + c] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// reductions and shape manipulation

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    const Var parents[] = {a};
    return a.tape().record("sum", Tensor::scalar(s), parents, [a](Tape& t, const Tensor&, const Tensor& g) {
        Tensor& ga = t.grad_buffer(a);
        const double gv = g[0];
        for (double& v : ga.values()) v += gv;
    });
}

Var sum(const Var& a, std::size_t axis, bool keepdim) {
    const Shape& s = a.shape();
    const AxisSplit sp = split_axis(s, axis, "sum");
    Shape os = s;
    if (keepdim) os[axis] = 1;
    else os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    const Tensor& av = a.value();
    Tensor out(os);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t e = 0; e < sp.extent; ++e)
            for (std::size_t i = 0; i < sp.inner; ++i)
                out[o * sp.inner + i] += av[(o * sp.extent + e) * sp.inner + i];
    const Var parents[] = {a};
    return a.tape().record("sum_axis", std::move(out), parents, [a, sp](Tape& t, const Tensor&, const Tensor& g) {
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t e = 0; e < sp.extent; ++e)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    ga[(o * sp.extent + e) * sp.inner + i] += g[o * sp.inner + i];
    });
}

Var mean(const Var& a) {
    if (a.size() == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var mean(const Var& a, std::size_t axis, bool keepdim) {
    const std::size_t n = split_axis(a.shape(), axis, "mean").extent;
    if (n == 0) throw ShapeError("mean over an empty axis");
    return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(n));
}

Var broadcast_to(const Var& a, const Shape& shape) {
    const Broadcast plan = plan_broadcast(a.shape(), shape, "broadcast_to");
    if (plan.out != shape) {
        throw ShapeError("broadcast_to: " + to_string(a.shape()) + " does not broadcast to " + to_string(shape));
    }
    const Tensor& av = a.value();
    Tensor out(shape);
    for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = av[i]; });
    const Var parents[] = {a};
    return a.tape().record("broadcast_to", std::move(out), parents, [a, plan](Tape& t, const Tensor&, const Tensor& g) {
        Tensor& ga = t.grad_buffer(a);
        for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t) { ga[i] += g[o]; });
    });
}

Var reshape(const Var& a, const Shape& shape) {
    Tensor out = a.value().reshaped(shape);
    const Var parents[] = {a};
    return a.tape().record("reshape", std::move(out), parents, [a](Tape& t, const Tensor&, const Tensor& g) {
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = a.shape();
    const AxisSplit sp = split_axis(s, axis, "slice");
    if (begin > end || end > sp.extent) {
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of bounds for axis of length " + std::to_string(sp.extent));
    }
    const std::size_t len = end - begin;
    Shape os = s;
    os[axis] = len;
    const Tensor& av = a.value();
    Tensor out(os);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t e = 0; e < len; ++e)
            for (std::size_t i = 0; i < sp.inner; ++i)
                out[(o * len + e) * sp.inner + i] = av[(o * sp.extent + begin + e) * sp.inner + i];
    const Var parents[] = {a};
    return a.tape().record("slice", std::move(out), parents, [a, sp, begin, len](Tape& t, const Tensor&, const Tensor& g) {
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t e = 0; e < len; ++e)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    ga[(o * sp.extent + begin + e) * sp.inner + i] += g[(o * len + e) * sp.inner + i];
    });
}

Var select(const Var& a, std::size_t axis, std::size_t i) {
    Var s = slice(a, axis, i, i + 1);
    Shape os = a.shape();
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    return reshape(s, os);
}

Var concat(std::span<const Var> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    const Shape& first = parts[0].shape();
    const AxisSplit sp0 = split_axis(first, axis, "concat");
    std::vector<std::size_t> extents;
    std::size_t total = 0;
    for (const Var& p : parts) {
        same_tape(parts[0], p, "concat");
        Shape s = p.shape();
        if (s.size() != first.size()) throw ShapeError("concat: rank mismatch " + to_string(first) + " vs " + to_string(s));
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != first[d]) {
                throw ShapeError("concat: shape mismatch " + to_string(first) + " vs " + to_string(s));
            }
        }
        extents.push_back(s[axis]);
        total += s[axis];
    }
    Shape os = first;
    os[axis] = total;
    Tensor out(os);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& pv = parts[k].value();
        const std::size_t len = extents[k];
        for (std::size_t o = 0; o < sp0.outer; ++o)
            for (std::size_t e = 0; e < len; ++e)
                for (std::size_t i = 0; i < sp0.inner; ++i)
                    out[(o * total + offset + e) * sp0.inner + i] = pv[(o * len + e) * sp0.inner + i];
        offset += len;
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    const std::size_t outer = sp0.outer, inner = sp0.inner;
    return parts[0].tape().record("concat", std::move(out), ps,
                                  [ps, extents, total, outer, inner](Tape& t, const Tensor&, const Tensor& g) {
                                      std::size_t offset = 0;
                                      for (std::size_t k = 0; k < ps.size(); ++k) {
                                          const std::size_t len = extents[k];
                                          if (ps[k].requires_grad()) {
                                              Tensor& gp = t.grad_buffer(ps[k]);
                                              for (std::size_t o = 0; o < outer; ++o)
                                                  for (std::size_t e = 0; e < len; ++e)
                                                      for (std::size_t i = 0; i < inner; ++i)
                                                          gp[(o * len + e) * inner + i] +=
                                                              g[(o * total + offset + e) * inner + i];
                                          }
                                          offset += len;
                                      }
                                  });
}

Var stack(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("stack: no operands");
    std::vector<Var> expanded;
    expanded.reserve(parts.size());
    for (const Var& p : parts) {
        Shape s = p.shape();
        s.insert(s.begin(), 1);
        expanded.push_back(reshape(p, s));
    }
    return concat(expanded, 0);
}

Var weighted_sum(const Var& weights, std::span<const Var> xs) {
    if (xs.empty()) throw ShapeError("weighted_sum: no operands");
    const Tensor& w = weights.value();
    if (w.size() != xs.size()) {
        throw ShapeError("weighted_sum: " + std::to_string(w.size()) + " weights for " +
                         std::to_string(xs.size()) + " operands");
    }
    const Shape& s = xs[0].shape();
    Tensor out(s);
    for (std::size_t k = 0; k < xs.size(); ++k) {
        same_tape(weights, xs[k], "weighted_sum");
        if (xs[k].shape() != s) {
            throw ShapeError("weighted_sum: operand shapes " + to_string(s) + " and " + to_string(xs[k].shape()));
        }
        const double wk = w[k];
        if (wk == 0.0) continue;
        const Tensor& xv = xs[k].value();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * xv[i];
    }
    std::vector<Var> ps;
    ps.reserve(xs.size() + 1);
    ps.push_back(weights);
    ps.insert(ps.end(), xs.begin(), xs.end());
    return weights.tape().record("weighted_sum", std::move(out), ps, [ps](Tape& t, const Tensor&, const Tensor& g) {
        const Var& wv = ps[0];
        const Tensor& w = wv.value();
        Tensor* gw = wv.requires_grad() ? &t.grad_buffer(wv) : nullptr;
        for (std::size_t k = 1; k < ps.size(); ++k) {
            const Var& x = ps[k];
            const Tensor& xv = x.value();
            if (gw) {
                double dot = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * xv[i];
                (*gw)[k - 1] += dot;
            }
            if (x.requires_grad() && w[k - 1] != 0.0) {
                Tensor& gx = t.grad_buffer(x);
                const double wk = w[k - 1];
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += wk * g[i];
            }
        }
    });
}

Var stop_grad(const Var& a) {
    return a.tape().record("stop_grad", a.value(), {}, nullptr);
}

Var straight_through(const Var& hard, const Var& soft) {
    Tape& tape = same_tape(hard, soft, "straight_through");
    if (hard.shape() != soft.shape()) {
        throw ShapeError("straight_through: hard " + to_string(hard.shape()) + " vs soft " + to_string(soft.shape()));
    }
    const Var parents[] = {soft};
    return tape.record("straight_through", hard.value(), parents,
                       [soft](Tape& t, const Tensor&, const Tensor& g) { t.grad_buffer(soft) += g; });
}

// ---------------------------------------------------------------------------
// network primitives

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t padding) {
    Tape& tape = same_tape(x, weight, "conv2d");
    same_tape(x, bias, "conv2d");
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || bias.shape() != Shape{ws[0]} ||
        stride == 0) {
        throw ShapeError("conv2d: input " + to_string(xs) + ", weight " + to_string(ws) + ", bias " +
                         to_string(bias.shape()));
    }
    const std::size_t B = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
    const std::size_t Co = ws[0], k = ws[2];
    if (H + 2 * padding < k || W + 2 * padding < k) throw ShapeError("conv2d: kernel larger than padded input");
    const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
    const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    const Tensor& bv = bias.value();
    Tensor out(Shape{B, Co, Ho, Wo});

    // Visits (output index, input index, weight index) for every valid tap.
    auto taps = [=](auto&& f) {
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t co = 0; co < Co; ++co)
                for (std::size_t ci = 0; ci < Ci; ++ci)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const std::size_t widx = ((co * Ci + ci) * k + ky) * k + kx;
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                          static_cast<std::ptrdiff_t>(padding);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                const std::size_t obase = ((b * Co + co) * Ho + oy) * Wo;
                                const std::size_t ibase = ((b * Ci + ci) * H + static_cast<std::size_t>(iy)) * W;
                                for (std::size_t ox = 0; ox < Wo; ++ox) {
                                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                              static_cast<std::ptrdiff_t>(padding);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                    f(obase + ox, ibase + static_cast<std::size_t>(ix), widx);
                                }
                            }
                        }
    };
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t p = 0; p < Ho * Wo; ++p) out[(b * Co + co) * Ho * Wo + p] = bv[co];
    taps([&](std::size_t o, std::size_t i, std::size_t w) { out[o] += wv[w] * xv[i]; });

    const Var parents[] = {x, weight, bias};
    return tape.record("conv2d", std::move(out), parents,
                       [x, weight, bias, taps, B, Co, Ho, Wo](Tape& t, const Tensor&, const Tensor& g) {
                           const Tensor& xv = x.value();
                           const Tensor& wv = weight.value();
                           if (x.requires_grad()) {
                               Tensor& gx = t.grad_buffer(x);
                               taps([&](std::size_t o, std::size_t i, std::size_t w) { gx[i] += wv[w] * g[o]; });
                           }
                           if (weight.requires_grad()) {
                               Tensor& gw = t.grad_buffer(weight);
                               taps([&](std::size_t o, std::size_t i, std::size_t w) { gw[w] += xv[i] * g[o]; });
                           }
                           if (bias.requires_grad()) {
                               Tensor& gb = t.grad_buffer(bias);
                               for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t co = 0; co < Co; ++co)
                                       for (std::size_t p = 0; p < Ho * Wo; ++p)
                                           gb[co] += g[(b * Co + co) * Ho * Wo + p];
                           }
                       });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
    const Shape& s = logits.shape();
    if (s.size() != 2 || s[0] != labels.size() || s[0] == 0) {
        throw ShapeError("cross_entropy: logits " + to_string(s) + " for " + std::to_string(labels.size()) +
                         " labels");
    }
    const std::size_t B = s[0], C = s[1];
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= C) {
            throw DomainError("cross_entropy: class id " + std::to_string(y) + " outside [0," + std::to_string(C) + ")");
        }
    }
    const Tensor& z = logits.value();
    Tensor probs(s);
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* row = z.data() + b * C;
        const double mx = *std::max_element(row, row + C);
        double se = 0.0;
        for (std::size_t c = 0; c < C; ++c) se += (probs[b * C + c] = std::exp(row[c] - mx));
        for (std::size_t c = 0; c < C; ++c) probs[b * C + c] /= se;
        loss += mx + std::log(se) - row[labels[b]];
    }
    loss /= static_cast<double>(B);
    std::vector<int> ys(labels.begin(), labels.end());
    const Var parents[] = {logits};
    return logits.tape().record("cross_entropy", Tensor::scalar(loss), parents,
                                [logits, probs, ys, B, C](Tape& t, const Tensor&, const Tensor& g) {
                                    Tensor& gz = t.grad_buffer(logits);
                                    const double k = g[0] / static_cast<double>(B);
                                    for (std::size_t b = 0; b < B; ++b)
                                        for (std::size_t c = 0; c < C; ++c) {
                                            const double target = static_cast<int>(c) == ys[b] ? 1.0 : 0.0;
                                            gz[b * C + c] += k * (probs[b * C + c] - target);
                                        }
                                });
}

Tensor argmax_one_hot(const Tensor& t) {
    if (t.rank() == 0) throw ShapeError("argmax_one_hot: needs at least one axis");
    const std::size_t cols = t.shape().back();
    Tensor out(t.shape());
    if (cols == 0) return out;
    for (std::size_t r = 0; r < t.size() / cols; ++r) {
        const double* row = t.data() + r * cols;
        out[r * cols + static_cast<std::size_t>(std::max_element(row, row + cols) - row)] = 1.0;
    }
    return out;
}

}  // namespace augsearch::ad
