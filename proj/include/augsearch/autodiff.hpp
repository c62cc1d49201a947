#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "augsearch/tensor.hpp"

// Reverse-mode automatic differentiation over dense Tensors.
//
// A Tape records primitive operations in execution order. Each recorded node
// owns its forward value and, lazily, a gradient buffer of the same shape.
// Node ids increase with recording order, so a reverse sweep over ids is a
// valid reverse topological order. A tape supports exactly one backward pass.
//
// Nodes that do not depend on any gradient-requiring leaf are recorded
// without a backward closure and are skipped entirely during the sweep.
namespace augsearch::ad {

using NodeId = std::uint32_t;

class Tape;

/// Handle to a node on a Tape (the differentiable tensor).
class Var {
public:
    Var() = default;

    bool valid() const noexcept { return tape_ != nullptr; }
    Tape& tape() const { return *tape_; }
    NodeId id() const noexcept { return id_; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    double item() const { return value().item(); }
    bool requires_grad() const;

private:
    friend class Tape;
    Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    NodeId id_ = 0;
};

class Tape {
public:
    /// Propagates the gradient of the node's output into its parents.
    using BackwardFn = std::function<void(Tape&, const Tensor& out_value, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Records the result of a primitive. `backward` is dropped when no
    /// parent requires a gradient. Throws NumericError on non-finite values.
    Var record(std::string_view op, Tensor value, std::span<const Var> parents, BackwardFn backward);

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
    void backward(const Var& loss);

    bool consumed() const noexcept { return consumed_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

    /// Accumulated gradient after backward(); zeros if nothing reached the node.
    Tensor grad(const Var& v) const;
    bool has_grad(const Var& v) const { return nodes_[v.id()].has_grad; }

    /// Mutable gradient buffer of a parent, allocated on first use. Only
    /// valid inside a backward closure for a node that requires grad.
    Tensor& grad_buffer(const Var& v);
    void accumulate(const Var& v, const Tensor& g);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        BackwardFn backward;
    };

    void check_owner(const Var& v) const;

    std::deque<Node> nodes_;
    bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Primitive set. Binary arithmetic broadcasts numpy-style.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var matmul(const Var& a, const Var& b);

Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var clamp(const Var& a, double lo, double hi);

/// Softmax over the last axis.
Var softmax(const Var& a);

Var sum(const Var& a);
Var sum(const Var& a, std::size_t axis, bool keepdim = false);
Var mean(const Var& a);
Var mean(const Var& a, std::size_t axis, bool keepdim = false);

Var broadcast_to(const Var& a, const Shape& shape);
Var reshape(const Var& a, const Shape& shape);
/// Half-open range [begin, end) along `axis`.
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Index `i` along `axis`; the axis is removed.
Var select(const Var& a, std::size_t axis, std::size_t i);
Var concat(std::span<const Var> parts, std::size_t axis);
/// Stacks equal-shape tensors along a new leading axis.
Var stack(std::span<const Var> parts);

/// sum_i weights[i] * xs[i]; `weights` is a vector of length xs.size().
Var weighted_sum(const Var& weights, std::span<const Var> xs);

/// Forward identity, backward annihilator.
Var stop_grad(const Var& a);
/// Forward value is `hard` bit-for-bit; the gradient flows entirely to `soft`.
Var straight_through(const Var& hard, const Var& soft);

/// Convolution over [B, Cin, H, W] with weights [Cout, Cin, k, k] and bias [Cout].
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t padding);

/// Mean softmax cross-entropy of logits [B, C] against integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }

/// One-hot (along the last axis) of the argmax of each row of `t`; ties
/// resolve to the lowest index.
Tensor argmax_one_hot(const Tensor& t);

}  // namespace augsearch::ad
