#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "edlab/tensor.hpp"

namespace edlab {

class Graph;

// Handle to a node recorded on a Graph. Cheap to copy; valid for the
// lifetime of its Graph.
class Var {
public:
    Var() = default;
    Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

    Graph& graph() const { return *graph_; }
    std::uint32_t id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }

private:
    Graph* graph_ = nullptr;
    std::uint32_t id_ = 0;
};

// Tape for reverse-mode differentiation. Nodes are appended in
// construction order, so every node's inputs precede it and a reverse
// sweep is a valid topological order.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaf owning its value.
    Var input(Tensor value);
    // Leaf referencing external storage (typically a parameter); the
    // tensor must outlive the graph and stay unmodified while it is used.
    Var param(const Tensor& value);

    Var record(Tensor value, std::vector<std::uint32_t> inputs, BackwardFn backward);

    const Tensor& value(std::uint32_t id) const;
    // Gradient of the last backward() loss w.r.t. node `v`, or nullptr if
    // the node was not on a path from `wrt` to the loss.
    const Tensor* grad(Var v) const;

    // Populates gradients of `loss` for every tensor in `wrt`. Nodes outside
    // `wrt` still carry gradient through themselves when they lie between a
    // `wrt` tensor and the loss, but leaves outside `wrt` get nothing.
    void backward(Var loss, std::span<const Var> wrt);
    void backward(Var loss, std::initializer_list<Var> wrt) {
        backward(loss, std::span<const Var>(wrt.begin(), wrt.size()));
    }

    std::size_t size() const { return nodes_.size(); }

    // Used by op backward functions.
    bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }
    const Tensor& grad_of(std::uint32_t id) const { return nodes_[id].grad; }
    Tensor& grad_acc(std::uint32_t id);
    const std::vector<std::uint32_t>& inputs(std::uint32_t id) const { return nodes_[id].inputs; }

private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        std::vector<std::uint32_t> inputs;
        BackwardFn backward;
        Tensor grad;
        bool needs_grad = false;
        bool has_grad = false;
        const Tensor& value() const { return external ? *external : owned; }
    };
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

// ---- differentiable operations -------------------------------------------
// No broadcasting except add_bias. Shapes are checked and mismatches raise
// DimensionError.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
// x[... x n] + b[n] on every row.
Var add_bias(Var x, Var b);
Var matmul(Var a, Var b);
Var gelu(Var a);
Var abs(Var a);
// Scalar [1] sum of all entries.
Var sum(Var a);
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f);
// Gathers rows of table[V x d]; gradient scatter-adds into table.
Var embedding_lookup(Var table, std::span<const Token> ids);
// Concatenates along the last axis; leading extents must agree.
Var concat(Var a, Var b);
Var slice_rows(Var a, std::size_t start, std::size_t count);
// Same data, new shape of equal element count.
Var reshape(Var a, Shape shape);
// Row r of a matrix as a rank-1 tensor.
Var row(Var a, std::size_t r);
// Copy of base with row r replaced by new_row; other rows bitwise equal.
Var with_row(Var base, std::size_t r, Var new_row);
// Multi-head causal self-attention over a packed [T x 3d] q|k|v matrix.
Var causal_self_attention(Var qkv, std::size_t n_heads);
// Mean over masked positions of -log softmax(logits[t])[targets[t]].
Var cross_entropy(Var logits, std::span<const Token> targets, std::span<const std::uint8_t> mask);

}  // namespace edlab
