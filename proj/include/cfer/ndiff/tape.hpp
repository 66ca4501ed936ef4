// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "cfer/ndiff/tensor.hpp"

namespace cfer::nd {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// tape that produced it is alive.
struct Var {
  Tape *tape = nullptr;
  std::size_t id = 0;

  const Tensor &value() const;
  const Shape &shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
};

/// Called once during the reverse sweep with the node's own id; reads the
/// node's accumulated gradient and adds contributions into its parents.
using BackwardFn = std::function<void(Tape &, std::size_t)>;

/// Append-only record of a differentiation graph. Creation order is a valid
/// topological order, so the reverse sweep simply walks the nodes backwards.
class Tape {
public:
  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  /// Leaf that owns its value.
  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return append(std::move(n));
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Leaf that refers to an externally owned tensor (model parameters). The
  /// referenced tensor must outlive the tape and stay unmodified.
  Var borrow(const Tensor &value, bool requires_grad = true) {
    Node n;
    n.borrowed = &value;
    n.requires_grad = requires_grad;
    return append(std::move(n));
  }

  /// Records an operation result. The backward rule is dropped when no parent
  /// needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
    return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
  }

  Var push(Tensor value, std::span<const Var> parents, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    for (const Var &p : parents) {
      if (nodes_[p.id].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.backward = std::move(backward);
    return append(std::move(n));
  }

  const Tensor &value(std::size_t id) const {
    const Node &n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.value;
  }
  const Tensor &value(Var v) const { return value(v.id); }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

  /// Gradient buffer of a node, zero-allocated on first access.
  Tensor &grad(std::size_t id) {
    Node &n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor(value(id).shape());
      n.has_grad = true;
    }
    return n.grad;
  }
  Tensor &grad(Var v) { return grad(v.id); }

  /// Gradient w.r.t. a node after backward(); zeros if the node was not
  /// reached from the loss.
  Tensor grad_or_zero(Var v) const {
    const Node &n = nodes_[v.id];
    return n.has_grad ? n.grad : Tensor(value(v.id).shape());
  }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss.
  void backward(Var loss) {
    if (value(loss).size() != 1)
      throw ShapeError("backward() requires a scalar loss, got " + shape_str(value(loss).shape()));
    for (Node &n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    grad(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node &n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, i);
    }
  }

private:
  struct Node {
    Tensor value;
    const Tensor *borrowed = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var append(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor &Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

} // namespace cfer::nd
