#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "flora/error.hpp"
#include "flora/tensor.hpp"

namespace flora {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
};

/// Ordered record of primitive operations. Nodes are appended in evaluation
/// order, so node ids are already a topological order; `backward` walks them
/// in reverse exactly once.
///
/// A non-recording tape evaluates values only and keeps no closures, which is
/// what inference paths use.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false, nullptr, 0});
    return {this, nodes_.size() - 1};
  }

  /// Leaf bound to a parameter tensor. Each tensor gets one leaf per tape so
  /// repeated uses accumulate into a single gradient.
  Var param(Tensor& p) {
    for (const auto& [ptr, id] : param_leaves_) {
      if (ptr == &p) return {this, id};
    }
    const bool needs = record_ && p.requires_grad();
    nodes_.push_back(Node{Tensor(p.shape(), p.values()), {}, {}, needs, &p, p.version()});
    const std::size_t id = nodes_.size() - 1;
    param_leaves_.emplace_back(&p, id);
    return {this, id};
  }

  /// Appends an op result. `fn` is kept only when some input needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    if (record_) {
      for (const Var& v : inputs) needs = needs || nodes_[v.id].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, needs, nullptr, 0});
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  const std::vector<double>& grad(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient accumulator of a node, allocated on first use.
  std::vector<double>& grad_acc(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  /// Populates `grad` on every requires_grad parameter leaf with the
  /// derivative of the scalar `loss`.
  void backward(Var loss) {
    if (loss.tape != this) throw NumericError("backward: loss belongs to a different tape");
    if (!record_) throw NumericError("backward on a non-recording tape");
    if (nodes_[loss.id].value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(nodes_[loss.id].value.shape()));
    }
    if (backward_done_) throw NumericError("backward called twice on the same tape");
    for (const auto& [ptr, id] : param_leaves_) {
      if (ptr->version() != nodes_[id].version) {
        throw NumericError("backward: parameter mutated after it was recorded on the tape");
      }
    }
    backward_done_ = true;
    grad_acc(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
    for (const auto& [ptr, id] : param_leaves_) {
      if (!nodes_[id].needs_grad) continue;
      auto& g = nodes_[id].grad;
      if (g.empty()) g.assign(ptr->size(), 0.0);
      ptr->set_grad(g);
    }
  }

  /// Smallest distance of any recorded non-smooth op input to its kink.
  double kink_margin() const { return kink_margin_; }
  void note_kink(double distance) { kink_margin_ = std::min(kink_margin_, distance); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    bool needs_grad;
    Tensor* param;
    std::uint64_t version;
  };

  bool record_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::vector<std::pair<Tensor*, std::size_t>> param_leaves_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace flora
