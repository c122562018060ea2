#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "osar/errors.hpp"
#include "osar/tensor.hpp"

namespace osar {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode autodiff tape.
///
/// Each recorded node owns its forward value (or borrows a parameter tensor)
/// plus a lazily allocated gradient buffer. backward() replays the recorded
/// closures in reverse order; parameter gradients accumulate directly into
/// the parameter tensor's own grad buffer, so several tapes may contribute
/// to one optimizer step.
template <std::floating_point T>
class Tape {
public:
  /// Receives the tape and the handle of the node being differentiated.
  using BackwardFn = std::function<void(Tape&, Var self)>;

  /// An inference tape borrows parameters read-only and never records gradients.
  enum class Mode { training, inference };

  explicit Tape(Mode mode = Mode::training) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Records a value that never receives gradient.
  Var constant(Tensor<T> value) { return push(Node{std::move(value), nullptr, nullptr, {}, false, {}}); }

  /// Records an input that receives gradient (used by gradient checks).
  Var input(Tensor<T> value) { return push(Node{std::move(value), nullptr, nullptr, {}, true, {}}); }

  /// Records a borrowed parameter. On a training tape its grad buffer is
  /// enabled and accumulated into; on an inference tape it is read-only.
  Var parameter(Tensor<T>& param) {
    if (mode_ == Mode::inference) return push(Node{Tensor<T>{}, &param, nullptr, {}, false, {}});
    param.enable_grad();
    return push(Node{Tensor<T>{}, &param, &param, {}, true, {}});
  }

  Var record(Tensor<T> value, bool requires_grad, BackwardFn backward) {
    requires_grad = requires_grad && mode_ == Mode::training;
    return push(Node{std::move(value), nullptr, nullptr, {}, requires_grad,
                     requires_grad ? std::move(backward) : BackwardFn{}});
  }

  Mode mode() const noexcept { return mode_; }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.borrowed ? *n.borrowed : n.value;
  }
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient buffer of a node, allocated zeroed on first access.
  std::span<T> grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.param) return n.param->grad();
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }

  bool has_grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param != nullptr || !n.grad.empty();
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded node.
  void backward(Var loss) {
    if (value(loss).size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_string(shape(loss)));
    if (!requires_grad(loss)) return;
    grad(loss)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) {
        n.backward(*this, Var{i});
        std::vector<T>().swap(n.grad);  // intermediate gradients are consumed
      }
    }
  }

private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* borrowed;
    Tensor<T>* param;
    std::vector<T> grad;
    bool requires_grad;
    BackwardFn backward;
  };

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  Mode mode_;
  std::deque<Node> nodes_;
};

}  // namespace osar
