#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "mxacl/tensor.hpp"

namespace mxacl {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  int id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode gradient record.
///
/// Operations are appended in execution order, so the node list is always
/// topologically sorted. backward() walks it in reverse. A second backward()
/// requires reset_grads() first; gradients are never silently accumulated
/// across passes.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  /// With grad_enabled = false nothing requires grad and no backward rules are kept.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  /// A leaf that receives a gradient.
  Var leaf(Tensor value);
  /// Leaf for a model parameter. Repeated calls return the same node.
  Var param(const Parameter& p);
  /// Make param(p) resolve to `v` (used by gradient checks to route a parameter through a probe).
  void bind(const Parameter& p, Var v);

  /// Append an operation. `backward` may be empty when no input requires grad.
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward, const char* op);

  void backward(Var loss);
  void reset_grads();
  bool backward_done() const { return backward_done_; }

  /// Gradient of the last backward pass w.r.t. `v`; zero tensor if `v` was not reached.
  Tensor grad(Var v) const;
  /// Gradient w.r.t. a parameter registered via param(); nullopt if not on this tape or not reached.
  std::optional<Tensor> param_grad(const Parameter& p) const;

  /// Adds `g` into the gradient buffer of node `id` (no-op when it does not require grad).
  void accumulate(int id, const Tensor& g);
  /// Same, but avoids a temporary when the caller can write in place.
  Tensor* grad_buffer(int id);

  const Tensor& value(int id) const { return nodes_[id]->value; }
  bool requires_grad(int id) const { return nodes_[id]->requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<const Parameter*, int> params_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace mxacl
