#include "mxacl/tape.hpp"

#include <string>

namespace mxacl {

Var Tape::constant(Tensor value) {
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Tensor value) {
  Var v = constant(std::move(value));
  nodes_.back()->requires_grad = grad_enabled_;
  return v;
}

Var Tape::param(const Parameter& p) {
  if (auto it = params_.find(&p); it != params_.end()) return Var(this, it->second);
  Var v = leaf(p.value);
  params_.emplace(&p, v.id());
  return v;
}

void Tape::bind(const Parameter& p, Var v) {
  if (&v.tape() != this) throw ValidationError("tape: bind() with a Var from another tape");
  params_[&p] = v.id();
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward, const char* op) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
  bool needs = false;
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (&in.tape() != this) throw ValidationError(std::string(op) + ": input from another tape");
      needs = needs || nodes_[in.id()]->requires_grad;
    }
  }
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  node->requires_grad = needs;
  if (needs) node->backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ValidationError("backward: loss belongs to another tape");
  if (nodes_.empty()) throw ValidationError("backward: empty tape");
  if (backward_done_) throw ValidationError("backward: called twice without reset_grads()");
  if (nodes_[loss.id()]->value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(nodes_[loss.id()]->value.shape()));
  }
  backward_done_ = true;
  if (!nodes_[loss.id()]->requires_grad) return;
  accumulate(loss.id(), Tensor(nodes_[loss.id()]->value.shape(), 1.0));
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = *nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

void Tape::reset_grads() {
  for (auto& n : nodes_) {
    n->grad = Tensor();
    n->has_grad = false;
  }
  backward_done_ = false;
}

Tensor Tape::grad(Var v) const {
  const Node& n = *nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

std::optional<Tensor> Tape::param_grad(const Parameter& p) const {
  auto it = params_.find(&p);
  if (it == params_.end()) return std::nullopt;
  const Node& n = *nodes_[it->second];
  if (!n.has_grad) return std::nullopt;
  return n.grad;
}

Tensor* Tape::grad_buffer(int id) {
  Node& n = *nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return &n.grad;
}

void Tape::accumulate(int id, const Tensor& g) {
  Tensor* buf = grad_buffer(id);
  if (buf == nullptr) return;
  if (g.size() != buf->size()) throw ShapeError("backward: gradient shape mismatch");
  auto dst = buf->data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace mxacl
