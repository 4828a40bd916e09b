#include "eegssm/autodiff.hpp"

#include <string>

#include "eegssm/errors.hpp"

namespace eegssm::ad {

const Matrix& Var::value() const { return graph->value(id); }
Index Var::batch() const { return graph->batch(id); }
bool Var::requires_grad() const { return graph->requires_grad(id); }

Var Graph::constant(Matrix value, Index batch) { return input(std::move(value), false, batch); }

Var Graph::input(Matrix value, bool requires_grad, Index batch) {
  if (batch < 1 || value.cols() % batch != 0)
    throw ShapeError("Graph::input: " + std::to_string(value.cols()) + " columns not divisible by batch " +
                     std::to_string(batch));
  Node n;
  n.value = std::move(value);
  n.batch = batch;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::parameter(Parameter& p) {
  Var v = input(p.value, p.trainable, 1);
  nodes_.back().sink = p.trainable ? &p : nullptr;
  return v;
}

Var Graph::make(Matrix value, Index batch, std::initializer_list<Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || requires_grad(p);
  Node n;
  n.value = std::move(value);
  n.batch = batch;
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Matrix& Graph::grad_slot(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Matrix Graph::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Graph::backward(Var root) {
  const Node& r = nodes_[static_cast<std::size_t>(root.id)];
  if (r.value.rows() != 1 || r.value.cols() != 1)
    throw ShapeError("Graph::backward: root must be scalar, got " + std::to_string(r.value.rows()) + "x" +
                     std::to_string(r.value.cols()));
  if (!r.requires_grad) return;
  grad_slot(root.id).setOnes();
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.sink) {
      if (n.sink->grad.rows() != n.value.rows() || n.sink->grad.cols() != n.value.cols()) n.sink->zero_grad();
      n.sink->grad += n.grad;
    }
  }
}

}  // namespace eegssm::ad
