#pragma once

#include <functional>
#include <vector>

#include "eegssm/parameters.hpp"

namespace eegssm::ad {

class Graph;

// Handle to a node of a Graph. Sequence activations are stored as
// (features x batch*time) matrices, sample-major along the columns; `batch`
// records how many samples share the columns.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Index batch() const;
  Index time() const { return cols() / batch(); }
  bool requires_grad() const;
};

using Backward = std::function<void(Graph&, const Matrix& out_grad)>;

struct Node {
  Matrix value;
  Matrix grad;
  Index batch = 1;
  bool requires_grad = false;
  Backward backward;
  Parameter* sink = nullptr;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so replaying the
// tape backwards is a valid topological order and visits each node once.
class Graph {
 public:
  Var constant(Matrix value, Index batch = 1);
  Var input(Matrix value, bool requires_grad, Index batch = 1);
  // Leaf whose gradient is added into `p.grad` by backward().
  Var parameter(Parameter& p);

  // Creates an op node. `backward` is kept only when a parent needs gradients.
  Var make(Matrix value, Index batch, std::initializer_list<Var> parents, Backward backward);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& value(Var v) const { return value(v.id); }
  Index batch(int id) const { return nodes_[static_cast<std::size_t>(id)].batch; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  // Adds `g` into the gradient of `v` (no-op for nodes without gradients).
  template <class Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    if (!requires_grad(v)) return;
    Matrix& dst = grad_slot(v.id);
    dst += g;
  }

  // Gradient of a node after backward(); zeros if none reached it.
  Matrix grad(Var v) const;

  // Seeds d(root)/d(root) = 1 for a 1x1 root and replays the tape.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  Matrix& grad_slot(int id);
  std::vector<Node> nodes_;
};

}  // namespace eegssm::ad
