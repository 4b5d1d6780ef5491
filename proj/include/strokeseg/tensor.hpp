#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace strokeseg::nn {

using Scalar = double;
using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major tensor with value semantics. Activations use a
/// channel-last layout [B,H,W,C]; matrices are [rows,cols].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Scalar fill);
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Scalar& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar scalar() const;  // value of a single-element tensor
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  void fill(Scalar v);
  void add_(const Tensor& o);  // elementwise +=

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // empty until backward reaches this node
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";
};

/// Handle to a node in the computation graph.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  Node* operator->() const { return node_.get(); }
  const NodePtr& node() const { return node_; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }

 private:
  NodePtr node_;
};

Var constant(Tensor v);
Var leaf(Tensor v, bool requires_grad);

/// Accumulates into n.grad, initializing it to zeros on first touch.
void accumulate_grad(Node& n, const Tensor& g);

/// Reverse-mode sweep from a scalar root; seeds d(root)/d(root) = 1.
void backward(const Var& root);

// Elementwise and shape ops.
Var add(const Var& a, const Var& b);
Var scale(const Var& a, Scalar c);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var reshape(const Var& a, Shape shape);
Var transpose_12(const Var& a);               // [A,B,C,D] -> [A,C,B,D]
Var concat_last(const Var& a, const Var& b);  // concat along trailing dim

// NHWC image ops.
Var conv2d(const Var& x, const Var& w, const Var& b, int kh, int kw, int pad);
Var conv_transpose2x2(const Var& x, const Var& w, const Var& b);
Var maxpool2x2(const Var& x);
Var instance_norm(const Var& x, const Var& gamma, const Var& beta);

// Token ops (trailing feature dim).
Var linear(const Var& x, const Var& w, const Var& b);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta);
Var softmax_last(const Var& x);
Var matmul_batched(const Var& a, const Var& b, bool transpose_b);
Var add_broadcast(const Var& x, const Var& p);  // x [B,T,D] + p [T,D]

// Reductions.
Var mean_all(const Var& a);
Var bce_with_logits_mean(const Var& logits, const Var& targets);

}  // namespace strokeseg::nn
