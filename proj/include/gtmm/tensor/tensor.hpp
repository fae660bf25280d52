#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Tensor is a shared handle to a graph node. Every primitive in ops.hpp
// creates a fresh node that remembers its inputs and a local backward rule,
// so a graph is built define-by-run and released when the last handle to its
// root goes away. Node ids grow monotonically, which makes "sort by id" a
// valid topological order for the backward sweep.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gtmm {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename S>
using Vec = Eigen::Array<S, Eigen::Dynamic, 1>;

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string to_string(const Shape& shape);
Index numel(const Shape& shape);

namespace detail {
std::uint64_t next_node_id();
}  // namespace detail

template <typename S>
struct Node {
  using BackwardFn = std::function<void(Node&)>;

  Shape shape;
  Vec<S> value;
  Vec<S> grad;  // empty until a backward pass touches this node
  std::uint64_t id = detail::next_node_id();
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return inputs.empty(); }

  Vec<S>& grad_buffer() {
    if (grad.size() != value.size()) grad = Vec<S>::Zero(value.size());
    return grad;
  }
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, Vec<S> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, S value);
  static Tensor scalar(S value);
  /// Leaf that accumulates gradients across backward passes.
  static Tensor parameter(Shape shape, Vec<S> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index dim(int axis) const;
  Index size() const { return node_->value.size(); }

  const Vec<S>& value() const { return node_->value; }
  /// Mutable values; only legal on leaves (parameters and constants).
  Vec<S>& mutable_value();
  const Vec<S>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  S item() const;
  S at(std::initializer_list<Index> index) const;

  /// Rows = product of all leading dims, cols = last dim.
  Eigen::Map<const RowMatrix<S>> matrix() const;

  void zero_grad();
  Tensor detach() const;

  Node<S>* node() const { return node_.get(); }
  const std::shared_ptr<Node<S>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

/// Nodes reachable from a root, in topological order (inputs first).
template <typename S>
class Graph {
 public:
  explicit Graph(const Tensor<S>& root);

  std::span<Node<S>* const> records() const { return order_; }
  std::size_t size() const { return order_.size(); }

  /// Seeds d(root)/d(root) = 1 and runs each record's rule once, in reverse.
  void backward();

 private:
  Tensor<S> root_;
  std::vector<Node<S>*> order_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
template <typename S>
void backward(const Tensor<S>& loss);

/// Builds an op result, checks it is finite, and wires the backward rule
/// only when some input participates in differentiation.
template <typename S>
Tensor<S> make_result(const char* op, Shape shape, Vec<S> value,
                      std::vector<Tensor<S>> inputs,
                      typename Node<S>::BackwardFn backward);

}  // namespace gtmm
