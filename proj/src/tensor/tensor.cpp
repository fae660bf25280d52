#include "gtmm/tensor/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace gtmm {

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

namespace detail {
std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

namespace {

template <typename S>
std::shared_ptr<Node<S>> leaf(Shape shape, Vec<S> values, bool requires_grad) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (numel(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

template <typename S>
Tensor<S> Tensor<S>::constant(Shape shape, Vec<S> values) {
  return Tensor(leaf<S>(std::move(shape), std::move(values), false));
}

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape) {
  const Index n = numel(shape);
  return constant(std::move(shape), Vec<S>::Zero(n));
}

template <typename S>
Tensor<S> Tensor<S>::full(Shape shape, S value) {
  const Index n = numel(shape);
  return constant(std::move(shape), Vec<S>::Constant(n, value));
}

template <typename S>
Tensor<S> Tensor<S>::scalar(S value) {
  return constant({}, Vec<S>::Constant(1, value));
}

template <typename S>
Tensor<S> Tensor<S>::parameter(Shape shape, Vec<S> values) {
  return Tensor(leaf<S>(std::move(shape), std::move(values), true));
}

template <typename S>
Index Tensor<S>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return node_->shape[static_cast<std::size_t>(a)];
}

template <typename S>
Vec<S>& Tensor<S>::mutable_value() {
  if (!node_->is_leaf()) throw std::logic_error("mutable_value() on a non-leaf tensor");
  return node_->value;
}

template <typename S>
S Tensor<S>::item() const {
  if (size() != 1) throw ShapeError("item() needs a single-element tensor, got " + to_string(shape()));
  return node_->value[0];
}

template <typename S>
S Tensor<S>::at(std::initializer_list<Index> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw ShapeError("index rank mismatch for shape " + to_string(shape()));
  }
  Index flat = 0;
  std::size_t d = 0;
  for (Index i : index) {
    const Index extent = node_->shape[d++];
    if (i < 0 || i >= extent) throw ShapeError("index out of range for shape " + to_string(shape()));
    flat = flat * extent + i;
  }
  return node_->value[flat];
}

template <typename S>
Eigen::Map<const RowMatrix<S>> Tensor<S>::matrix() const {
  const Index cols = rank() == 0 ? 1 : node_->shape.back();
  return Eigen::Map<const RowMatrix<S>>(node_->value.data(), size() / cols, cols);
}

template <typename S>
void Tensor<S>::zero_grad() {
  node_->grad = Vec<S>::Zero(node_->value.size());
}

template <typename S>
Tensor<S> Tensor<S>::detach() const {
  return constant(shape(), value());
}

template <typename S>
Graph<S>::Graph(const Tensor<S>& root) : root_(root) {
  std::vector<Node<S>*> stack{root.node()};
  std::unordered_set<Node<S>*> seen{root.node()};
  while (!stack.empty()) {
    Node<S>* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad) continue;
    order_.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order_.begin(), order_.end(), [](const Node<S>* a, const Node<S>* b) { return a->id < b->id; });
}

template <typename S>
void Graph<S>::backward() {
  if (root_.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + to_string(root_.shape()));
  }
  if (!root_.requires_grad()) return;
  root_.node()->grad_buffer()[0] += S(1);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node<S>* n = *it;
    if (n->is_leaf() || !n->backward || n->grad.size() == 0) continue;
    n->backward(*n);
  }
  // Interior gradients are scratch; only leaves keep theirs.
  for (Node<S>* n : order_) {
    if (!n->is_leaf()) n->grad.resize(0);
  }
}

template <typename S>
void backward(const Tensor<S>& loss) {
  Graph<S>(loss).backward();
}

template <typename S>
Tensor<S> make_result(const char* op, Shape shape, Vec<S> value, std::vector<Tensor<S>> inputs,
                      typename Node<S>::BackwardFn backward_fn) {
  if (!value.allFinite()) {
    throw NumericError(std::string("non-finite output from ") + op + " with shape " + to_string(shape));
  }
  auto node = std::make_shared<Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  for (const auto& in : inputs) {
    if (in.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward_fn);
  }
  return Tensor<S>(std::move(node));
}

#define GTMM_INSTANTIATE(S)                                                                      \
  template class Tensor<S>;                                                                      \
  template class Graph<S>;                                                                       \
  template void backward<S>(const Tensor<S>&);                                                   \
  template Tensor<S> make_result<S>(const char*, Shape, Vec<S>, std::vector<Tensor<S>>,          \
                                    typename Node<S>::BackwardFn);

GTMM_INSTANTIATE(float)
GTMM_INSTANTIATE(double)
#undef GTMM_INSTANTIATE

}  // namespace gtmm
