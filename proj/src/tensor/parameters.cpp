#include "gtmm/tensor/parameters.hpp"

#include <algorithm>
#include <stdexcept>

namespace gtmm {

template <typename S>
Tensor<S> ParameterStore<S>::add(const std::string& name, Shape shape, Vec<S> init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  auto t = Tensor<S>::parameter(std::move(shape), std::move(init));
  t.zero_grad();
  entries_.push_back({name, t});
  return t;
}

template <typename S>
bool ParameterStore<S>::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

template <typename S>
const Tensor<S>& ParameterStore<S>::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw std::out_of_range("no parameter named " + name);
}

template <typename S>
std::vector<Tensor<S>> ParameterStore<S>::tensors() const {
  std::vector<Tensor<S>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.tensor);
  return out;
}

template <typename S>
Index ParameterStore<S>::total_size() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

template <typename S>
void ParameterStore<S>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template class ParameterStore<float>;
template class ParameterStore<double>;

}  // namespace gtmm
