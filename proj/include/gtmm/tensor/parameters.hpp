#pragma once

#include "gtmm/tensor/tensor.hpp"

#include <string>
#include <vector>

namespace gtmm {

/// Named, ordered collection of trainable leaves. Registration order is the
/// checkpoint manifest order.
template <typename S>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<S> tensor;
  };

  Tensor<S> add(const std::string& name, Shape shape, Vec<S> init);

  const Tensor<S>& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor<S>> tensors() const;
  Index total_size() const;

  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

}  // namespace gtmm
