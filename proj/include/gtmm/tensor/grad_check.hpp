#pragma once

#include "gtmm/tensor/tensor.hpp"

#include <functional>
#include <limits>
#include <span>
#include <string>

namespace gtmm {

struct GradCheckOptions {
  double h = 1e-5;
  std::size_t max_coords_per_tensor = 0;  // > 0 checks an evenly strided subset of each tensor
  double floor = 1e-8;
  // A coordinate scoring above retry_above is re-measured with h / 4 and 4h,
  // then h / 16 and 16h, ... (`retries` rounds) and keeps its best score. A
  // step that straddles a relu kink, or a tiny gradient drowned in rounding
  // noise, disagrees at some steps only; a wrong gradient disagrees at every
  // step.
  double retry_above = std::numeric_limits<double>::infinity();
  int retries = 2;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t retried = 0;
  std::size_t worst_tensor = 0;
  Index worst_index = 0;
  double worst_autodiff = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences, coordinate by coordinate:
///   |autodiff - cd| / (|cd| + floor),  cd = (f(x + h) - f(x - h)) / 2h.
/// `f` must rebuild its graph from the current values of `wrt` on every call.
GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::span<Tensor<double>> wrt,
                           const GradCheckOptions& options = {});

}  // namespace gtmm
