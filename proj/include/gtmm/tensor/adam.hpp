#pragma once

#include "gtmm/tensor/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace gtmm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct AdamState {
  AdamConfig config;
  std::vector<Vec<S>> m;
  std::vector<Vec<S>> v;
  std::int64_t step = 0;

  AdamState() = default;
  AdamState(AdamConfig cfg, std::span<const Tensor<S>> params);
};

/// One bias-corrected Adam update using each parameter's accumulated grad
/// (a parameter without a grad buffer is treated as having zero gradient).
template <typename S>
void adam_step(std::span<Tensor<S>> params, AdamState<S>& state);

/// Global L2 norm of all gradients. When max_norm > 0 and the norm exceeds
/// it, every gradient is rescaled so the global norm equals max_norm.
/// Returns the norm before rescaling.
template <typename S>
double clip_grad_norm(std::span<Tensor<S>> params, double max_norm);

}  // namespace gtmm
