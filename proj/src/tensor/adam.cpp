#include "gtmm/tensor/adam.hpp"

#include <cmath>

namespace gtmm {

template <typename S>
AdamState<S>::AdamState(AdamConfig cfg, std::span<const Tensor<S>> params) : config(cfg) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto& p : params) {
    m.push_back(Vec<S>::Zero(p.size()));
    v.push_back(Vec<S>::Zero(p.size()));
  }
}

template <typename S>
void adam_step(std::span<Tensor<S>> params, AdamState<S>& state) {
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].size()) {
      throw ShapeError("adam_step: moment size mismatch for parameter " + std::to_string(i) + " with shape " +
                       to_string(params[i].shape()));
    }
  }
  state.step += 1;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const S correction1 = static_cast<S>(1.0 - std::pow(c.beta1, t));
  const S correction2 = static_cast<S>(1.0 - std::pow(c.beta2, t));
  const S b1 = static_cast<S>(c.beta1), b2 = static_cast<S>(c.beta2);
  const S lr = static_cast<S>(c.lr), eps = static_cast<S>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<S>& p = params[i];
    if (!p.has_grad()) {
      state.m[i] *= b1;
      state.v[i] *= b2;
    } else {
      const Vec<S>& g = p.grad();
      state.m[i] = b1 * state.m[i] + (S(1) - b1) * g;
      state.v[i] = b2 * state.v[i] + (S(1) - b2) * g.square();
    }
    if (c.lr == 0.0) continue;
    const Vec<S> m_hat = state.m[i] / correction1;
    const Vec<S> v_hat = state.v[i] / correction2;
    p.mutable_value() -= lr * m_hat / (v_hat.sqrt() + eps);
  }
}

template <typename S>
double clip_grad_norm(std::span<Tensor<S>> params, double max_norm) {
  double total = 0.0;
  for (const auto& p : params) {
    if (p.has_grad()) total += p.grad().template cast<double>().square().sum();
  }
  const double norm = std::sqrt(total);
  if (max_norm > 0.0 && norm > max_norm) {
    const S factor = static_cast<S>(max_norm / norm);
    for (auto& p : params) {
      if (p.has_grad()) p.node()->grad *= factor;
    }
  }
  return norm;
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(std::span<Tensor<float>>, AdamState<float>&);
template void adam_step<double>(std::span<Tensor<double>>, AdamState<double>&);
template double clip_grad_norm<float>(std::span<Tensor<float>>, double);
template double clip_grad_norm<double>(std::span<Tensor<double>>, double);

}  // namespace gtmm
