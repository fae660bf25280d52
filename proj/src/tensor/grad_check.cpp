#include "gtmm/tensor/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace gtmm {

namespace {

double evaluate(const std::function<Tensor<double>()>& f) {
  const double v = f().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: function is not finite at a perturbed point");
  return v;
}

double central_difference(const std::function<Tensor<double>()>& f, double& x, double h) {
  const double saved = x;
  x = saved + h;
  const double up = evaluate(f);
  x = saved - h;
  const double down = evaluate(f);
  x = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::span<Tensor<double>> wrt,
                           const GradCheckOptions& opt) {
  for (auto& t : wrt) t.zero_grad();
  backward(f());
  std::vector<Vec<double>> analytic;
  analytic.reserve(wrt.size());
  for (auto& t : wrt) analytic.push_back(t.has_grad() ? t.grad() : Vec<double>::Zero(t.size()));

  const auto score = [&](double a, double numeric) { return std::abs(a - numeric) / (std::abs(numeric) + opt.floor); };
  GradCheckResult result;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    Vec<double>& x = wrt[ti].mutable_value();
    const Index n = x.size();
    const Index limit = static_cast<Index>(opt.max_coords_per_tensor);
    const Index stride = (limit == 0 || limit >= n) ? 1 : n / limit;
    for (Index i = 0; i < n; i += stride) {
      const double a = analytic[ti][i];
      double numeric = central_difference(f, x[i], opt.h);
      double err = score(a, numeric);
      if (err > opt.retry_above) {
        ++result.retried;
        double factor = 1.0;
        for (int r = 0; r < opt.retries && err > opt.retry_above; ++r) {
          factor *= 4.0;
          for (double h : {opt.h / factor, opt.h * factor}) {
            const double retry = central_difference(f, x[i], h);
            if (score(a, retry) < err) {
              numeric = retry;
              err = score(a, retry);
            }
          }
        }
      }
      ++result.coordinates;
      if (err > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = std::max(err, result.max_rel_error);
        result.worst_tensor = ti;
        result.worst_index = i;
        result.worst_autodiff = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace gtmm
