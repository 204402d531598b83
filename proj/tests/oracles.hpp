#pragma once

// Independent reference computations shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <torch/torch.h>

namespace famcount::testing {

// Largest relative error between the autograd gradient of f at x and a
// central finite difference, over all elements. x must be double.
inline double max_gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x,
                                 double eps = 1e-6) {
  auto xa = x.detach().clone().set_requires_grad(true);
  f(xa).backward();
  auto analytic = xa.grad().contiguous();
  auto flat = x.detach().clone().contiguous();
  double worst = 0.0;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    auto view = flat.view({-1});
    const double v = view[i].item<double>();
    view[i] = v + eps;
    const double up = f(flat).item<double>();
    view[i] = v - eps;
    const double down = f(flat).item<double>();
    view[i] = v;
    const double numeric = (up - down) / (2 * eps);
    const double a = analytic.view({-1})[i].item<double>();
    const double scale = std::max({std::abs(a), std::abs(numeric), 1e-3});
    worst = std::max(worst, std::abs(a - numeric) / scale);
  }
  return worst;
}

inline double brute_mae(const std::vector<double>& gt, const std::vector<double>& pred) {
  long double s = 0;
  for (size_t i = 0; i < gt.size(); ++i) s += std::fabs(static_cast<long double>(gt[i]) - pred[i]);
  return static_cast<double>(s / gt.size());
}

inline double brute_rmse(const std::vector<double>& gt, const std::vector<double>& pred) {
  long double s = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    const long double d = static_cast<long double>(gt[i]) - pred[i];
    s += d * d;
  }
  return static_cast<double>(std::sqrt(s / gt.size()));
}

}  // namespace famcount::testing
