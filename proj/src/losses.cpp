#include "famcount/losses.hpp"

#include <cmath>

#include "famcount/errors.hpp"

namespace famcount {

void AdaptationConfig::validate() const {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0) || !(learning_rate >= 0.0) || steps < 0)
    throw ConfigError("adaptation settings must be non-negative");
}

torch::Tensor crop(const DensityMap& d, const Box& b) {
  const int64_t h = d.height(), w = d.width();
  if (!b.well_formed() || !b.inside(static_cast<int>(h), static_cast<int>(w)))
    throw OutOfBoundsError("box " + to_string(b) + " is not inside the " + std::to_string(w) + "x" +
                           std::to_string(h) + " density map");
  int64_t r0 = std::min<int64_t>(std::llround(b.y1), h - 1);
  int64_t c0 = std::min<int64_t>(std::llround(b.x1), w - 1);
  int64_t r1 = std::max<int64_t>(std::llround(b.y2), r0 + 1);
  int64_t c1 = std::max<int64_t>(std::llround(b.x2), c0 + 1);
  return d.values.slice(0, r0, std::min(r1, h)).slice(1, c0, std::min(c1, w));
}

torch::Tensor mse_loss(const DensityMap& pred, const DensityMap& target) {
  if (!pred.values.sizes().equals(target.values.sizes()))
    throw ShapeError("prediction and target shapes differ");
  return (pred.values - target.values).pow(2).mean();
}

torch::Tensor min_count_loss(const DensityMap& pred, const std::vector<Box>& boxes) {
  auto total = torch::zeros({}, pred.values.options());
  for (const auto& b : boxes) total = total + torch::relu(1.0 - crop(pred, b).sum());
  return total;
}

torch::Tensor perturbation_target(int64_t h, int64_t w) {
  if (h < 1 || w < 1) throw ArgumentError("Gaussian window needs a positive size");
  const double cr = (h - 1) / 2.0, cc = (w - 1) / 2.0;
  const double sr = h / 4.0, sc = w / 4.0;
  auto rows = torch::arange(h, torch::kDouble).sub_(cr).pow_(2).div_(2.0 * sr * sr);
  auto cols = torch::arange(w, torch::kDouble).sub_(cc).pow_(2).div_(2.0 * sc * sc);
  return torch::exp(-(rows.unsqueeze(1) + cols.unsqueeze(0)));
}

torch::Tensor perturbation_loss(const DensityMap& pred, const std::vector<Box>& boxes) {
  auto total = torch::zeros({}, pred.values.options());
  for (const auto& b : boxes) {
    auto z = crop(pred, b);
    auto g = perturbation_target(z.size(0), z.size(1)).to(z.scalar_type());
    total = total + (z - g).pow(2).sum();
  }
  return total;
}

torch::Tensor adaptation_loss(const DensityMap& pred, const std::vector<Box>& boxes, const AdaptationConfig& cfg) {
  return cfg.lambda1 * min_count_loss(pred, boxes) + cfg.lambda2 * perturbation_loss(pred, boxes);
}

}  // namespace famcount
