#pragma once

#include <vector>

#include <torch/torch.h>

#include "famcount/annotation.hpp"
#include "famcount/density.hpp"

namespace famcount {

// Test-time adaptation hyperparameters.
struct AdaptationConfig {
  double lambda1 = 1e-9;  // Min-Count weight
  double lambda2 = 1e-4;  // Perturbation weight
  int steps = 100;
  double learning_rate = 1e-7;

  void validate() const;
};

// Sub-grid of d under b: rows round(y1)..round(y2), cols round(x1)..round(x2),
// end-exclusive, at least 1x1. A view, so gradients flow back into d.
torch::Tensor crop(const DensityMap& d, const Box& b);

// All losses return 0-dim tensors in the dtype of the prediction.
torch::Tensor mse_loss(const DensityMap& pred, const DensityMap& target);

// Sum over boxes of max(0, 1 - sum(crop)). Zero subgradient at the hinge.
torch::Tensor min_count_loss(const DensityMap& pred, const std::vector<Box>& boxes);

// Peak-normalised Gaussian window, sigma = size / 4 along each axis, centred
// at ((h - 1) / 2, (w - 1) / 2). Returned in double precision.
torch::Tensor perturbation_target(int64_t h, int64_t w);

// Sum over boxes of the summed squared difference between the crop and the
// Gaussian window of the crop's size.
torch::Tensor perturbation_loss(const DensityMap& pred, const std::vector<Box>& boxes);

torch::Tensor adaptation_loss(const DensityMap& pred, const std::vector<Box>& boxes, const AdaptationConfig& cfg);

}  // namespace famcount
