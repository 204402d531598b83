#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace famcount {

// Non-negative per-pixel object density; the count is the total mass.
// `values` is a 2-D float tensor [H, W]. It may be part of an autograd graph
// when it comes straight out of the density head.
struct DensityMap {
  torch::Tensor values;

  int64_t height() const { return values.size(0); }
  int64_t width() const { return values.size(1); }
};

// Sum of all density values, accumulated in double precision.
double count(const DensityMap& d);

}  // namespace famcount
