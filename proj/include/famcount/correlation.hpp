#pragma once

#include <torch/torch.h>

#include "famcount/features.hpp"

namespace famcount {

// Correlation maps on the block-3 grid, one channel per (block, scale) pair in
// block-major order: block 3 at each scale, then block 4 at each scale.
struct CorrelationStack {
  torch::Tensor values;  // [channels, H/8, W/8]

  int64_t channels() const { return values.size(0); }
  int64_t height() const { return values.size(1); }
  int64_t width() const { return values.size(2); }
};

// Same-size cross-correlation of one kernel [C, kh, kw] over a grid [C, h, w],
// zero padded (extra row/column of padding at the bottom/right for even
// kernels) and divided by the kernel element count. Returns [h, w].
torch::Tensor correlate_kernel(const torch::Tensor& features, const torch::Tensor& kernel);

// Exemplar responses are averaged per (block, scale), so the channel count
// depends only on the configuration, never on how many exemplars were given.
CorrelationStack correlate(const FeaturePyramid& pyr, const ExemplarKernelSet& kernels, const FeatureConfig& cfg);

}  // namespace famcount
