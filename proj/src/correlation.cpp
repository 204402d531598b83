#include "famcount/correlation.hpp"

#include "famcount/errors.hpp"

namespace famcount {

namespace F = torch::nn::functional;

torch::Tensor correlate_kernel(const torch::Tensor& features, const torch::Tensor& kernel) {
  const int64_t c = features.size(0), h = features.size(1), w = features.size(2);
  const int64_t kh = kernel.size(1), kw = kernel.size(2);
  if (kernel.size(0) != c) throw ShapeError("kernel channels do not match the feature grid");
  if (kh > h || kw > w)
    throw KernelTooLargeError("kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " exceeds the " +
                              std::to_string(h) + "x" + std::to_string(w) + " feature grid");
  const int64_t top = (kh - 1) / 2, left = (kw - 1) / 2;
  auto padded = F::pad(features.unsqueeze(0), F::PadFuncOptions({left, kw - 1 - left, top, kh - 1 - top}));
  auto response = F::conv2d(padded, kernel.unsqueeze(0));
  return response.squeeze(0).squeeze(0) / static_cast<double>(c * kh * kw);
}

CorrelationStack correlate(const FeaturePyramid& pyr, const ExemplarKernelSet& kernels, const FeatureConfig& cfg) {
  cfg.validate();
  const int64_t out_h = (pyr.image_height + 7) / 8;
  const int64_t out_w = (pyr.image_width + 7) / 8;

  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> channels;
  channels.reserve(cfg.channels());
  for (int block : cfg.blocks) {
    const auto& level = pyr.level(block);
    for (double scale : cfg.scales) {
      std::vector<torch::Tensor> responses;
      for (int e = 0; e < kernels.n_exemplars; ++e)
        responses.push_back(correlate_kernel(level.features, kernels.at(e, block, scale).kernel));
      // Sorting per cell fixes the summation order, making the mean exactly
      // invariant to the order in which exemplars were supplied.
      auto sorted = std::get<0>(torch::stack(responses).sort(0));
      auto mean = sorted.sum(0) / static_cast<double>(kernels.n_exemplars);
      if (mean.size(0) != out_h || mean.size(1) != out_w) {
        mean = F::interpolate(mean.unsqueeze(0).unsqueeze(0), F::InterpolateFuncOptions()
                                                                   .size(std::vector<int64_t>{out_h, out_w})
                                                                   .mode(torch::kBilinear)
                                                                   .align_corners(false))
                   .squeeze(0)
                   .squeeze(0);
      }
      channels.push_back(mean);
    }
  }
  return {torch::stack(channels)};
}

}  // namespace famcount
