#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <torch/torch.h>

#include "famcount/correlation.hpp"
#include "famcount/density.hpp"
#include "famcount/features.hpp"

namespace famcount {

inline constexpr const char* kHeadVersion = "famcount-density-head/1";

// Decoder from the correlation stack to a stride-1 density map:
//   conv7x7 -> 196, ReLU, up x2
//   conv5x5 -> 128, ReLU, up x2
//   conv3x3 -> 64,  ReLU, up x2
//   conv1x1 -> 32,  ReLU
//   conv1x1 -> 1,   ReLU
// Upsampling is parameter-free bilinear. This is the only trained component.
class DensityHeadImpl : public torch::nn::Cloneable<DensityHeadImpl> {
 public:
  explicit DensityHeadImpl(int64_t in_channels = 6);

  void reset() override;

  // [N, C, h, w] -> [N, 1, 8h, 8w]
  torch::Tensor forward(const torch::Tensor& x);

  int64_t in_channels() const { return in_channels_; }

  torch::nn::Conv2d conv7{nullptr}, conv5{nullptr}, conv3{nullptr}, conv1a{nullptr}, conv1b{nullptr};

 private:
  int64_t in_channels_;
};
TORCH_MODULE(DensityHead);

// Analytic parameter count for the layer stack above.
int64_t head_parameter_count(int64_t in_channels);
int64_t parameter_count(const torch::nn::Module& module);

// Fan-in scaled normal weights (std = sqrt(2 / fan_in)) and zero biases,
// drawn from a generator seeded with `seed`.
DensityHead init_params(uint64_t seed, int64_t in_channels = 6);

// Independent deep copy; training or adapting it leaves the source untouched.
DensityHead clone_head(const DensityHead& head);

// Runs the decoder and resizes to exactly image_height x image_width.
// Throws ConfigError when the stack width does not match the head.
DensityMap predict(const CorrelationStack& stack, DensityHead& head, int64_t image_height, int64_t image_width);

// Checkpoint = head parameters + version tag + feature configuration +
// checksum of the backbone the head was trained against.
struct Checkpoint {
  DensityHead head{nullptr};
  FeatureConfig features;
  uint64_t backbone_checksum = 0;
  std::string version;

  std::string fingerprint() const;
};

void save_checkpoint(const std::filesystem::path& path, const DensityHead& head, const FeatureConfig& features,
                     uint64_t backbone_checksum);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace famcount
