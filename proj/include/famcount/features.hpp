#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "famcount/annotation.hpp"

namespace famcount {

// Which backbone blocks and exemplar scales feed the correlation stack.
// Block 3 is the stride-8 stage, block 4 the stride-16 stage.
struct FeatureConfig {
  std::vector<int> blocks{3, 4};
  std::vector<double> scales{0.9, 1.0, 1.1};

  int64_t channels() const { return static_cast<int64_t>(blocks.size() * scales.size()); }
  std::string fingerprint() const;
  void validate() const;

  bool operator==(const FeatureConfig&) const = default;
};

int block_stride(int block);

// ResNet-50 bottleneck, parameter names as in torchvision.
class BottleneckImpl : public torch::nn::Module {
 public:
  BottleneckImpl(int64_t in_channels, int64_t width, int64_t stride, bool downsample);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

// The first four ResNet-50 stages (stem + layer1..layer3). Always frozen:
// parameters never require grad and the module stays in eval mode.
class BackboneImpl : public torch::nn::Module {
 public:
  BackboneImpl();

  // Returns the stride-8 (block 3) and, when with_block4, the stride-16
  // (block 4) activations for a normalised [N, 3, H, W] batch.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x, bool with_block4 = true);

  int64_t channels(int block) const { return block == 3 ? 512 : 1024; }

 private:
  friend void calibrate_batch_norm(BackboneImpl& backbone, uint64_t seed);
  torch::nn::Conv2d conv1{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr};
  torch::nn::Sequential layer1{nullptr}, layer2{nullptr}, layer3{nullptr};
};
TORCH_MODULE(Backbone);

// Loads weights exported by tools/export_backbone.py (a TorchScript module
// holding the torchvision stem, layer1, layer2 and layer3). Without a path,
// builds a seeded He-initialised trunk with zero-initialised residual
// branches and sparse shortcut outputs, its batch-norm statistics calibrated
// on seeded smooth random fields.
Backbone make_backbone(const std::optional<std::filesystem::path>& weights, uint64_t seed = 0);

// FNV-1a over every parameter and buffer, in registration order.
uint64_t parameter_checksum(const torch::nn::Module& module);

struct FeatureLevel {
  int block = 3;
  int stride = 8;
  torch::Tensor features;  // [C, h, w]
};

struct FeaturePyramid {
  int image_height = 0;
  int image_width = 0;
  std::vector<FeatureLevel> levels;

  const FeatureLevel& level(int block) const;
};

inline const std::array<float, 3> kImageNetMean{0.485f, 0.456f, 0.406f};
inline const std::array<float, 3> kImageNetStd{0.229f, 0.224f, 0.225f};

// [1, 3, H, W] float tensor normalised with the ImageNet statistics.
torch::Tensor to_normalized_tensor(const cv::Mat& rgb);

FeaturePyramid extract_image_features(Backbone& backbone, const cv::Mat& rgb, const std::vector<int>& blocks = {3, 4});

struct ExemplarKernel {
  int exemplar = 0;
  int block = 3;
  double scale = 1.0;
  torch::Tensor kernel;  // [C, kh, kw]
};

struct ExemplarKernelSet {
  int n_exemplars = 0;
  std::vector<ExemplarKernel> kernels;

  const ExemplarKernel& at(int exemplar, int block, double scale) const;
};

// Feature-cell footprint of a box at the given stride: rows [r0, r1), cols [c0, c1),
// rounded outward and clamped to the grid, at least one cell.
struct CellRange {
  int64_t r0, r1, c0, c1;
};
CellRange box_cells(const Box& box, int stride, int64_t grid_h, int64_t grid_w);

ExemplarKernelSet extract_exemplar_features(const FeaturePyramid& pyr, const std::vector<Box>& boxes,
                                            const std::vector<double>& scales = {0.9, 1.0, 1.1});

}  // namespace famcount
