#include "famcount/features.hpp"

#include <cmath>
#include <sstream>

#include <torch/script.h>

#include "famcount/errors.hpp"

namespace famcount {

namespace F = torch::nn::functional;

std::string FeatureConfig::fingerprint() const {
  std::ostringstream os;
  os << "blocks=";
  for (std::size_t i = 0; i < blocks.size(); ++i) os << (i ? "," : "") << blocks[i];
  os << ";scales=";
  for (std::size_t i = 0; i < scales.size(); ++i) os << (i ? "," : "") << scales[i];
  os << ";order=block-major";
  return os.str();
}

void FeatureConfig::validate() const {
  if (blocks.empty() || scales.empty()) throw ConfigError("feature config needs at least one block and one scale");
  if (blocks.front() != 3) throw ConfigError("block 3 must come first: it defines the output grid");
  for (int b : blocks)
    if (b != 3 && b != 4) throw ConfigError("unsupported backbone block " + std::to_string(b));
  for (double s : scales)
    if (!(s > 0.0)) throw ConfigError("exemplar scales must be positive");
}

int block_stride(int block) {
  switch (block) {
    case 3: return 8;
    case 4: return 16;
    default: throw ConfigError("unsupported backbone block " + std::to_string(block));
  }
}

namespace {

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride, int64_t pad) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).bias(false));
}

torch::nn::Sequential make_layer(int64_t in_channels, int64_t width, int blocks, int64_t stride) {
  torch::nn::Sequential layer;
  layer->push_back(Bottleneck(in_channels, width, stride, true));
  for (int i = 1; i < blocks; ++i) layer->push_back(Bottleneck(width * 4, width, 1, false));
  return layer;
}

}  // namespace

BottleneckImpl::BottleneckImpl(int64_t in_channels, int64_t width, int64_t stride, bool with_downsample) {
  conv1 = register_module("conv1", conv(in_channels, width, 1, 1, 0));
  bn1 = register_module("bn1", torch::nn::BatchNorm2d(width));
  conv2 = register_module("conv2", conv(width, width, 3, stride, 1));
  bn2 = register_module("bn2", torch::nn::BatchNorm2d(width));
  conv3 = register_module("conv3", conv(width, width * 4, 1, 1, 0));
  bn3 = register_module("bn3", torch::nn::BatchNorm2d(width * 4));
  if (with_downsample) {
    downsample = register_module(
        "downsample", torch::nn::Sequential(conv(in_channels, width * 4, 1, stride, 0), torch::nn::BatchNorm2d(width * 4)));
  }
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x) {
  auto out = torch::relu(bn1(conv1(x)));
  out = torch::relu(bn2(conv2(out)));
  out = bn3(conv3(out));
  auto identity = downsample ? downsample->forward(x) : x;
  return torch::relu(out + identity);
}

BackboneImpl::BackboneImpl() {
  conv1 = register_module("conv1", conv(3, 64, 7, 2, 3));
  bn1 = register_module("bn1", torch::nn::BatchNorm2d(64));
  layer1 = register_module("layer1", make_layer(64, 64, 3, 1));
  layer2 = register_module("layer2", make_layer(256, 128, 4, 2));
  layer3 = register_module("layer3", make_layer(512, 256, 6, 2));
}

std::pair<torch::Tensor, torch::Tensor> BackboneImpl::forward(const torch::Tensor& x, bool with_block4) {
  auto y = torch::relu(bn1(conv1(x)));
  y = F::max_pool2d(y, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
  y = layer1->forward(y);
  auto b3 = layer2->forward(y);
  torch::Tensor b4;
  if (with_block4) b4 = layer3->forward(b3);
  return {b3, b4};
}

void calibrate_batch_norm(BackboneImpl& backbone, uint64_t seed) {
  // Smooth random fields with a little fine grain: closer to photographs
  // than white noise, which would set every statistic from high-frequency energy.
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed + 1);
  auto coarse = torch::empty({8, 3, 10, 10}).normal_(0.0, 1.0, gen);
  auto probe = F::interpolate(coarse, F::InterpolateFuncOptions()
                                          .size(std::vector<int64_t>{160, 160})
                                          .mode(torch::kBilinear)
                                          .align_corners(false));
  probe += 0.2 * torch::empty({8, 3, 160, 160}).normal_(0.0, 1.0, gen);
  std::vector<std::pair<torch::nn::BatchNorm2dImpl*, std::optional<double>>> saved;
  for (auto& m : backbone.modules(/*include_self=*/false)) {
    if (auto* bn = m->as<torch::nn::BatchNorm2dImpl>()) {
      saved.emplace_back(bn, bn->options.momentum());
      bn->options.momentum(1.0);
    }
  }
  // In train mode each batch norm normalises with, and records, the
  // statistics of its own input, so one pass calibrates the whole chain.
  backbone.train();
  {
    torch::NoGradGuard no_grad;
    backbone.forward(probe, true);
  }
  for (auto& [bn, momentum] : saved) bn->options.momentum(momentum);
  backbone.eval();
}

Backbone make_backbone(const std::optional<std::filesystem::path>& weights, uint64_t seed) {
  Backbone backbone;
  torch::NoGradGuard no_grad;
  if (weights) {
    if (!std::filesystem::exists(*weights)) throw CheckpointError("backbone weights not found: " + weights->string());
    torch::jit::Module src;
    try {
      src = torch::jit::load(weights->string());
    } catch (const c10::Error& e) {
      throw CheckpointError("cannot read backbone weights " + weights->string() + ": " + e.what_without_backtrace());
    }
    std::map<std::string, torch::Tensor> tensors;
    for (const auto& p : src.named_parameters()) tensors[p.name] = p.value;
    for (const auto& b : src.named_buffers()) tensors[b.name] = b.value;
    auto copy_into = [&](const std::string& name, torch::Tensor& dst) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw CheckpointError("backbone weights lack tensor '" + name + "'");
      if (it->second.sizes() != dst.sizes())
        throw CheckpointError("backbone tensor '" + name + "' has the wrong shape");
      dst.copy_(it->second);
    };
    for (auto& p : backbone->named_parameters()) copy_into(p.key(), p.value());
    for (auto& b : backbone->named_buffers()) copy_into(b.key(), b.value());
    backbone->eval();
  } else {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    for (auto& m : backbone->modules(false)) {
      if (auto* c = m->as<torch::nn::Conv2dImpl>()) {
        const auto& w = c->weight;
        const double fan_out = static_cast<double>(w.size(0) * w.size(2) * w.size(3));
        w.normal_(0.0, std::sqrt(2.0 / fan_out), gen);
      }
    }
    // Residual branches start at zero (torchvision's zero_init_residual), so
    // random depth does not wash out spatial detail. Shortcut projections get
    // a bias of -1 so block outputs are sparse, as trained features are.
    for (auto& item : backbone->named_modules()) {
      auto* bn = item.value()->as<torch::nn::BatchNorm2dImpl>();
      if (!bn) continue;
      if (item.key().find(".bn3") != std::string::npos) bn->weight.zero_();
      if (item.key().find(".downsample") != std::string::npos) bn->bias.fill_(-1.0);
    }
    calibrate_batch_norm(*backbone, seed);
  }
  for (auto& p : backbone->parameters()) p.set_requires_grad(false);
  return backbone;
}

uint64_t parameter_checksum(const torch::nn::Module& module) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const torch::Tensor& t) {
    auto c = t.detach().contiguous();
    const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
    const std::size_t n = c.numel() * c.element_size();
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : module.named_parameters()) mix(p.value());
  for (const auto& b : module.named_buffers()) mix(b.value());
  return h;
}

const FeatureLevel& FeaturePyramid::level(int block) const {
  for (const auto& l : levels)
    if (l.block == block) return l;
  throw ConfigError("feature pyramid has no block " + std::to_string(block));
}

torch::Tensor to_normalized_tensor(const cv::Mat& rgb) {
  if (rgb.type() != CV_8UC3) throw ArgumentError("expected an 8-bit 3-channel image");
  cv::Mat cont = rgb.isContinuous() ? rgb : rgb.clone();
  auto t = torch::from_blob(cont.data, {cont.rows, cont.cols, 3}, torch::kUInt8)
               .permute({2, 0, 1})
               .to(torch::kFloat)
               .div(255.0);
  auto mean = torch::tensor({kImageNetMean[0], kImageNetMean[1], kImageNetMean[2]}).view({3, 1, 1});
  auto std = torch::tensor({kImageNetStd[0], kImageNetStd[1], kImageNetStd[2]}).view({3, 1, 1});
  return ((t - mean) / std).unsqueeze(0).contiguous();
}

FeaturePyramid extract_image_features(Backbone& backbone, const cv::Mat& rgb, const std::vector<int>& blocks) {
  if (rgb.rows < 32 || rgb.cols < 32)
    throw ImageTooSmallError("image " + std::to_string(rgb.cols) + "x" + std::to_string(rgb.rows) +
                             " is smaller than the 32x32 minimum");
  if (rgb.rows % 8 != 0 || rgb.cols % 8 != 0)
    throw ShapeError("image size " + std::to_string(rgb.cols) + "x" + std::to_string(rgb.rows) +
                     " is not a multiple of 8; resize it for the model first");
  const bool with_block4 = std::find(blocks.begin(), blocks.end(), 4) != blocks.end();

  torch::NoGradGuard no_grad;
  auto [b3, b4] = backbone->forward(to_normalized_tensor(rgb), with_block4);

  FeaturePyramid pyr;
  pyr.image_height = rgb.rows;
  pyr.image_width = rgb.cols;
  for (int block : blocks) {
    pyr.levels.push_back({block, block_stride(block), (block == 3 ? b3 : b4).squeeze(0)});
  }
  return pyr;
}

const ExemplarKernel& ExemplarKernelSet::at(int exemplar, int block, double scale) const {
  for (const auto& k : kernels)
    if (k.exemplar == exemplar && k.block == block && k.scale == scale) return k;
  throw ArgumentError("no kernel for exemplar " + std::to_string(exemplar) + ", block " + std::to_string(block));
}

CellRange box_cells(const Box& box, int stride, int64_t grid_h, int64_t grid_w) {
  auto lo = [&](double v, int64_t n) { return std::clamp<int64_t>(static_cast<int64_t>(std::floor(v / stride)), 0, n - 1); };
  auto hi = [&](double v, int64_t first, int64_t n) {
    return std::clamp<int64_t>(static_cast<int64_t>(std::ceil(v / stride)), first + 1, n);
  };
  CellRange r{};
  r.r0 = lo(box.y1, grid_h);
  r.r1 = hi(box.y2, r.r0, grid_h);
  r.c0 = lo(box.x1, grid_w);
  r.c1 = hi(box.x2, r.c0, grid_w);
  return r;
}

ExemplarKernelSet extract_exemplar_features(const FeaturePyramid& pyr, const std::vector<Box>& boxes,
                                            const std::vector<double>& scales) {
  if (boxes.empty() || boxes.size() > 3)
    throw ArgumentError("between 1 and 3 exemplar boxes are required, got " + std::to_string(boxes.size()));
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (!boxes[i].well_formed() || !boxes[i].inside(pyr.image_height, pyr.image_width))
      throw OutOfBoundsError("exemplar " + std::to_string(i) + " " + to_string(boxes[i]) + " is not inside the " +
                             std::to_string(pyr.image_width) + "x" + std::to_string(pyr.image_height) + " image");
  }

  ExemplarKernelSet set;
  set.n_exemplars = static_cast<int>(boxes.size());
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    for (const auto& level : pyr.levels) {
      const auto& f = level.features;
      const auto cells = box_cells(boxes[i], level.stride, f.size(1), f.size(2));
      auto crop = f.slice(1, cells.r0, cells.r1).slice(2, cells.c0, cells.c1);
      for (double scale : scales) {
        torch::Tensor kernel;
        if (scale == 1.0) {
          kernel = crop.contiguous();
        } else {
          const int64_t kh = std::max<int64_t>(1, std::lround(static_cast<double>(crop.size(1)) * scale));
          const int64_t kw = std::max<int64_t>(1, std::lround(static_cast<double>(crop.size(2)) * scale));
          kernel = F::interpolate(crop.unsqueeze(0), F::InterpolateFuncOptions()
                                                         .size(std::vector<int64_t>{kh, kw})
                                                         .mode(torch::kBilinear)
                                                         .align_corners(false))
                       .squeeze(0);
        }
        set.kernels.push_back({static_cast<int>(i), level.block, scale, kernel});
      }
    }
  }
  return set;
}

}  // namespace famcount
