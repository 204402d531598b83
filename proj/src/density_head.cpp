#include "famcount/density_head.hpp"

#include <cmath>
#include <sstream>

#include "famcount/errors.hpp"

namespace famcount {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv2d same_conv(int64_t in, int64_t out, int64_t k) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).padding(k / 2));
}

torch::Tensor upsample2(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

}  // namespace

DensityHeadImpl::DensityHeadImpl(int64_t in_channels) : in_channels_(in_channels) { reset(); }

void DensityHeadImpl::reset() {
  conv7 = register_module("conv7", same_conv(in_channels_, 196, 7));
  conv5 = register_module("conv5", same_conv(196, 128, 5));
  conv3 = register_module("conv3", same_conv(128, 64, 3));
  conv1a = register_module("conv1a", same_conv(64, 32, 1));
  conv1b = register_module("conv1b", same_conv(32, 1, 1));
}

torch::Tensor DensityHeadImpl::forward(const torch::Tensor& x) {
  auto y = upsample2(torch::relu(conv7(x)));
  y = upsample2(torch::relu(conv5(y)));
  y = upsample2(torch::relu(conv3(y)));
  y = torch::relu(conv1a(y));
  return torch::relu(conv1b(y));
}

int64_t head_parameter_count(int64_t in_channels) {
  struct Layer {
    int64_t k, in, out;
  };
  const Layer layers[] = {{7, in_channels, 196}, {5, 196, 128}, {3, 128, 64}, {1, 64, 32}, {1, 32, 1}};
  int64_t total = 0;
  for (const auto& l : layers) total += l.k * l.k * l.in * l.out + l.out;
  return total;
}

int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

DensityHead init_params(uint64_t seed, int64_t in_channels) {
  DensityHead head(in_channels);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (auto* c : {head->conv7.get(), head->conv5.get(), head->conv3.get(), head->conv1a.get(), head->conv1b.get()}) {
    const auto& w = c->weight;
    const double fan_in = static_cast<double>(w.size(1) * w.size(2) * w.size(3));
    w.normal_(0.0, std::sqrt(2.0 / fan_in), gen);
    c->bias.zero_();
  }
  return head;
}

DensityHead clone_head(const DensityHead& head) {
  return DensityHead(std::dynamic_pointer_cast<DensityHeadImpl>(head->clone()));
}

DensityMap predict(const CorrelationStack& stack, DensityHead& head, int64_t image_height, int64_t image_width) {
  if (stack.values.dim() != 3 || stack.channels() != head->in_channels())
    throw ConfigError("correlation stack has " + std::to_string(stack.values.dim() == 3 ? stack.channels() : -1) +
                      " channels, the density head expects " + std::to_string(head->in_channels()));
  auto out = head->forward(stack.values.unsqueeze(0));
  if (out.size(2) != image_height || out.size(3) != image_width) {
    out = F::interpolate(out, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{image_height, image_width})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
  }
  return {out.squeeze(0).squeeze(0)};
}

std::string Checkpoint::fingerprint() const {
  std::ostringstream os;
  os << version << "|" << features.fingerprint() << "|in=" << features.channels() << "|backbone=" << std::hex
     << backbone_checksum;
  return os.str();
}

void save_checkpoint(const std::filesystem::path& path, const DensityHead& head, const FeatureConfig& features,
                     uint64_t backbone_checksum) {
  if (head->in_channels() != features.channels())
    throw ConfigError("head input width does not match the feature configuration");
  torch::serialize::OutputArchive ar;
  head->save(ar);
  ar.write("meta.version", c10::IValue(std::string(kHeadVersion)));
  ar.write("meta.blocks", torch::tensor(std::vector<int64_t>(features.blocks.begin(), features.blocks.end())));
  ar.write("meta.scales", torch::tensor(features.scales, torch::kDouble));
  // int64 would lose the top bit of the checksum through IValue; keep it as a string.
  ar.write("meta.backbone", c10::IValue(std::to_string(backbone_checksum)));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  ar.save_to(tmp);
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive ar;
  try {
    ar.load_from(path.string());
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  Checkpoint ck;
  c10::IValue version, backbone;
  if (!ar.try_read("meta.version", version) || !version.isString())
    throw CheckpointError(path.string() + " is not a density-head checkpoint");
  ck.version = version.toStringRef();
  if (ck.version != kHeadVersion)
    throw CheckpointError("checkpoint version '" + ck.version + "' is not supported (expected " + kHeadVersion + ")");

  torch::Tensor blocks, scales;
  if (!ar.try_read("meta.blocks", blocks) || !ar.try_read("meta.scales", scales) ||
      !ar.try_read("meta.backbone", backbone))
    throw CheckpointError(path.string() + " lacks its configuration record");
  ck.features.blocks.clear();
  for (int64_t i = 0; i < blocks.numel(); ++i) ck.features.blocks.push_back(static_cast<int>(blocks[i].item<int64_t>()));
  ck.features.scales.clear();
  for (int64_t i = 0; i < scales.numel(); ++i) ck.features.scales.push_back(scales[i].item<double>());
  ck.features.validate();
  ck.backbone_checksum = std::stoull(backbone.toStringRef());

  ck.head = DensityHead(ck.features.channels());
  try {
    ck.head->load(ar);
  } catch (const c10::Error& e) {
    throw CheckpointError("checkpoint parameters do not match the head layout: " +
                          std::string(e.what_without_backtrace()));
  }
  return ck;
}

}  // namespace famcount
