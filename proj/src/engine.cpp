#include "famcount/engine.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "famcount/errors.hpp"

namespace famcount {

CountingModel CountingModel::load(const std::filesystem::path& checkpoint,
                                  const std::optional<std::filesystem::path>& backbone_weights, int resize_height) {
  auto ck = load_checkpoint(checkpoint);
  CountingModel model;
  model.backbone = make_backbone(backbone_weights);
  const auto checksum = parameter_checksum(*model.backbone);
  if (checksum != ck.backbone_checksum) {
    std::ostringstream os;
    os << "checkpoint " << checkpoint.string() << " was trained against backbone " << std::hex << ck.backbone_checksum
       << ", but the loaded backbone is " << checksum;
    throw CheckpointError(os.str());
  }
  model.head = ck.head;
  model.features = ck.features;
  model.resize_height = resize_height;
  return model;
}

PreparedImage prepare(CountingModel& model, const AnnotatedImage& image, int max_exemplars) {
  AnnotatedImage source = image;
  const auto keep = static_cast<std::size_t>(std::clamp(max_exemplars, 1, 3));
  if (source.exemplars.size() > keep) source.exemplars.resize(keep);
  if (source.exemplars.empty()) throw ArgumentError("image '" + image.id + "' has no exemplar boxes");

  PreparedImage out;
  out.resized = resize_for_model(source, model.resize_height);
  auto pyr = extract_image_features(model.backbone, out.resized.image, model.features.blocks);
  auto kernels = extract_exemplar_features(pyr, out.resized.exemplars, model.features.scales);
  out.stack = correlate(pyr, kernels, model.features);
  return out;
}

namespace {

DensityMap forward_no_grad(const PreparedImage& input, DensityHead& head) {
  torch::NoGradGuard no_grad;
  return predict(input.stack, head, input.resized.height, input.resized.width);
}

bool all_finite(const std::vector<torch::Tensor>& tensors) {
  for (const auto& t : tensors)
    if (t.defined() && !torch::isfinite(t).all().item<bool>()) return false;
  return true;
}

}  // namespace

CountResult predict_no_adapt(const PreparedImage& input, DensityHead& head) {
  CountResult r;
  r.density = forward_no_grad(input, head);
  r.count = count(r.density);
  r.trace.counts.push_back(r.count);
  return r;
}

CountResult predict_no_adapt(CountingModel& model, const AnnotatedImage& image) {
  return predict_no_adapt(prepare(model, image), model.head);
}

CountResult adapt_and_count(const PreparedImage& input, const DensityHead& head, const AdaptationConfig& cfg,
                            std::optional<std::chrono::steady_clock::time_point> deadline) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  auto work = clone_head(head);
  auto params = work->parameters();
  for (auto& p : params) p.set_requires_grad(true);
  const auto& boxes = input.resized.exemplars;

  CountResult r;
  auto& trace = r.trace;
  std::vector<torch::Tensor> previous;
  for (int step = 0;; ++step) {
    work->zero_grad();
    auto d = predict(input.stack, work, input.resized.height, input.resized.width);
    auto loss = adaptation_loss(d, boxes, cfg);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      trace.diverged = true;
      break;
    }
    trace.losses.push_back(value);
    trace.counts.push_back(count(d));
    if (step == cfg.steps) break;
    if (deadline && std::chrono::steady_clock::now() > *deadline) {
      trace.timed_out = true;
      break;
    }
    loss.backward();

    std::vector<torch::Tensor> grads;
    for (const auto& p : params) grads.push_back(p.grad());
    if (!all_finite(grads)) {
      trace.diverged = true;
      previous.clear();
      break;
    }
    torch::NoGradGuard no_grad;
    previous.clear();
    for (auto& p : params) {
      previous.push_back(p.detach().clone());
      if (p.grad().defined()) p.sub_(p.grad() * cfg.learning_rate);
    }
  }

  if (trace.diverged && !previous.empty()) {
    // The last update produced a non-finite loss: roll back to the parameters
    // that produced the last recorded (finite) entry.
    torch::NoGradGuard no_grad;
    for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(previous[i]);
  }
  if (trace.losses.size() >= 2 && trace.losses.back() > trace.losses.front()) trace.diverged = true;

  r.density = forward_no_grad(input, work);
  r.count = count(r.density);
  trace.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

CountResult adapt_and_count(CountingModel& model, const AnnotatedImage& image, const AdaptationConfig& cfg) {
  return adapt_and_count(prepare(model, image), model.head, cfg);
}

}  // namespace famcount
