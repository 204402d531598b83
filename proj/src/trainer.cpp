#include "famcount/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "famcount/density_targets.hpp"
#include "famcount/errors.hpp"
#include "famcount/metrics.hpp"
#include "json.hpp"

namespace famcount {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (resize_height < 64) throw ConfigError("resize height must be at least 64");
  if (max_iterations < 0 || max_grad_norm < 0.0 || patience < 0 || warmup_iterations < 0) throw ConfigError("negative training limit");
  if (!(target_scale > 0.0) || !std::isfinite(target_scale)) throw ConfigError("target scale must be positive");
}

namespace {

struct Sample {
  PreparedImage input;
  DensityMap target;
};

double val_mae(const std::vector<PreparedImage>& val, DensityHead& head) {
  std::vector<double> gt, pred;
  for (const auto& v : val) {
    gt.push_back(static_cast<double>(v.resized.gt_count()));
    pred.push_back(predict_no_adapt(v, head).count);
  }
  return mae(gt, pred);
}

// relu(W x + b) / s == relu((W / s) x + b / s) for s > 0, and the final
// resize is linear, so this head predicts the unscaled density.
DensityHead unscaled(const DensityHead& head, double scale) {
  auto out = clone_head(head);
  torch::NoGradGuard no_grad;
  out->conv1b->weight.div_(scale);
  out->conv1b->bias.div_(scale);
  return out;
}

}  // namespace

TrainResult train(CountingModel& base, const std::vector<const AnnotatedImage*>& train_images,
                  const std::vector<const AnnotatedImage*>& val_images, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  if (train_images.empty()) throw ConfigError("the train split is empty");

  CountingModel model = base;
  model.resize_height = cfg.resize_height;
  TrainResult result;

  std::vector<Sample> samples;
  for (const auto* img : train_images) {
    try {
      auto input = prepare(model, *img);
      auto target = generate_target(input.resized.dots, input.resized.height, input.resized.width);
      target.values.mul_(cfg.target_scale);
      samples.push_back({std::move(input), std::move(target)});
    } catch (const Error& e) {
      result.warnings.push_back("skipping training image '" + img->id + "': " + e.what());
    }
  }
  if (samples.empty()) throw ConfigError("no usable training images");

  std::vector<PreparedImage> val;
  for (const auto* img : val_images) {
    try {
      val.push_back(prepare(model, *img));
    } catch (const Error& e) {
      result.warnings.push_back("skipping validation image '" + img->id + "': " + e.what());
    }
  }

  const uint64_t backbone_checksum = parameter_checksum(*model.backbone);
  auto head = init_params(cfg.seed, model.features.channels());
  torch::optim::Adam optimizer(head->parameters(), torch::optim::AdamOptions(cfg.learning_rate));

  std::ofstream log_out;
  if (!cfg.log_file.empty()) {
    log_out.open(cfg.log_file);
    if (!log_out) throw LoadError("cannot write training log " + cfg.log_file.string());
  }

  const int64_t steps_per_epoch = (static_cast<int64_t>(samples.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t horizon = cfg.max_iterations > 0 ? cfg.max_iterations : steps_per_epoch * cfg.epochs;
  auto schedule = [&](int64_t step) {
    double f = cfg.warmup_iterations > 0 ? std::min(1.0, (step + 1.0) / cfg.warmup_iterations) : 1.0;
    if (cfg.cosine_decay) f *= 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(horizon)));
    return cfg.learning_rate * f;
  };

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  const auto start = std::chrono::steady_clock::now();
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  DensityHead best_head{nullptr};
  bool done = false;

  for (int epoch = 1; epoch <= cfg.epochs && !done; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int seen = 0, in_batch = 0;
    optimizer.zero_grad();
    for (std::size_t k = 0; k < order.size(); ++k) {
      auto& s = samples[order[k]];
      auto pred = predict(s.input.stack, head, s.input.resized.height, s.input.resized.width);
      auto loss = mse_loss(pred, s.target);
      (loss / static_cast<double>(cfg.batch_size)).backward();
      loss_sum += loss.item<double>() / (cfg.target_scale * cfg.target_scale);
      ++seen;
      ++in_batch;
      if (in_batch == cfg.batch_size || k + 1 == order.size()) {
        if (cfg.max_grad_norm > 0.0) torch::nn::utils::clip_grad_norm_(head->parameters(), cfg.max_grad_norm);
        static_cast<torch::optim::AdamOptions&>(optimizer.param_groups()[0].options()).lr(schedule(result.iterations));
        optimizer.step();
        optimizer.zero_grad();
        in_batch = 0;
        ++result.iterations;
        if (cfg.max_iterations > 0 && result.iterations >= cfg.max_iterations) {
          done = true;
          break;
        }
      }
    }

    auto current = unscaled(head, cfg.target_scale);
    EpochLog entry;
    entry.epoch = epoch;
    entry.mean_loss = loss_sum / std::max(seen, 1);
    if (!val.empty()) entry.val_mae = val_mae(val, current);
    entry.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(entry);

    const double score = entry.val_mae.value_or(-static_cast<double>(epoch));
    const bool improved = !val.empty() ? score < best : true;
    if (improved) {
      best = score;
      since_best = 0;
      best_head = current;
    } else {
      ++since_best;
    }

    if (!cfg.checkpoint_dir.empty()) {
      save_checkpoint(cfg.checkpoint_dir / "last.ckpt", current, model.features, backbone_checksum);
      if (improved) save_checkpoint(cfg.checkpoint_dir / "best.ckpt", current, model.features, backbone_checksum);
    }
    if (log_out) {
      nlohmann::json line = {{"epoch", entry.epoch}, {"mean_loss", entry.mean_loss}, {"wall_time", entry.wall_time}};
      if (entry.val_mae) line["val_mae"] = *entry.val_mae;
      log_out << line.dump() << "\n" << std::flush;
    }
    if (on_epoch) on_epoch(entry);
    if (!val.empty() && cfg.patience > 0 && since_best >= cfg.patience) break;
  }

  result.head = unscaled(head, cfg.target_scale);
  result.best_head = best_head ? best_head : result.head;
  return result;
}

}  // namespace famcount
