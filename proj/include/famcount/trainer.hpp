#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "famcount/annotation.hpp"
#include "famcount/engine.hpp"

namespace famcount {

struct TrainConfig {
  double learning_rate = 1e-5;
  int batch_size = 1;
  int epochs = 1500;
  int resize_height = 384;
  uint64_t seed = 0;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints written
  int patience = 100;                    // epochs without val improvement before stopping
  int64_t max_iterations = 0;            // optimiser steps; 0 = no cap
  double max_grad_norm = 0.0;            // 0 = no clipping
  int warmup_iterations = 0;             // linear learning-rate ramp over the first steps
  bool cosine_decay = false;             // cosine decay to 0 over max_iterations (or all epochs)
  // Targets are multiplied by this during training and the factor is folded
  // back into the last layer of every head the trainer hands out. Densities
  // are ~1e-4 per pixel; Adam's step size is not relative to that, so
  // without scaling the first few steps drive the output ReLU dead.
  double target_scale = 1000.0;
  std::filesystem::path log_file;        // line-delimited json, optional

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> val_mae;
  double wall_time = 0.0;
};

struct TrainResult {
  DensityHead head{nullptr};       // parameters after the last step
  DensityHead best_head{nullptr};  // best by val MAE, or the last head without a val split
  std::vector<EpochLog> log;
  std::vector<std::string> warnings;
  int64_t iterations = 0;
};

// Trains a freshly initialised head (seeded by cfg.seed) on the train split
// with Adam and per-pixel MSE against adaptive-Gaussian targets. The
// backbone and feature configuration come from `model`; model.head is not
// touched. If `val` is non-empty, MAE without adaptation is tracked per
// epoch for `best` selection and early stopping.
TrainResult train(CountingModel& model, const std::vector<const AnnotatedImage*>& train_images,
                  const std::vector<const AnnotatedImage*>& val_images, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace famcount
