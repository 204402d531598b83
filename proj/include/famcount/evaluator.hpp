#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "famcount/annotation.hpp"
#include "famcount/density.hpp"
#include "famcount/engine.hpp"
#include "famcount/metrics.hpp"
#include "famcount/trainer.hpp"
#include "json.hpp"

namespace famcount {

enum class BaselineMode { mean, median };

// Predicts the same count for every image.
struct ConstantPredictor {
  double value = 0.0;
  double operator()(const AnnotatedImage&) const { return value; }
};

ConstantPredictor baseline_predict(const std::vector<const AnnotatedImage*>& train_images, BaselineMode mode);

struct ImageResult {
  std::string id;
  double gt_count = 0.0;
  double pred_count = 0.0;
  double abs_err = 0.0;
  int exemplars_used = 0;
};

struct EvalFingerprint {
  bool adapt = false;
  int n_exemplars = 3;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  int steps = 0;
  double learning_rate = 0.0;
  std::string model;  // checkpoint / feature fingerprint
};

struct EvalReport {
  std::string split;
  int64_t n = 0;
  double mae = 0.0;
  double rmse = 0.0;
  std::vector<ImageResult> per_image;
  std::vector<std::string> shortfalls;  // images that had fewer exemplars than requested
  EvalFingerprint config;
  double wall_time = 0.0;

  // Recomputes n, mae and rmse from per_image.
  void finalize();
};

nlohmann::json to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);
std::string to_csv(const EvalReport& r);

EvalReport evaluate_split(CountingModel& model, const std::vector<const AnnotatedImage*>& images,
                          const std::string& split_name, bool adapt, int n_exemplars, const AdaptationConfig& cfg);

EvalReport evaluate_baseline(const ConstantPredictor& predictor, const std::vector<const AnnotatedImage*>& images,
                             const std::string& split_name);

// Max-normalised density rendered with the JET colour map, PNG encoded.
std::vector<unsigned char> heatmap_png(const DensityMap& d);
void write_heatmap(const std::filesystem::path& path, const DensityMap& d);

// Randomised blobs on textured backgrounds with exact dots and three exemplar
// boxes per image, deterministic per seed. Every image gets its own category;
// one eighth of the images go to val, one eighth to test, the rest to train.
struct SyntheticOptions {
  int height = 192;
  int width = 256;
  int min_count = 7;
  int max_count = 60;
};
Dataset make_synthetic_suite(uint64_t seed, int n_images, const SyntheticOptions& opts = {});

// One row of an ablation table.
struct AblationRow {
  std::string name;
  EvalReport report;
};

// Component ablation: {block 3 only, scale 1.0}, {blocks 3+4, scale 1.0},
// {blocks 3+4, scales 0.9/1.0/1.1}, each without adaptation, then the full
// configuration with adaptation. A head is trained for each feature setup.
std::vector<AblationRow> run_component_ablation(CountingModel& base, const std::vector<const AnnotatedImage*>& train,
                                                const std::vector<const AnnotatedImage*>& eval_images,
                                                const TrainConfig& train_cfg, const AdaptationConfig& adapt_cfg);

// Exemplar-count sweep (1, 2, 3 exemplars) with the model as given.
std::vector<AblationRow> run_exemplar_ablation(CountingModel& model, const std::vector<const AnnotatedImage*>& images,
                                               bool adapt, const AdaptationConfig& cfg);

// Adaptation-loss ablation: none, perturbation only, min-count only, both.
std::vector<AblationRow> run_loss_ablation(CountingModel& model, const std::vector<const AnnotatedImage*>& images,
                                           const AdaptationConfig& cfg);

}  // namespace famcount
