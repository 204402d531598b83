#pragma once

#include <chrono>
#include <optional>
#include <vector>

#include "famcount/annotation.hpp"
#include "famcount/correlation.hpp"
#include "famcount/density_head.hpp"
#include "famcount/features.hpp"
#include "famcount/losses.hpp"

namespace famcount {

// Everything needed to go from pixels to a density map.
struct CountingModel {
  Backbone backbone{nullptr};
  DensityHead head{nullptr};
  FeatureConfig features;
  int resize_height = 384;

  // Backbone from `backbone_weights` (or the seeded fallback) plus the head
  // from `checkpoint`. Throws CheckpointError if the head was trained against
  // a different backbone.
  static CountingModel load(const std::filesystem::path& checkpoint,
                            const std::optional<std::filesystem::path>& backbone_weights, int resize_height = 384);
};

// An image resized for the model together with its correlation stack. The
// backbone is frozen, so the stack is computed once and reused for every
// forward pass of the head (training epochs, adaptation steps).
struct PreparedImage {
  AnnotatedImage resized;
  CorrelationStack stack;
};

// Resize, extract features, pool the exemplar kernels and correlate.
// Uses the first max_exemplars boxes (all of them if fewer exist, at most 3).
PreparedImage prepare(CountingModel& model, const AnnotatedImage& image, int max_exemplars = 3);

struct AdaptationTrace {
  std::vector<double> losses;  // before each step, then the final value
  std::vector<double> counts;
  double wall_time = 0.0;      // seconds
  bool diverged = false;
  bool timed_out = false;
};

struct CountResult {
  double count = 0.0;
  DensityMap density;
  AdaptationTrace trace;
};

// Single forward pass, no adaptation.
CountResult predict_no_adapt(const PreparedImage& input, DensityHead& head);
CountResult predict_no_adapt(CountingModel& model, const AnnotatedImage& image);

// Plain gradient descent on a private copy of the head, minimising the
// adaptation loss on the exemplar boxes. `head` is never modified.
// Aborts at `deadline` (if given) with trace.timed_out set, keeping the
// parameters reached so far.
CountResult adapt_and_count(const PreparedImage& input, const DensityHead& head, const AdaptationConfig& cfg,
                            std::optional<std::chrono::steady_clock::time_point> deadline = std::nullopt);
CountResult adapt_and_count(CountingModel& model, const AnnotatedImage& image, const AdaptationConfig& cfg);

}  // namespace famcount
