#include "famcount/metrics.hpp"

#include <cmath>
#include <string>

#include "famcount/errors.hpp"

namespace famcount {

namespace {

void check(const std::vector<double>& gt, const std::vector<double>& pred) {
  if (gt.size() != pred.size())
    throw ArgumentError("count vectors differ in length (" + std::to_string(gt.size()) + " vs " +
                        std::to_string(pred.size()) + ")");
  if (gt.empty()) throw ArgumentError("cannot compute a metric over zero images");
}

}  // namespace

double mae(const std::vector<double>& gt, const std::vector<double>& pred) {
  check(gt, pred);
  double total = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) total += std::abs(gt[i] - pred[i]);
  return total / static_cast<double>(gt.size());
}

double rmse(const std::vector<double>& gt, const std::vector<double>& pred) {
  check(gt, pred);
  double total = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) total += (gt[i] - pred[i]) * (gt[i] - pred[i]);
  return std::sqrt(total / static_cast<double>(gt.size()));
}

}  // namespace famcount
