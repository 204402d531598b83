#pragma once

#include <vector>

namespace famcount {

// Mean absolute error between ground-truth and predicted counts.
// Throws ArgumentError on length mismatch or empty input.
double mae(const std::vector<double>& gt, const std::vector<double>& pred);

// Root mean squared error; same preconditions as mae.
double rmse(const std::vector<double>& gt, const std::vector<double>& pred);

}  // namespace famcount
