#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "famcount/annotation.hpp"
#include "famcount/density.hpp"

namespace famcount {

// Gaussian kernel used to smear dots into a density map. sigma = window / 4.
struct GaussianSpec {
  int window = 15;
  double sigma = 3.75;
};

inline constexpr double kSingleDotWindow = 15.0;
inline constexpr int kMinWindow = 3;
inline constexpr int kMaxWindow = 129;

// Mean over dots of the distance to the nearest other dot; 15 for a single dot.
double mean_nn_distance(const std::vector<Point>& dots);

GaussianSpec make_gaussian_spec(const std::vector<Point>& dots);

// One unit-mass Gaussian per dot, centred on the rounded dot position and
// renormalised after truncation at the frame edge, so the map sums to the
// number of dots.
DensityMap generate_target(const std::vector<Point>& dots, int height, int width);
DensityMap generate_target(const std::vector<Point>& dots, int height, int width, const GaussianSpec& spec);

// On-disk cache: <dir>/<id>.f32 (row-major float32, H*W) and <dir>/<id>.json
// ({"height", "width", "window", "sigma"}).
void write_target_cache(const std::filesystem::path& dir, const std::string& id, const DensityMap& d,
                        const GaussianSpec& spec);
DensityMap read_target_cache(const std::filesystem::path& dir, const std::string& id, GaussianSpec* spec = nullptr);

}  // namespace famcount
