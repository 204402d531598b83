#include "famcount/density_targets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "famcount/errors.hpp"
#include "json.hpp"

namespace famcount {

namespace fs = std::filesystem;

double count(const DensityMap& d) {
  return d.values.detach().to(torch::kDouble).sum().item<double>();
}

double mean_nn_distance(const std::vector<Point>& dots) {
  if (dots.empty()) throw EmptyAnnotationError("cannot size a Gaussian window without dots");
  if (dots.size() == 1) return kSingleDotWindow;

  const std::size_t n = dots.size();
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = std::hypot(dots[i].x - dots[j].x, dots[i].y - dots[j].y);
      nearest[i] = std::min(nearest[i], d);
      nearest[j] = std::min(nearest[j], d);
    }
  }
  double total = 0.0;
  for (double d : nearest) total += d;
  return total / static_cast<double>(n);
}

GaussianSpec make_gaussian_spec(const std::vector<Point>& dots) {
  const double mean = mean_nn_distance(dots);
  long window = std::lround(mean);
  if (window % 2 == 0) window += 1;
  window = std::clamp<long>(window, kMinWindow, kMaxWindow);
  return {static_cast<int>(window), static_cast<double>(window) / 4.0};
}

DensityMap generate_target(const std::vector<Point>& dots, int height, int width) {
  if (dots.empty()) return {torch::zeros({height, width}, torch::kFloat)};
  return generate_target(dots, height, width, make_gaussian_spec(dots));
}

DensityMap generate_target(const std::vector<Point>& dots, int height, int width, const GaussianSpec& spec) {
  if (height <= 0 || width <= 0) throw ArgumentError("target frame must be non-empty");
  const int radius = spec.window / 2;
  const double inv_two_var = 1.0 / (2.0 * spec.sigma * spec.sigma);

  std::vector<double> profile(2 * radius + 1);
  for (int k = -radius; k <= radius; ++k) profile[k + radius] = std::exp(-k * k * inv_two_var);

  std::vector<double> grid(static_cast<std::size_t>(height) * width, 0.0);
  for (std::size_t i = 0; i < dots.size(); ++i) {
    const auto& p = dots[i];
    if (!(p.x >= 0.0 && p.y >= 0.0 && p.x < width && p.y < height)) {
      std::ostringstream os;
      os << "dot " << i << " (" << p.x << ", " << p.y << ") outside " << width << "x" << height << " frame";
      throw OutOfBoundsError(os.str());
    }
    const int cx = std::min(static_cast<int>(std::lround(p.x)), width - 1);
    const int cy = std::min(static_cast<int>(std::lround(p.y)), height - 1);
    const int r0 = std::max(0, cy - radius), r1 = std::min(height - 1, cy + radius);
    const int c0 = std::max(0, cx - radius), c1 = std::min(width - 1, cx + radius);

    double mass = 0.0;
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) mass += profile[r - cy + radius] * profile[c - cx + radius];
    const double norm = 1.0 / mass;
    for (int r = r0; r <= r1; ++r) {
      double* row = grid.data() + static_cast<std::size_t>(r) * width;
      for (int c = c0; c <= c1; ++c) row[c] += profile[r - cy + radius] * profile[c - cx + radius] * norm;
    }
  }
  auto t = torch::from_blob(grid.data(), {height, width}, torch::kDouble).to(torch::kFloat);
  return {t};
}

void write_target_cache(const fs::path& dir, const std::string& id, const DensityMap& d, const GaussianSpec& spec) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw LoadError("cannot create " + dir.string() + ": " + ec.message());
  auto values = d.values.detach().to(torch::kFloat).contiguous();
  {
    std::ofstream out(dir / (id + ".f32"), std::ios::binary);
    out.write(reinterpret_cast<const char*>(values.data_ptr<float>()),
              static_cast<std::streamsize>(values.numel() * sizeof(float)));
    if (!out) throw LoadError("cannot write " + (dir / (id + ".f32")).string());
  }
  nlohmann::json meta = {{"height", d.height()}, {"width", d.width()}, {"window", spec.window}, {"sigma", spec.sigma}};
  std::ofstream out(dir / (id + ".json"));
  out << meta.dump() << "\n";
  if (!out) throw LoadError("cannot write " + (dir / (id + ".json")).string());
}

DensityMap read_target_cache(const fs::path& dir, const std::string& id, GaussianSpec* spec) {
  std::ifstream meta_in(dir / (id + ".json"));
  if (!meta_in) throw LoadError("missing file: " + (dir / (id + ".json")).string());
  const auto meta = nlohmann::json::parse(meta_in);
  const int64_t h = meta.at("height").get<int64_t>();
  const int64_t w = meta.at("width").get<int64_t>();
  if (spec) *spec = {meta.at("window").get<int>(), meta.at("sigma").get<double>()};

  auto values = torch::empty({h, w}, torch::kFloat);
  std::ifstream in(dir / (id + ".f32"), std::ios::binary);
  if (!in) throw LoadError("missing file: " + (dir / (id + ".f32")).string());
  in.read(reinterpret_cast<char*>(values.data_ptr<float>()), static_cast<std::streamsize>(h * w * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(h * w * sizeof(float)))
    throw LoadError("truncated target file for '" + id + "'");
  return {values};
}

}  // namespace famcount
