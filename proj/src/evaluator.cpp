#include "famcount/evaluator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "famcount/errors.hpp"

namespace famcount {

using nlohmann::json;

ConstantPredictor baseline_predict(const std::vector<const AnnotatedImage*>& train_images, BaselineMode mode) {
  if (train_images.empty()) throw ArgumentError("baseline needs a non-empty train split");
  std::vector<double> counts;
  for (const auto* img : train_images) counts.push_back(static_cast<double>(img->gt_count()));
  if (mode == BaselineMode::mean) {
    double total = 0.0;
    for (double c : counts) total += c;
    return {total / static_cast<double>(counts.size())};
  }
  std::sort(counts.begin(), counts.end());
  const std::size_t n = counts.size();
  return {n % 2 == 1 ? counts[n / 2] : 0.5 * (counts[n / 2 - 1] + counts[n / 2])};
}

void EvalReport::finalize() {
  n = static_cast<int64_t>(per_image.size());
  if (per_image.empty()) {
    mae = rmse = 0.0;
    return;
  }
  std::vector<double> gt, pred;
  for (auto& r : per_image) {
    r.abs_err = std::abs(r.gt_count - r.pred_count);
    gt.push_back(r.gt_count);
    pred.push_back(r.pred_count);
  }
  mae = famcount::mae(gt, pred);
  rmse = famcount::rmse(gt, pred);
}

json to_json(const EvalReport& r) {
  json rows = json::array();
  for (const auto& p : r.per_image)
    rows.push_back({{"id", p.id},
                    {"gt_count", p.gt_count},
                    {"pred_count", p.pred_count},
                    {"abs_err", p.abs_err},
                    {"exemplars_used", p.exemplars_used}});
  return {{"split", r.split},
          {"n", r.n},
          {"mae", r.mae},
          {"rmse", r.rmse},
          {"per_image", rows},
          {"shortfalls", r.shortfalls},
          {"config",
           {{"adapt", r.config.adapt},
            {"n_exemplars", r.config.n_exemplars},
            {"lambda1", r.config.lambda1},
            {"lambda2", r.config.lambda2},
            {"steps", r.config.steps},
            {"learning_rate", r.config.learning_rate},
            {"model", r.config.model}}},
          {"wall_time", r.wall_time}};
}

EvalReport report_from_json(const json& j) {
  EvalReport r;
  r.split = j.at("split").get<std::string>();
  for (const auto& row : j.at("per_image")) {
    r.per_image.push_back({row.at("id").get<std::string>(), row.at("gt_count").get<double>(),
                           row.at("pred_count").get<double>(), row.at("abs_err").get<double>(),
                           row.value("exemplars_used", 0)});
  }
  r.shortfalls = j.value("shortfalls", std::vector<std::string>{});
  const auto& c = j.at("config");
  r.config = {c.at("adapt").get<bool>(),      c.at("n_exemplars").get<int>(),     c.at("lambda1").get<double>(),
              c.at("lambda2").get<double>(),  c.at("steps").get<int>(),           c.at("learning_rate").get<double>(),
              c.at("model").get<std::string>()};
  r.wall_time = j.value("wall_time", 0.0);
  r.n = j.at("n").get<int64_t>();
  r.mae = j.at("mae").get<double>();
  r.rmse = j.at("rmse").get<double>();
  return r;
}

std::string to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "id,gt_count,pred_count,abs_err,exemplars_used\n";
  for (const auto& p : r.per_image)
    os << p.id << "," << p.gt_count << "," << p.pred_count << "," << p.abs_err << "," << p.exemplars_used << "\n";
  return os.str();
}

namespace {

std::string model_fingerprint(const CountingModel& model) {
  std::ostringstream os;
  os << model.features.fingerprint() << "|height=" << model.resize_height << "|head=" << std::hex
     << parameter_checksum(*model.head);
  return os.str();
}

}  // namespace

EvalReport evaluate_split(CountingModel& model, const std::vector<const AnnotatedImage*>& images,
                          const std::string& split_name, bool adapt, int n_exemplars, const AdaptationConfig& cfg) {
  if (n_exemplars < 1 || n_exemplars > 3) throw ArgumentError("n_exemplars must be 1, 2 or 3");
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();

  EvalReport report;
  report.split = split_name;
  report.config = {adapt, n_exemplars, cfg.lambda1, cfg.lambda2, adapt ? cfg.steps : 0, cfg.learning_rate,
                   model_fingerprint(model)};
  for (const auto* img : images) {
    const int used = std::min<int>(n_exemplars, static_cast<int>(img->exemplars.size()));
    if (used < n_exemplars)
      report.shortfalls.push_back(img->id + ": " + std::to_string(used) + " of " + std::to_string(n_exemplars) +
                                  " exemplars available");
    auto input = prepare(model, *img, n_exemplars);
    auto result = adapt ? adapt_and_count(input, model.head, cfg) : predict_no_adapt(input, model.head);
    report.per_image.push_back({img->id, static_cast<double>(img->gt_count()), result.count, 0.0, used});
  }
  report.finalize();
  report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

EvalReport evaluate_baseline(const ConstantPredictor& predictor, const std::vector<const AnnotatedImage*>& images,
                             const std::string& split_name) {
  EvalReport report;
  report.split = split_name;
  report.config.model = "constant=" + std::to_string(predictor.value);
  report.config.n_exemplars = 0;
  for (const auto* img : images)
    report.per_image.push_back({img->id, static_cast<double>(img->gt_count()), predictor(*img), 0.0, 0});
  report.finalize();
  return report;
}

std::vector<unsigned char> heatmap_png(const DensityMap& d) {
  auto v = d.values.detach().to(torch::kFloat).contiguous();
  const float peak = v.numel() ? v.max().item<float>() : 0.0f;
  cv::Mat values(static_cast<int>(d.height()), static_cast<int>(d.width()), CV_32F, v.data_ptr<float>());
  cv::Mat gray;
  values.convertTo(gray, CV_8U, peak > 0.0f ? 255.0 / peak : 0.0);
  cv::Mat colored;
  cv::applyColorMap(gray, colored, cv::COLORMAP_JET);
  std::vector<unsigned char> png;
  if (!cv::imencode(".png", colored, png)) throw LoadError("PNG encoding failed");
  return png;
}

void write_heatmap(const std::filesystem::path& path, const DensityMap& d) {
  const auto png = heatmap_png(d);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
  if (!out) throw LoadError("cannot write " + path.string());
}

namespace {

enum class Shape { disc, square, ellipse, diamond };

const char* shape_name(Shape s) {
  switch (s) {
    case Shape::disc: return "discs";
    case Shape::square: return "squares";
    case Shape::ellipse: return "ellipses";
    case Shape::diamond: return "diamonds";
  }
  return "blobs";
}

cv::Scalar random_color(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> c(0, 255);
  return cv::Scalar(c(rng), c(rng), c(rng));
}

double color_distance(const cv::Scalar& a, const cv::Scalar& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

cv::Mat textured_background(std::mt19937_64& rng, int h, int w, const cv::Scalar& base) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  cv::RNG cvrng(rng());
  cv::Mat noise(h, w, CV_32FC3);
  cvrng.fill(noise, cv::RNG::NORMAL, cv::Scalar::all(0), cv::Scalar::all(1));
  cv::Mat blotches;
  cv::GaussianBlur(noise, blotches, cv::Size(0, 0), 6.0 + 6.0 * u(rng));
  cv::normalize(blotches, blotches, -1.0, 1.0, cv::NORM_MINMAX);

  const double freq = 0.03 + 0.08 * u(rng), angle = u(rng) * CV_PI, stripe_amp = 10.0 + 15.0 * u(rng);
  cv::Mat img(h, w, CV_32FC3);
  for (int r = 0; r < h; ++r) {
    auto* row = img.ptr<cv::Vec3f>(r);
    const auto* bl = blotches.ptr<cv::Vec3f>(r);
    for (int c = 0; c < w; ++c) {
      const double stripe = stripe_amp * std::sin(freq * (c * std::cos(angle) + r * std::sin(angle)));
      for (int k = 0; k < 3; ++k) row[c][k] = static_cast<float>(base[k] + stripe + 25.0 * bl[c][k]);
    }
  }
  return img;
}

void draw_shape(cv::Mat& img, Shape shape, cv::Point center, int radius, double angle, const cv::Scalar& color) {
  switch (shape) {
    case Shape::disc:
      cv::circle(img, center, radius, color, cv::FILLED, cv::LINE_AA);
      break;
    case Shape::square: {
      cv::RotatedRect rr(center, cv::Size2f(1.6f * radius, 1.6f * radius), static_cast<float>(angle));
      cv::Point2f pts[4];
      rr.points(pts);
      std::vector<cv::Point> poly(pts, pts + 4);
      cv::fillConvexPoly(img, poly, color, cv::LINE_AA);
      break;
    }
    case Shape::ellipse:
      cv::ellipse(img, center, cv::Size(radius, std::max(2, radius * 3 / 5)), angle, 0, 360, color, cv::FILLED,
                  cv::LINE_AA);
      break;
    case Shape::diamond: {
      std::vector<cv::Point> poly{{center.x, center.y - radius},
                                  {center.x + radius * 3 / 4, center.y},
                                  {center.x, center.y + radius},
                                  {center.x - radius * 3 / 4, center.y}};
      cv::fillConvexPoly(img, poly, color, cv::LINE_AA);
      break;
    }
  }
}

AnnotatedImage render_synthetic(uint64_t seed, int index, const SyntheticOptions& opts) {
  std::seed_seq seq{seed, static_cast<uint64_t>(index), uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int h = opts.height, w = opts.width, margin = 4;

  const int n = std::uniform_int_distribution<int>(opts.min_count, opts.max_count)(rng);
  const auto shape = static_cast<Shape>(std::uniform_int_distribution<int>(0, 3)(rng));

  // Cell size: the largest square grid that still offers at least n cells.
  int cell = static_cast<int>(std::sqrt(static_cast<double>((w - 2 * margin) * (h - 2 * margin)) / n));
  while (cell > 8 && ((w - 2 * margin) / cell) * ((h - 2 * margin) / cell) < n) --cell;
  const int cols = (w - 2 * margin) / cell, rows = (h - 2 * margin) / cell;
  if (cols * rows < n) throw ArgumentError("synthetic frame too small for " + std::to_string(n) + " objects");

  const int max_radius = std::max(3, std::min(14, (cell - 6) / 2));
  const int radius = std::uniform_int_distribution<int>(std::min(4, max_radius), max_radius)(rng);
  const int jitter = std::max(0, (cell - 2 * radius - 4) / 2);

  cv::Scalar bg = random_color(rng), fg = random_color(rng);
  while (color_distance(bg, fg) < 120.0) fg = random_color(rng);
  cv::Mat canvas = textured_background(rng, h, w, bg);

  std::vector<int> cells(static_cast<std::size_t>(cols * rows));
  std::iota(cells.begin(), cells.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);
  cells.resize(static_cast<std::size_t>(n));
  std::sort(cells.begin(), cells.end());

  const int off_x = (w - cols * cell) / 2, off_y = (h - rows * cell) / 2;
  AnnotatedImage img;
  std::vector<int> radii;
  for (int id : cells) {
    const int gx = id % cols, gy = id / cols;
    std::uniform_int_distribution<int> jit(-jitter, jitter);
    const int cx = off_x + gx * cell + cell / 2 + jit(rng);
    const int cy = off_y + gy * cell + cell / 2 + jit(rng);
    const int r = std::max(2, static_cast<int>(std::lround(radius * (0.9 + 0.2 * u(rng)))));
    const double angle = shape == Shape::disc ? 0.0 : 360.0 * u(rng);
    cv::Scalar shade = fg * (0.9 + 0.2 * u(rng));
    draw_shape(canvas, shape, {cx, cy}, r, angle, shade);
    img.dots.push_back({static_cast<double>(cx), static_cast<double>(cy)});
    radii.push_back(r);
  }

  cv::RNG grain(rng());
  cv::Mat noise(h, w, CV_32FC3);
  grain.fill(noise, cv::RNG::NORMAL, cv::Scalar::all(0), cv::Scalar::all(4));
  canvas += noise;
  canvas.convertTo(img.image, CV_8UC3);

  std::vector<std::size_t> picks(img.dots.size());
  std::iota(picks.begin(), picks.end(), 0);
  std::shuffle(picks.begin(), picks.end(), rng);
  for (int k = 0; k < 3; ++k) {
    const auto& p = img.dots[picks[k]];
    const double half = radii[picks[k]] + 1.0;
    img.exemplars.push_back({std::max(0.0, p.x - half), std::max(0.0, p.y - half), std::min<double>(w, p.x + half + 1),
                             std::min<double>(h, p.y + half + 1)});
  }

  std::ostringstream id;
  id << "synth_" << std::setw(4) << std::setfill('0') << index;
  img.id = id.str();
  img.category = std::string(shape_name(shape)) + "_" + std::to_string(index);
  img.height = h;
  img.width = w;
  return img;
}

}  // namespace

Dataset make_synthetic_suite(uint64_t seed, int n_images, const SyntheticOptions& opts) {
  if (n_images < 1) throw ArgumentError("synthetic suite needs at least one image");
  if (opts.min_count < 3 || opts.max_count < opts.min_count)
    throw ArgumentError("synthetic object counts must satisfy 3 <= min <= max");
  std::vector<AnnotatedImage> images;
  for (int i = 0; i < n_images; ++i) images.push_back(render_synthetic(seed, i, opts));

  const int held_out = n_images / 8;
  std::vector<std::vector<std::string>> ids(3);
  for (int i = 0; i < n_images; ++i) {
    const int split = i < n_images - 2 * held_out ? 0 : (i < n_images - held_out ? 1 : 2);
    ids[split].push_back(images[i].id);
  }
  Dataset ds(std::move(images), std::move(ids));
  check_split_integrity(ds);
  return ds;
}

std::vector<AblationRow> run_component_ablation(CountingModel& base, const std::vector<const AnnotatedImage*>& train_set,
                                                const std::vector<const AnnotatedImage*>& eval_images,
                                                const TrainConfig& train_cfg, const AdaptationConfig& adapt_cfg) {
  struct Setup {
    const char* name;
    FeatureConfig features;
  };
  const Setup setups[] = {
      {"single-scale image, single-scale exemplar", {{3}, {1.0}}},
      {"multi-scale image, single-scale exemplar", {{3, 4}, {1.0}}},
      {"multi-scale image, multi-scale exemplar", {{3, 4}, {0.9, 1.0, 1.1}}},
  };
  std::vector<AblationRow> rows;
  for (const auto& s : setups) {
    CountingModel model = base;
    model.features = s.features;
    model.resize_height = train_cfg.resize_height;
    model.head = train(model, train_set, {}, train_cfg).best_head;
    rows.push_back({s.name, evaluate_split(model, eval_images, "ablation", false, 3, adapt_cfg)});
    if (&s == &setups[2])
      rows.push_back({"multi-scale image, multi-scale exemplar, adaptation",
                      evaluate_split(model, eval_images, "ablation", true, 3, adapt_cfg)});
  }
  return rows;
}

std::vector<AblationRow> run_exemplar_ablation(CountingModel& model, const std::vector<const AnnotatedImage*>& images,
                                               bool adapt, const AdaptationConfig& cfg) {
  std::vector<AblationRow> rows;
  for (int n = 1; n <= 3; ++n)
    rows.push_back({std::to_string(n) + " exemplar" + (n > 1 ? "s" : ""),
                    evaluate_split(model, images, "exemplars", adapt, n, cfg)});
  return rows;
}

std::vector<AblationRow> run_loss_ablation(CountingModel& model, const std::vector<const AnnotatedImage*>& images,
                                           const AdaptationConfig& cfg) {
  auto with = [&](double l1, double l2) {
    AdaptationConfig c = cfg;
    c.lambda1 = l1;
    c.lambda2 = l2;
    return c;
  };
  return {
      {"none", evaluate_split(model, images, "losses", false, 3, cfg)},
      {"perturbation", evaluate_split(model, images, "losses", true, 3, with(0.0, cfg.lambda2))},
      {"min-count", evaluate_split(model, images, "losses", true, 3, with(cfg.lambda1, 0.0))},
      {"perturbation + min-count", evaluate_split(model, images, "losses", true, 3, cfg)},
  };
}

}  // namespace famcount
