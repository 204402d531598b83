#include "famcount/service.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <semaphore>
#include <shared_mutex>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "famcount/engine.hpp"
#include "famcount/errors.hpp"
#include "famcount/evaluator.hpp"
#include "httplib.h"
#include "json.hpp"

namespace famcount {

using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message, json extra = json::object()) {
  extra["error"] = message;
  send_json(res, status, extra);
}

// Parses one [x1, y1, x2, y2] entry; returns an error message or nothing.
std::optional<std::string> parse_box(const json& v, Box& out) {
  if (!v.is_array() || v.size() != 4) return "must be [x1, y1, x2, y2]";
  double c[4];
  for (int i = 0; i < 4; ++i) {
    if (!v[i].is_number()) return "coordinates must be numbers";
    c[i] = v[i].get<double>();
    if (!std::isfinite(c[i])) return "coordinates must be finite";
  }
  out = {c[0], c[1], c[2], c[3]};
  if (!out.well_formed()) return "needs x1 < x2 and y1 < y2";
  return std::nullopt;
}

}  // namespace

struct CountingService::Impl {
  ServiceConfig cfg;
  httplib::Server server;
  std::optional<CountingModel> model;
  std::string fingerprint;
  std::string error;

  std::shared_mutex images_mutex;
  std::map<std::string, cv::Mat> images;
  std::atomic<uint64_t> next_id{1};

  std::counting_semaphore<1024> slots;

  explicit Impl(ServiceConfig c) : cfg(std::move(c)), slots(std::clamp(cfg.max_concurrency, 1, 1024)) {
    if (cfg.checkpoint) {
      try {
        model = CountingModel::load(*cfg.checkpoint, cfg.backbone, cfg.resize_height);
        Checkpoint ck{model->head, model->features, parameter_checksum(*model->backbone), kHeadVersion};
        fingerprint = ck.fingerprint();
      } catch (const Error& e) {
        error = e.what();
        std::cerr << "famcount serve: model not loaded: " << error << "\n";
      }
    } else {
      error = "no checkpoint configured";
    }
    routes();
  }

  void routes() {
    server.set_payload_max_length(cfg.max_upload_bytes + 64 * 1024);
    server.set_default_headers({{"Access-Control-Allow-Origin", cfg.cors_origin},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) { health(res); });
    server.Post("/api/images", [this](const httplib::Request& req, httplib::Response& res) { upload(req, res); });
    server.Post("/api/count", [this](const httplib::Request& req, httplib::Response& res) { count_request(req, res); });
    if (!cfg.ui_dir.empty() && std::filesystem::is_directory(cfg.ui_dir))
      server.set_mount_point("/ui", cfg.ui_dir.string());
  }

  void health(httplib::Response& res) {
    if (!model) {
      send_json(res, 503, {{"status", "unavailable"}, {"error", error}, {"model_checkpoint", nullptr}});
      return;
    }
    send_json(res, 200, {{"status", "ok"}, {"model_checkpoint", cfg.checkpoint->string()}, {"fingerprint", fingerprint}});
  }

  void upload(const httplib::Request& req, httplib::Response& res) {
    std::string bytes;
    if (req.is_multipart_form_data()) {
      if (req.has_file("image")) {
        bytes = req.get_file_value("image").content;
      } else if (!req.files.empty()) {
        bytes = req.files.begin()->second.content;
      } else {
        send_error(res, 415, "multipart upload without a file part");
        return;
      }
    } else {
      bytes = req.body;
    }
    if (bytes.size() > cfg.max_upload_bytes) {
      send_error(res, 413, "image exceeds " + std::to_string(cfg.max_upload_bytes) + " bytes");
      return;
    }
    std::vector<unsigned char> buf(bytes.begin(), bytes.end());
    cv::Mat bgr = buf.empty() ? cv::Mat() : cv::imdecode(buf, cv::IMREAD_COLOR);
    if (bgr.empty()) {
      send_error(res, 415, "not a decodable JPEG or PNG image");
      return;
    }
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);

    std::ostringstream id;
    id << "img" << std::setw(6) << std::setfill('0') << next_id++;
    if (!cfg.spill_dir.empty()) {
      std::filesystem::create_directories(cfg.spill_dir);
      cv::imwrite((cfg.spill_dir / (id.str() + ".png")).string(), bgr);
    }
    {
      std::unique_lock lock(images_mutex);
      images[id.str()] = rgb;
    }
    send_json(res, 200, {{"image_id", id.str()}, {"width", rgb.cols}, {"height", rgb.rows}});
  }

  void count_request(const httplib::Request& req, httplib::Response& res) {
    if (!model) {
      send_error(res, 503, "model not loaded: " + error);
      return;
    }
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::parse_error& e) {
      send_error(res, 422, std::string("request body is not valid json: ") + e.what());
      return;
    }
    if (!body.is_object() || !body.contains("image_id") || !body["image_id"].is_string()) {
      send_error(res, 422, "image_id (string) is required");
      return;
    }
    const auto image_id = body["image_id"].get<std::string>();
    cv::Mat pixels;
    {
      std::shared_lock lock(images_mutex);
      auto it = images.find(image_id);
      if (it != images.end()) pixels = it->second;
    }
    if (pixels.empty()) {
      send_error(res, 404, "unknown image_id '" + image_id + "'", {{"image_id", image_id}});
      return;
    }

    if (!body.contains("boxes") || !body["boxes"].is_array() || body["boxes"].empty() || body["boxes"].size() > 3) {
      send_error(res, 422, "boxes must hold 1 to 3 entries");
      return;
    }
    std::vector<Box> boxes;
    for (std::size_t i = 0; i < body["boxes"].size(); ++i) {
      Box b;
      auto problem = parse_box(body["boxes"][i], b);
      if (!problem && !b.inside(pixels.rows, pixels.cols)) problem = "lies outside the image";
      if (problem) {
        send_error(res, 422, "box " + std::to_string(i) + " " + *problem, {{"box_index", i}});
        return;
      }
      boxes.push_back(b);
    }
    const bool adapt = body.value("adapt", false);
    const bool want_heatmap = body.value("return_heatmap", false);
    AdaptationConfig acfg;
    if (body.contains("steps")) {
      if (!body["steps"].is_number_integer()) {
        send_error(res, 422, "steps must be an integer");
        return;
      }
      acfg.steps = body["steps"].get<int>();
    }
    if (acfg.steps < 0 || acfg.steps > cfg.max_steps) {
      send_error(res, 422, "steps must be within [0, " + std::to_string(cfg.max_steps) + "]");
      return;
    }

    AnnotatedImage image;
    image.id = image_id;
    image.image = pixels;
    image.height = pixels.rows;
    image.width = pixels.cols;
    image.exemplars = boxes;

    const auto start = std::chrono::steady_clock::now();
    const auto deadline = start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                      std::chrono::duration<double>(cfg.timeout_seconds));
    CountResult result;
    PreparedImage input;
    slots.acquire();
    try {
      CountingModel m = *model;
      input = prepare(m, image);
      result = adapt ? adapt_and_count(input, m.head, acfg, deadline) : predict_no_adapt(input, m.head);
    } catch (const Error& e) {
      slots.release();
      send_error(res, 422, e.what());
      return;
    } catch (...) {
      slots.release();
      throw;
    }
    slots.release();

    if (result.trace.timed_out) {
      send_error(res, 504, "adaptation exceeded the " + std::to_string(cfg.timeout_seconds) + " s request timeout");
      return;
    }
    double initial = 0.0, final_loss = 0.0;
    int steps_taken = 0;
    if (adapt && !result.trace.losses.empty()) {
      initial = result.trace.losses.front();
      final_loss = result.trace.losses.back();
      steps_taken = static_cast<int>(result.trace.losses.size()) - 1;
    } else {
      torch::NoGradGuard no_grad;
      initial = final_loss = adaptation_loss(result.density, input.resized.exemplars, acfg).item<double>();
    }
    const double elapsed_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();

    json out = {{"count", result.count},
                {"density_sum", result.count},
                {"adapted", adapt},
                {"trace",
                 {{"initial_loss", initial},
                  {"final_loss", final_loss},
                  {"steps", steps_taken},
                  {"diverged", result.trace.diverged}}},
                {"timing", elapsed_ms}};
    if (want_heatmap) {
      const auto png = heatmap_png(result.density);
      out["heatmap"] = httplib::detail::base64_encode(std::string(png.begin(), png.end()));
    }
    send_json(res, 200, out);
  }
};

CountingService::CountingService(ServiceConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}
CountingService::~CountingService() { stop(); }

bool CountingService::model_loaded() const { return impl_->model.has_value(); }
const std::string& CountingService::load_error() const { return impl_->error; }

int CountingService::bind() {
  if (impl_->cfg.port == 0) return impl_->server.bind_to_any_port(impl_->cfg.host);
  return impl_->server.bind_to_port(impl_->cfg.host, impl_->cfg.port) ? impl_->cfg.port : -1;
}

bool CountingService::listen() { return impl_->server.listen_after_bind(); }

void CountingService::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace famcount
