#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

namespace famcount {

struct ServiceConfig {
  std::string host = "0.0.0.0";
  int port = 8080;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> backbone;
  int resize_height = 384;
  int max_concurrency = 1;
  double timeout_seconds = 120.0;
  int max_steps = 1000;
  std::size_t max_upload_bytes = 20u * 1024u * 1024u;
  std::string cors_origin = "*";
  std::filesystem::path ui_dir;     // served under /ui/ when set
  std::filesystem::path spill_dir;  // uploaded images are also written here when set
};

// HTTP front end over the counting pipeline:
//   POST /api/images  multipart field "image" (or a raw image body)
//   POST /api/count   {"image_id", "boxes": [[x1,y1,x2,y2], ...], "adapt", "steps", "return_heatmap"}
//   GET  /api/health
// A checkpoint that fails to load leaves the service up but answering 503.
class CountingService {
 public:
  explicit CountingService(ServiceConfig cfg);
  ~CountingService();

  CountingService(const CountingService&) = delete;
  CountingService& operator=(const CountingService&) = delete;

  bool model_loaded() const;
  const std::string& load_error() const;

  // Binds (port 0 picks a free port) and returns the bound port, or -1.
  int bind();
  // Serves until stop(); call after bind().
  bool listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace famcount
