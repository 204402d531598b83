// famcount: few-shot counting from the command line.
//
// Exit codes: 0 ok, 2 usage, 3 checkpoint, 4 image, 5 dataset, 6 IO.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "CLI11.hpp"
#include "famcount/annotation.hpp"
#include "famcount/density_targets.hpp"
#include "famcount/engine.hpp"
#include "famcount/errors.hpp"
#include "famcount/evaluator.hpp"
#include "famcount/service.hpp"
#include "famcount/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace famcount;

namespace {

enum Exit { kOk = 0, kUsage = 2, kCheckpoint = 3, kImage = 4, kDataset = 5, kIo = 6 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::optional<fs::path> optional_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

template <typename T>
std::vector<T> parse_list(const std::string& s, const char* flag) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v;
    if (!(is >> v)) throw UsageError(std::string(flag) + ": cannot parse '" + item + "'");
    out.push_back(v);
  }
  return out;
}

Box parse_box_flag(const std::string& s) {
  auto v = parse_list<double>(s, "--box");
  if (v.size() != 4) throw UsageError("--box expects x1,y1,x2,y2, got '" + s + "'");
  Box b{v[0], v[1], v[2], v[3]};
  if (!b.well_formed()) throw UsageError("--box " + s + " needs x1 < x2 and y1 < y2");
  return b;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

CountingModel load_model(const std::string& checkpoint, const std::string& backbone, int resize_height) {
  if (checkpoint.empty()) throw CheckpointError("no checkpoint given (use --checkpoint or FAMCOUNT_CKPT)");
  return CountingModel::load(checkpoint, optional_path(backbone), resize_height);
}

// ---- count -----------------------------------------------------------------

struct CountArgs {
  std::string image;
  std::vector<std::string> boxes;
  std::string checkpoint;
  std::string backbone;
  bool adapt = false;
  int steps = 100;
  std::string heatmap;
  int resize_height = 384;
};

int run_count(const CountArgs& a) {
  if (a.boxes.size() > 3) throw UsageError("--box may be given at most 3 times");
  std::vector<Box> boxes;
  for (const auto& s : a.boxes) boxes.push_back(parse_box_flag(s));

  auto model = load_model(a.checkpoint, a.backbone, a.resize_height);

  cv::Mat bgr = cv::imread(a.image, cv::IMREAD_COLOR);
  if (bgr.empty()) throw ImageError("cannot decode image " + a.image);
  AnnotatedImage img;
  img.id = fs::path(a.image).stem().string();
  cv::cvtColor(bgr, img.image, cv::COLOR_BGR2RGB);
  img.height = img.image.rows;
  img.width = img.image.cols;
  for (std::size_t i = 0; i < boxes.size(); ++i)
    if (!boxes[i].inside(img.height, img.width))
      throw UsageError("--box " + a.boxes[i] + " lies outside the " + std::to_string(img.width) + "x" +
                       std::to_string(img.height) + " image");
  img.exemplars = boxes;

  const auto start = std::chrono::steady_clock::now();
  AdaptationConfig cfg;
  cfg.steps = a.steps;
  auto input = prepare(model, img);
  auto result = a.adapt ? adapt_and_count(input, model.head, cfg) : predict_no_adapt(input, model.head);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (!a.heatmap.empty()) {
    try {
      const fs::path out(a.heatmap);
      std::error_code ec;
      if (out.has_parent_path()) fs::create_directories(out.parent_path(), ec);
      write_heatmap(out, result.density);
    } catch (const LoadError& e) {
      throw IoError(e.what());
    }
  }
  json line = {{"count", result.count}, {"adapted", a.adapt}, {"steps", a.adapt ? a.steps : 0}, {"seconds", seconds}};
  if (result.trace.diverged) line["diverged"] = true;
  std::cout << line.dump() << std::endl;
  return kOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string data;
  std::string split = "val";
  std::string checkpoint;
  std::string backbone;
  bool adapt = false;
  int exemplars = 3;
  int steps = 100;
  double lambda1 = 1e-9;
  double lambda2 = 1e-4;
  double adapt_lr = 1e-7;
  int resize_height = 384;
  std::string report;
  std::string csv;
  std::string heatmaps;
  std::string baseline;
};

Dataset load_dataset_or_exit(const std::string& root) {
  try {
    return load_dataset(root);
  } catch (const Error& e) {
    throw IntegrityError(std::string("dataset: ") + e.what());
  }
}

int run_eval(const EvalArgs& a) {
  Dataset ds = load_dataset_or_exit(a.data);
  for (const auto& w : ds.warnings()) std::cerr << "warning: " << w << "\n";
  const auto split = parse_split_name(a.split);
  const auto images = ds.split_images(split);
  if (images.empty()) throw IntegrityError("dataset: split '" + a.split + "' is empty");

  EvalReport report;
  if (!a.baseline.empty()) {
    const auto mode = a.baseline == "mean" ? BaselineMode::mean : BaselineMode::median;
    report = evaluate_baseline(baseline_predict(ds.split_images(SplitName::train), mode), images, a.split);
  } else {
    auto model = load_model(a.checkpoint, a.backbone, a.resize_height);
    AdaptationConfig cfg{a.lambda1, a.lambda2, a.steps, a.adapt_lr};
    report = evaluate_split(model, images, a.split, a.adapt, a.exemplars, cfg);
    if (!a.heatmaps.empty()) {
      fs::create_directories(a.heatmaps);
      for (const auto* img : images) {
        auto input = prepare(model, *img, a.exemplars);
        auto r = a.adapt ? adapt_and_count(input, model.head, cfg) : predict_no_adapt(input, model.head);
        write_heatmap(fs::path(a.heatmaps) / (img->id + ".png"), r.density);
      }
    }
  }
  for (const auto& s : report.shortfalls) std::cerr << "shortfall: " << s << "\n";
  if (!a.report.empty()) write_text(a.report, to_json(report).dump(2) + "\n");
  if (!a.csv.empty()) write_text(a.csv, to_csv(report));
  std::cout << json{{"split", report.split}, {"n", report.n}, {"mae", report.mae}, {"rmse", report.rmse}}.dump()
            << std::endl;
  return kOk;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::string backbone;
  std::string blocks = "3,4";
  std::string scales = "0.9,1.0,1.1";
  std::string log;
  bool no_val = false;
  TrainConfig cfg;
};

int run_train(TrainArgs a) {
  Dataset ds = load_dataset_or_exit(a.data);
  for (const auto& w : ds.warnings()) std::cerr << "warning: " << w << "\n";
  const auto train_images = ds.split_images(SplitName::train);
  if (train_images.empty()) throw ConfigError("the train split is empty");
  const auto val_images = a.no_val ? std::vector<const AnnotatedImage*>{} : ds.split_images(SplitName::val);

  CountingModel model;
  model.backbone = make_backbone(optional_path(a.backbone));
  model.features.blocks = parse_list<int>(a.blocks, "--blocks");
  model.features.scales = parse_list<double>(a.scales, "--scales");
  model.features.validate();

  a.cfg.checkpoint_dir = a.out;
  if (!a.log.empty()) a.cfg.log_file = a.log;
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw IoError("cannot create " + a.out + ": " + ec.message());

  auto result = train(model, train_images, val_images, a.cfg, [](const EpochLog& e) {
    std::cerr << "epoch " << e.epoch << " loss " << e.mean_loss;
    if (e.val_mae) std::cerr << " val_mae " << *e.val_mae;
    std::cerr << " (" << e.wall_time << " s)\n";
  });
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";

  json line = {{"iterations", result.iterations},
               {"epochs", result.log.size()},
               {"final_loss", result.log.empty() ? 0.0 : result.log.back().mean_loss},
               {"checkpoint", (fs::path(a.out) / "best.ckpt").string()}};
  if (!result.log.empty() && result.log.back().val_mae) line["val_mae"] = *result.log.back().val_mae;
  std::cout << line.dump() << std::endl;
  return kOk;
}

// ---- make-targets ----------------------------------------------------------

int run_make_targets(const std::string& data, const std::string& out, int resize_height) {
  Dataset ds = load_dataset_or_exit(data);
  int written = 0;
  for (const auto& img : ds.images()) {
    auto resized = resize_for_model(img, resize_height);
    const auto spec = make_gaussian_spec(resized.dots);
    auto target = generate_target(resized.dots, resized.height, resized.width, spec);
    try {
      write_target_cache(out, img.id, target, spec);
    } catch (const LoadError& e) {
      throw IoError(e.what());
    }
    ++written;
  }
  std::cout << json{{"targets", written}, {"out", out}}.dump() << std::endl;
  return kOk;
}

// ---- synth -----------------------------------------------------------------

int run_synth(const std::string& out, int n, uint64_t seed, int height, int width) {
  SyntheticOptions opts;
  opts.height = height;
  opts.width = width;
  Dataset ds = make_synthetic_suite(seed, n, opts);
  try {
    save_dataset(ds, out);
  } catch (const LoadError& e) {
    throw IoError(e.what());
  } catch (const fs::filesystem_error& e) {
    throw IoError(e.what());
  }
  std::cout << json{{"images", ds.size()},
                    {"train", ds.split(SplitName::train).image_ids.size()},
                    {"val", ds.split(SplitName::val).image_ids.size()},
                    {"test", ds.split(SplitName::test).image_ids.size()},
                    {"out", out}}
                   .dump()
            << std::endl;
  return kOk;
}

// ---- serve -----------------------------------------------------------------

int run_serve(ServiceConfig cfg, const std::string& checkpoint, const std::string& backbone) {
  cfg.checkpoint = optional_path(checkpoint);
  cfg.backbone = optional_path(backbone);
  CountingService service(cfg);
  const int port = service.bind();
  if (port < 0) throw IoError("cannot bind " + cfg.host + ":" + std::to_string(cfg.port));
  std::cerr << "famcount serving on " << cfg.host << ":" << port
            << (service.model_loaded() ? "" : " (no model: " + service.load_error() + ")") << "\n";
  return service.listen() ? kOk : kIo;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot object counting: density estimation with exemplar matching and test-time adaptation"};
  app.require_subcommand(1);

  CountArgs count_args;
  auto* count_cmd = app.add_subcommand("count", "Count objects in one image given 1-3 exemplar boxes");
  count_cmd->add_option("image", count_args.image, "Image file (JPEG or PNG)")->required();
  count_cmd->add_option("--box", count_args.boxes, "Exemplar box x1,y1,x2,y2 in image pixels (1-3 times)")
      ->required()
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  count_cmd->add_option("--checkpoint", count_args.checkpoint, "Density-head checkpoint")->envname("FAMCOUNT_CKPT");
  count_cmd->add_option("--backbone", count_args.backbone, "Exported backbone weights")->envname("FAMCOUNT_BACKBONE");
  count_cmd->add_flag("--adapt", count_args.adapt, "Run test-time adaptation");
  count_cmd->add_option("--steps", count_args.steps, "Adaptation steps")->check(CLI::Range(0, 1000));
  count_cmd->add_option("--heatmap", count_args.heatmap, "Write the density heatmap PNG here");
  count_cmd->add_option("--resize-height", count_args.resize_height, "Model input height")->check(CLI::Range(64, 4096));

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--data", eval_args.data, "Dataset root")->required();
  eval_cmd->add_option("--split", eval_args.split, "Split")->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Density-head checkpoint")->envname("FAMCOUNT_CKPT");
  eval_cmd->add_option("--backbone", eval_args.backbone, "Exported backbone weights")->envname("FAMCOUNT_BACKBONE");
  eval_cmd->add_flag("--adapt", eval_args.adapt, "Run test-time adaptation per image");
  eval_cmd->add_option("--exemplars", eval_args.exemplars, "Exemplars per image")->check(CLI::Range(1, 3));
  eval_cmd->add_option("--steps", eval_args.steps, "Adaptation steps")->check(CLI::Range(0, 100000));
  eval_cmd->add_option("--lambda1", eval_args.lambda1, "Min-Count weight")->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--lambda2", eval_args.lambda2, "Perturbation weight")->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--adapt-lr", eval_args.adapt_lr, "Adaptation step size")->check(CLI::NonNegativeNumber);
  eval_cmd->add_option("--resize-height", eval_args.resize_height, "Model input height")->check(CLI::Range(64, 4096));
  eval_cmd->add_option("--report", eval_args.report, "Write the JSON report here");
  eval_cmd->add_option("--csv", eval_args.csv, "Write per-image rows as CSV here");
  eval_cmd->add_option("--heatmaps", eval_args.heatmaps, "Write one heatmap PNG per image into this directory");
  eval_cmd->add_option("--baseline", eval_args.baseline, "Evaluate a trivial baseline instead of a checkpoint")
      ->check(CLI::IsMember({"mean", "median"}));

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train the density head on the train split");
  train_cmd->add_option("--data", train_args.data, "Dataset root")->required();
  train_cmd->add_option("--out", train_args.out, "Checkpoint directory")->required();
  train_cmd->add_option("--backbone", train_args.backbone, "Exported backbone weights")->envname("FAMCOUNT_BACKBONE");
  train_cmd->add_option("--epochs", train_args.cfg.epochs, "Maximum epochs")->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", train_args.cfg.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch-size", train_args.cfg.batch_size, "Images per optimiser step")
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--resize-height", train_args.cfg.resize_height, "Model input height")
      ->check(CLI::Range(64, 4096));
  train_cmd->add_option("--seed", train_args.cfg.seed, "Initialisation and shuffling seed");
  train_cmd->add_option("--max-iterations", train_args.cfg.max_iterations, "Stop after this many optimiser steps")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--patience", train_args.cfg.patience, "Early-stopping patience in epochs")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--max-grad-norm", train_args.cfg.max_grad_norm, "Gradient clipping threshold (0 = off)")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--warmup", train_args.cfg.warmup_iterations, "Linear learning-rate warmup steps")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_flag("--cosine", train_args.cfg.cosine_decay, "Cosine learning-rate decay to zero");
  train_cmd->add_option("--target-scale", train_args.cfg.target_scale,
                        "Multiplier on density targets during training, folded back into the saved head")
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--blocks", train_args.blocks, "Backbone blocks, e.g. 3,4 or 3");
  train_cmd->add_option("--scales", train_args.scales, "Exemplar scales, e.g. 0.9,1.0,1.1");
  train_cmd->add_option("--log", train_args.log, "Line-delimited JSON training log");
  train_cmd->add_flag("--no-val", train_args.no_val, "Ignore the val split");

  std::string targets_data, targets_out;
  int targets_height = 384;
  auto* targets_cmd = app.add_subcommand("make-targets", "Write ground-truth density maps for a dataset");
  targets_cmd->add_option("--data", targets_data, "Dataset root")->required();
  targets_cmd->add_option("--out", targets_out, "Output directory")->required();
  targets_cmd->add_option("--resize-height", targets_height, "Model input height")->check(CLI::Range(64, 4096));

  std::string synth_out;
  int synth_n = 8, synth_h = 192, synth_w = 256;
  uint64_t synth_seed = 0;
  auto* synth_cmd = app.add_subcommand("synth", "Render a synthetic counting dataset");
  synth_cmd->add_option("--out", synth_out, "Output dataset root")->required();
  synth_cmd->add_option("--n", synth_n, "Number of images")->check(CLI::Range(1, 100000));
  synth_cmd->add_option("--seed", synth_seed, "Random seed");
  synth_cmd->add_option("--height", synth_h, "Image height")->check(CLI::Range(64, 4096));
  synth_cmd->add_option("--width", synth_w, "Image width")->check(CLI::Range(64, 4096));

  ServiceConfig serve_cfg;
  std::string serve_ckpt, serve_backbone, serve_ui, serve_spill;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP counting service");
  serve_cmd->add_option("--port", serve_cfg.port, "Port")->envname("FAMCOUNT_PORT")->check(CLI::Range(0, 65535));
  serve_cmd->add_option("--host", serve_cfg.host, "Bind address");
  serve_cmd->add_option("--checkpoint", serve_ckpt, "Density-head checkpoint")->envname("FAMCOUNT_CKPT");
  serve_cmd->add_option("--backbone", serve_backbone, "Exported backbone weights")->envname("FAMCOUNT_BACKBONE");
  serve_cmd->add_option("--max-concurrency", serve_cfg.max_concurrency, "Simultaneous model executions")
      ->check(CLI::Range(1, 1024));
  serve_cmd->add_option("--timeout", serve_cfg.timeout_seconds, "Per-request adaptation timeout in seconds")
      ->check(CLI::PositiveNumber);
  serve_cmd->add_option("--resize-height", serve_cfg.resize_height, "Model input height")->check(CLI::Range(64, 4096));
  serve_cmd->add_option("--ui-dir", serve_ui, "Static UI assets served under /ui/");
  serve_cmd->add_option("--spill-dir", serve_spill, "Also store uploads on disk here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  // Remaining pipeline errors are box problems for `count`, data problems otherwise.
  const int fallback = *count_cmd ? kUsage : kDataset;
  try {
    if (*count_cmd) return run_count(count_args);
    if (*eval_cmd) return run_eval(eval_args);
    if (*train_cmd) return run_train(train_args);
    if (*targets_cmd) return run_make_targets(targets_data, targets_out, targets_height);
    if (*synth_cmd) return run_synth(synth_out, synth_n, synth_seed, synth_h, synth_w);
    if (*serve_cmd) {
      serve_cfg.ui_dir = serve_ui;
      serve_cfg.spill_dir = serve_spill;
      return run_serve(serve_cfg, serve_ckpt, serve_backbone);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const ImageError& e) {
    std::cerr << "image error: " << e.what() << "\n";
    return kImage;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const IntegrityError& e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return kDataset;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kDataset;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return fallback;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}
