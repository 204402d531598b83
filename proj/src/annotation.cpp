#include "famcount/annotation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "famcount/errors.hpp"
#include "json.hpp"

namespace famcount {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(const Box& b) {
  std::ostringstream os;
  os << "[" << b.x1 << ", " << b.y1 << ", " << b.x2 << ", " << b.y2 << "]";
  return os.str();
}

std::ostream& operator<<(std::ostream& os, const Point& p) { return os << "(" << p.x << ", " << p.y << ")"; }

std::ostream& operator<<(std::ostream& os, const Box& b) { return os << to_string(b); }

namespace {

cv::Mat decode_rgb(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw LoadError("cannot decode image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("missing file: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw LoadError("malformed json in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << j.dump(1) << "\n";
  if (!out) throw LoadError("write failed: " + path.string());
}

double as_number(const json& v, const std::string& id, const std::string& field) {
  if (!v.is_number()) throw ValidationError(id, field, "expected a number, got " + v.dump());
  double d = v.get<double>();
  if (!std::isfinite(d)) throw ValidationError(id, field, "non-finite coordinate");
  return d;
}

std::vector<Point> parse_dots(const json& rec, const std::string& id) {
  if (!rec.contains("dots") || !rec["dots"].is_array())
    throw ValidationError(id, "dots", "missing or not an array");
  std::vector<Point> dots;
  for (const auto& d : rec["dots"]) {
    if (!d.is_array() || d.size() != 2) throw ValidationError(id, "dots", "each dot must be [x, y]");
    dots.push_back({as_number(d[0], id, "dots"), as_number(d[1], id, "dots")});
  }
  return dots;
}

std::vector<Box> parse_boxes(const json& rec, const std::string& id) {
  if (!rec.contains("exemplars") || !rec["exemplars"].is_array())
    throw ValidationError(id, "exemplars", "missing or not an array");
  std::vector<Box> boxes;
  for (const auto& b : rec["exemplars"]) {
    if (!b.is_array() || b.size() != 4)
      throw ValidationError(id, "exemplars", "each box must be [x1, y1, x2, y2]");
    boxes.push_back({as_number(b[0], id, "exemplars"), as_number(b[1], id, "exemplars"),
                     as_number(b[2], id, "exemplars"), as_number(b[3], id, "exemplars")});
  }
  return boxes;
}

fs::path find_image_file(const fs::path& dir, const std::string& id) {
  for (const char* ext : {".jpg", ".png", ".jpeg", ".JPG", ".PNG"}) {
    fs::path p = dir / (id + ext);
    if (fs::exists(p)) return p;
  }
  throw LoadError("missing image file for '" + id + "' in " + dir.string());
}

}  // namespace

cv::Mat AnnotatedImage::pixels() const {
  if (!image.empty()) return image;
  if (source.empty()) throw LoadError("image '" + id + "' has neither pixels nor a source file");
  return decode_rgb(source);
}

std::string to_string(SplitName s) {
  switch (s) {
    case SplitName::train: return "train";
    case SplitName::val: return "val";
    case SplitName::test: return "test";
  }
  return "?";
}

SplitName parse_split_name(const std::string& s) {
  if (s == "train") return SplitName::train;
  if (s == "val") return SplitName::val;
  if (s == "test") return SplitName::test;
  throw ArgumentError("unknown split '" + s + "' (expected train, val or test)");
}

Dataset::Dataset(std::vector<AnnotatedImage> images, std::vector<std::vector<std::string>> split_ids)
    : images_(std::move(images)) {
  for (std::size_t i = 0; i < images_.size(); ++i) {
    if (!index_.emplace(images_[i].id, i).second)
      throw IntegrityError("duplicate image id '" + images_[i].id + "'");
  }
  split_ids.resize(3);
  for (int s = 0; s < 3; ++s) {
    splits_[s].name = static_cast<SplitName>(s);
    splits_[s].image_ids = std::move(split_ids[s]);
    for (const auto& id : splits_[s].image_ids) {
      auto it = index_.find(id);
      if (it == index_.end())
        throw IntegrityError("split '" + to_string(splits_[s].name) + "' references unknown image '" + id + "'");
      splits_[s].categories.insert(images_[it->second].category);
    }
  }
}

const AnnotatedImage& Dataset::at(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw ArgumentError("unknown image id '" + id + "'");
  return images_[it->second];
}

const DatasetSplit& Dataset::split(SplitName name) const { return splits_[static_cast<int>(name)]; }

std::vector<const AnnotatedImage*> Dataset::split_images(SplitName name) const {
  std::vector<const AnnotatedImage*> out;
  for (const auto& id : split(name).image_ids) out.push_back(&at(id));
  return out;
}

void validate_image(const AnnotatedImage& img, std::vector<std::string>& warnings) {
  const auto& id = img.id;
  if (img.height <= 0 || img.width <= 0) throw ValidationError(id, "pixels", "empty image");
  if (img.exemplars.empty()) throw ValidationError(id, "exemplars", "at least one exemplar box is required");
  if (img.dots.size() < img.exemplars.size())
    throw ValidationError(id, "dots", "fewer dots (" + std::to_string(img.dots.size()) + ") than exemplars (" +
                                          std::to_string(img.exemplars.size()) + ")");
  for (std::size_t i = 0; i < img.dots.size(); ++i) {
    const auto& p = img.dots[i];
    if (p.x < 0.0 || p.y < 0.0 || p.x >= img.width || p.y >= img.height) {
      std::ostringstream os;
      os << "dot " << i << " (" << p.x << ", " << p.y << ") outside " << img.width << "x" << img.height;
      throw ValidationError(id, "dots", os.str());
    }
  }
  for (std::size_t i = 0; i < img.exemplars.size(); ++i) {
    const auto& b = img.exemplars[i];
    if (!b.well_formed())
      throw ValidationError(id, "exemplars", "box " + std::to_string(i) + " " + to_string(b) + " needs x1 < x2 and y1 < y2");
    if (!b.inside(img.height, img.width))
      throw ValidationError(id, "exemplars", "box " + std::to_string(i) + " " + to_string(b) + " leaves the image");
    bool has_dot = std::any_of(img.dots.begin(), img.dots.end(), [&](const Point& p) { return b.contains(p); });
    if (!has_dot)
      warnings.push_back("image '" + id + "': exemplar " + std::to_string(i) + " " + to_string(b) + " contains no dot");
  }
}

void check_split_integrity(const Dataset& ds) {
  const SplitName names[] = {SplitName::train, SplitName::val, SplitName::test};
  for (int a = 0; a < 3; ++a) {
    for (int b = a + 1; b < 3; ++b) {
      const auto& ca = ds.split(names[a]).categories;
      const auto& cb = ds.split(names[b]).categories;
      std::vector<std::string> shared;
      std::set_intersection(ca.begin(), ca.end(), cb.begin(), cb.end(), std::back_inserter(shared));
      if (!shared.empty()) {
        std::string list;
        for (const auto& c : shared) list += (list.empty() ? "" : ", ") + c;
        throw IntegrityError("splits '" + to_string(names[a]) + "' and '" + to_string(names[b]) +
                             "' share categories: " + list);
      }
    }
  }
}

Dataset load_dataset(const fs::path& root) {
  const json annotations = read_json(root / "annotations.json");
  const json splits = read_json(root / "splits.json");
  const fs::path image_dir = root / "images";
  if (!fs::is_directory(image_dir)) throw LoadError("missing directory: " + image_dir.string());
  if (!annotations.is_object()) throw LoadError("annotations.json must be an object keyed by image id");
  if (!splits.is_object()) throw LoadError("splits.json must be an object");

  std::vector<AnnotatedImage> images;
  std::vector<std::string> warnings;
  for (const auto& [id, rec] : annotations.items()) {
    if (!rec.is_object()) throw ValidationError(id, "record", "expected an object");
    AnnotatedImage img;
    img.id = id;
    img.dots = parse_dots(rec, id);
    img.exemplars = parse_boxes(rec, id);
    if (!rec.contains("category") || !rec["category"].is_string())
      throw ValidationError(id, "category", "missing or not a string");
    img.category = rec["category"].get<std::string>();
    img.source = find_image_file(image_dir, id);
    cv::Mat px = decode_rgb(img.source);
    img.height = px.rows;
    img.width = px.cols;
    validate_image(img, warnings);
    images.push_back(std::move(img));
  }

  std::vector<std::vector<std::string>> ids(3);
  for (SplitName s : {SplitName::train, SplitName::val, SplitName::test}) {
    const auto key = to_string(s);
    if (!splits.contains(key)) continue;
    if (!splits[key].is_array()) throw LoadError("splits.json: '" + key + "' must be an array of ids");
    for (const auto& v : splits[key]) ids[static_cast<int>(s)].push_back(v.get<std::string>());
  }

  Dataset ds(std::move(images), std::move(ids));
  check_split_integrity(ds);
  for (auto& w : warnings) ds.add_warning(std::move(w));
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& root) {
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  if (ec) throw LoadError("cannot create " + (root / "images").string() + ": " + ec.message());

  json annotations = json::object();
  for (const auto& img : ds.images()) {
    json dots = json::array();
    for (const auto& p : img.dots) dots.push_back({p.x, p.y});
    json boxes = json::array();
    for (const auto& b : img.exemplars) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    annotations[img.id] = {{"dots", dots}, {"exemplars", boxes}, {"category", img.category}};

    if (!img.image.empty()) {
      cv::Mat bgr;
      cv::cvtColor(img.image, bgr, cv::COLOR_RGB2BGR);
      const auto out = root / "images" / (img.id + ".png");
      if (!cv::imwrite(out.string(), bgr)) throw LoadError("cannot write " + out.string());
    } else {
      const auto out = root / "images" / (img.id + img.source.extension().string());
      if (fs::weakly_canonical(out) != fs::weakly_canonical(img.source)) {
        fs::copy_file(img.source, out, fs::copy_options::overwrite_existing, ec);
        if (ec) throw LoadError("cannot copy " + img.source.string() + ": " + ec.message());
      }
    }
  }
  json splits = json::object();
  for (SplitName s : {SplitName::train, SplitName::val, SplitName::test})
    splits[to_string(s)] = ds.split(s).image_ids;

  write_json(root / "annotations.json", annotations);
  write_json(root / "splits.json", splits);
}

Dataset import_fsc147(const fs::path& annotation_file, const fs::path& split_file,
                      const fs::path& class_file, const fs::path& image_dir) {
  const json ann = read_json(annotation_file);
  const json spl = read_json(split_file);

  std::map<std::string, std::string> classes;
  {
    std::ifstream in(class_file);
    if (!in) throw LoadError("missing file: " + class_file.string());
    std::string line;
    while (std::getline(in, line)) {
      auto tab = line.find('\t');
      if (tab == std::string::npos) continue;
      auto cls = line.substr(tab + 1);
      while (!cls.empty() && (cls.back() == '\r' || cls.back() == ' ')) cls.pop_back();
      classes[line.substr(0, tab)] = cls;
    }
  }

  std::vector<AnnotatedImage> images;
  std::vector<std::string> warnings;
  std::map<std::string, std::string> file_to_id;
  for (const auto& [file, rec] : ann.items()) {
    AnnotatedImage img;
    img.id = fs::path(file).stem().string();
    file_to_id[file] = img.id;
    img.category = classes.count(file) ? classes[file] : "unknown";
    img.source = image_dir / file;
    if (!fs::exists(img.source)) throw LoadError("missing image file: " + img.source.string());
    cv::Mat px = decode_rgb(img.source);
    img.height = px.rows;
    img.width = px.cols;

    // Points occasionally sit on or just past the border in the public release.
    for (const auto& p : rec.at("points")) {
      Point q{p.at(0).get<double>(), p.at(1).get<double>()};
      q.x = std::clamp(q.x, 0.0, std::nextafter(static_cast<double>(img.width), 0.0));
      q.y = std::clamp(q.y, 0.0, std::nextafter(static_cast<double>(img.height), 0.0));
      img.dots.push_back(q);
    }
    for (const auto& corners : rec.at("box_examples_coordinates")) {
      double x1 = 1e300, y1 = 1e300, x2 = -1e300, y2 = -1e300;
      for (const auto& c : corners) {
        x1 = std::min(x1, c.at(0).get<double>());
        y1 = std::min(y1, c.at(1).get<double>());
        x2 = std::max(x2, c.at(0).get<double>());
        y2 = std::max(y2, c.at(1).get<double>());
      }
      Box b{std::max(0.0, x1), std::max(0.0, y1), std::min<double>(img.width, x2), std::min<double>(img.height, y2)};
      if (b.well_formed()) img.exemplars.push_back(b);
      else warnings.push_back("image '" + img.id + "': dropped degenerate exemplar " + to_string(b));
    }
    validate_image(img, warnings);
    images.push_back(std::move(img));
  }

  std::vector<std::vector<std::string>> ids(3);
  for (SplitName s : {SplitName::train, SplitName::val, SplitName::test}) {
    const auto key = to_string(s);
    if (!spl.contains(key)) continue;
    for (const auto& f : spl[key]) {
      auto it = file_to_id.find(f.get<std::string>());
      if (it != file_to_id.end()) ids[static_cast<int>(s)].push_back(it->second);
    }
  }
  Dataset ds(std::move(images), std::move(ids));
  check_split_integrity(ds);
  for (auto& w : warnings) ds.add_warning(std::move(w));
  return ds;
}

int model_width(int height, int width, int target_height) {
  const double scaled = static_cast<double>(width) * target_height / height;
  const int snapped = static_cast<int>(std::lround(scaled / 8.0)) * 8;
  return std::max(8, snapped);
}

AnnotatedImage resize_for_model(const AnnotatedImage& img, int target_height) {
  if (target_height < 64) throw ArgumentError("target height must be >= 64, got " + std::to_string(target_height));
  if (img.height <= 0 || img.width <= 0) throw ArgumentError("image '" + img.id + "' is empty");

  const int new_w = model_width(img.height, img.width, target_height);
  const double sx = static_cast<double>(new_w) / img.width;
  const double sy = static_cast<double>(target_height) / img.height;

  AnnotatedImage out;
  out.id = img.id;
  out.category = img.category;
  out.height = target_height;
  out.width = new_w;
  out.source = img.source;

  cv::Mat src = img.pixels();
  if (src.rows == target_height && src.cols == new_w) {
    out.image = src;
  } else {
    const bool shrinking = new_w < src.cols && target_height < src.rows;
    cv::resize(src, out.image, cv::Size(new_w, target_height), 0, 0, shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
  }

  out.dots.reserve(img.dots.size());
  for (const auto& p : img.dots) out.dots.push_back({p.x * sx, p.y * sy});
  for (std::size_t i = 0; i < img.exemplars.size(); ++i) {
    const auto& b = img.exemplars[i];
    Box r{b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy};
    if (r.width() < 1.0 || r.height() < 1.0)
      throw DegenerateExemplarError("image '" + img.id + "': exemplar " + std::to_string(i) + " " + to_string(b) +
                                    " collapses to " + to_string(r) + " at height " + std::to_string(target_height));
    out.exemplars.push_back(r);
  }
  return out;
}

}  // namespace famcount
