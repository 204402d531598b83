#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

namespace famcount {

// Pixel coordinates; x is the column, y the row.
struct Point {
  double x = 0.0;
  double y = 0.0;

  bool operator==(const Point&) const = default;
};

// Axis-aligned box in pixel coordinates, (x1, y1) top-left, (x2, y2) bottom-right.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  bool contains(const Point& p) const { return p.x >= x1 && p.x <= x2 && p.y >= y1 && p.y <= y2; }
  bool well_formed() const { return x1 < x2 && y1 < y2; }
  bool inside(int frame_height, int frame_width) const {
    return x1 >= 0.0 && y1 >= 0.0 && x2 <= frame_width && y2 <= frame_height;
  }

  bool operator==(const Box&) const = default;
};

std::string to_string(const Box& b);
std::ostream& operator<<(std::ostream& os, const Point& p);
std::ostream& operator<<(std::ostream& os, const Box& b);

// An image plus its dot annotations and exemplar boxes.
//
// Pixels are either held in memory (`image`, RGB, 8 bit) or decoded from
// `source` on every call to pixels(); the struct itself is never mutated by
// reads, so a loaded dataset can be shared between threads.
struct AnnotatedImage {
  std::string id;
  std::string category;
  std::vector<Point> dots;
  std::vector<Box> exemplars;
  int height = 0;
  int width = 0;
  cv::Mat image;
  std::filesystem::path source;

  std::size_t gt_count() const { return dots.size(); }

  // RGB, CV_8UC3, height x width. Throws LoadError if the source cannot be decoded.
  cv::Mat pixels() const;
};

enum class SplitName { train, val, test };

std::string to_string(SplitName s);
SplitName parse_split_name(const std::string& s);

struct DatasetSplit {
  SplitName name = SplitName::train;
  std::vector<std::string> image_ids;
  std::set<std::string> categories;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<AnnotatedImage> images, std::vector<std::vector<std::string>> split_ids);

  const std::vector<AnnotatedImage>& images() const { return images_; }
  const AnnotatedImage& at(const std::string& id) const;
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::size_t size() const { return images_.size(); }

  const DatasetSplit& split(SplitName name) const;
  std::vector<const AnnotatedImage*> split_images(SplitName name) const;

  // Non-fatal findings from validation (e.g. an exemplar box without a dot).
  const std::vector<std::string>& warnings() const { return warnings_; }
  void add_warning(std::string w) { warnings_.push_back(std::move(w)); }

 private:
  std::vector<AnnotatedImage> images_;
  std::map<std::string, std::size_t> index_;
  DatasetSplit splits_[3];
  std::vector<std::string> warnings_;
};

// Checks the per-image invariants. Throws ValidationError on violations and
// appends warnings for soft ones (exemplar box containing no dot).
void validate_image(const AnnotatedImage& img, std::vector<std::string>& warnings);

// Throws IntegrityError when two splits share a category or a split names an unknown image.
void check_split_integrity(const Dataset& ds);

// Reads `annotations.json`, `splits.json` and `images/` under root.
// Images are decoded once for validation and then released; pixels() reloads them.
Dataset load_dataset(const std::filesystem::path& root);

// Writes the canonical layout. In-memory images are encoded as PNG; images
// backed by a file are copied.
void save_dataset(const Dataset& ds, const std::filesystem::path& root);

// Best-effort import of the public FSC-147 release files: the annotation json
// (points + 4-corner exemplar boxes), the split json and the class list.
Dataset import_fsc147(const std::filesystem::path& annotation_file,
                      const std::filesystem::path& split_file,
                      const std::filesystem::path& class_file,
                      const std::filesystem::path& image_dir);

// Width the model sees for an image of the given size at target_height:
// aspect-preserving, snapped to the nearest multiple of 8, at least 8.
int model_width(int height, int width, int target_height);

// Aspect-preserving resize to target_height; dots and boxes follow the
// per-axis scale factors. Throws DegenerateExemplarError if a box ends up
// smaller than one pixel, ArgumentError if target_height < 64.
AnnotatedImage resize_for_model(const AnnotatedImage& img, int target_height);

}  // namespace famcount
