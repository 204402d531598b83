#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "famcount/features.hpp"

namespace famcount::testing {

// One seeded fallback backbone shared by every test in the binary.
inline Backbone& shared_backbone() {
  static Backbone backbone = make_backbone(std::nullopt, 0);
  return backbone;
}

// Deterministic test image with some structure (gradients plus discs).
inline cv::Mat test_image(int h, int w, int seed = 0) {
  cv::Mat img(h, w, CV_8UC3);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      img.at<cv::Vec3b>(r, c) = cv::Vec3b(static_cast<uint8_t>((r * 3 + seed * 17) % 256),
                                          static_cast<uint8_t>((c * 2 + seed * 5) % 256), static_cast<uint8_t>((r + c) % 256));
  for (int k = 0; k < 6; ++k)
    cv::circle(img, cv::Point((k * 37 + seed * 11) % w, (k * 53 + seed * 7) % h), 8, cv::Scalar(250, 30, 30), cv::FILLED);
  return img;
}

}  // namespace famcount::testing
