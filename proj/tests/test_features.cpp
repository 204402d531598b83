#include "doctest.h"

#include <cstdlib>
#include <fstream>

#include "famcount/errors.hpp"
#include "famcount/features.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

using namespace famcount;
using famcount::testing::shared_backbone;
using famcount::testing::test_image;

TEST_SUITE("features") {
  TEST_CASE("pyramid shapes follow the block strides") {
    auto pyr = extract_image_features(shared_backbone(), test_image(384, 512));
    const auto& b3 = pyr.level(3);
    const auto& b4 = pyr.level(4);
    CHECK(b3.stride == 8);
    CHECK(b4.stride == 16);
    CHECK(b3.features.sizes() == torch::IntArrayRef{512, 384 / 8, 512 / 8});
    CHECK(b4.features.sizes() == torch::IntArrayRef{1024, 384 / 16, 512 / 16});

    // Width 536 is a multiple of 8 but not 16: block 4 rounds up.
    auto odd = extract_image_features(shared_backbone(), test_image(64, 536), {3, 4});
    CHECK(odd.level(3).features.size(2) == 67);
    CHECK(odd.level(4).features.size(2) == 34);
  }

  TEST_CASE("extraction is deterministic and leaves the backbone untouched") {
    const auto before = parameter_checksum(*shared_backbone());
    auto img = test_image(96, 128, 3);
    auto a = extract_image_features(shared_backbone(), img);
    auto b = extract_image_features(shared_backbone(), img);
    CHECK(torch::equal(a.level(3).features, b.level(3).features));
    CHECK(torch::equal(a.level(4).features, b.level(4).features));
    CHECK(parameter_checksum(*shared_backbone()) == before);
    for (const auto& p : shared_backbone()->parameters()) CHECK_FALSE(p.requires_grad());
    CHECK_FALSE(shared_backbone()->is_training());
  }

  TEST_CASE("fallback backbone is reproducible per seed") {
    CHECK(parameter_checksum(*make_backbone(std::nullopt, 0)) == parameter_checksum(*shared_backbone()));
    CHECK(parameter_checksum(*make_backbone(std::nullopt, 1)) != parameter_checksum(*shared_backbone()));
  }

  TEST_CASE("calibrated fallback features have a usable scale") {
    auto pyr = extract_image_features(shared_backbone(), test_image(128, 128, 1));
    for (int block : {3, 4}) {
      const double mean = pyr.level(block).features.mean().item<double>();
      CHECK(std::isfinite(mean));
      CHECK(mean > 0.0);
      CHECK(mean < 20.0);
    }
  }

  TEST_CASE("input size preconditions") {
    CHECK_THROWS_AS(extract_image_features(shared_backbone(), test_image(16, 16)), ImageTooSmallError);
    CHECK_THROWS_AS(extract_image_features(shared_backbone(), test_image(64, 60)), ShapeError);
  }

  TEST_CASE("missing or foreign backbone weights") {
    CHECK_THROWS_AS(make_backbone(std::filesystem::path("/nonexistent/backbone.pt")), CheckpointError);
    famcount::testing::TempDir dir;
    famcount::testing::write_file(dir / "junk.pt", "not a torchscript archive");
    CHECK_THROWS_AS(make_backbone(dir / "junk.pt"), CheckpointError);
  }

  TEST_CASE("exemplar kernels: count, rounding and clamping") {
    auto pyr = extract_image_features(shared_backbone(), test_image(192, 256));
    auto one = extract_exemplar_features(pyr, {{16, 16, 48, 40}});
    CHECK(one.kernels.size() == 6);

    auto three = extract_exemplar_features(pyr, {{0, 0, 80, 80}, {8, 8, 40, 40}, {100, 50, 140, 90}});
    CHECK(three.kernels.size() == 18);
    // 80 px at stride 8 is 10 cells; 10 * 0.9 = 9, 10 * 1.1 = 11.
    CHECK(three.at(0, 3, 1.0).kernel.sizes() == torch::IntArrayRef{512, 10, 10});
    CHECK(three.at(0, 3, 0.9).kernel.sizes() == torch::IntArrayRef{512, 9, 9});
    CHECK(three.at(0, 3, 1.1).kernel.sizes() == torch::IntArrayRef{512, 11, 11});
    CHECK(three.at(0, 4, 1.0).kernel.sizes() == torch::IntArrayRef{1024, 5, 5});

    auto tiny = extract_exemplar_features(pyr, {{100.2, 50.1, 101.0, 51.0}});
    for (const auto& k : tiny.kernels) {
      CHECK(k.kernel.size(1) == 1);
      CHECK(k.kernel.size(2) == 1);
    }
    // A box hugging the bottom-right corner still gets a cell.
    auto edge = extract_exemplar_features(pyr, {{255.5, 191.5, 256, 192}});
    CHECK(edge.at(0, 3, 1.0).kernel.size(1) == 1);
  }

  TEST_CASE("scale-1 kernels are exact sub-grids of the pyramid") {
    auto pyr = extract_image_features(shared_backbone(), test_image(192, 256, 2));
    const Box box{20, 30, 70, 61};
    auto set = extract_exemplar_features(pyr, {box});
    for (int block : {3, 4}) {
      const auto& level = pyr.level(block);
      auto cells = box_cells(box, level.stride, level.features.size(1), level.features.size(2));
      auto expected = level.features.slice(1, cells.r0, cells.r1).slice(2, cells.c0, cells.c1);
      CHECK(torch::equal(set.at(0, block, 1.0).kernel, expected));
    }
    auto cells = box_cells(box, 8, 24, 32);
    CHECK(cells.r0 == 3);
    CHECK(cells.r1 == 8);
    CHECK(cells.c0 == 2);
    CHECK(cells.c1 == 9);
  }

  TEST_CASE("exemplar box errors") {
    auto pyr = extract_image_features(shared_backbone(), test_image(64, 64));
    CHECK_THROWS_AS(extract_exemplar_features(pyr, {{10, 10, 70, 20}}), OutOfBoundsError);
    CHECK_THROWS_AS(extract_exemplar_features(pyr, {}), ArgumentError);
    CHECK_THROWS_AS(extract_exemplar_features(pyr, {{0, 0, 8, 8}, {0, 0, 8, 8}, {0, 0, 8, 8}, {0, 0, 8, 8}}),
                    ArgumentError);
  }

  TEST_CASE("feature config validation") {
    CHECK_NOTHROW(FeatureConfig{}.validate());
    CHECK(FeatureConfig{}.channels() == 6);
    CHECK_THROWS_AS((FeatureConfig{{4, 3}, {1.0}}.validate()), ConfigError);
    CHECK_THROWS_AS((FeatureConfig{{3, 5}, {1.0}}.validate()), ConfigError);
    CHECK_THROWS_AS((FeatureConfig{{3}, {}}.validate()), ConfigError);
    CHECK(FeatureConfig{}.fingerprint() == "blocks=3,4;scales=0.9,1,1.1;order=block-major");
  }
}

// Driven by tests/backbone_parity.py, which exports a torchvision trunk and
// reference activations; skipped when the environment does not provide them.
TEST_SUITE("parity") {
  TEST_CASE("loaded torchvision weights reproduce torchvision activations") {
    const char* dir = std::getenv("FAMCOUNT_PARITY_DIR");
    if (!dir) return;
    const std::filesystem::path root(dir);
    auto backbone = make_backbone(root / "backbone.pt");
    cv::Mat bgr = cv::imread((root / "input.png").string());
    REQUIRE_FALSE(bgr.empty());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    auto pyr = extract_image_features(backbone, rgb);
    for (int block : {3, 4}) {
      const auto& f = pyr.level(block).features;
      std::ifstream in(root / ("block" + std::to_string(block) + ".f32"), std::ios::binary);
      auto expected = torch::empty_like(f);
      in.read(reinterpret_cast<char*>(expected.data_ptr<float>()), f.numel() * sizeof(float));
      REQUIRE(in.gcount() == static_cast<std::streamsize>(f.numel() * sizeof(float)));
      const double err = (f - expected).abs().max().item<double>();
      const double scale = expected.abs().max().item<double>();
      MESSAGE("block " << block << " max abs diff " << err << " (max activation " << scale << ")");
      CHECK(err <= 1e-3 * std::max(1.0, scale));
    }
  }
}
