#include "doctest.h"

#include <cmath>
#include <random>

#include "famcount/density_targets.hpp"
#include "famcount/errors.hpp"
#include "test_util.hpp"

using namespace famcount;

namespace {

double total(const DensityMap& d) { return d.values.to(torch::kDouble).sum().item<double>(); }

// Brute force over all ordered pairs, independent of the implementation's loop.
double brute_mean_nn(const std::vector<Point>& dots) {
  double sum = 0.0;
  for (std::size_t i = 0; i < dots.size(); ++i) {
    double best = 1e300;
    for (std::size_t j = 0; j < dots.size(); ++j)
      if (i != j) best = std::min(best, std::sqrt(std::pow(dots[i].x - dots[j].x, 2) + std::pow(dots[i].y - dots[j].y, 2)));
    sum += best;
  }
  return sum / dots.size();
}

}  // namespace

TEST_SUITE("density_targets") {
  TEST_CASE("mean nearest-neighbour distance") {
    CHECK(mean_nn_distance({{0, 0}, {0, 16}}) == doctest::Approx(16.0));
    const double expected = (5.0 + 5.0 + std::sqrt(97.0 * 97.0 + 96.0 * 96.0)) / 3.0;
    CHECK(expected == doctest::Approx(48.824).epsilon(1e-4));
    CHECK(mean_nn_distance({{0, 0}, {3, 4}, {100, 100}}) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(mean_nn_distance({{7, 7}}) == 15.0);
    CHECK_THROWS_AS(mean_nn_distance({}), EmptyAnnotationError);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 300);
    for (int t = 0; t < 20; ++t) {
      std::vector<Point> dots;
      for (int k = 0; k < 2 + t; ++k) dots.push_back({u(rng), u(rng)});
      CHECK(mean_nn_distance(dots) == doctest::Approx(brute_mean_nn(dots)).epsilon(1e-12));
    }
  }

  TEST_CASE("gaussian spec window rules") {
    auto s16 = make_gaussian_spec({{0, 0}, {0, 16}});
    CHECK(s16.window == 17);
    CHECK(s16.sigma == 4.25);
    auto s2 = make_gaussian_spec({{0, 0}, {0, 2}});
    CHECK(s2.window == 3);
    CHECK(s2.sigma == 0.75);
    auto s15 = make_gaussian_spec({{0, 0}, {0, 15}});
    CHECK(s15.window == 15);
    CHECK(s15.sigma == 3.75);
    auto huge = make_gaussian_spec({{0, 0}, {0, 500}});
    CHECK(huge.window == 129);
    CHECK(make_gaussian_spec({{5, 5}}).window == 15);
  }

  TEST_CASE("property: larger spacing never gives a smaller window") {
    int previous = 0;
    for (double d = 0.0; d < 200.0; d += 0.37) {
      const int w = make_gaussian_spec({{0, 0}, {d, 0}}).window;
      CHECK(w >= previous);
      CHECK(w % 2 == 1);
      previous = w;
    }
  }

  TEST_CASE("unit mass per dot including truncated corners") {
    CHECK(total(generate_target({{32, 32}}, 64, 64)) == doctest::Approx(1.0).epsilon(1e-6));
    auto corner = generate_target({{0, 0}}, 64, 64);
    CHECK(total(corner) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(corner.values.min().item<float>() >= 0.0f);
    CHECK(corner.values[0][0].item<float>() == corner.values.max().item<float>());

    std::mt19937_64 rng(25);
    std::vector<Point> dots;
    for (int i = 0; i < 25; ++i)
      dots.push_back({std::uniform_real_distribution<double>(0, 512)(rng), std::uniform_real_distribution<double>(0, 384)(rng)});
    auto t = generate_target(dots, 384, 512);
    CHECK(t.height() == 384);
    CHECK(t.width() == 512);
    CHECK(std::abs(total(t) - 25.0) <= 1e-4);
    CHECK(count(t) == doctest::Approx(25.0).epsilon(1e-6));
  }

  TEST_CASE("dots outside the frame are rejected") {
    CHECK_THROWS_AS(generate_target({{64, 3}}, 64, 64), OutOfBoundsError);
    CHECK_THROWS_AS(generate_target({{-0.1, 3}}, 64, 64), OutOfBoundsError);
    // 63.7 rounds to 64 but is inside the frame; it lands on the last column.
    CHECK(total(generate_target({{63.7, 10}}, 64, 64)) == doctest::Approx(1.0));
  }

  TEST_CASE("property: mass conservation on random dot sets") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
      const int h = std::uniform_int_distribution<int>(16, 200)(rng);
      const int w = std::uniform_int_distribution<int>(16, 200)(rng);
      const int n = std::uniform_int_distribution<int>(1, 80)(rng);
      std::vector<Point> dots;
      for (int i = 0; i < n; ++i)
        dots.push_back({std::uniform_real_distribution<double>(0, w)(rng) * 0.999999,
                        std::uniform_real_distribution<double>(0, h)(rng) * 0.999999});
      auto t = generate_target(dots, h, w);
      CHECK(std::abs(total(t) - n) <= 1e-4);
      CHECK(t.values.min().item<float>() >= 0.0f);
    }
  }

  TEST_CASE("property: translation equivariance away from borders") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Point> dots;
      for (int i = 0; i < 6; ++i)
        dots.push_back({std::uniform_real_distribution<double>(40, 80)(rng), std::uniform_real_distribution<double>(40, 80)(rng)});
      const int dx = std::uniform_int_distribution<int>(-10, 10)(rng);
      const int dy = std::uniform_int_distribution<int>(-10, 10)(rng);
      auto shifted = dots;
      for (auto& p : shifted) p = {p.x + dx, p.y + dy};
      const auto spec = make_gaussian_spec(dots);
      REQUIRE(spec.window < 60);
      auto a = generate_target(dots, 160, 160, spec);
      auto b = generate_target(shifted, 160, 160, spec);
      auto moved = torch::roll(a.values, {dy, dx}, {0, 1});
      CHECK((moved - b.values).abs().max().item<float>() <= 1e-6f);
    }
  }

  TEST_CASE("target cache round trip") {
    famcount::testing::TempDir dir;
    auto spec = make_gaussian_spec({{10, 10}, {20, 30}});
    auto t = generate_target({{10, 10}, {20, 30}}, 40, 48, spec);
    write_target_cache(dir.path(), "img1", t, spec);
    GaussianSpec back_spec;
    auto back = read_target_cache(dir.path(), "img1", &back_spec);
    CHECK(torch::equal(back.values, t.values));
    CHECK(back_spec.window == spec.window);
    CHECK(back_spec.sigma == spec.sigma);
    CHECK(std::filesystem::file_size(dir / "img1.f32") == 40 * 48 * sizeof(float));
  }
}
