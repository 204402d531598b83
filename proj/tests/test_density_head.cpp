#include "doctest.h"

#include "famcount/density_head.hpp"
#include "famcount/errors.hpp"
#include "test_util.hpp"

using namespace famcount;
using famcount::testing::TempDir;

namespace {

CorrelationStack random_stack(int64_t c, int64_t h, int64_t w, uint64_t seed) {
  torch::manual_seed(seed);
  return {torch::rand({c, h, w})};
}

bool same_parameters(const DensityHead& a, const DensityHead& b) {
  auto pa = a->named_parameters();
  auto pb = b->named_parameters();
  if (pa.size() != pb.size()) return false;
  for (const auto& item : pa)
    if (!torch::equal(item.value(), pb[item.key()])) return false;
  return true;
}

}  // namespace

TEST_SUITE("density_head") {
  TEST_CASE("output matches the requested image size") {
    auto head = init_params(0);
    for (auto [h, w] : {std::pair{192, 256}, {384, 512}, {480, 640}, {384, 536}}) {
      auto stack = random_stack(6, (h + 7) / 8, (w + 7) / 8, 1);
      auto d = predict(stack, head, h, w);
      CHECK(d.height() == h);
      CHECK(d.width() == w);
    }
  }

  TEST_CASE("density is non-negative") {
    auto head = init_params(3);
    for (uint64_t s = 0; s < 5; ++s) {
      torch::manual_seed(s);
      CorrelationStack stack{torch::randn({6, 12, 16}) * 5};
      CHECK(predict(stack, head, 96, 128).values.min().item<float>() >= 0.0f);
    }
  }

  TEST_CASE("zero stack with zero biases predicts zero") {
    auto head = init_params(5);
    auto d = predict({torch::zeros({6, 8, 8})}, head, 64, 64);
    CHECK(count(d) == 0.0);
  }

  TEST_CASE("parameter count") {
    // conv weights k*k*in*out plus one bias per output channel.
    auto layer = [](int64_t k, int64_t in, int64_t out) { return k * k * in * out + out; };
    const int64_t expected = layer(7, 6, 196) + layer(5, 196, 128) + layer(3, 128, 64) + layer(1, 64, 32) + layer(1, 32, 1);
    CHECK(expected == 761053);
    CHECK(head_parameter_count(6) == expected);
    CHECK(parameter_count(*init_params(0)) == expected);
    CHECK(parameter_count(*init_params(0, 2)) == head_parameter_count(2));
  }

  TEST_CASE("initialisation is seeded") {
    CHECK(same_parameters(init_params(11), init_params(11)));
    CHECK_FALSE(same_parameters(init_params(11), init_params(12)));
    auto head = init_params(0);
    for (const auto& p : head->named_parameters())
      if (p.key().find("bias") != std::string::npos) CHECK(p.value().abs().max().item<float>() == 0.0f);
    // Fan-in scaling: std of the 7x7 layer close to sqrt(2 / (6 * 49)).
    const double sd = head->conv7->weight.std().item<double>();
    CHECK(sd == doctest::Approx(std::sqrt(2.0 / (6 * 49))).epsilon(0.05));
  }

  TEST_CASE("gradients reach every layer") {
    auto head = init_params(1);
    auto d = predict(random_stack(6, 8, 8, 2), head, 64, 64);
    d.values.sum().backward();
    for (const auto& p : head->named_parameters()) {
      REQUIRE(p.value().grad().defined());
      CHECK_MESSAGE(p.value().grad().abs().sum().item<double>() > 0.0, p.key());
    }
  }

  TEST_CASE("clone is independent") {
    auto head = init_params(4);
    auto copy = clone_head(head);
    CHECK(same_parameters(head, copy));
    {
      torch::NoGradGuard ng;
      copy->conv7->weight.add_(1.0);
    }
    CHECK_FALSE(same_parameters(head, copy));
  }

  TEST_CASE("checkpoint round trip is bit-exact") {
    TempDir dir;
    auto head = init_params(9);
    save_checkpoint(dir / "head.ckpt", head, FeatureConfig{}, 0xfedcba9876543210ULL);
    CHECK_FALSE(std::filesystem::exists(dir.path() / "head.ckpt.tmp"));
    auto ck = load_checkpoint(dir / "head.ckpt");
    CHECK(ck.version == kHeadVersion);
    CHECK(ck.backbone_checksum == 0xfedcba9876543210ULL);
    CHECK(ck.features.fingerprint() == FeatureConfig{}.fingerprint());
    CHECK(same_parameters(head, ck.head));
    auto stack = random_stack(6, 10, 10, 3);
    CHECK(torch::equal(predict(stack, head, 80, 80).values, predict(stack, ck.head, 80, 80).values));
  }

  TEST_CASE("non-default feature configuration is restored") {
    TempDir dir;
    FeatureConfig cfg{{3}, {0.8, 1.0}};
    save_checkpoint(dir / "b3.ckpt", init_params(0, cfg.channels()), cfg, 1);
    auto ck = load_checkpoint(dir / "b3.ckpt");
    CHECK(ck.features.blocks == std::vector<int>{3});
    CHECK(ck.features.scales == std::vector<double>{0.8, 1.0});
    CHECK(ck.head->in_channels() == 2);
    CHECK_THROWS_AS(save_checkpoint(dir / "bad.ckpt", init_params(0), cfg, 1), ConfigError);
  }

  TEST_CASE("mismatched stacks and bad files are rejected") {
    TempDir dir;
    auto head = init_params(0);
    CHECK_THROWS_AS(predict(random_stack(2, 8, 8, 0), head, 64, 64), ConfigError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
    famcount::testing::write_file(dir / "junk.ckpt", "definitely not an archive");
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), CheckpointError);

    torch::serialize::OutputArchive ar;
    head->save(ar);
    ar.write("meta.version", c10::IValue(std::string("famcount-density-head/0")));
    ar.save_to((dir / "old.ckpt").string());
    CHECK_THROWS_AS(load_checkpoint(dir / "old.ckpt"), CheckpointError);

    torch::serialize::OutputArchive bare;
    head->save(bare);
    bare.save_to((dir / "bare.ckpt").string());
    CHECK_THROWS_AS(load_checkpoint(dir / "bare.ckpt"), CheckpointError);
  }

  TEST_CASE("count is the total mass") {
    CHECK(count({torch::zeros({384, 512})}) == 0.0);
    CHECK(count({torch::full({100, 200}, 0.01f)}) == doctest::Approx(200.0).epsilon(1e-6));
  }
}
