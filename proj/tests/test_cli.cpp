#include "doctest.h"

#include "famcount/density_head.hpp"
#include "fixtures.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace famcount;
using famcount::testing::CommandResult;
using famcount::testing::read_file;
using famcount::testing::run_command;
using famcount::testing::TempDir;
using nlohmann::json;

namespace {

const std::string kCli = FAMCOUNT_CLI;

CommandResult cli(const std::string& args, const std::filesystem::path& err) {
  return run_command(kCli + " " + args + " 2>" + err.string());
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

// Checkpoint that matches the CLI's default (unseeded fallback) backbone.
std::filesystem::path fallback_checkpoint(const TempDir& dir) {
  auto p = dir / "head.ckpt";
  save_checkpoint(p, init_params(5), FeatureConfig{}, parameter_checksum(*famcount::testing::shared_backbone()));
  return p;
}

json last_json_line(const std::string& out) {
  auto end = out.find_last_not_of('\n');
  auto start = out.rfind('\n', end);
  return json::parse(out.substr(start == std::string::npos ? 0 : start + 1, end + 1));
}

int line_count(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("help and unknown subcommands") {
    TempDir dir;
    CHECK(cli("--help", dir / "err").exit_code == 0);
    CHECK(cli("count --help", dir / "err").exit_code == 0);
    CHECK(cli("frobnicate", dir / "err").exit_code != 0);
    CHECK(cli("", dir / "err").exit_code != 0);
  }

  TEST_CASE("argument errors exit with the usage code") {
    TempDir dir;
    famcount::testing::write_png(dir / "a.png", 96, 96);
    const auto ckpt = fallback_checkpoint(dir);
    const auto base = "count " + q(dir / "a.png") + " --checkpoint " + q(ckpt);

    auto none = cli(base, dir / "err");
    CHECK(none.exit_code == 2);
    CHECK(read_file(dir / "err").find("--box") != std::string::npos);

    auto four = cli(base + " --box 1,1,9,9 --box 1,1,9,9 --box 1,1,9,9 --box 1,1,9,9", dir / "err");
    CHECK(four.exit_code == 2);

    CHECK(cli(base + " --box 1,1,9", dir / "err").exit_code == 2);
    CHECK(cli(base + " --box 9,1,1,9", dir / "err").exit_code == 2);
    CHECK(cli(base + " --box 50,50,120,60", dir / "err").exit_code == 2);
    CHECK(cli(base + " --box 1,1,9,9 --steps -3", dir / "err").exit_code == 2);
    CHECK(cli("eval --data " + q(dir.path()) + " --exemplars 4", dir / "err").exit_code == 2);
  }

  TEST_CASE("missing checkpoints and unreadable images") {
    TempDir dir;
    famcount::testing::write_png(dir / "a.png", 96, 96);
    famcount::testing::write_file(dir / "junk.png", "not an image");
    const auto ckpt = fallback_checkpoint(dir);

    auto missing = cli("count " + q(dir / "a.png") + " --box 1,1,20,20 --checkpoint " + q(dir / "nope.ckpt"), dir / "err");
    CHECK(missing.exit_code == 3);
    auto junk = cli("count " + q(dir / "junk.png") + " --box 1,1,20,20 --checkpoint " + q(ckpt), dir / "err");
    CHECK(junk.exit_code == 4);
    auto no_data = cli("eval --data " + q(dir / "nothing") + " --checkpoint " + q(ckpt), dir / "err");
    CHECK(no_data.exit_code == 5);
  }

  TEST_CASE("count prints one JSON line") {
    TempDir dir;
    cv::imwrite((dir / "a.png").string(), famcount::testing::test_image(96, 128, 2));
    const auto ckpt = fallback_checkpoint(dir);
    const auto base = "count " + q(dir / "a.png") + " --resize-height 96 --checkpoint " + q(ckpt) +
                      " --box 10,10,40,40 --box 60,20,90,50";

    auto plain = cli(base, dir / "err");
    REQUIRE(plain.exit_code == 0);
    CHECK(line_count(plain.out) == 1);
    auto a = last_json_line(plain.out);
    CHECK(a["adapted"] == false);
    CHECK(a["count"].get<double>() >= 0.0);

    auto zero = cli(base + " --adapt --steps 0", dir / "err");
    REQUIRE(zero.exit_code == 0);
    CHECK(last_json_line(zero.out)["count"].get<double>() == a["count"].get<double>());

    auto adapted = cli(base + " --adapt --steps 2 --heatmap " + q(dir / "out" / "h.png"), dir / "err");
    REQUIRE(adapted.exit_code == 0);
    auto b = last_json_line(adapted.out);
    CHECK(b["adapted"] == true);
    CHECK(b["steps"] == 2);
    CHECK(std::filesystem::exists(dir / "out" / "h.png"));
  }

  TEST_CASE("synth is deterministic and eval reports the split") {
    TempDir dir;
    auto one = cli("synth --n 8 --seed 4 --out " + q(dir / "a"), dir / "err");
    REQUIRE(one.exit_code == 0);
    CHECK(read_file(dir / "err").empty());
    auto two = cli("synth --n 8 --seed 4 --out " + q(dir / "b"), dir / "err");
    REQUIRE(two.exit_code == 0);
    CHECK(read_file(dir / "a" / "annotations.json") == read_file(dir / "b" / "annotations.json"));
    CHECK(read_file(dir / "a" / "splits.json") == read_file(dir / "b" / "splits.json"));
    const auto synth = last_json_line(one.out);
    CHECK(synth["images"] == 8);

    const auto ckpt = fallback_checkpoint(dir);
    const auto eval = "eval --data " + q(dir / "a") + " --split val --resize-height 64 --checkpoint " + q(ckpt);
    auto r1 = cli(eval + " --report " + q(dir / "r1.json") + " --csv " + q(dir / "r1.csv"), dir / "err");
    REQUIRE(r1.exit_code == 0);
    auto r2 = cli(eval + " --report " + q(dir / "r2.json"), dir / "err");
    REQUIRE(r2.exit_code == 0);
    auto j1 = json::parse(read_file(dir / "r1.json"));
    auto j2 = json::parse(read_file(dir / "r2.json"));
    CHECK(j1["n"] == synth["val"]);
    CHECK(last_json_line(r1.out)["n"] == synth["val"]);
    CHECK(line_count(read_file(dir / "r1.csv")) == synth["val"].get<int>() + 1);
    j1.erase("wall_time");
    j2.erase("wall_time");
    CHECK(j1.dump() == j2.dump());

    auto baseline = cli("eval --data " + q(dir / "a") + " --split test --baseline mean", dir / "err");
    REQUIRE(baseline.exit_code == 0);
    CHECK(last_json_line(baseline.out)["n"] == synth["test"]);
  }

  TEST_CASE("train writes checkpoints that count") {
    TempDir dir;
    REQUIRE(cli("synth --n 6 --seed 2 --height 96 --width 128 --out " + q(dir / "data"), dir / "err").exit_code == 0);
    auto t = cli("train --data " + q(dir / "data") + " --out " + q(dir / "ckpt") +
                     " --epochs 2 --resize-height 64 --lr 3e-5 --log " + q(dir / "log.jsonl"),
                 dir / "err");
    REQUIRE(t.exit_code == 0);
    auto line = last_json_line(t.out);
    CHECK(line["epochs"] == 2);
    CHECK(std::filesystem::exists(dir / "ckpt" / "best.ckpt"));
    CHECK(std::filesystem::exists(dir / "ckpt" / "last.ckpt"));
    CHECK(line_count(read_file(dir / "log.jsonl")) == 2);

    auto e = cli("eval --data " + q(dir / "data") + " --split train --resize-height 64 --checkpoint " +
                     q(dir / "ckpt" / "best.ckpt"),
                 dir / "err");
    CHECK(e.exit_code == 0);
  }
}
