// SPDX-License-Identifier: Apache-2.0
//
// Dark model algebra, generator contracts, and the on-disk sequence layout.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mlkd/darkroom.hpp"

using namespace mlkd;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

ImageF uniform_image(int size, double v) {
  ImageF img(size, size);
  for (auto& p : img.v) p = v;
  return img;
}

ImageF random_image(int size, uint64_t seed) {
  Rng rng(seed);
  ImageF img(size, size);
  for (auto& p : img.v) p = rng.uniform(0.0, 1.0);
  return img;
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("darken closed forms") {
  DarkModel m;
  m.noise_sigma = 0.0;
  CHECK(darken(uniform_image(8, 0.0), m).v[0] == 0.0);
  for (double v : darken(uniform_image(8, 1.0), m).v) CHECK(v == Approx(0.35));

  // any non-black image gets strictly darker in the mean
  ImageF img = random_image(16, 3);
  double before = 0.0, after = 0.0;
  ImageF dark = darken(img, m);
  for (size_t i = 0; i < img.v.size(); ++i) {
    before += img.v[i];
    after += dark.v[i];
  }
  CHECK(after < before);
}

TEST_CASE("darken and enhance are monotone without noise") {
  DarkModel m;
  m.noise_sigma = 0.0;
  double prev_d = -1.0, prev_e = -1.0;
  for (int k = 0; k <= 100; ++k) {
    ImageF px = uniform_image(1, k / 100.0);
    const double d = darken(px, m).v[0];
    const double e = enhance(px, m).v[0];
    CHECK(d >= prev_d);
    CHECK(e >= prev_e);
    prev_d = d;
    prev_e = e;
  }
}

TEST_CASE("enhance inverts the noiseless dark model") {
  DarkModel m;
  m.noise_sigma = 0.0;
  ImageF img = random_image(24, 9);
  ImageF round = enhance(darken(img, m), m);
  double worst = 0.0;
  for (size_t i = 0; i < img.v.size(); ++i)
    worst = std::max(worst, std::abs(round.v[i] - img.v[i]));
  CHECK(worst < 1e-6);

  for (double v : enhance(uniform_image(4, 0.35), m).v) CHECK(v == Approx(1.0));
}

TEST_CASE("enhance under noise stays close on average") {
  // Monte Carlo over 100 generated daylight frames. The cube-root inverse
  // amplifies sensor noise where the signal is dim, so the bound is a
  // statement about the frame distribution, not just about sigma.
  DarkModel m;  // default sigma 0.02
  GenConfig cfg;
  cfg.num_sequences = 10;
  cfg.frames_per_sequence = 10;
  double total = 0.0;
  long count = 0;
  uint64_t s = 0;
  for (const auto& seq : generate(cfg))
    for (const auto& img : seq.day) {
      Rng noise(mix_seed(78, s++));
      ImageF round = enhance(darken(img, m, noise), m);
      for (size_t i = 0; i < img.v.size(); ++i) {
        total += std::abs(round.v[i] - img.v[i]);
        ++count;
      }
    }
  CHECK(count == 100 * 3 * 96 * 96);
  CHECK(total / count < 0.05);
}

TEST_CASE("generator determinism and contracts") {
  GenConfig cfg;
  cfg.num_sequences = 5;
  cfg.frames_per_sequence = 12;

  auto a = generate(cfg);
  auto b = generate(cfg);
  REQUIRE(a.size() == 5);
  for (size_t s = 0; s < a.size(); ++s) {
    REQUIRE(a[s].day.size() == 12);
    REQUIRE(a[s].boxes.size() == 12);
    CHECK(a[s].attributes == b[s].attributes);
    for (size_t t = 0; t < a[s].day.size(); ++t) {
      CHECK(a[s].day[t].v == b[s].day[t].v);  // bitwise
      const BBox& box = a[s].boxes[t];
      CHECK(box.x0() >= 0.0);
      CHECK(box.y0() >= 0.0);
      CHECK(box.x1() <= cfg.image_size);
      CHECK(box.y1() <= cfg.image_size);
    }
  }
}

TEST_CASE("fast-motion sequences move fast") {
  GenConfig cfg;
  cfg.num_sequences = 3;
  cfg.frames_per_sequence = 20;
  cfg.attribute_mix = {"fast-motion"};
  for (const auto& seq : generate(cfg)) {
    int big = 0;
    for (size_t t = 1; t < seq.boxes.size(); ++t)
      if (cle(seq.boxes[t], seq.boxes[t - 1]) >= 8.0) ++big;
    CHECK(big * 2 >= static_cast<int>(seq.boxes.size() - 1));
  }
}

TEST_CASE("config validation names the field") {
  GenConfig cfg;
  cfg.frames_per_sequence = 1;
  CHECK_THROWS_WITH(generate(cfg), Catch::Matchers::ContainsSubstring("frames_per_sequence"));
  cfg.frames_per_sequence = 10;
  cfg.attribute_mix = {"speedy"};
  CHECK_THROWS_WITH(generate(cfg), Catch::Matchers::ContainsSubstring("speedy"));
  cfg.attribute_mix.clear();
  CHECK_THROWS_WITH(generate(cfg), Catch::Matchers::ContainsSubstring("attribute_mix"));
  cfg = GenConfig{};
  cfg.num_sequences = 0;
  CHECK_THROWS_WITH(generate(cfg), Catch::Matchers::ContainsSubstring("num_sequences"));
}

TEST_CASE("sequence round trip through disk") {
  const fs::path dir = fs::temp_directory_path() / "mlkd_seq_rt";
  fs::remove_all(dir);

  GenConfig cfg;
  cfg.num_sequences = 1;
  cfg.frames_per_sequence = 4;
  cfg.seed = 5;
  SequenceData seq = generate(cfg)[0];
  DarkModel model;
  model.seed = cfg.seed;
  save_sequence(dir, seq, model);

  LoadedSequence loaded = load_sequence(dir);
  REQUIRE(loaded.frames.size() == 4);
  REQUIRE(loaded.boxes.size() == 4);
  CHECK(loaded.attributes == seq.attributes);
  CHECK(loaded.model.gamma == Approx(3.0));
  CHECK(loaded.model.gain == Approx(0.35));
  for (size_t t = 0; t < 4; ++t) {
    // ground truth survives the 2-decimal text format
    CHECK(loaded.boxes[t].cx == Approx(seq.boxes[t].cx).margin(0.01));
    CHECK(loaded.boxes[t].w == Approx(seq.boxes[t].w).margin(0.01));
    // pixels survive 8-bit quantization
    Rng noise(mix_seed(mix_seed(seq.seed, 0xDA5Cu), static_cast<uint64_t>(t)));
    ImageF dark = darken(seq.day[t], model, noise);
    double worst = 0.0;
    for (size_t i = 0; i < dark.v.size(); ++i)
      worst = std::max(worst, std::abs(dark.v[i] - loaded.frames[t].v[i]));
    CHECK(worst <= 0.5 / 255.0 + 1e-12);
  }

  SECTION("saving twice is byte-identical") {
    auto before = file_bytes(dir / "0001.png");
    auto gt_before = file_bytes(dir / "groundtruth.txt");
    save_sequence(dir, seq, model);
    CHECK(file_bytes(dir / "0001.png") == before);
    CHECK(file_bytes(dir / "groundtruth.txt") == gt_before);
  }

  SECTION("loader rejects missing metadata") {
    fs::remove(dir / "meta.json");
    CHECK_THROWS_WITH(load_sequence(dir), Catch::Matchers::ContainsSubstring("meta.json"));
  }
  fs::remove_all(dir);
}

TEST_CASE("box line format parses OTB-style integers too") {
  BBox b = parse_box_line("10,20,30,40", "test");
  CHECK(b.cx == Approx(25.0));
  CHECK(b.cy == Approx(40.0));
  CHECK(b.w == Approx(30.0));
  CHECK_THROWS_WITH(parse_box_line("1,2,3", "test"), Catch::Matchers::ContainsSubstring("test"));
  CHECK_THROWS_WITH(parse_box_line("a,b,c,d", "test"),
                    Catch::Matchers::ContainsSubstring("bad box line"));
}
