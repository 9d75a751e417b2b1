#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "lcae/data.hpp"
#include "lcae/rng.hpp"
#include "oracles.hpp"

using namespace lcae;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  auto p = fs::temp_directory_path() / (std::string("lcae_data_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("pgm round-trips 8-bit data exactly") {
  const auto dir = temp_dir("pgm");
  Rng rng(1);
  Image<double> img(13, 17);
  for (int y = 0; y < 13; ++y)
    for (int x = 0; x < 17; ++x) img(y, x) = rng.uniform_int(0, 255);
  const auto path = (dir / "a.pgm").string();
  data::write_pgm(path, img);
  const auto back = data::read_pgm(path);
  CHECK((back - img).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("ascii pgm reads") {
  const auto dir = temp_dir("p2");
  const auto path = (dir / "a.pgm").string();
  FILE* f = std::fopen(path.c_str(), "w");
  std::fputs("P2\n# comment\n3 2\n255\n0 10 20\n30 40 255\n", f);
  std::fclose(f);
  const auto img = data::read_pgm(path);
  CHECK(img.rows() == 2);
  CHECK(img.cols() == 3);
  CHECK(img(1, 2) == 255.0);
}

TEST_CASE("load_sample validates inputs") {
  const auto dir = temp_dir("load");
  CHECK_THROWS_AS(data::load_sample((dir / "missing.pgm").string(), (dir / "m.pgm").string()),
                  IoError);
  data::write_pgm((dir / "img.pgm").string(), Image<double>::Zero(8, 8));
  data::write_pgm((dir / "mask.pgm").string(), Image<double>::Zero(4, 4));
  CHECK_THROWS_AS(data::load_sample((dir / "img.pgm").string(), (dir / "mask.pgm").string()),
                  DimensionError);
}

TEST_CASE("mask binarizes at >127 and round-trips") {
  const auto dir = temp_dir("mask");
  Image<double> raw(2, 3);
  raw << 0, 127, 128, 255, 30, 200;
  data::write_pgm((dir / "m.pgm").string(), raw);
  const Mask m = data::read_mask((dir / "m.pgm").string());
  CHECK(m(0, 0) == 0);
  CHECK(m(0, 1) == 0);
  CHECK(m(0, 2) == 1);
  CHECK(m(1, 0) == 1);
  CHECK(m(1, 1) == 0);
  CHECK(m(1, 2) == 1);
  // re-encode and reload: identical
  data::write_mask((dir / "m2.pgm").string(), m);
  const Mask m2 = data::read_mask((dir / "m2.pgm").string());
  CHECK(m2 == m);
}

TEST_CASE("standardize: constant image maps to zeros") {
  const auto out = data::standardize(Image<double>::Constant(8, 8, 42.0));
  CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("standardize: two-pixel image") {
  Image<double> img(1, 2);
  img << 0.0, 2.0;
  const auto out = data::standardize(img);
  CHECK(out(0, 0) == doctest::Approx(-1.0));
  CHECK(out(0, 1) == doctest::Approx(1.0));
}

TEST_CASE("standardize: zero mean, unit std, idempotent") {
  Rng rng(2);
  const auto img = oracles::random_image(rng, 32, 32);
  const auto out = data::standardize(img);
  CHECK(std::abs(out.mean()) < 1e-9);
  const double var = (out.array() - out.mean()).square().sum() / out.size();
  CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(1e-6));
  const auto twice = data::standardize(out);
  CHECK((twice - out).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("pad_crop: already-sized input is unchanged") {
  Rng rng(3);
  data::Sample s;
  s.image = oracles::random_image(rng, 16, 16);
  s.mask = oracles::random_mask(rng, 16, 16, 0.2);
  const auto out = data::pad_crop(s, 16, 16, nullptr);
  CHECK((out.image - s.image).cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.mask == s.mask);
}

TEST_CASE("pad_crop pads with edge replication and co-transforms the mask") {
  data::Sample s;
  s.image = Image<double>::Zero(4, 6);
  s.image(0, 0) = 9.0;
  s.mask = Mask::Zero(4, 6);
  s.mask(0, 0) = 1;
  const auto out = data::pad_crop(s, 8, 8, nullptr);
  CHECK(out.image.rows() == 8);
  CHECK(out.image.cols() == 8);
  // geometric agreement between image and mask everywhere
  int ones = 0;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      CHECK((out.image(y, x) == 9.0) == (out.mask(y, x) == 1));
      ones += out.mask(y, x);
    }
  CHECK(ones >= 1);  // replicated corner
}

TEST_CASE("pad_crop: 200x300 input pads one axis then crops to 256x256") {
  Rng rng(44);
  data::Sample s;
  s.image = oracles::random_image(rng, 200, 300);
  s.mask = oracles::random_mask(rng, 200, 300, 0.1);
  const auto out = data::pad_crop(s, 256, 256, &rng);
  CHECK(out.image.rows() == 256);
  CHECK(out.image.cols() == 256);
  CHECK(out.mask.rows() == 256);
  CHECK(out.mask.cols() == 256);
}

TEST_CASE("random crop offsets stay within bounds and match between image and mask") {
  Rng rng(4);
  data::Sample s;
  s.image.resize(20, 30);
  // encode coordinates so any crop is recognizable
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 30; ++x) s.image(y, x) = y * 100 + x;
  s.mask = Mask::Zero(20, 30);
  s.mask(7, 11) = 1;
  for (int trial = 0; trial < 10; ++trial) {
    const auto out = data::pad_crop(s, 16, 16, &rng);
    REQUIRE(out.image.rows() == 16);
    // the index-grid must co-transform: wherever the mask is 1, the image
    // carries the encoded coordinate of (7, 11)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        if (out.mask(y, x)) CHECK(out.image(y, x) == 7 * 100 + 11);
  }
}

TEST_CASE("double flip is the identity") {
  Rng rng(5);
  data::Sample s;
  s.image = oracles::random_image(rng, 12, 12);
  s.mask = oracles::random_mask(rng, 12, 12, 0.3);
  // force both flips by consuming seeds that return true twice
  Rng flips(0);
  // find a seed whose first two bernoulli(0.5) draws are (true,true)
  std::uint64_t seed = 0;
  for (;; ++seed) {
    Rng probe(seed);
    if (probe.bernoulli(0.5) && probe.bernoulli(0.5)) break;
  }
  Rng f1(seed), f2(seed);
  const auto once = data::random_flip(s, f1);
  const auto twice = data::random_flip(once, f2);
  CHECK((twice.image - s.image).cwiseAbs().maxCoeff() == 0.0);
  CHECK(twice.mask == s.mask);
}

TEST_CASE("flip applies the identical transform to image and mask") {
  Rng rng(6);
  data::Sample s;
  s.image.resize(9, 9);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x) s.image(y, x) = y * 10 + x;
  s.mask = Mask::Zero(9, 9);
  s.mask(2, 5) = 1;
  for (int t = 0; t < 8; ++t) {
    const auto out = data::random_flip(s, rng);
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 9; ++x)
        if (out.mask(y, x)) CHECK(out.image(y, x) == 25.0);
  }
}

TEST_CASE("synth: zero targets means empty mask") {
  data::SynthSpec spec;
  spec.height = spec.width = 32;
  spec.min_targets = spec.max_targets = 0;
  spec.seed = 9;
  const auto s = data::synth_generate(spec);
  CHECK(s.mask.cast<int>().sum() == 0);
}

TEST_CASE("synth: sigma 1 target carves a radius-2 disc (13 pixels)") {
  data::SynthSpec spec;
  spec.height = spec.width = 33;
  spec.min_targets = spec.max_targets = 1;
  spec.sigma_min = spec.sigma_max = 1.0;
  spec.clutter = false;
  spec.seed = 12;
  const auto s = data::synth_generate(spec);
  CHECK(s.mask.cast<int>().sum() == 13);
}

TEST_CASE("synth: deterministic under seed, distinct across seeds") {
  data::SynthSpec spec;
  spec.height = spec.width = 48;
  spec.seed = 77;
  const auto a = data::synth_generate(spec);
  const auto b = data::synth_generate(spec);
  CHECK((a.image - b.image).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.mask == b.mask);
  spec.seed = 78;
  const auto c = data::synth_generate(spec);
  CHECK((a.image - c.image).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("synth: target support never exceeds 9x9") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    data::SynthSpec spec;
    spec.height = spec.width = 64;
    spec.min_targets = 1;
    spec.max_targets = 3;
    spec.seed = seed;
    const auto s = data::synth_generate(spec);
    for (const auto& comp : oracles::flood_fill_components(s.mask)) {
      int min_y = 1 << 20, max_y = -1, min_x = 1 << 20, max_x = -1;
      for (auto [y, x] : comp) {
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
      }
      CHECK(max_y - min_y + 1 <= 9);
      CHECK(max_x - min_x + 1 <= 9);
    }
  }
}

TEST_CASE("synth: impossible margins are a config error") {
  data::SynthSpec spec;
  spec.height = spec.width = 8;
  spec.sigma_min = spec.sigma_max = 2.0;  // margin 6 cannot fit in 8
  spec.min_targets = spec.max_targets = 1;
  CHECK_THROWS_AS(data::synth_generate(spec), ConfigError);
}

TEST_CASE("dataset write/load round-trip through the directory layout") {
  const auto dir = temp_dir("ds");
  std::vector<data::Sample> samples;
  std::vector<data::ManifestEntry> manifest;
  for (int i = 0; i < 4; ++i) {
    data::SynthSpec spec;
    spec.height = spec.width = 24;
    spec.seed = 100 + i;
    auto s = data::synth_generate(spec);
    s.id = "s" + std::to_string(i);
    samples.push_back(s);
    manifest.push_back({s.id, i < 2 ? data::Subset::train : data::Subset::test});
  }
  data::write_dataset(dir.string(), samples, manifest);
  const auto train = data::load_dataset(dir.string(), data::Subset::train);
  const auto test = data::load_dataset(dir.string(), data::Subset::test);
  REQUIRE(train.size() == 2);
  REQUIRE(test.size() == 2);
  CHECK(train[0].id == "s0");
  CHECK(test[1].id == "s3");
  CHECK(test[1].mask == samples[3].mask);
}
