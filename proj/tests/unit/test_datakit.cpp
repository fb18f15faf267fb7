#include "ktraj/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include "doctest.h"
#include "ktraj/errors.hpp"
#include "ktraj/recon.hpp"

using ktraj::CoilSet;
using ktraj::DatasetSplit;
using ktraj::Phantom;
using ktraj::argument_error;
using ktraj::dataset_split;
using ktraj::io_error;
using ktraj::load_pgm16;
using ktraj::load_raw_f32;
using ktraj::make_coils;
using ktraj::make_phantom;
using ktraj::rss;
using ktraj::save_pgm16;
using ktraj::save_raw_f32;
using ktraj::save_svg_heatmap;
using ktraj::simulate_coil_images;

namespace {

std::string temp_path(const std::string& name) { return "/tmp/ktraj_datakit_" + name; }

}  // namespace

TEST_CASE("phantoms are seed-deterministic and differ across seeds") {
  const Phantom a = make_phantom(32, 5, 6);
  const Phantom b = make_phantom(32, 5, 6);
  const Phantom c = make_phantom(32, 6, 6);
  REQUIRE(a.image.size() == b.image.size());
  for (std::size_t i = 0; i < a.image.size(); ++i) CHECK(a.image[i] == b.image[i]);
  bool differs = false;
  for (std::size_t i = 0; i < a.image.size(); ++i) {
    if (a.image[i] != c.image[i]) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("zero extra ellipses yields the canonical base phantom only") {
  const Phantom p = make_phantom(64, 1, 0);
  CHECK(p.descriptor.size() == 10);
  const Phantom q = make_phantom(64, 999, 0);  // seed is irrelevant without extras
  for (std::size_t i = 0; i < p.image.size(); ++i) CHECK(p.image[i] == q.image[i]);
}

TEST_CASE("phantom values live in [0,1] with max exactly 1") {
  const Phantom p = make_phantom(64, 11, 8);
  double peak = 0.0;
  for (double v : p.image) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    peak = std::max(peak, v);
  }
  CHECK(peak == 1.0);
  CHECK(p.descriptor.size() == 18);
}

TEST_CASE("supersampling produces blended edge values beyond the flat region set") {
  const Phantom p = make_phantom(64, 3, 0);
  std::set<double> distinct(p.image.begin(), p.image.end());
  // Without anti-aliasing the image would carry only the handful of
  // region-sum values; edge blends multiply the distinct values.
  CHECK(distinct.size() > 20);
}

TEST_CASE("phantom rejects tiny grids and negative ellipse counts") {
  CHECK_THROWS_AS(make_phantom(8, 1, 0), argument_error);
  CHECK_THROWS_AS(make_phantom(64, 1, -1), argument_error);
}

TEST_CASE("coil maps are unit sum-of-squares per pixel") {
  const CoilSet set = make_coils(24, 4, 9);
  REQUIRE(set.maps.size() == 4);
  for (std::size_t i = 0; i < set.maps.front().data.size(); ++i) {
    double norm2 = 0.0;
    for (const auto& m : set.maps) norm2 += std::norm(m.data[i]);
    CHECK(std::abs(norm2 - 1.0) <= 1e-10);
  }
}

TEST_CASE("a single coil normalizes to constant unit magnitude") {
  const CoilSet set = make_coils(16, 1, 2);
  for (const auto& z : set.maps.front().data) {
    CHECK(std::abs(std::abs(z) - 1.0) <= 1e-12);
  }
}

TEST_CASE("coil generation is seed-deterministic") {
  const CoilSet a = make_coils(16, 3, 7);
  const CoilSet b = make_coils(16, 3, 7);
  for (std::size_t c = 0; c < a.maps.size(); ++c) {
    for (std::size_t i = 0; i < a.maps[c].data.size(); ++i) {
      CHECK(a.maps[c].data[i] == b.maps[c].data[i]);
    }
  }
  CHECK_THROWS_AS(make_coils(16, 0, 1), argument_error);
}

TEST_CASE("rss through simulated coil images reproduces the phantom") {
  const Phantom p = make_phantom(32, 4, 5);
  const CoilSet set = make_coils(32, 4, 4);
  const auto coils = simulate_coil_images(p, set);
  const auto combined = rss(coils);
  for (std::size_t i = 0; i < p.image.size(); ++i) {
    CHECK(std::abs(combined[i] - p.image[i]) <= 1e-10);
  }
}

TEST_CASE("simulate_coil_images: zero phantom, linearity, and shape checks") {
  Phantom zero = make_phantom(16, 1, 0);
  for (double& v : zero.image) v = 0.0;
  const CoilSet set = make_coils(16, 2, 3);
  for (const auto& img : simulate_coil_images(zero, set)) {
    for (const auto& z : img.data) CHECK(std::abs(z) == 0.0);
  }

  Phantom p = make_phantom(16, 2, 3);
  Phantom p2 = p;
  for (double& v : p2.image) v *= 2.0;
  const auto once = simulate_coil_images(p, set);
  const auto twice = simulate_coil_images(p2, set);
  for (std::size_t c = 0; c < once.size(); ++c) {
    for (std::size_t i = 0; i < once[c].data.size(); ++i) {
      CHECK(std::abs(twice[c].data[i] - 2.0 * once[c].data[i]) <=
            1e-15 * std::max(1.0, std::abs(once[c].data[i])));
    }
  }

  const CoilSet other = make_coils(24, 2, 3);
  CHECK_THROWS_AS(simulate_coil_images(p, other), argument_error);
}

TEST_CASE("dataset_split reproduces the 60/5/15 proportions at n=80") {
  const DatasetSplit s = dataset_split(80, 0.75, 0.0625, 0.1875, 1);
  CHECK(s.train.size() == 60);
  CHECK(s.val.size() == 5);
  CHECK(s.test.size() == 15);
}

TEST_CASE("dataset_split is disjoint, exhaustive, and deterministic") {
  const DatasetSplit a = dataset_split(37, 0.5, 0.25, 0.25, 3);
  std::vector<int> all;
  all.insert(all.end(), a.train.begin(), a.train.end());
  all.insert(all.end(), a.val.begin(), a.val.end());
  all.insert(all.end(), a.test.begin(), a.test.end());
  REQUIRE(all.size() == 37);
  std::sort(all.begin(), all.end());
  for (int i = 0; i < 37; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);

  const DatasetSplit b = dataset_split(37, 0.5, 0.25, 0.25, 3);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);

  CHECK_THROWS_AS(dataset_split(10, 0.5, 0.25, 0.1, 1), argument_error);
}

TEST_CASE("16-bit PGM round-trips a ramp within one quantization step") {
  const int h = 4, w = 256;
  std::vector<double> ramp(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      ramp[static_cast<std::size_t>(y) * w + x] = static_cast<double>(x) / (w - 1);
    }
  }
  const std::string path = temp_path("ramp.pgm");
  save_pgm16(ramp, h, w, path);
  const auto img = load_pgm16(path);
  REQUIRE(img.h == h);
  REQUIRE(img.w == w);
  double max_err = 0.0;
  for (std::size_t i = 0; i < ramp.size(); ++i) {
    max_err = std::max(max_err, std::abs(img.values[i] - ramp[i]));
  }
  CHECK(max_err <= 1.0 / 65535.0);
  std::remove(path.c_str());
}

TEST_CASE("PGM loader rejects truncation and bad magic with a byte offset") {
  const std::string path = temp_path("trunc.pgm");
  std::vector<double> img(64, 0.5);
  img[0] = 0.0;
  img[63] = 1.0;
  save_pgm16(img, 8, 8, path);
  // Truncate the raster.
  {
    std::ifstream in(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size() - 10));
  }
  CHECK_THROWS_WITH_AS(load_pgm16(path), doctest::Contains("byte"), io_error);

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "P6\n8 8\n65535\n";
  }
  CHECK_THROWS_WITH_AS(load_pgm16(path), doctest::Contains("magic"), io_error);
  CHECK_THROWS_AS(load_pgm16(temp_path("missing.pgm")), io_error);
  std::remove(path.c_str());
}

TEST_CASE("raw f32 round-trips float-exact values losslessly") {
  std::vector<double> vals;
  for (int i = 0; i < 24; ++i) {
    vals.push_back(static_cast<double>(static_cast<float>(std::sin(i) * 3.25)));
  }
  const std::string stem = temp_path("raw");
  save_raw_f32(vals, {4, 6}, stem);
  const auto raw = load_raw_f32(stem);
  CHECK(raw.shape == std::vector<int>{4, 6});
  REQUIRE(raw.values.size() == vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) CHECK(raw.values[i] == vals[i]);
  std::remove((stem + ".f32").c_str());
  std::remove((stem + ".json").c_str());
}

TEST_CASE("raw f32 loader rejects size mismatches and bad sidecars") {
  const std::string stem = temp_path("rawbad");
  save_raw_f32({1.0, 2.0, 3.0, 4.0}, {2, 2}, stem);
  {
    std::ofstream out(stem + ".json", std::ios::trunc);
    out << "{\"shape\": [3, 2], \"dtype\": \"f32\"}";
  }
  CHECK_THROWS_AS(load_raw_f32(stem), io_error);
  {
    std::ofstream out(stem + ".json", std::ios::trunc);
    out << "not json";
  }
  CHECK_THROWS_AS(load_raw_f32(stem), io_error);
  CHECK_THROWS_AS(save_raw_f32({1.0}, {2}, stem), argument_error);
  std::remove((stem + ".f32").c_str());
  std::remove((stem + ".json").c_str());
}

TEST_CASE("SVG heatmap writes a well-formed standalone file") {
  const Phantom p = make_phantom(16, 1, 0);
  const std::string path = temp_path("map.svg");
  save_svg_heatmap(p.image, 16, 16, path, "phantom");
  std::ifstream in(path);
  REQUIRE(static_cast<bool>(in));
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(buf.find("<svg") == 0);
  CHECK(buf.find("</svg>") != std::string::npos);
  CHECK(buf.find("phantom") != std::string::npos);
  CHECK(buf.find("<rect") != std::string::npos);
  std::remove(path.c_str());
}
