#pragma once

// Synthetic data pipeline: parametric phantoms (a Shepp-Logan-style base plus
// seeded random ellipses), smooth synthetic coil sensitivities normalized to
// unit sum-of-squares, dataset splits, and image file I/O (16-bit PGM, raw
// little-endian f32 with a JSON sidecar, SVG heatmaps).

#include <cstdint>
#include <string>
#include <vector>

#include "ktraj/nufft.hpp"

namespace ktraj {

struct Ellipse {
  double cx = 0.0;      // center, normalized coords in [-1, 1]
  double cy = 0.0;
  double ax = 0.0;      // semi-axes
  double ay = 0.0;
  double angle = 0.0;   // radians, counterclockwise
  double intensity = 0.0;
};

struct Phantom {
  int grid = 0;
  std::vector<double> image;        // grid*grid row-major, in [0, 1], max 1
  std::vector<Ellipse> descriptor;  // base ellipses first, then the random ones
};

// Renders the base phantom plus `n_ellipses` seeded random ellipses at 2x
// supersampling, clips negatives, and normalizes the maximum to 1.
// grid must be >= 16.
Phantom make_phantom(int grid, std::uint64_t seed, int n_ellipses);

struct CoilSet {
  int grid = 0;
  std::vector<ComplexImage> maps;  // per pixel, sum_c |S_c|^2 = 1
};

// Gaussian-profile magnitudes centered on evenly spaced border anchors with a
// seeded low-order polynomial phase, normalized to unit sum-of-squares.
CoilSet make_coils(int grid, int coils, std::uint64_t seed);

// Elementwise S_c * phantom for every coil.
std::vector<ComplexImage> simulate_coil_images(const Phantom& phantom, const CoilSet& coils);

struct DatasetSplit {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
};

// Seeded shuffle of 0..n-1 cut into three disjoint, exhaustive parts. The
// first two sizes are round(fraction * n); the test split takes the rest.
// Fractions must sum to 1.
DatasetSplit dataset_split(int n, double train_frac, double val_frac, double test_frac,
                           std::uint64_t seed);

// 16-bit binary PGM (P5, big-endian samples, maxval 65535). Values are mapped
// affinely from [min, max] of the data onto the full sample range.
void save_pgm16(const std::vector<double>& values, int h, int w, const std::string& path);

struct LoadedImage {
  int h = 0;
  int w = 0;
  std::vector<double> values;  // samples / 65535, in [0, 1]
};

// Parse failures throw io_error naming the byte offset.
LoadedImage load_pgm16(const std::string& path);

// Raw little-endian float32 at `stem`.f32 plus a JSON sidecar `stem`.json
// holding the shape. Round-trips are lossless at f32 precision.
void save_raw_f32(const std::vector<double>& values, const std::vector<int>& shape,
                  const std::string& stem);

struct LoadedRaw {
  std::vector<int> shape;
  std::vector<double> values;
};

LoadedRaw load_raw_f32(const std::string& stem);

// Grayscale heatmap of a real image as a standalone SVG.
void save_svg_heatmap(const std::vector<double>& values, int h, int w, const std::string& path,
                      const std::string& title = "");

}  // namespace ktraj
