#pragma once

// Reconstruction network: an encoder-decoder with skip connections operating
// on the RSS coil combine, in residual form (the net predicts a correction
// added to its input). Built on the diffcore tape so one backward pass yields
// gradients for every kernel, bias, and the input image.

#include <cstdint>
#include <vector>

#include "ktraj/diffcore.hpp"
#include "ktraj/nufft.hpp"

namespace ktraj {

// Per-pixel root sum of squares over the coil axis. All coils must share one
// grid size; at least one coil required.
std::vector<double> rss(const std::vector<ComplexImage>& coils);

// The value at index min(N-1, ceil(0.99 N) - 1) of the ascending sort of
// |values|. For N <= 100 this is the maximum magnitude.
double percentile99(const std::vector<double>& values);

struct ReconParams {
  int levels = 3;
  int base_channels = 16;
  std::vector<double> weights;  // all kernels and biases, layout order
};

// One convolution layer of the network, with offsets into the flat weights.
struct ConvDesc {
  int cin = 0;
  int cout = 0;
  int ksize = 0;  // square, odd
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;
};

// Layer sequence for (levels, base): encoder stages of two 3x3 convs with
// channels base*2^i, a two-conv bottleneck at base*2^levels, the mirrored
// decoder (skip concatenation makes its first conv 3*base*2^i wide), and a
// final 1x1 conv to one channel.
std::vector<ConvDesc> recon_layout(int levels, int base_channels);
std::size_t recon_param_count(int levels, int base_channels);

// Seed-deterministic init: kernels uniform in +-1/sqrt(fan_in), biases zero.
ReconParams recon_build(int levels, int base_channels, std::uint64_t seed);

struct ReconTrace {
  diff::TapeTensor output;               // (1, H, W), residual reconstruction
  std::vector<diff::TapeTensor> leaves;  // kernel, bias per layer, layout order
  double scale = 1.0;                    // the 99th-percentile normalizer used
};

// Runs the network on `input` (a (1, H, W) tensor already on `tape`, H and W
// divisible by 2^levels). The input is divided by the 99th-percentile
// magnitude (recorded in the trace and re-applied to the correction), so
// out = input + scale * net(input / scale). A zero-weight network returns the
// input unchanged. The normalizer is part of the tape: gradients w.r.t. the
// input include its dependence.
ReconTrace recon_forward(const ReconParams& params, diff::Tape& tape,
                         const diff::TapeTensor& input);

// Gathers d(loss)/d(weights) into one flat vector aligned with
// ReconParams::weights. Call after tape.backward().
std::vector<double> recon_param_grad(const diff::Tape& tape, const ReconParams& params,
                                     const ReconTrace& trace);

}  // namespace ktraj
