#include "ktraj/recon.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ktraj/errors.hpp"
#include "ktraj/rng.hpp"

namespace ktraj {

namespace diff = ktraj::diff;

std::vector<double> rss(const std::vector<ComplexImage>& coils) {
  if (coils.empty()) throw argument_error("rss: need at least one coil image");
  const int grid = coils.front().grid;
  const std::size_t n = coils.front().data.size();
  for (std::size_t c = 0; c < coils.size(); ++c) {
    if (coils[c].grid != grid || coils[c].data.size() != n) {
      throw argument_error("rss: coil " + std::to_string(c) + " grid " +
                           std::to_string(coils[c].grid) + " does not match coil 0 grid " +
                           std::to_string(grid));
    }
  }
  std::vector<double> out(n, 0.0);
  for (const ComplexImage& coil : coils) {
    for (std::size_t i = 0; i < n; ++i) out[i] += std::norm(coil.data[i]);
  }
  for (double& v : out) v = std::sqrt(v);
  return out;
}

namespace {

// Flat index of the 99th-percentile magnitude; ties resolve to the lowest
// flat index holding the selected value.
std::size_t percentile99_pick(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<double> mags(n);
  for (std::size_t i = 0; i < n; ++i) mags[i] = std::abs(values[i]);
  std::vector<double> sorted(mags);
  std::sort(sorted.begin(), sorted.end());
  const std::size_t rank = static_cast<std::size_t>(
      std::ceil(0.99 * static_cast<double>(n))) - 1;
  const double target = sorted[std::min(n - 1, rank)];
  for (std::size_t i = 0; i < n; ++i) {
    if (mags[i] == target) return i;
  }
  return n - 1;  // unreachable: target is drawn from mags
}

void check_levels_base(int levels, int base) {
  if (levels < 1) throw argument_error("recon: levels must be >= 1, got " + std::to_string(levels));
  if (base < 1) {
    throw argument_error("recon: base_channels must be >= 1, got " + std::to_string(base));
  }
}

}  // namespace

double percentile99(const std::vector<double>& values) {
  if (values.empty()) throw argument_error("percentile99: empty input");
  return std::abs(values[percentile99_pick(values)]);
}

std::vector<ConvDesc> recon_layout(int levels, int base_channels) {
  check_levels_base(levels, base_channels);
  std::vector<ConvDesc> layers;
  std::size_t off = 0;
  auto push = [&](int cin, int cout, int k) {
    ConvDesc d;
    d.cin = cin;
    d.cout = cout;
    d.ksize = k;
    d.weight_offset = off;
    off += static_cast<std::size_t>(cout) * cin * k * k;
    d.bias_offset = off;
    off += static_cast<std::size_t>(cout);
    layers.push_back(d);
  };
  const auto width = [&](int i) { return base_channels << i; };
  for (int i = 0; i < levels; ++i) {
    push(i == 0 ? 1 : width(i - 1), width(i), 3);
    push(width(i), width(i), 3);
  }
  push(width(levels - 1), width(levels), 3);
  push(width(levels), width(levels), 3);
  for (int i = levels - 1; i >= 0; --i) {
    push(3 * width(i), width(i), 3);  // upsampled 2*width(i) plus the skip
    push(width(i), width(i), 3);
  }
  push(base_channels, 1, 1);
  return layers;
}

std::size_t recon_param_count(int levels, int base_channels) {
  const auto layers = recon_layout(levels, base_channels);
  const ConvDesc& last = layers.back();
  return last.bias_offset + static_cast<std::size_t>(last.cout);
}

ReconParams recon_build(int levels, int base_channels, std::uint64_t seed) {
  ReconParams p;
  p.levels = levels;
  p.base_channels = base_channels;
  p.weights.assign(recon_param_count(levels, base_channels), 0.0);
  Rng rng(seed);
  for (const ConvDesc& d : recon_layout(levels, base_channels)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d.cin) * d.ksize * d.ksize);
    const std::size_t nw = static_cast<std::size_t>(d.cout) * d.cin * d.ksize * d.ksize;
    for (std::size_t i = 0; i < nw; ++i) {
      p.weights[d.weight_offset + i] = rng.uniform(-bound, bound);
    }
    // biases stay zero
  }
  return p;
}

namespace {

// out = x * s[0] for a scalar tape tensor s, with both gradients.
diff::TapeTensor scale_by(diff::Tape& tape, const diff::TapeTensor& x,
                          const diff::TapeTensor& s) {
  const auto& xv = tape.values(x);
  const double sv = tape.values(s)[0];
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sv;
  return tape.custom(
      "scale_by", {x, s}, x.shape, std::move(out),
      [](const std::vector<double>& g, const std::vector<const std::vector<double>*>& pv,
         const std::vector<std::vector<double>*>& pg) {
        const double s0 = (*pv[1])[0];
        if (pg[0] != nullptr) {
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * s0;
        }
        if (pg[1] != nullptr) {
          const auto& in = *pv[0];
          double acc = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * in[i];
          (*pg[1])[0] += acc;
        }
      });
}

diff::TapeTensor reciprocal_scalar(diff::Tape& tape, const diff::TapeTensor& s) {
  const double sv = tape.values(s)[0];
  return tape.custom(
      "reciprocal", {s}, {1}, {1.0 / sv},
      [sv](const std::vector<double>& g, const std::vector<const std::vector<double>*>&,
           const std::vector<std::vector<double>*>& pg) {
        if (pg[0] != nullptr) (*pg[0])[0] += -g[0] / (sv * sv);
      });
}

}  // namespace

ReconTrace recon_forward(const ReconParams& params, diff::Tape& tape,
                         const diff::TapeTensor& input) {
  check_levels_base(params.levels, params.base_channels);
  if (input.shape.size() != 3 || input.shape[0] != 1) {
    throw argument_error("recon_forward: input must be (1, H, W)");
  }
  const int h = input.shape[1], w = input.shape[2];
  const int down = 1 << params.levels;
  if (h % down != 0 || w % down != 0) {
    throw argument_error("recon_forward: spatial dims " + std::to_string(h) + "x" +
                         std::to_string(w) + " not divisible by 2^levels = " +
                         std::to_string(down));
  }
  const auto layers = recon_layout(params.levels, params.base_channels);
  if (params.weights.size() != recon_param_count(params.levels, params.base_channels)) {
    throw argument_error("recon_forward: weights length " + std::to_string(params.weights.size()) +
                         " does not match the layout for levels=" + std::to_string(params.levels) +
                         " base=" + std::to_string(params.base_channels));
  }

  ReconTrace trace;
  trace.leaves.reserve(2 * layers.size());
  std::vector<std::pair<diff::TapeTensor, diff::TapeTensor>> layer_leaves;
  layer_leaves.reserve(layers.size());
  for (const ConvDesc& d : layers) {
    const std::size_t nw = static_cast<std::size_t>(d.cout) * d.cin * d.ksize * d.ksize;
    std::vector<double> kv(params.weights.begin() + static_cast<std::ptrdiff_t>(d.weight_offset),
                           params.weights.begin() +
                               static_cast<std::ptrdiff_t>(d.weight_offset + nw));
    std::vector<double> bv(params.weights.begin() + static_cast<std::ptrdiff_t>(d.bias_offset),
                           params.weights.begin() +
                               static_cast<std::ptrdiff_t>(d.bias_offset + d.cout));
    diff::TapeTensor kt = tape.leaf({d.cout, d.cin, d.ksize, d.ksize}, std::move(kv), true);
    diff::TapeTensor bt = tape.leaf({d.cout}, std::move(bv), true);
    layer_leaves.emplace_back(kt, bt);
    trace.leaves.push_back(kt);
    trace.leaves.push_back(bt);
  }

  // Normalize by the 99th-percentile magnitude; the normalizer rides the tape
  // so input gradients see it. An all-zero image keeps scale 1.
  const double nu_val = percentile99(tape.values(input));
  diff::TapeTensor x = input;
  diff::TapeTensor nu;
  bool normalized = nu_val > 0.0;
  trace.scale = normalized ? nu_val : 1.0;
  if (normalized) {
    const std::size_t sel = percentile99_pick(tape.values(input));
    const double sgn = tape.values(input)[sel] < 0.0 ? -1.0 : 1.0;
    nu = tape.custom(
        "percentile99", {input}, {1}, {nu_val},
        [sel, sgn](const std::vector<double>& g, const std::vector<const std::vector<double>*>&,
                   const std::vector<std::vector<double>*>& pg) {
          if (pg[0] != nullptr) (*pg[0])[sel] += sgn * g[0];
        });
    x = scale_by(tape, input, reciprocal_scalar(tape, nu));
  }

  std::size_t li = 0;
  auto conv_block = [&](const diff::TapeTensor& in) {
    const auto& [kt, bt] = layer_leaves[li++];
    return tape.leaky_relu(tape.instance_norm(tape.conv2d(in, kt, bt)));
  };

  std::vector<diff::TapeTensor> skips;
  skips.reserve(static_cast<std::size_t>(params.levels));
  for (int i = 0; i < params.levels; ++i) {
    x = conv_block(conv_block(x));
    skips.push_back(x);
    x = tape.max_pool2d(x);
  }
  x = conv_block(conv_block(x));
  for (int i = params.levels - 1; i >= 0; --i) {
    x = tape.concat(tape.nearest_upsample(x), skips[static_cast<std::size_t>(i)]);
    x = conv_block(conv_block(x));
  }
  const auto& [fk, fb] = layer_leaves[li++];
  diff::TapeTensor corr = tape.conv2d(x, fk, fb);

  if (normalized) corr = scale_by(tape, corr, nu);
  trace.output = tape.add(input, corr);
  return trace;
}

std::vector<double> recon_param_grad(const diff::Tape& tape, const ReconParams& params,
                                     const ReconTrace& trace) {
  const auto layers = recon_layout(params.levels, params.base_channels);
  if (trace.leaves.size() != 2 * layers.size()) {
    throw argument_error("recon_param_grad: trace does not match the parameter layout");
  }
  std::vector<double> grad(params.weights.size(), 0.0);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const ConvDesc& d = layers[l];
    const auto& gk = tape.grad(trace.leaves[2 * l]);
    const auto& gb = tape.grad(trace.leaves[2 * l + 1]);
    std::copy(gk.begin(), gk.end(), grad.begin() + static_cast<std::ptrdiff_t>(d.weight_offset));
    std::copy(gb.begin(), gb.end(), grad.begin() + static_cast<std::ptrdiff_t>(d.bias_offset));
  }
  return grad;
}

}  // namespace ktraj
