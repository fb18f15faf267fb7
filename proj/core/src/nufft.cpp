#include "ktraj/nufft.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include <fftw3.h>

#include "ktraj/errors.hpp"

namespace ktraj {

namespace {

constexpr double kPi = std::numbers::pi;

double beta_for(const GriddingConfig& cfg) {
  if (cfg.kernel_beta > 0.0) return cfg.kernel_beta;
  // Beatty et al. choice for minimal aliasing at a given width/oversampling.
  const double w = cfg.kernel_width / cfg.oversampling;
  const double arg = w * w * (cfg.oversampling - 0.5) * (cfg.oversampling - 0.5) - 0.8;
  return kPi * std::sqrt(std::max(arg, 0.0));
}

void validate_cfg(const GriddingConfig& cfg) {
  if (cfg.oversampling < 1.25) throw argument_error("nufft: oversampling must be >= 1.25");
  if (cfg.kernel_width < 2 || cfg.kernel_width > 15)
    throw argument_error("nufft: kernel_width must lie in [2, 15]");
  if (beta_for(cfg) <= 0.0) throw argument_error("nufft: kernel shape is degenerate");
}

void validate_points(const std::vector<double>& points) {
  if (points.size() % 2 != 0)
    throw argument_error("nufft: points must be (kx, ky) pairs");
  for (double p : points)
    if (!(p >= -0.5 && p < 0.5))
      throw argument_error("nufft: point component outside [-0.5, 0.5)");
}

void validate_image(const ComplexImage& image) {
  if (image.grid < 2) throw argument_error("nufft: grid must be >= 2");
  if (image.data.size() != static_cast<std::size_t>(image.grid) * image.grid)
    throw argument_error("nufft: image data does not match grid");
}

// Kaiser-Bessel kernel on [-W/2, W/2], unnormalized: I0(beta sqrt(1-(2u/W)^2)).
double kb(double u, int width, double beta) {
  const double r = 2.0 * u / width;
  const double arg = 1.0 - r * r;
  if (arg < 0.0) return 0.0;
  return std::cyl_bessel_i(0.0, beta * std::sqrt(arg));
}

// Fourier transform of the kernel at pixel x of an m-grid: the deapodization
// weight. W sinh(sqrt(beta^2-q^2))/sqrt(...) with q = pi W x / m (sin form
// past the crossover).
double deapod_weight(double x, int m, int width, double beta) {
  const double q = kPi * width * x / m;
  const double d = beta * beta - q * q;
  double s;
  if (d > 1e-12) {
    const double z = std::sqrt(d);
    s = std::sinh(z) / z;
  } else if (d < -1e-12) {
    const double z = std::sqrt(-d);
    s = std::sin(z) / z;
  } else {
    s = 1.0;
  }
  return width * s;
}

std::vector<double> deapod_1d(int n, int m, const GriddingConfig& cfg) {
  const double beta = beta_for(cfg);
  std::vector<double> c(n);
  for (int i = 0; i < n; ++i) c[i] = deapod_weight(i - n / 2, m, cfg.kernel_width, beta);
  return c;
}

int oversampled_size(int n, const GriddingConfig& cfg) {
  const int m = static_cast<int>(std::lround(cfg.oversampling * n));
  if (m < n) throw argument_error("nufft: oversampled grid smaller than image");
  if (m < cfg.kernel_width + 1)
    throw argument_error("nufft: oversampled grid too small for the kernel width");
  return m;
}

inline int wrap(int j, int m) { return ((j % m) + m) % m; }

// Process-lifetime FFTW plan cache, one in-place forward/backward plan pair
// per oversampled size. Transforms copy through the cached buffer; planning
// uses FFTW_ESTIMATE so results do not depend on measurement noise. FFTW
// planning is not thread-safe, so this module assumes single-threaded use.
struct PlanPair {
  fftw_complex* buf = nullptr;
  fftw_plan fwd = nullptr;
  fftw_plan bwd = nullptr;
};

PlanPair& plans_for(int m) {
  static std::map<int, PlanPair> cache;
  auto it = cache.find(m);
  if (it == cache.end()) {
    PlanPair p;
    p.buf = fftw_alloc_complex(static_cast<std::size_t>(m) * m);
    if (!p.buf) throw error("nufft: FFT buffer allocation failed");
    p.fwd = fftw_plan_dft_2d(m, m, p.buf, p.buf, FFTW_FORWARD, FFTW_ESTIMATE);
    p.bwd = fftw_plan_dft_2d(m, m, p.buf, p.buf, FFTW_BACKWARD, FFTW_ESTIMATE);
    it = cache.emplace(m, p).first;
  }
  return it->second;
}

// Presampled kernel, linearly interpolated: 2048 samples per unit keeps the
// lookup error below 1e-7 of the kernel peak, well under the aliasing floor,
// and cuts the Bessel evaluations out of the per-sample hot path. Forward and
// adjoint share the table, so adjointness stays exact.
constexpr int kTabPerUnit = 2048;

const std::vector<double>& kernel_table(int width, double beta) {
  static std::map<std::pair<int, double>, std::vector<double>> cache;
  auto it = cache.find({width, beta});
  if (it == cache.end()) {
    const int count = kTabPerUnit * width / 2 + 2;  // covers [0, W/2] plus a pad
    std::vector<double> tab(count);
    for (int i = 0; i < count; ++i)
      tab[i] = kb(static_cast<double>(i) / kTabPerUnit, width, beta);
    it = cache.emplace(std::make_pair(width, beta), std::move(tab)).first;
  }
  return it->second;
}

struct KernelTaps {
  int j0;               // first lattice index
  double w[16];         // tap weights, count entries
  int count;
};

KernelTaps taps_for(double u, int width, const std::vector<double>& tab) {
  KernelTaps t;
  t.j0 = static_cast<int>(std::ceil(u - width / 2.0));
  const int j1 = static_cast<int>(std::floor(u + width / 2.0));
  t.count = std::min(j1 - t.j0 + 1, 16);
  for (int i = 0; i < t.count; ++i) {
    const double x = std::abs(u - (t.j0 + i)) * kTabPerUnit;
    const int cell = static_cast<int>(x);
    const double frac = x - cell;
    t.w[i] = tab[cell] + frac * (tab[cell + 1] - tab[cell]);
  }
  return t;
}

}  // namespace

ComplexImage make_image(int grid) {
  if (grid < 2) throw argument_error("make_image: grid must be >= 2");
  ComplexImage img;
  img.grid = grid;
  img.data.assign(static_cast<std::size_t>(grid) * grid, {0.0, 0.0});
  return img;
}

std::vector<std::complex<double>> ndft_forward(const ComplexImage& image,
                                               const std::vector<double>& points) {
  validate_image(image);
  validate_points(points);
  const int n = image.grid;
  const std::size_t np = points.size() / 2;
  std::vector<std::complex<double>> out(np);
  std::vector<std::complex<double>> colph(n), rowsum(n);
  for (std::size_t j = 0; j < np; ++j) {
    const double kx = points[2 * j], ky = points[2 * j + 1];
    for (int i = 0; i < n; ++i) {
      const double ph = -2.0 * kPi * kx * (i - n / 2);
      colph[i] = {std::cos(ph), std::sin(ph)};
    }
    std::complex<double> acc{0.0, 0.0};
    for (int iy = 0; iy < n; ++iy) {
      std::complex<double> row{0.0, 0.0};
      const std::complex<double>* src = image.data.data() + static_cast<std::size_t>(iy) * n;
      for (int ix = 0; ix < n; ++ix) row += src[ix] * colph[ix];
      const double ph = -2.0 * kPi * ky * (iy - n / 2);
      acc += row * std::complex<double>{std::cos(ph), std::sin(ph)};
    }
    out[j] = acc;
  }
  return out;
}

ComplexImage ndft_adjoint(const std::vector<std::complex<double>>& samples,
                          const std::vector<double>& points, int grid) {
  validate_points(points);
  if (samples.size() * 2 != points.size())
    throw argument_error("ndft_adjoint: one sample per point required");
  ComplexImage out = make_image(grid);
  const int n = grid;
  std::vector<std::complex<double>> colph(n);
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const double kx = points[2 * j], ky = points[2 * j + 1];
    for (int i = 0; i < n; ++i) {
      const double ph = 2.0 * kPi * kx * (i - n / 2);
      colph[i] = {std::cos(ph), std::sin(ph)};
    }
    for (int iy = 0; iy < n; ++iy) {
      const double ph = 2.0 * kPi * ky * (iy - n / 2);
      const std::complex<double> rowph =
          samples[j] * std::complex<double>{std::cos(ph), std::sin(ph)};
      std::complex<double>* dst = out.data.data() + static_cast<std::size_t>(iy) * n;
      for (int ix = 0; ix < n; ++ix) dst[ix] += rowph * colph[ix];
    }
  }
  return out;
}

std::vector<std::complex<double>> nufft_forward(const ComplexImage& image,
                                                const std::vector<double>& points,
                                                const GriddingConfig& cfg) {
  validate_image(image);
  validate_points(points);
  validate_cfg(cfg);
  const int n = image.grid;
  const int m = oversampled_size(n, cfg);
  const double beta = beta_for(cfg);
  const auto& tab = kernel_table(cfg.kernel_width, beta);
  const auto c = deapod_1d(n, m, cfg);

  PlanPair& fft = plans_for(m);
  std::fill_n(reinterpret_cast<double*>(fft.buf), static_cast<std::size_t>(m) * m * 2, 0.0);
  for (int iy = 0; iy < n; ++iy) {
    const int gy = wrap(iy - n / 2, m);
    for (int ix = 0; ix < n; ++ix) {
      const int gx = wrap(ix - n / 2, m);
      const std::complex<double> v = image.at(ix, iy) / (c[ix] * c[iy]);
      fft.buf[static_cast<std::size_t>(gy) * m + gx][0] = v.real();
      fft.buf[static_cast<std::size_t>(gy) * m + gx][1] = v.imag();
    }
  }
  fftw_execute(fft.fwd);

  const std::size_t np = points.size() / 2;
  std::vector<std::complex<double>> out(np);
  for (std::size_t j = 0; j < np; ++j) {
    const KernelTaps tx = taps_for(m * points[2 * j], cfg.kernel_width, tab);
    const KernelTaps ty = taps_for(m * points[2 * j + 1], cfg.kernel_width, tab);
    double re = 0.0, im = 0.0;
    for (int a = 0; a < ty.count; ++a) {
      const std::size_t row = static_cast<std::size_t>(wrap(ty.j0 + a, m)) * m;
      double rre = 0.0, rim = 0.0;
      for (int b = 0; b < tx.count; ++b) {
        const fftw_complex& u = fft.buf[row + wrap(tx.j0 + b, m)];
        rre += tx.w[b] * u[0];
        rim += tx.w[b] * u[1];
      }
      re += ty.w[a] * rre;
      im += ty.w[a] * rim;
    }
    out[j] = {re, im};
  }
  return out;
}

ComplexImage nufft_adjoint(const std::vector<std::complex<double>>& samples,
                           const std::vector<double>& points, int grid,
                           const GriddingConfig& cfg) {
  validate_points(points);
  validate_cfg(cfg);
  if (samples.size() * 2 != points.size())
    throw argument_error("nufft_adjoint: one sample per point required");
  const int n = grid;
  if (n < 2) throw argument_error("nufft_adjoint: grid must be >= 2");
  const int m = oversampled_size(n, cfg);
  const double beta = beta_for(cfg);
  const auto& tab = kernel_table(cfg.kernel_width, beta);
  const auto c = deapod_1d(n, m, cfg);

  PlanPair& fft = plans_for(m);
  std::fill_n(reinterpret_cast<double*>(fft.buf), static_cast<std::size_t>(m) * m * 2, 0.0);
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const KernelTaps tx = taps_for(m * points[2 * j], cfg.kernel_width, tab);
    const KernelTaps ty = taps_for(m * points[2 * j + 1], cfg.kernel_width, tab);
    const double sre = samples[j].real(), sim = samples[j].imag();
    for (int a = 0; a < ty.count; ++a) {
      const std::size_t row = static_cast<std::size_t>(wrap(ty.j0 + a, m)) * m;
      const double wre = ty.w[a] * sre, wim = ty.w[a] * sim;
      for (int b = 0; b < tx.count; ++b) {
        fftw_complex& g = fft.buf[row + wrap(tx.j0 + b, m)];
        g[0] += tx.w[b] * wre;
        g[1] += tx.w[b] * wim;
      }
    }
  }
  fftw_execute(fft.bwd);

  ComplexImage out = make_image(n);
  for (int iy = 0; iy < n; ++iy) {
    const int gy = wrap(iy - n / 2, m);
    for (int ix = 0; ix < n; ++ix) {
      const int gx = wrap(ix - n / 2, m);
      const fftw_complex& v = fft.buf[static_cast<std::size_t>(gy) * m + gx];
      out.at(ix, iy) = std::complex<double>{v[0], v[1]} / (c[ix] * c[iy]);
    }
  }
  return out;
}

std::vector<double> nufft_point_grad(const ComplexImage& image,
                                     const std::vector<double>& points,
                                     const std::vector<std::complex<double>>& cotangent,
                                     const GriddingConfig& cfg) {
  validate_image(image);
  validate_points(points);
  if (cotangent.size() * 2 != points.size())
    throw argument_error("nufft_point_grad: one cotangent per point required");

  const int n = image.grid;
  ComplexImage wx = make_image(n), wy = make_image(n);
  for (int iy = 0; iy < n; ++iy)
    for (int ix = 0; ix < n; ++ix) {
      wx.at(ix, iy) = image.at(ix, iy) * static_cast<double>(ix - n / 2);
      wy.at(ix, iy) = image.at(ix, iy) * static_cast<double>(iy - n / 2);
    }
  const auto tx = nufft_forward(wx, points, cfg);
  const auto ty = nufft_forward(wy, points, cfg);

  // dL/dk = Re(conj(c) (-i 2 pi) t) = 2 pi (Re c Im t - Im c Re t)
  std::vector<double> grad(points.size());
  for (std::size_t j = 0; j < cotangent.size(); ++j) {
    const double cr = cotangent[j].real(), ci = cotangent[j].imag();
    grad[2 * j] = 2.0 * kPi * (cr * tx[j].imag() - ci * tx[j].real());
    grad[2 * j + 1] = 2.0 * kPi * (cr * ty[j].imag() - ci * ty[j].real());
  }
  return grad;
}

std::vector<double> psf(const std::vector<double>& points, int grid,
                        const GriddingConfig& cfg, bool ramp_dcf) {
  validate_points(points);
  const std::size_t np = points.size() / 2;
  if (np == 0) throw argument_error("psf: at least one point required");
  std::vector<std::complex<double>> ones(np, {1.0, 0.0});
  if (ramp_dcf)
    for (std::size_t j = 0; j < np; ++j)
      ones[j] = std::hypot(points[2 * j], points[2 * j + 1]);
  const ComplexImage img = nufft_adjoint(ones, points, grid, cfg);

  std::vector<double> mag(img.data.size());
  double peak = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    mag[i] = std::abs(img.data[i]);
    peak = std::max(peak, mag[i]);
  }
  if (peak <= 0.0) throw argument_error("psf: degenerate point set produced a zero image");
  for (double& v : mag) v /= peak;
  return mag;
}

}  // namespace ktraj
