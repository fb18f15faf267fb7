#pragma once

// Image encoding operator: forward non-uniform Fourier transform (image to
// off-grid k-space samples), its exact adjoint, analytic gradients with
// respect to the sample locations, and point-spread functions.
//
// Conventions. Images are square, row-major, data[iy * grid + ix], with
// centered pixel coordinates x = ix - grid/2, y = iy - grid/2. A sample at
// k = (kx, ky), components in [-0.5, 0.5), is
//
//   s(k) = sum_{x,y} image(x, y) * exp(-i 2 pi (kx x + ky y)).
//
// ndft_forward/ndft_adjoint evaluate these sums directly and serve as the
// accuracy oracle. nufft_forward/nufft_adjoint approximate them by
// Kaiser-Bessel gridding on an oversampled FFT grid; the two directions are
// exact adjoints of each other by construction, independent of kernel
// accuracy.

#include <complex>
#include <vector>

namespace ktraj {

struct ComplexImage {
  int grid = 0;
  std::vector<std::complex<double>> data;  // grid*grid, row-major

  std::complex<double>& at(int ix, int iy) { return data[static_cast<std::size_t>(iy) * grid + ix]; }
  const std::complex<double>& at(int ix, int iy) const {
    return data[static_cast<std::size_t>(iy) * grid + ix];
  }
};

ComplexImage make_image(int grid);

struct GriddingConfig {
  double oversampling = 2.0;  // >= 1.25
  int kernel_width = 6;       // >= 2, taps per dimension
  double kernel_beta = 0.0;   // <= 0 selects the Beatty shape for (osf, width)
};

// `points` is flat (kx0, ky0, kx1, ky1, ...); every component must lie in
// [-0.5, 0.5). Throws argument_error otherwise.

// Direct evaluation of the Fourier sum (exact, O(N grid^2)).
std::vector<std::complex<double>> ndft_forward(const ComplexImage& image,
                                               const std::vector<double>& points);
// Direct conjugate-transpose sum: image(x) = sum_j s_j exp(+i 2 pi k_j . x).
ComplexImage ndft_adjoint(const std::vector<std::complex<double>>& samples,
                          const std::vector<double>& points, int grid);

std::vector<std::complex<double>> nufft_forward(const ComplexImage& image,
                                                const std::vector<double>& points,
                                                const GriddingConfig& cfg = {});
// Exact adjoint of nufft_forward: spread, backward FFT, crop, deapodize.
// No density compensation.
ComplexImage nufft_adjoint(const std::vector<std::complex<double>>& samples,
                           const std::vector<double>& points, int grid,
                           const GriddingConfig& cfg = {});

// Gradient of a real scalar L with respect to the sample locations, given the
// cotangent c_j whose real/imaginary parts are dL/dRe(s_j) and dL/dIm(s_j):
//
//   dL/dk_{j,x} = Re( conj(c_j) * (-i 2 pi) * F[x * image](k_j) )
//
// and likewise for y. Returns a flat vector matching the layout of `points`.
// Costs two extra nufft_forward calls (one per coordinate-weighted image).
std::vector<double> nufft_point_grad(const ComplexImage& image,
                                     const std::vector<double>& points,
                                     const std::vector<std::complex<double>>& cotangent,
                                     const GriddingConfig& cfg = {});

// Point-spread function: magnitude of the adjoint applied to all-ones
// samples, peak-normalized to 1. With ramp_dcf each sample is weighted by
// |k_j| first (visualization aid only; never used in training).
std::vector<double> psf(const std::vector<double>& points, int grid,
                        const GriddingConfig& cfg = {}, bool ramp_dcf = false);

}  // namespace ktraj
