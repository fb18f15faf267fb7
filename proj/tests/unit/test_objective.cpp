#include "ktraj/objective.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "ktraj/diffcore.hpp"
#include "ktraj/errors.hpp"
#include "ktraj/rng.hpp"

using ktraj::Rng;
using ktraj::argument_error;
using ktraj::hybrid_loss;
using ktraj::hybrid_node;
using ktraj::l1_loss;
using ktraj::l1_node;
using ktraj::psnr;
using ktraj::shrinkage_node;
using ktraj::shrinkage_penalty;
using ktraj::ssim;
using ktraj::ssim_node;
using ktraj::undefined_test_error;
using ktraj::wilcoxon_signed_rank;
namespace diff = ktraj::diff;

namespace {

std::vector<double> random_values(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST_CASE("l1 loss: identical inputs give zero, constant offset gives the offset") {
  Rng rng(60);
  std::vector<double> x = random_values(40, rng);
  CHECK(l1_loss(x, x) == 0.0);
  std::vector<double> y(x);
  for (double& v : y) v -= 0.5;
  CHECK(l1_loss(x, y) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("l1 loss matches a direct summation re-implementation") {
  Rng rng(61);
  std::vector<double> x = random_values(57, rng);
  std::vector<double> y = random_values(57, rng);
  double want = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) want += std::abs(x[i] - y[i]);
  want /= static_cast<double>(x.size());
  CHECK(std::abs(l1_loss(x, y) - want) <= 1e-12);
  CHECK_THROWS_WITH_AS(l1_loss(x, {1.0}), doctest::Contains("l1_loss"), argument_error);
}

TEST_CASE("ssim of an image with itself is exactly one everywhere") {
  Rng rng(62);
  std::vector<double> x = random_values(12 * 12, rng, 0.0, 1.0);
  const auto r = ssim(x, x, 12, 12, 1.0);
  CHECK(r.mean == 1.0);
  CHECK(r.map_h == 6);
  CHECK(r.map_w == 6);
  for (double v : r.map) CHECK(v == 1.0);
}

TEST_CASE("ssim of a checkerboard against its inverse is negative") {
  const int n = 8;
  std::vector<double> x(static_cast<std::size_t>(n) * n);
  std::vector<double> y(x.size());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double v = static_cast<double>((i + j) % 2);
      x[static_cast<std::size_t>(i) * n + j] = v;
      y[static_cast<std::size_t>(i) * n + j] = 1.0 - v;
    }
  }
  CHECK(ssim(x, y, n, n, 1.0).mean < 0.0);
}

TEST_CASE("ssim of constant images 0.3 and 0.7 matches the zero-variance closed form") {
  // (2*0.3*0.7 + C1) / (0.3^2 + 0.7^2 + C1) with C1 = 1e-4; the variance
  // factor cancels to one. Evaluates to 0.4201/0.5801 = 0.72419.
  std::vector<double> x(64, 0.3);
  std::vector<double> y(64, 0.7);
  const auto r = ssim(x, y, 8, 8, 1.0);
  const double want = (2.0 * 0.3 * 0.7 + 1e-4) / (0.3 * 0.3 + 0.7 * 0.7 + 1e-4);
  CHECK(r.mean == doctest::Approx(want).epsilon(1e-12));
  for (double v : r.map) CHECK(v == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("ssim is symmetric in its arguments") {
  Rng rng(63);
  std::vector<double> x = random_values(10 * 10, rng, 0.0, 1.0);
  std::vector<double> y = random_values(10 * 10, rng, 0.0, 1.0);
  CHECK(std::abs(ssim(x, y, 10, 10, 1.0).mean - ssim(y, x, 10, 10, 1.0).mean) <= 1e-12);
}

TEST_CASE("ssim rejects an oversized window and a non-positive dynamic range") {
  std::vector<double> x(36, 0.5);
  CHECK_THROWS_WITH_AS(ssim(x, x, 6, 6, 1.0, 7), doctest::Contains("window"), argument_error);
  CHECK_THROWS_AS(ssim(x, x, 6, 6, 0.0, 3), argument_error);
  CHECK_THROWS_AS(ssim(x, x, 5, 6, 1.0, 3), argument_error);
}

TEST_CASE("hybrid loss is zero on identical images and reduces to l1 at mu=0") {
  Rng rng(64);
  std::vector<double> x = random_values(9 * 9, rng, 0.0, 1.0);
  CHECK(hybrid_loss(x, x, 9, 9, 1.0, 3.7) == 0.0);
  std::vector<double> y = random_values(9 * 9, rng, 0.0, 1.0);
  CHECK(hybrid_loss(x, y, 9, 9, 1.0, 0.0) == l1_loss(x, y));
}

TEST_CASE("hybrid loss equals the manual combination of its two parts") {
  Rng rng(65);
  std::vector<double> x = random_values(11 * 11, rng, 0.0, 1.0);
  std::vector<double> y = random_values(11 * 11, rng, 0.0, 1.0);
  const double mu = 0.8;
  const double want = l1_loss(x, y) + mu * (1.0 - ssim(x, y, 11, 11, 1.0).mean);
  CHECK(std::abs(hybrid_loss(x, y, 11, 11, 1.0, mu) - want) <= 1e-12);
}

TEST_CASE("shrinkage penalty is zero inside the band and linear outside") {
  CHECK(shrinkage_penalty({0.5}, 1.0) == 0.0);
  CHECK(shrinkage_penalty({1.5}, 1.0) == 0.5);
  CHECK(shrinkage_penalty({-2.0}, 1.0) == 1.0);
  CHECK(shrinkage_penalty({0.5, 1.5, -2.0}, 1.0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK_THROWS_AS(shrinkage_penalty({1.0}, 0.0), argument_error);
  CHECK_THROWS_AS(shrinkage_penalty({1.0}, -2.0), argument_error);
}

TEST_CASE("shrinkage penalty scales homogeneously with its band") {
  Rng rng(66);
  std::vector<double> b = random_values(31, rng, -3.0, 3.0);
  const double c = 2.5;
  std::vector<double> cb(b);
  for (double& v : cb) v *= c;
  const double lhs = shrinkage_penalty(cb, c * 0.8);
  const double rhs = c * shrinkage_penalty(b, 0.8);
  CHECK(std::abs(lhs - rhs) <= 1e-12 * std::max(1.0, std::abs(rhs)));
}

TEST_CASE("psnr hits the analytic values and the +infinity sentinel") {
  std::vector<double> ref(50, 0.25);
  std::vector<double> x(ref);
  for (double& v : x) v += 0.01;
  CHECK(psnr(x, ref, 1.0) == doctest::Approx(40.0).epsilon(1e-12));
  CHECK(std::isinf(psnr(ref, ref, 1.0)));

  std::vector<double> y(ref);
  for (double& v : y) v += 1.0;  // MSE = 1
  CHECK(psnr(y, ref, 255.0) == doctest::Approx(48.13).epsilon(0.01 / 48.13));
}

TEST_CASE("wilcoxon: five all-positive differences give exact two-sided p 0.0625") {
  const std::vector<double> a{1.0, 2.0, 3.0, 4.0, 5.0};
  const std::vector<double> b{0.5, 1.0, 2.0, 3.0, 4.0};
  const auto r = wilcoxon_signed_rank(a, b);
  CHECK(r.p_value == 0.0625);
  CHECK(r.statistic == 0.0);
}

TEST_CASE("wilcoxon statistic and p match a hand enumeration on a 5-pair case") {
  // d = {1, 2, 3, -4, 5} -> ranks by |d| are 1..5, W+ = 11, W- = 4.
  // P(W+ <= 4) counts subsets of {1..5} with sum <= 4: 7 of 32; symmetric
  // upper tail also 7; two-sided p = 14/32.
  const std::vector<double> a{1.0, 2.0, 3.0, 0.0, 5.0};
  const std::vector<double> b{0.0, 0.0, 0.0, 4.0, 0.0};
  const auto r = wilcoxon_signed_rank(a, b);
  CHECK(r.statistic == 4.0);
  CHECK(r.p_value == doctest::Approx(14.0 / 32.0).epsilon(1e-14));
}

TEST_CASE("wilcoxon exact branch matches brute-force sign enumeration on tie-free data") {
  Rng rng(67);
  const std::size_t n = 12;
  std::vector<double> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = rng.uniform(0.0, 1.0);
    b[i] = a[i] - rng.uniform(-0.4, 0.6);
  }
  const auto r = wilcoxon_signed_rank(a, b);

  // Independent oracle: ranks from a plain sort (differences are distinct
  // with probability one), then all 2^n sign assignments.
  std::vector<double> mags(n);
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = a[i] - b[i];
    mags[i] = std::abs(d[i]);
  }
  std::vector<double> sorted(mags);
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    rank[i] = static_cast<double>(
                  std::lower_bound(sorted.begin(), sorted.end(), mags[i]) - sorted.begin()) +
              1.0;
  }
  double wobs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (d[i] > 0.0) wobs += rank[i];
  }
  std::size_t low = 0, high = 0;
  for (std::size_t mask = 0; mask < (1u << n); ++mask) {
    double wp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (1u << i)) wp += rank[i];
    }
    if (wp <= wobs) ++low;
    if (wp >= wobs) ++high;
  }
  const double denom = static_cast<double>(1u << n);
  const double want =
      std::min(1.0, 2.0 * std::min(static_cast<double>(low), static_cast<double>(high)) / denom);
  CHECK(r.p_value == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("wilcoxon p is invariant under swapping the paired samples") {
  Rng rng(68);
  std::vector<double> a = random_values(15, rng, 0.0, 2.0);
  std::vector<double> b = random_values(15, rng, 0.0, 2.0);
  const auto r1 = wilcoxon_signed_rank(a, b);
  const auto r2 = wilcoxon_signed_rank(b, a);
  CHECK(r1.p_value == r2.p_value);
  CHECK(r1.statistic == r2.statistic);
}

TEST_CASE("wilcoxon on equal samples with one informative pair gives p = 1") {
  std::vector<double> a{1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
  std::vector<double> b(a);
  b[0] = 0.5;
  const auto r = wilcoxon_signed_rank(a, b);
  CHECK(r.p_value == 1.0);
}

TEST_CASE("wilcoxon rejects short, mismatched, and all-tied inputs") {
  CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2, 3, 4}, {0, 0, 0, 0}), argument_error);
  CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2, 3, 4, 5}, {0, 0, 0}), argument_error);
  const std::vector<double> same{1, 2, 3, 4, 5};
  CHECK_THROWS_AS(wilcoxon_signed_rank(same, same), undefined_test_error);
}

TEST_CASE("wilcoxon normal branch separates shifted from unshifted samples") {
  Rng rng(69);
  const std::size_t n = 30;
  std::vector<double> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = rng.normal();
    b[i] = a[i] - 1.5 - 0.1 * rng.uniform();  // strong positive shift
  }
  CHECK(wilcoxon_signed_rank(a, b).p_value < 0.001);

  std::vector<double> c(n);
  for (std::size_t i = 0; i < n; ++i) {
    c[i] = a[i] + (i % 2 == 0 ? 0.3 : -0.3);  // alternating, no net shift, tied |d|
  }
  const auto r = wilcoxon_signed_rank(a, c);
  CHECK(r.p_value > 0.5);
  CHECK(r.p_value <= 1.0);
}

TEST_CASE("l1 node gradient matches finite differences away from the kink") {
  Rng rng(70);
  std::vector<double> xv = random_values(25, rng, 1.0, 2.0);
  std::vector<double> yv = random_values(25, rng, -2.0, -1.0);  // gap keeps |x-y| > 0

  diff::Tape tape;
  diff::TapeTensor x = tape.leaf({5, 5}, xv, true);
  diff::TapeTensor y = tape.leaf({5, 5}, yv, true);
  tape.backward(l1_node(tape, x, y));
  const auto gx = tape.grad(x);
  const auto gy = tape.grad(y);

  const double eps = 1e-6;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto eval = [&](double dx, double dy) {
      std::vector<double> xp(xv), yp(yv);
      xp[i] += dx;
      yp[i] += dy;
      return l1_loss(xp, yp);
    };
    const double fdx = (eval(eps, 0.0) - eval(-eps, 0.0)) / (2.0 * eps);
    const double fdy = (eval(0.0, eps) - eval(0.0, -eps)) / (2.0 * eps);
    CHECK(std::abs(gx[i] - fdx) <= 1e-4 * std::max(1.0, std::abs(fdx)));
    CHECK(std::abs(gy[i] - fdy) <= 1e-4 * std::max(1.0, std::abs(fdy)));
  }
}

TEST_CASE("ssim node gradients for both arguments match finite differences") {
  Rng rng(71);
  const int n = 10;
  std::vector<double> xv = random_values(static_cast<std::size_t>(n) * n, rng, 0.0, 1.0);
  std::vector<double> yv = random_values(static_cast<std::size_t>(n) * n, rng, 0.0, 1.0);

  diff::Tape tape;
  diff::TapeTensor x = tape.leaf({n, n}, xv, true);
  diff::TapeTensor y = tape.leaf({n, n}, yv, true);
  tape.backward(ssim_node(tape, x, y, 1.0));
  const auto gx = tape.grad(x);
  const auto gy = tape.grad(y);

  const double eps = 1e-6;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto eval = [&](double dx, double dy) {
      std::vector<double> xp(xv), yp(yv);
      xp[i] += dx;
      yp[i] += dy;
      return ssim(xp, yp, n, n, 1.0).mean;
    };
    const double fdx = (eval(eps, 0.0) - eval(-eps, 0.0)) / (2.0 * eps);
    const double fdy = (eval(0.0, eps) - eval(0.0, -eps)) / (2.0 * eps);
    CHECK(std::abs(gx[i] - fdx) <= 1e-4 * std::max(1.0, std::abs(fdx)));
    CHECK(std::abs(gy[i] - fdy) <= 1e-4 * std::max(1.0, std::abs(fdy)));
  }
}

TEST_CASE("hybrid node value and gradient line up with the plain hybrid loss") {
  Rng rng(72);
  const int n = 8;
  std::vector<double> xv = random_values(static_cast<std::size_t>(n) * n, rng, 0.5, 1.5);
  std::vector<double> yv = random_values(static_cast<std::size_t>(n) * n, rng, -1.5, -0.5);
  const double mu = 0.7;

  diff::Tape tape;
  diff::TapeTensor x = tape.leaf({1, n, n}, xv, true);
  diff::TapeTensor y = tape.leaf({1, n, n}, yv, false);
  diff::TapeTensor loss = hybrid_node(tape, x, y, 1.0, mu);
  CHECK(std::abs(tape.values(loss)[0] - hybrid_loss(xv, yv, n, n, 1.0, mu)) <= 1e-12);
  tape.backward(loss);
  const auto gx = tape.grad(x);

  const double eps = 1e-6;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    std::vector<double> xp(xv);
    xp[i] += eps;
    const double fp = hybrid_loss(xp, yv, n, n, 1.0, mu);
    xp[i] = xv[i] - eps;
    const double fm = hybrid_loss(xp, yv, n, n, 1.0, mu);
    const double fd = (fp - fm) / (2.0 * eps);
    CHECK(std::abs(gx[i] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("shrinkage node subgradient is zero inside the band and signed outside") {
  Rng rng(73);
  std::vector<double> v = random_values(30, rng, -3.0, 3.0);
  for (double& x : v) {
    if (std::abs(std::abs(x) - 1.0) < 1e-3) x = 2.0;  // keep away from the hinge
  }
  diff::Tape tape;
  diff::TapeTensor t = tape.leaf({30}, v, true);
  tape.backward(shrinkage_node(tape, t, 1.0));
  const auto g = tape.grad(t);

  const double eps = 1e-6;
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::vector<double> vp(v);
    vp[i] += eps;
    const double fp = shrinkage_penalty(vp, 1.0);
    vp[i] = v[i] - eps;
    const double fm = shrinkage_penalty(vp, 1.0);
    const double fd = (fp - fm) / (2.0 * eps);
    CHECK(std::abs(g[i] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
    if (std::abs(v[i]) < 1.0) CHECK(g[i] == 0.0);
  }
}
