#include "ktraj/objective.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>

#include "ktraj/errors.hpp"

namespace ktraj {

namespace diff = ktraj::diff;

namespace {

void check_equal_size(const char* who, std::size_t a, std::size_t b) {
  if (a != b) {
    throw argument_error(std::string(who) + ": size mismatch " + std::to_string(a) + " vs " +
                         std::to_string(b));
  }
}

// Summed-area table with a zero top row and left column: sums in O(1).
struct Sat {
  int h = 0, w = 0;
  std::vector<double> s;  // (h+1) x (w+1)

  Sat(const double* v, int hh, int ww, const double* u = nullptr) : h(hh), w(ww) {
    s.assign(static_cast<std::size_t>(h + 1) * (w + 1), 0.0);
    for (int y = 0; y < h; ++y) {
      double row = 0.0;
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        row += u == nullptr ? v[i] : v[i] * u[i];
        s[static_cast<std::size_t>(y + 1) * (w + 1) + (x + 1)] =
            s[static_cast<std::size_t>(y) * (w + 1) + (x + 1)] + row;
      }
    }
  }

  // Sum over the window with top-left (y, x), size win x win.
  double window(int y, int x, int win) const {
    const std::size_t r0 = static_cast<std::size_t>(y) * (w + 1);
    const std::size_t r1 = static_cast<std::size_t>(y + win) * (w + 1);
    return s[r1 + x + win] - s[r1 + x] - s[r0 + x + win] + s[r0 + x];
  }
};

struct WindowStats {
  double mx, my, vx, vy, vxy;  // means, biased variances, covariance
};

struct SsimCore {
  int h, w, win;
  double c1, c2;
  Sat sx, sy, sxx, syy, sxy;

  SsimCore(const double* x, const double* y, int hh, int ww, double range, int window)
      : h(hh),
        w(ww),
        win(window),
        c1(0.01 * range * 0.01 * range),
        c2(0.03 * range * 0.03 * range),
        sx(x, hh, ww),
        sy(y, hh, ww),
        sxx(x, hh, ww, x),
        syy(y, hh, ww, y),
        sxy(x, hh, ww, y) {}

  WindowStats stats(int y, int x) const {
    const double n = static_cast<double>(win) * win;
    WindowStats st;
    st.mx = sx.window(y, x, win) / n;
    st.my = sy.window(y, x, win) / n;
    st.vx = sxx.window(y, x, win) / n - st.mx * st.mx;
    st.vy = syy.window(y, x, win) / n - st.my * st.my;
    st.vxy = sxy.window(y, x, win) / n - st.mx * st.my;
    return st;
  }

  double value(const WindowStats& st) const {
    const double n1 = 2.0 * st.mx * st.my + c1;
    const double n2 = 2.0 * st.vxy + c2;
    const double d1 = st.mx * st.mx + st.my * st.my + c1;
    const double d2 = st.vx + st.vy + c2;
    return (n1 * n2) / (d1 * d2);
  }
};

void check_ssim_args(const char* who, std::size_t xn, std::size_t yn, int h, int w, double range,
                     int window) {
  check_equal_size(who, xn, yn);
  if (h < 1 || w < 1 || xn != static_cast<std::size_t>(h) * static_cast<std::size_t>(w)) {
    throw argument_error(std::string(who) + ": values length " + std::to_string(xn) +
                         " does not match " + std::to_string(h) + "x" + std::to_string(w));
  }
  if (window < 1 || window > h || window > w) {
    throw argument_error(std::string(who) + ": window " + std::to_string(window) +
                         " does not fit inside " + std::to_string(h) + "x" + std::to_string(w));
  }
  if (!(range > 0.0)) {
    throw argument_error(std::string(who) + ": dynamic range must be positive");
  }
}

// Accumulates d(mean SSIM)/dx and /dy, each scaled by `seed`.
void ssim_backprop(const SsimCore& core, const double* x, const double* y, double seed,
                   double* gx, double* gy) {
  const int oh = core.h - core.win + 1, ow = core.w - core.win + 1;
  const double n = static_cast<double>(core.win) * core.win;
  const double wscale = seed / (static_cast<double>(oh) * ow);
  for (int wy = 0; wy < oh; ++wy) {
    for (int wx = 0; wx < ow; ++wx) {
      const WindowStats st = core.stats(wy, wx);
      const double n1 = 2.0 * st.mx * st.my + core.c1;
      const double n2 = 2.0 * st.vxy + core.c2;
      const double d1 = st.mx * st.mx + st.my * st.my + core.c1;
      const double d2 = st.vx + st.vy + core.c2;
      const double inv = 1.0 / (d1 * d2);
      const double s = n1 * n2 * inv;
      // Partials w.r.t. the five window statistics.
      const double ds_dmx = 2.0 * st.my * n2 * inv - s * 2.0 * st.mx / d1;
      const double ds_dmy = 2.0 * st.mx * n2 * inv - s * 2.0 * st.my / d1;
      const double ds_dvar = -s / d2;          // same for vx and vy
      const double ds_dcov = 2.0 * n1 * inv;   // vxy
      const double common = wscale / n;
      for (int dy = 0; dy < core.win; ++dy) {
        const std::size_t row = static_cast<std::size_t>(wy + dy) * core.w + wx;
        for (int dx = 0; dx < core.win; ++dx) {
          const std::size_t i = row + static_cast<std::size_t>(dx);
          const double xc = x[i] - st.mx;
          const double yc = y[i] - st.my;
          if (gx != nullptr) {
            gx[i] += common * (ds_dmx + ds_dvar * 2.0 * xc + ds_dcov * yc);
          }
          if (gy != nullptr) {
            gy[i] += common * (ds_dmy + ds_dvar * 2.0 * yc + ds_dcov * xc);
          }
        }
      }
    }
  }
}

// Accepts (H, W) or (1, H, W); returns {H, W}.
std::pair<int, int> image_dims(const char* who, const diff::Shape& shape) {
  if (shape.size() == 2) return {shape[0], shape[1]};
  if (shape.size() == 3 && shape[0] == 1) return {shape[1], shape[2]};
  throw argument_error(std::string(who) + ": expected (H,W) or (1,H,W) input");
}

}  // namespace

double l1_loss(const std::vector<double>& x, const std::vector<double>& y) {
  check_equal_size("l1_loss", x.size(), y.size());
  if (x.empty()) throw argument_error("l1_loss: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(x[i] - y[i]);
  return acc / static_cast<double>(x.size());
}

SsimResult ssim(const std::vector<double>& x, const std::vector<double>& y, int h, int w,
                double dynamic_range, int window) {
  check_ssim_args("ssim", x.size(), y.size(), h, w, dynamic_range, window);
  const SsimCore core(x.data(), y.data(), h, w, dynamic_range, window);
  SsimResult r;
  r.map_h = h - window + 1;
  r.map_w = w - window + 1;
  r.map.resize(static_cast<std::size_t>(r.map_h) * r.map_w);
  double acc = 0.0;
  for (int wy = 0; wy < r.map_h; ++wy) {
    for (int wx = 0; wx < r.map_w; ++wx) {
      const double v = core.value(core.stats(wy, wx));
      r.map[static_cast<std::size_t>(wy) * r.map_w + wx] = v;
      acc += v;
    }
  }
  r.mean = acc / static_cast<double>(r.map.size());
  return r;
}

double hybrid_loss(const std::vector<double>& x, const std::vector<double>& y, int h, int w,
                   double dynamic_range, double mu, int window) {
  return l1_loss(x, y) + mu * (1.0 - ssim(x, y, h, w, dynamic_range, window).mean);
}

double shrinkage_penalty(const std::vector<double>& values, double limit) {
  if (!(limit > 0.0)) {
    throw argument_error("shrinkage_penalty: limit must be positive, got " +
                         std::to_string(limit));
  }
  if (values.empty()) throw argument_error("shrinkage_penalty: empty input");
  double acc = 0.0;
  for (double v : values) acc += std::max(std::abs(v) - limit, 0.0);
  return acc / static_cast<double>(values.size());
}

double psnr(const std::vector<double>& x, const std::vector<double>& ref, double peak) {
  check_equal_size("psnr", x.size(), ref.size());
  if (x.empty()) throw argument_error("psnr: empty input");
  double mse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - ref[i];
    mse += d * d;
  }
  mse /= static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  check_equal_size("wilcoxon_signed_rank", a.size(), b.size());
  if (a.size() < 5) {
    throw argument_error("wilcoxon_signed_rank: need at least 5 pairs, got " +
                         std::to_string(a.size()));
  }
  std::vector<double> d;
  d.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double di = a[i] - b[i];
    if (di != 0.0) d.push_back(di);
  }
  const std::size_t m = d.size();
  if (m == 0) {
    throw undefined_test_error("wilcoxon_signed_rank: all differences are zero");
  }

  // Average ranks of |d| (ties share the mean of their positions).
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<double> rank(m, 0.0);
  double tie_correction = 0.0;
  for (std::size_t i = 0; i < m;) {
    std::size_t j = i;
    while (j + 1 < m && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based positions i..j
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    const double t = static_cast<double>(j - i + 1);
    tie_correction += (t * t * t - t) / 48.0;
    i = j + 1;
  }

  double w_plus = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (d[i] > 0.0) w_plus += rank[i];
  }
  const double total = 0.5 * static_cast<double>(m) * static_cast<double>(m + 1);
  const double w_minus = total - w_plus;

  WilcoxonResult res;
  res.statistic = std::min(w_plus, w_minus);

  if (m <= 20) {
    // Exact sign-flip distribution of W+ over doubled ranks (integers even
    // with tie averaging), equivalent to enumerating all 2^m assignments.
    const std::int64_t sum2 =
        static_cast<std::int64_t>(std::llround(2.0 * total));
    std::vector<std::uint64_t> ways(static_cast<std::size_t>(sum2) + 1, 0u);
    ways[0] = 1u;
    std::int64_t reach = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const std::int64_t r2 = std::llround(2.0 * rank[i]);
      reach += r2;
      for (std::int64_t s = reach; s >= r2; --s) {
        ways[static_cast<std::size_t>(s)] += ways[static_cast<std::size_t>(s - r2)];
      }
    }
    const std::int64_t w2 = std::llround(2.0 * w_plus);
    std::uint64_t low = 0u, high = 0u;
    for (std::int64_t s = 0; s <= sum2; ++s) {
      if (s <= w2) low += ways[static_cast<std::size_t>(s)];
      if (s >= w2) high += ways[static_cast<std::size_t>(s)];
    }
    const double denom = std::ldexp(1.0, static_cast<int>(m));  // 2^m
    res.p_value = std::min(1.0, 2.0 * std::min(static_cast<double>(low) / denom,
                                               static_cast<double>(high) / denom));
  } else {
    const double mm = static_cast<double>(m);
    const double mean = mm * (mm + 1.0) / 4.0;
    const double var = mm * (mm + 1.0) * (2.0 * mm + 1.0) / 24.0 - tie_correction;
    const double z = (w_plus - mean) / std::sqrt(var);
    res.p_value = std::erfc(std::abs(z) / std::sqrt(2.0));
  }
  return res;
}

diff::TapeTensor l1_node(diff::Tape& tape, const diff::TapeTensor& x, const diff::TapeTensor& y) {
  const auto& xv = tape.values(x);
  const auto& yv = tape.values(y);
  if (x.shape != y.shape) {
    throw argument_error("l1_node: shape mismatch");
  }
  const double val = l1_loss(xv, yv);
  return tape.custom(
      "l1_loss", {x, y}, {1}, {val},
      [](const std::vector<double>& g, const std::vector<const std::vector<double>*>& pv,
         const std::vector<std::vector<double>*>& pg) {
        const auto& xx = *pv[0];
        const auto& yy = *pv[1];
        const double scale = g[0] / static_cast<double>(xx.size());
        for (std::size_t i = 0; i < xx.size(); ++i) {
          const double diff_i = xx[i] - yy[i];
          const double s = diff_i > 0.0 ? scale : (diff_i < 0.0 ? -scale : 0.0);
          if (pg[0] != nullptr) (*pg[0])[i] += s;
          if (pg[1] != nullptr) (*pg[1])[i] -= s;
        }
      });
}

diff::TapeTensor ssim_node(diff::Tape& tape, const diff::TapeTensor& x, const diff::TapeTensor& y,
                           double dynamic_range, int window) {
  if (x.shape != y.shape) throw argument_error("ssim: shape mismatch");
  const auto [h, w] = image_dims("ssim", x.shape);
  const auto& xv = tape.values(x);
  const auto& yv = tape.values(y);
  const double val = ssim(xv, yv, h, w, dynamic_range, window).mean;
  return tape.custom(
      "ssim", {x, y}, {1}, {val},
      [h, w, dynamic_range, window](const std::vector<double>& g,
                                    const std::vector<const std::vector<double>*>& pv,
                                    const std::vector<std::vector<double>*>& pg) {
        const SsimCore core(pv[0]->data(), pv[1]->data(), h, w, dynamic_range, window);
        ssim_backprop(core, pv[0]->data(), pv[1]->data(), g[0],
                      pg[0] != nullptr ? pg[0]->data() : nullptr,
                      pg[1] != nullptr ? pg[1]->data() : nullptr);
      });
}

diff::TapeTensor hybrid_node(diff::Tape& tape, const diff::TapeTensor& x,
                             const diff::TapeTensor& y, double dynamic_range, double mu,
                             int window) {
  diff::TapeTensor one = tape.leaf({1}, {1.0}, false);
  diff::TapeTensor ssim_term =
      tape.mul_scalar(tape.add(one, tape.mul_scalar(ssim_node(tape, x, y, dynamic_range, window),
                                                    -1.0)),
                      mu);
  return tape.add(l1_node(tape, x, y), ssim_term);
}

diff::TapeTensor shrinkage_node(diff::Tape& tape, const diff::TapeTensor& values, double limit) {
  const auto& v = tape.values(values);
  const double val = shrinkage_penalty(v, limit);
  return tape.custom(
      "shrinkage_penalty", {values}, {1}, {val},
      [limit](const std::vector<double>& g, const std::vector<const std::vector<double>*>& pv,
              const std::vector<std::vector<double>*>& pg) {
        if (pg[0] == nullptr) return;
        const auto& in = *pv[0];
        const double scale = g[0] / static_cast<double>(in.size());
        for (std::size_t i = 0; i < in.size(); ++i) {
          if (in[i] > limit) {
            (*pg[0])[i] += scale;
          } else if (in[i] < -limit) {
            (*pg[0])[i] -= scale;
          }
        }
      });
}

}  // namespace ktraj
