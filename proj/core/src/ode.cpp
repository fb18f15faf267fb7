#include "ktraj/ode.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>

#include "ktraj/errors.hpp"

namespace ktraj {

namespace {

// Dormand-Prince 5(4) tableau (Hairer, Norsett & Wanner notation).
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                 a64 = 49.0 / 176, a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                 b5 = -2187.0 / 6784, b6 = 11.0 / 84;
// 5th-order minus embedded 4th-order weights (for the error estimate).
constexpr double e1 = 35.0 / 384 - 5179.0 / 57600, e3 = 500.0 / 1113 - 7571.0 / 16695,
                 e4 = 125.0 / 192 - 393.0 / 640, e5 = -2187.0 / 6784 + 92097.0 / 339200,
                 e6 = 11.0 / 84 - 187.0 / 2100, e7 = -1.0 / 40;

using Rhs = std::function<void(const double*, double, double*)>;

std::string fmt_time(double t) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.12g", t);
  return buf;
}

void check_finite(const std::vector<double>& v, double t, const char* who) {
  for (double x : v)
    if (!std::isfinite(x))
      throw integration_error(std::string(who) + ": non-finite derivative at t=" + fmt_time(t));
}

// One 5(4) step. k1 must hold f(y, t) on entry; on exit k7 = f(y_next, t+h)
// (FSAL), y_next holds the 5th-order solution and diff the 5th-4th difference.
struct StepWorkspace {
  std::vector<double> k1, k2, k3, k4, k5, k6, k7, tmp, y_next, diff;
  explicit StepWorkspace(std::size_t n)
      : k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), tmp(n), y_next(n), diff(n) {}
};

void dopri5_step_core(const Rhs& f, const std::vector<double>& y, double t, double h,
                      StepWorkspace& w) {
  const std::size_t n = y.size();
  auto at = [&](double c) { return t + c * h; };

  for (std::size_t i = 0; i < n; ++i) w.tmp[i] = y[i] + h * a21 * w.k1[i];
  f(w.tmp.data(), at(c2), w.k2.data());
  for (std::size_t i = 0; i < n; ++i)
    w.tmp[i] = y[i] + h * (a31 * w.k1[i] + a32 * w.k2[i]);
  f(w.tmp.data(), at(c3), w.k3.data());
  for (std::size_t i = 0; i < n; ++i)
    w.tmp[i] = y[i] + h * (a41 * w.k1[i] + a42 * w.k2[i] + a43 * w.k3[i]);
  f(w.tmp.data(), at(c4), w.k4.data());
  for (std::size_t i = 0; i < n; ++i)
    w.tmp[i] = y[i] + h * (a51 * w.k1[i] + a52 * w.k2[i] + a53 * w.k3[i] + a54 * w.k4[i]);
  f(w.tmp.data(), at(c5), w.k5.data());
  for (std::size_t i = 0; i < n; ++i)
    w.tmp[i] = y[i] + h * (a61 * w.k1[i] + a62 * w.k2[i] + a63 * w.k3[i] + a64 * w.k4[i] +
                           a65 * w.k5[i]);
  f(w.tmp.data(), t + h, w.k6.data());
  for (std::size_t i = 0; i < n; ++i)
    w.y_next[i] = y[i] + h * (b1 * w.k1[i] + b3 * w.k3[i] + b4 * w.k4[i] + b5 * w.k5[i] +
                              b6 * w.k6[i]);
  f(w.y_next.data(), t + h, w.k7.data());
  for (std::size_t i = 0; i < n; ++i)
    w.diff[i] = h * (e1 * w.k1[i] + e3 * w.k3[i] + e4 * w.k4[i] + e5 * w.k5[i] +
                     e6 * w.k6[i] + e7 * w.k7[i]);
}

// 4th-order Hermite interpolation on an accepted step [t0, t0+h]. Written in
// increment form so a constant segment (zero derivative) reproduces y0
// bitwise at every theta.
void hermite(const std::vector<double>& y0, const std::vector<double>& f0,
             const std::vector<double>& y1, const std::vector<double>& f1, double h,
             double theta, std::vector<double>& out) {
  const std::size_t n = y0.size();
  out.resize(n);
  const double tm1 = theta - 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dy = y1[i] - y0[i];
    out[i] = y0[i] + theta * dy +
             theta * tm1 * ((1.0 - 2.0 * theta) * dy + tm1 * h * f0[i] + theta * h * f1[i]);
  }
}

double error_norm(const std::vector<double>& diff, const std::vector<double>& y0,
                  const std::vector<double>& y1, double atol, double rtol) {
  double acc = 0.0;
  const std::size_t n = diff.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double sc = atol + rtol * std::max(std::abs(y0[i]), std::abs(y1[i]));
    const double r = diff[i] / sc;
    acc += r * r;
  }
  return std::sqrt(acc / static_cast<double>(n));
}

double initial_step_guess(const Rhs& f, const std::vector<double>& y0, double t0,
                          double span, const OdeConfig& cfg, std::vector<double>& f0) {
  if (cfg.initial_step > 0.0) return std::min(cfg.initial_step, span);
  double d0 = 0.0, d1 = 0.0;
  const std::size_t n = y0.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double sc = cfg.atol + cfg.rtol * std::abs(y0[i]);
    d0 += (y0[i] / sc) * (y0[i] / sc);
    d1 += (f0[i] / sc) * (f0[i] / sc);
  }
  d0 = std::sqrt(d0 / n);
  d1 = std::sqrt(d1 / n);
  double h = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 * span : 0.01 * d0 / d1;
  (void)t0;
  return std::min(h, span);
}

// Adaptive driver from t0 to t_end; on_step is called for every accepted step
// with (t_left, y_left, f_left, h, y_right, f_right).
using StepHook = std::function<void(double, const std::vector<double>&,
                                    const std::vector<double>&, double,
                                    const std::vector<double>&, const std::vector<double>&)>;

void drive(const Rhs& f, std::vector<double>& y, double t0, double t_end,
           const OdeConfig& cfg, const StepHook& on_step, const char* who) {
  if (cfg.rtol <= 0.0 || cfg.atol <= 0.0)
    throw argument_error("OdeConfig: rtol and atol must be positive");
  if (cfg.max_steps < 1) throw argument_error("OdeConfig: max_steps must be >= 1");
  if (cfg.safety <= 0.0 || cfg.safety > 1.0)
    throw argument_error("OdeConfig: safety must lie in (0, 1]");
  if (t_end <= t0) return;

  const std::size_t n = y.size();
  StepWorkspace w(n);
  std::vector<double> y_left(n);

  f(y.data(), t0, w.k1.data());
  check_finite(w.k1, t0, who);

  double t = t0;
  double h = initial_step_guess(f, y, t0, t_end - t0, cfg, w.k1);
  double facold = 1e-4;  // PI controller memory (Lund stabilization)
  constexpr double beta = 0.04, expo1 = 0.2 - 0.75 * beta;

  int steps = 0;
  while (t < t_end) {
    if (++steps > cfg.max_steps)
      throw integration_error(std::string(who) + ": exceeded max_steps at t=" + fmt_time(t));
    h = std::min(h, t_end - t);

    dopri5_step_core(f, y, t, h, w);
    check_finite(w.k7, t + h, who);
    for (double x : w.y_next)
      if (!std::isfinite(x))
        throw integration_error(std::string(who) + ": non-finite state at t=" + fmt_time(t + h));

    const double err = error_norm(w.diff, y, w.y_next, cfg.atol, cfg.rtol);
    if (err <= 1.0) {  // accept
      y_left.swap(y);
      y = w.y_next;
      if (on_step) on_step(t, y_left, w.k1, h, y, w.k7);
      t += h;
      w.k1.swap(w.k7);  // FSAL
      double fac;
      if (err == 0.0) {
        fac = 10.0;
      } else {
        fac = cfg.safety * std::pow(err, -expo1) * std::pow(facold, beta);
        fac = std::clamp(fac, 0.2, 10.0);
      }
      facold = std::max(err, 1e-4);
      h *= fac;
    } else {  // reject
      double fac = cfg.safety * std::pow(err, -0.2);
      h *= std::clamp(fac, 0.2, 1.0);
    }
  }
}

Rhs wrap_field(const VectorField& field) {
  return [&field](const double* y, double t, double* dy) { field.eval(y, t, dy); };
}

void check_grid(const std::vector<double>& ts, const char* who) {
  if (ts.empty()) throw argument_error(std::string(who) + ": empty time grid");
  if (ts.front() != 0.0)
    throw argument_error(std::string(who) + ": time grid must start at 0");
  for (std::size_t i = 1; i < ts.size(); ++i)
    if (ts[i] <= ts[i - 1])
      throw argument_error(std::string(who) + ": time grid must be strictly increasing");
}

}  // namespace

std::vector<std::vector<double>> integrate(const VectorField& field,
                                           const std::vector<double>& y0,
                                           const std::vector<double>& query_times,
                                           const OdeConfig& cfg) {
  check_grid(query_times, "integrate");
  if (static_cast<int>(y0.size()) != field.dim())
    throw argument_error("integrate: y0 length does not match field dimension");

  const std::size_t nq = query_times.size();
  std::vector<std::vector<double>> out(nq);
  out[0] = y0;
  if (nq == 1) return out;

  std::size_t qi = 1;
  auto hook = [&](double t_left, const std::vector<double>& yl, const std::vector<double>& fl,
                  double h, const std::vector<double>& yr, const std::vector<double>& fr) {
    while (qi < nq && query_times[qi] <= t_left + h + 1e-14 * (t_left + h)) {
      const double theta = std::clamp((query_times[qi] - t_left) / h, 0.0, 1.0);
      hermite(yl, fl, yr, fr, h, theta, out[qi]);
      ++qi;
    }
  };

  std::vector<double> y = y0;
  drive(wrap_field(field), y, query_times.front(), query_times.back(), cfg, hook,
        "integrate");
  // The last accepted step lands exactly on t_end; make the endpoint exact.
  if (qi == nq) out[nq - 1] = y;
  while (qi < nq) out[qi++] = y;
  return out;
}

AdjointBundle integrate_adjoint(const VectorField& field, const std::vector<double>& y_end,
                                const std::vector<double>& t_grid,
                                const std::vector<std::vector<double>>& cotangents,
                                const OdeConfig& cfg) {
  check_grid(t_grid, "integrate_adjoint");
  const int D = field.dim();
  const int P = field.param_count();
  if (static_cast<int>(y_end.size()) != D)
    throw argument_error("integrate_adjoint: y_end length does not match field dimension");
  if (cotangents.size() != t_grid.size())
    throw argument_error("integrate_adjoint: one cotangent per grid time required");
  for (const auto& c : cotangents)
    if (!c.empty() && static_cast<int>(c.size()) != D)
      throw argument_error("integrate_adjoint: cotangent length does not match state");

  // Augmented state z = [y, a_k, a_theta, a_t] over reversed time s = t_hi - t.
  const std::size_t nz = static_cast<std::size_t>(2 * D) + P + 1;
  std::vector<double> z(nz, 0.0);
  std::copy(y_end.begin(), y_end.end(), z.begin());
  if (!cotangents.back().empty())
    std::copy(cotangents.back().begin(), cotangents.back().end(), z.begin() + D);

  // a_t(t_e) = dL/dt_e = a_k(t_e) . f(y_end, t_end)
  {
    std::vector<double> fy(D);
    field.eval(y_end.data(), t_grid.back(), fy.data());
    double at = 0.0;
    for (int i = 0; i < D; ++i) at += z[D + i] * fy[i];
    z[2 * D + P] = at;
  }

  std::vector<double> fy(D), cs(D), cp(P);
  double t_hi = t_grid.back();
  auto rhs = [&](const double* zz, double s, double* dz) {
    const double t = t_hi - s;
    field.eval(zz, t, fy.data());
    double ct = 0.0;
    field.vjp(zz, t, zz + D, cs.data(), cp.data(), ct);
    for (int i = 0; i < D; ++i) dz[i] = -fy[i];
    for (int i = 0; i < D; ++i) dz[D + i] = cs[i];
    for (int j = 0; j < P; ++j) dz[2 * D + j] = cp[j];
    dz[2 * D + P] = ct;
  };

  for (std::size_t seg = t_grid.size() - 1; seg >= 1; --seg) {
    t_hi = t_grid[seg];
    const double span = t_grid[seg] - t_grid[seg - 1];
    drive(rhs, z, 0.0, span, cfg, nullptr, "integrate_adjoint");
    if (!cotangents[seg - 1].empty())
      for (int i = 0; i < D; ++i) z[D + i] += cotangents[seg - 1][i];
  }

  AdjointBundle out;
  out.state.assign(z.begin(), z.begin() + D);
  out.a_state.assign(z.begin() + D, z.begin() + 2 * D);
  out.a_params.assign(z.begin() + 2 * D, z.begin() + 2 * D + P);
  out.a_time = z[2 * D + P];
  return out;
}

AdjointBundle integrate_adjoint(const VectorField& field, const std::vector<double>& y_end,
                                const std::vector<double>& t_grid,
                                const std::vector<double>& dL_dy_end,
                                const OdeConfig& cfg) {
  std::vector<std::vector<double>> cots(t_grid.size());
  if (!t_grid.empty()) cots.back() = dL_dy_end;
  return integrate_adjoint(field, y_end, t_grid, cots, cfg);
}

std::pair<std::vector<double>, double> dopri5_step(const VectorField& field,
                                                   const std::vector<double>& y, double t,
                                                   double h) {
  if (h <= 0.0) throw argument_error("dopri5_step: h must be positive");
  if (static_cast<int>(y.size()) != field.dim())
    throw argument_error("dopri5_step: y length does not match field dimension");

  StepWorkspace w(y.size());
  Rhs f = wrap_field(field);
  f(y.data(), t, w.k1.data());
  dopri5_step_core(f, y, t, h, w);
  check_finite(w.y_next, t + h, "dopri5_step");

  double err = 0.0;
  for (double d : w.diff) err += d * d;
  return {w.y_next, std::sqrt(err)};
}

}  // namespace ktraj
