#include <algorithm>
#include <cmath>
#include <vector>

#include <doctest.h>

#include "ktraj/errors.hpp"
#include "ktraj/ode.hpp"

using namespace ktraj;

namespace {

// dy/dt = lambda * y, one parameter. Analytic solution y0 * exp(lambda t).
class LinearField final : public VectorField {
 public:
  explicit LinearField(double lam, int dim = 1) : lam_(lam), dim_(dim) {}
  int dim() const override { return dim_; }
  int param_count() const override { return 1; }
  void eval(const double* y, double, double* dy) const override {
    for (int i = 0; i < dim_; ++i) dy[i] = lam_ * y[i];
  }
  void vjp(const double* y, double, const double* cot, double* cot_state,
           double* cot_params, double& cot_time) const override {
    cot_params[0] = 0.0;
    for (int i = 0; i < dim_; ++i) {
      cot_state[i] = lam_ * cot[i];
      cot_params[0] += cot[i] * y[i];
    }
    cot_time = 0.0;
  }

 private:
  double lam_;
  int dim_;
};

// dy/dt = p(t), pure quadrature with polynomial rate. No parameters.
class PolyRateField final : public VectorField {
 public:
  explicit PolyRateField(std::vector<double> coeffs) : c_(std::move(coeffs)) {}
  int dim() const override { return 1; }
  int param_count() const override { return 0; }
  void eval(const double*, double t, double* dy) const override {
    double acc = 0.0;
    for (std::size_t i = c_.size(); i-- > 0;) acc = acc * t + c_[i];
    dy[0] = acc;
  }
  void vjp(const double*, double t, const double* cot, double* cot_state, double*,
           double& cot_time) const override {
    cot_state[0] = 0.0;
    double dacc = 0.0;
    for (std::size_t i = c_.size(); i-- > 1;) dacc = dacc * t + i * c_[i];
    cot_time = cot[0] * dacc;
  }

 private:
  std::vector<double> c_;
};

class ZeroField final : public VectorField {
 public:
  explicit ZeroField(int dim) : dim_(dim) {}
  int dim() const override { return dim_; }
  int param_count() const override { return 0; }
  void eval(const double*, double, double* dy) const override {
    std::fill(dy, dy + dim_, 0.0);
  }
  void vjp(const double*, double, const double*, double* cot_state, double*,
           double& cot_time) const override {
    std::fill(cot_state, cot_state + dim_, 0.0);
    cot_time = 0.0;
  }

 private:
  int dim_;
};

// Smooth nonlinear 2d system with 4 parameters, for finite-difference checks:
//   dy0/dt = p0 sin(y1) + p1 t
//   dy1/dt = p2 y0 y1 + p3 cos(t)
class NonlinField final : public VectorField {
 public:
  explicit NonlinField(std::vector<double> p) : p_(std::move(p)) {}
  int dim() const override { return 2; }
  int param_count() const override { return 4; }
  void eval(const double* y, double t, double* dy) const override {
    dy[0] = p_[0] * std::sin(y[1]) + p_[1] * t;
    dy[1] = p_[2] * y[0] * y[1] + p_[3] * std::cos(t);
  }
  void vjp(const double* y, double t, const double* cot, double* cot_state,
           double* cot_params, double& cot_time) const override {
    cot_state[0] = cot[1] * p_[2] * y[1];
    cot_state[1] = cot[0] * p_[0] * std::cos(y[1]) + cot[1] * p_[2] * y[0];
    cot_params[0] = cot[0] * std::sin(y[1]);
    cot_params[1] = cot[0] * t;
    cot_params[2] = cot[1] * y[0] * y[1];
    cot_params[3] = cot[1] * std::cos(t);
    cot_time = cot[0] * p_[1] - cot[1] * p_[3] * std::sin(t);
  }

  std::vector<double> p_;
};

class NanField final : public VectorField {
 public:
  int dim() const override { return 1; }
  int param_count() const override { return 0; }
  void eval(const double*, double t, double* dy) const override {
    dy[0] = t < 0.5 ? 1.0 : std::nan("");
  }
  void vjp(const double*, double, const double*, double* cot_state, double*,
           double& cot_time) const override {
    cot_state[0] = 0.0;
    cot_time = 0.0;
  }
};

double query_loss(const VectorField& field, const std::vector<double>& y0,
                  const std::vector<double>& t_grid,
                  const std::vector<std::vector<double>>& cots, const OdeConfig& cfg) {
  const auto states = integrate(field, y0, t_grid, cfg);
  double loss = 0.0;
  for (std::size_t i = 0; i < t_grid.size(); ++i)
    for (std::size_t d = 0; d < y0.size(); ++d)
      if (!cots[i].empty()) loss += cots[i][d] * states[i][d];
  return loss;
}

}  // namespace

TEST_CASE("exponential decay reaches exp(-1) within tolerance") {
  LinearField f(-1.0);
  OdeConfig cfg;
  cfg.rtol = 1e-9;
  cfg.atol = 1e-11;
  const auto states = integrate(f, {1.0}, {0.0, 1.0}, cfg);
  REQUIRE(states.size() == 2);
  CHECK(states[0][0] == 1.0);
  CHECK(states[1][0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-8));
}

TEST_CASE("quadrature of 2t lands on t^2 at every query time") {
  PolyRateField f({0.0, 2.0});
  const std::vector<double> ts{0.0, 0.1, 0.25, 0.5, 0.77, 1.0};
  const auto states = integrate(f, {0.0}, ts);
  for (std::size_t i = 0; i < ts.size(); ++i)
    CHECK(states[i][0] == doctest::Approx(ts[i] * ts[i]).epsilon(1e-7));
}

TEST_CASE("zero field keeps every query state bitwise at y0") {
  ZeroField f(3);
  const std::vector<double> y0{0.25, -1.5, 3.0};
  const auto states = integrate(f, y0, {0.0, 0.3, 0.6, 1.0});
  for (const auto& s : states)
    for (int d = 0; d < 3; ++d) CHECK(s[d] == y0[d]);
}

TEST_CASE("a single step integrates quartic rates exactly") {
  // The 5th-order weights satisfy the quadrature conditions through degree 4,
  // so dy/dt = 5 t^4 over one step must land on t^5 up to roundoff.
  PolyRateField f({0.0, 0.0, 0.0, 0.0, 5.0});
  const auto [y1, err] = dopri5_step(f, {0.0}, 0.0, 1.0);
  CHECK(y1[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(err > 0.0);  // the embedded 4th-order rule is not exact at degree 4

  // Degree 3 is exact for both rules: the error estimate collapses.
  PolyRateField g({0.0, 0.0, 0.0, 4.0});
  const auto [z1, zerr] = dopri5_step(g, {0.0}, 0.0, 1.0);
  CHECK(z1[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(zerr < 1e-14);
}

TEST_CASE("halving the step shrinks the embedded error like h^5") {
  NonlinField f({0.8, -0.3, 0.5, 1.1});
  const std::vector<double> y{0.4, -0.2};
  const double h = 0.2;
  const auto [y_big, err_big] = dopri5_step(f, y, 0.1, h);
  const auto [y_small, err_small] = dopri5_step(f, y, 0.1, h / 2);
  REQUIRE(err_small > 0.0);
  const double ratio = err_big / err_small;
  CHECK(ratio > 24.0);
  CHECK(ratio < 40.0);
}

TEST_CASE("adjoint of a linear field recovers exp(lambda) sensitivities") {
  const double lam = 0.7;
  LinearField f(lam);
  OdeConfig cfg;
  cfg.rtol = 1e-10;
  cfg.atol = 1e-12;
  const double y0 = 1.3;
  const auto states = integrate(f, {y0}, {0.0, 1.0}, cfg);
  const double y1 = states[1][0];
  REQUIRE(y1 == doctest::Approx(y0 * std::exp(lam)).epsilon(1e-8));

  const auto adj = integrate_adjoint(f, {y1}, {0.0, 1.0}, std::vector<double>{1.0}, cfg);
  // L = y(1) = y0 exp(lam): dL/dy0 = exp(lam), dL/dlam = y0 exp(lam),
  // dL/dt_end = lam y(1).
  CHECK(adj.a_state[0] == doctest::Approx(std::exp(lam)).epsilon(1e-7));
  CHECK(adj.a_params[0] == doctest::Approx(y0 * std::exp(lam)).epsilon(1e-7));
  CHECK(adj.a_time == doctest::Approx(lam * y1).epsilon(1e-7));
  CHECK(adj.state[0] == doctest::Approx(y0).epsilon(1e-7));
}

TEST_CASE("adjoint gradients match finite differences with interior cotangents") {
  const std::vector<double> params{0.8, -0.3, 0.5, 1.1};
  NonlinField f(params);
  const std::vector<double> y0{0.4, -0.2};
  const std::vector<double> t_grid{0.0, 0.3, 0.65, 1.0};
  const std::vector<std::vector<double>> cots{
      {}, {0.7, -1.2}, {-0.4, 0.9}, {1.5, 0.3}};
  OdeConfig cfg;
  cfg.rtol = 1e-10;
  cfg.atol = 1e-12;

  const auto states = integrate(f, y0, t_grid, cfg);
  const auto adj = integrate_adjoint(f, states.back(), t_grid, cots, cfg);

  const double eps = 1e-5;
  for (int d = 0; d < 2; ++d) {
    auto yp = y0, ym = y0;
    yp[d] += eps;
    ym[d] -= eps;
    const double fd =
        (query_loss(f, yp, t_grid, cots, cfg) - query_loss(f, ym, t_grid, cots, cfg)) /
        (2 * eps);
    CHECK(std::abs(adj.a_state[d] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
  }
  for (int j = 0; j < 4; ++j) {
    auto pp = params, pm = params;
    pp[j] += eps;
    pm[j] -= eps;
    NonlinField fp(pp), fm(pm);
    const double fd =
        (query_loss(fp, y0, t_grid, cots, cfg) - query_loss(fm, y0, t_grid, cots, cfg)) /
        (2 * eps);
    CHECK(std::abs(adj.a_params[j] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("zero cotangents produce zero adjoints and recover y0") {
  NonlinField f({0.8, -0.3, 0.5, 1.1});
  const std::vector<double> y0{0.4, -0.2};
  const std::vector<double> t_grid{0.0, 0.5, 1.0};
  OdeConfig cfg;
  cfg.rtol = 1e-9;
  cfg.atol = 1e-11;
  const auto states = integrate(f, y0, t_grid, cfg);
  const std::vector<std::vector<double>> cots{{}, {}, {0.0, 0.0}};
  const auto adj = integrate_adjoint(f, states.back(), t_grid, cots, cfg);
  for (double a : adj.a_state) CHECK(a == 0.0);
  for (double a : adj.a_params) CHECK(a == 0.0);
  CHECK(adj.a_time == 0.0);
  CHECK(adj.state[0] == doctest::Approx(y0[0]).epsilon(1e-6));
  CHECK(adj.state[1] == doctest::Approx(y0[1]).epsilon(1e-6));
}

TEST_CASE("backward integration reverses the forward pass within tolerance") {
  NonlinField f({0.8, -0.3, 0.5, 1.1});
  const std::vector<double> y0{0.4, -0.2};
  OdeConfig cfg;  // default tolerances on purpose
  const auto states = integrate(f, y0, {0.0, 1.0}, cfg);
  const auto adj =
      integrate_adjoint(f, states.back(), {0.0, 1.0}, std::vector<double>{1.0, 1.0}, cfg);
  for (int d = 0; d < 2; ++d)
    CHECK(std::abs(adj.state[d] - y0[d]) <= 10.0 * (cfg.atol + cfg.rtol * std::abs(y0[d])));
}

TEST_CASE("integration is deterministic across repeated calls") {
  NonlinField f({0.8, -0.3, 0.5, 1.1});
  const std::vector<double> y0{0.4, -0.2};
  const std::vector<double> ts{0.0, 0.21, 0.74, 1.0};
  const auto a = integrate(f, y0, ts);
  const auto b = integrate(f, y0, ts);
  for (std::size_t i = 0; i < ts.size(); ++i)
    for (int d = 0; d < 2; ++d) CHECK(a[i][d] == b[i][d]);

  const auto adj1 = integrate_adjoint(f, a.back(), ts, std::vector<double>{1.0, -2.0});
  const auto adj2 = integrate_adjoint(f, a.back(), ts, std::vector<double>{1.0, -2.0});
  for (int j = 0; j < 4; ++j) CHECK(adj1.a_params[j] == adj2.a_params[j]);
  CHECK(adj1.a_time == adj2.a_time);
}

TEST_CASE("malformed time grids and states are rejected") {
  ZeroField f(2);
  const std::vector<double> y0{0.0, 0.0};
  CHECK_THROWS_AS(integrate(f, y0, {}), argument_error);
  CHECK_THROWS_AS(integrate(f, y0, {0.5, 1.0}), argument_error);
  CHECK_THROWS_AS(integrate(f, y0, {0.0, 0.7, 0.7}), argument_error);
  CHECK_THROWS_AS(integrate(f, {1.0}, {0.0, 1.0}), argument_error);
  CHECK_THROWS_AS(
      integrate_adjoint(f, y0, {0.0, 1.0}, std::vector<std::vector<double>>{{}}),
      argument_error);
  CHECK_THROWS_AS(
      integrate_adjoint(f, y0, {0.0, 1.0},
                        std::vector<std::vector<double>>{{}, {1.0, 2.0, 3.0}}),
      argument_error);
}

TEST_CASE("non-finite derivatives raise an integration error naming the time") {
  NanField f;
  try {
    integrate(f, {0.0}, {0.0, 1.0});
    FAIL("expected integration_error");
  } catch (const integration_error& e) {
    CHECK(std::string(e.what()).find("t=") != std::string::npos);
  }
}

TEST_CASE("exceeding max_steps raises an integration error") {
  LinearField f(-1.0);
  OdeConfig cfg;
  cfg.rtol = 1e-12;
  cfg.atol = 1e-14;
  cfg.max_steps = 3;
  CHECK_THROWS_AS(integrate(f, {1.0}, {0.0, 1.0}, cfg), integration_error);
}

TEST_CASE("invalid solver configuration is rejected") {
  ZeroField f(1);
  OdeConfig bad;
  bad.rtol = 0.0;
  CHECK_THROWS_AS(integrate(f, {0.0}, {0.0, 1.0}, bad), argument_error);
  bad = OdeConfig{};
  bad.safety = 1.5;
  CHECK_THROWS_AS(integrate(f, {0.0}, {0.0, 1.0}, bad), argument_error);
  bad = OdeConfig{};
  bad.max_steps = 0;
  CHECK_THROWS_AS(integrate(f, {0.0}, {0.0, 1.0}, bad), argument_error);
}

TEST_CASE("dense output stays on the analytic curve between steps") {
  // Tolerances loose enough that accepted steps span several query points,
  // so most queries genuinely interpolate.
  LinearField f(-2.0, 1);
  OdeConfig cfg;
  cfg.rtol = 1e-7;
  cfg.atol = 1e-9;
  std::vector<double> ts;
  for (int i = 0; i <= 50; ++i) ts.push_back(i / 50.0);
  const auto states = integrate(f, {1.0}, ts, cfg);
  for (std::size_t i = 0; i < ts.size(); ++i)
    CHECK(std::abs(states[i][0] - std::exp(-2.0 * ts[i])) <= 1e-5);
}
