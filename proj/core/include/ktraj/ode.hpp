#pragma once

#include <utility>
#include <vector>

namespace ktraj {

struct OdeConfig {
  double rtol = 1e-5;
  double atol = 1e-6;
  int max_steps = 100000;
  double initial_step = 0.0;  // <= 0 selects a heuristic first step
  double safety = 0.9;
};

// Augmented adjoint result at t = 0: the re-integrated state channel plus
// the three adjoint channels a_k, a_theta, a_t.
struct AdjointBundle {
  std::vector<double> state;
  std::vector<double> a_state;
  std::vector<double> a_params;
  double a_time = 0.0;
};

// Right-hand side f(y, t) with analytic vector-Jacobian products. eval and
// vjp must be deterministic for fixed parameters; vjp returns
// cot^T df/dy, cot^T df/dtheta, cot^T df/dt.
class VectorField {
 public:
  virtual ~VectorField() = default;
  virtual int dim() const = 0;
  virtual int param_count() const = 0;
  virtual void eval(const double* y, double t, double* dy) const = 0;
  virtual void vjp(const double* y, double t, const double* cot, double* cot_state,
                   double* cot_params, double& cot_time) const = 0;
};

// Adaptive Dormand-Prince 5(4) integration of y' = f(y, t) from
// query_times.front() (must be 0) to query_times.back(), returning the state
// at every query time via 4th-order Hermite dense output.
std::vector<std::vector<double>> integrate(const VectorField& field,
                                           const std::vector<double>& y0,
                                           const std::vector<double>& query_times,
                                           const OdeConfig& cfg = {});

// Backward pass of the adjoint method: integrates the augmented system
// [y, a_k, a_theta, a_t] from t_grid.back() down to t_grid.front(), starting
// from y_end and injecting cotangents[i] into a_k when passing t_grid[i].
// cotangents[i] may be empty (treated as zero) but otherwise must match the
// state length. a_time starts from cot_end . f(y_end, t_end) (the endpoint
// time sensitivity) and accumulates -a_k^T df/dt along the way.
AdjointBundle integrate_adjoint(const VectorField& field,
                                const std::vector<double>& y_end,
                                const std::vector<double>& t_grid,
                                const std::vector<std::vector<double>>& cotangents,
                                const OdeConfig& cfg = {});

// Convenience form for a loss attached only to the final state.
AdjointBundle integrate_adjoint(const VectorField& field,
                                const std::vector<double>& y_end,
                                const std::vector<double>& t_grid,
                                const std::vector<double>& dL_dy_end,
                                const OdeConfig& cfg = {});

// One embedded 5(4) step from (y, t) with step h. Returns the 5th-order
// solution and the Euclidean norm of the difference between the 5th- and
// 4th-order solutions.
std::pair<std::vector<double>, double> dopri5_step(const VectorField& field,
                                                   const std::vector<double>& y,
                                                   double t, double h);

}  // namespace ktraj
