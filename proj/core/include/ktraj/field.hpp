#pragma once

// Neural velocity field f_theta(k, t): a two-layer fully connected network
//
//   f(k, t) = W2 tanh(W1 [k; t] + b1) + b2
//
// driving the trajectory ODE dk/dt = f_theta(k(t), t). The packed parameter
// vector is laid out [W1 row-major | b1 | W2 row-major | b2], which is also
// the order the adjoint produces parameter gradients in.

#include <cstdint>
#include <string>
#include <vector>

#include "ktraj/ode.hpp"
#include "ktraj/rng.hpp"

namespace ktraj {

struct FieldParams {
  int state_dim = 0;      // D: flattened control-point state size
  int hidden = 64;        // width of the single hidden layer
  bool include_time = true;  // when false the time input slot is fed 0
  std::vector<double> weights;  // packed [W1 | b1 | W2 | b2]

  int input_dim() const { return state_dim + 1; }
  std::size_t count() const {
    return static_cast<std::size_t>(hidden) * input_dim() + hidden +
           static_cast<std::size_t>(state_dim) * hidden + state_dim;
  }
};

// Small random weights: the hidden layer at the usual fan-in scale, the output
// layer three orders of magnitude smaller so a fresh field is a tiny
// perturbation of the initializer trajectory rather than a jump away from it.
FieldParams field_init(int state_dim, int hidden, bool include_time, Rng& rng);

// out must hold state_dim doubles.
void field_eval(const FieldParams& fp, const double* state, double t, double* out);

// Vector-Jacobian products of cot^T df/d(state, params, t). cot_state gets
// state_dim entries, cot_params gets count() entries, cot_time one scalar.
void field_vjp(const FieldParams& fp, const double* state, double t, const double* cot,
               double* cot_state, double* cot_params, double& cot_time);

// Adapter binding a FieldParams to the ODE integrator. Holds a reference;
// the params must outlive the adapter.
class FieldOde final : public VectorField {
 public:
  explicit FieldOde(const FieldParams& fp) : fp_(fp) {}
  int dim() const override { return fp_.state_dim; }
  int param_count() const override { return static_cast<int>(fp_.count()); }
  void eval(const double* y, double t, double* dy) const override {
    field_eval(fp_, y, t, dy);
  }
  void vjp(const double* y, double t, const double* cot, double* cot_state,
           double* cot_params, double& cot_time) const override {
    field_vjp(fp_, y, t, cot, cot_state, cot_params, cot_time);
  }

 private:
  const FieldParams& fp_;
};

// Checkpoint round trip (stem path, ".bin"/".json" appended).
void save_field(const FieldParams& fp, const std::string& path);
FieldParams load_field(const std::string& path);

}  // namespace ktraj
