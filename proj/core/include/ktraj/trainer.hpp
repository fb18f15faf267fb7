#pragma once

// Joint trajectory/reconstruction training. The forward chain runs
// control points -> stacked neural ODE -> assembled trajectory -> per-coil
// forward NUFFT -> adjoint images -> RSS -> recon net -> hybrid loss plus
// kinematic band penalties. The backward chain retraces it: tape backward
// for the recon net and the loss, analytic NUFFT location gradients plus
// penalty subgradients for the trajectory points, and one adjoint ODE solve
// for the field parameters.
//
// Trajectory model: the initializer is split into equal segments of
// kQueriesPerSegment samples; each segment's first sample is its control
// point (fixed, never trained). Every segment evolves independently under
// dk/dt = f_theta(k, t) over the normalized segment time t in [0, 1], all
// segments stacked into one state vector and integrated in a single solver
// call. The solved deviation from the control point is added onto the
// initializer's samples, so a zero field reproduces the initializer exactly.
// Points are passed through a smooth tanh band clamp before the NUFFT so
// drifting outside [-0.5, 0.5) squashes instead of throwing.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ktraj/datakit.hpp"
#include "ktraj/diffcore.hpp"
#include "ktraj/field.hpp"
#include "ktraj/geometry.hpp"
#include "ktraj/nufft.hpp"
#include "ktraj/objective.hpp"
#include "ktraj/ode.hpp"
#include "ktraj/recon.hpp"

namespace ktraj {

inline constexpr int kQueriesPerSegment = 10;

// Identity on [-0.47, 0.47]; beyond that the excess is squashed through a
// tanh so the output magnitude stays below 0.4999. C1 everywhere.
double smooth_clamp(double v);
double smooth_clamp_deriv(double v);

struct TrainConfig {
  int epochs = 100;
  int warmup_epochs = 25;    // penalties contribute exactly 0 before this epoch
  double lr_field = 0.01;    // 0 freezes the field (the fixed-trajectory ablation)
  double lr_recon = 0.001;
  double lambda1 = 0.1;      // velocity-band penalty weight
  double lambda2 = 0.1;      // acceleration-band penalty weight
  int batch_size = 2;
  std::uint64_t seed = 1;
  OdeConfig ode;
  GriddingConfig gridding;
  PhysicsLimits limits;      // limits.grid_size must match the image grid
};

// Throws config_error naming the offending field.
void validate_train_config(const TrainConfig& cfg);

// Everything the pipeline needs about one acquisition target.
struct TrainSample {
  int grid = 0;
  std::vector<double> image;  // ground truth, grid*grid row-major, peak 1
  CoilSet coils;
};

// A runnable model bundle: initializer trajectory plus both parameter sets.
struct TrainSetup {
  Trajectory init;
  int n_control = 0;  // init.samples_per_shot == kQueriesPerSegment * n_control
  FieldParams field;
  ReconParams recon;
};

struct PipelineResult {
  std::vector<double> output;  // reconstructed image, grid*grid
  LossReport loss;
  double frac_velocity_ok = 1.0;  // of the assembled trajectory
  double frac_accel_ok = 1.0;
};

// Forward intermediates retained for backward_pipeline. Holds its own copies
// of the parameters, so the caller may update theirs freely in between.
struct PipelineTrace {
  int grid = 0;
  int shots = 0;
  int samples_per_shot = 0;
  int n_control = 0;
  std::vector<double> t_grid;                // the 10 query times
  std::vector<std::vector<double>> states;   // stacked ODE state per query time
  std::vector<double> raw_points;            // assembled, before the band clamp
  Trajectory assembled;                      // after the clamp; what the NUFFT saw
  std::vector<std::complex<double>> coil_signals;   // coils x samples, coil-major
  std::vector<ComplexImage> coil_images;            // sensitivity-weighted truth
  std::vector<ComplexImage> coil_adjoint;           // normalized adjoint images
  double adjoint_norm = 1.0;                 // 1 / total sample count
  std::unique_ptr<diff::Tape> tape;
  diff::TapeTensor input_leaf;               // the RSS image on the tape
  diff::TapeTensor loss_node;                // scalar image-loss root
  ReconTrace recon_trace;
  FieldParams field;
  ReconParams recon;
  double lambda1 = 0.0;                      // effective weights used
  double lambda2 = 0.0;
  double loss_scale = 1.0;
  PhysicsLimits limits;
  GriddingConfig gridding;
  OdeConfig ode;
  LossReport loss;
};

// Integrates every segment from its control point and assembles the clamped
// trajectory (the first half of the forward chain, shared with psf/plot
// tooling). `raw` and `states` optionally receive the pre-clamp points and
// the per-query stacked states.
Trajectory assemble_trajectory(const FieldParams& field, const Trajectory& init,
                               const ControlState& control, const OdeConfig& ode,
                               std::vector<double>* raw = nullptr,
                               std::vector<std::vector<double>>* states = nullptr);

// Runs the full forward chain for one sample. Stage failures rethrow with the
// stage name prefixed. cfg.lambda1/lambda2 enter the total as given (the
// training loop zeroes them during warm-up). loss_scale multiplies the entire
// objective (total and gradients alike); it exists so linearity is testable
// end to end. Pass `trace` to retain what backward_pipeline needs.
PipelineResult forward_pipeline(const FieldParams& field, const ReconParams& recon,
                                const Trajectory& init, const ControlState& control,
                                const TrainSample& sample, const TrainConfig& cfg,
                                PipelineTrace* trace = nullptr, double loss_scale = 1.0);

struct PipelineGrads {
  std::vector<double> field;  // d total / d theta, packed field layout
  std::vector<double> recon;  // d total / d beta, recon layout order
};

// Consumes the trace (its tape runs backward once). Second call throws.
PipelineGrads backward_pipeline(PipelineTrace& trace);

struct AdamState {
  std::vector<double> m, v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam_state(std::size_t n);

// Bias-corrected Adam update in place. Shape mismatch throws argument_error.
void adam_step(std::vector<double>& params, const std::vector<double>& grads,
               AdamState& state, double lr);

struct TrainData {
  std::vector<TrainSample> train;
  std::vector<TrainSample> val;
};

struct TrainResult {
  FieldParams field;   // best-validation parameters
  ReconParams recon;
  std::string history;  // CSV: epoch,split,total,l1,ssim_loss,pen_v,pen_a,psnr,ssim,frac_v_ok,frac_a_ok
  int best_epoch = -1;
  double best_val_total = 0.0;
};

// Mini-batch joint training. Penalties are weighted zero before
// warmup_epochs. Per-epoch train and val rows are appended to the history
// CSV; the checkpoint with the lowest validation total is retained. With
// out_dir nonempty, writes history.csv plus field_best / recon_best
// checkpoint pairs there (atomically). Non-finite loss aborts with
// integration_error naming epoch and batch.
TrainResult train_joint(const TrainData& data, const TrainSetup& setup,
                        const TrainConfig& cfg, const std::string& out_dir = "");

struct EvalReport {
  std::string csv;  // case,method,psnr_db,ssim
  double mean_psnr_learned = 0.0, mean_psnr_fixed = 0.0;
  double mean_ssim_learned = 0.0, mean_ssim_fixed = 0.0;
  double psnr_gain_db = 0.0;  // learned - fixed
  double ssim_gain = 0.0;
  WilcoxonResult psnr_test;
  WilcoxonResult ssim_test;
};

// Runs both bundles over the test set and pairs the per-case metrics.
// Identical per-case metrics (e.g. a model against itself) surface the
// Wilcoxon undefined-test error.
EvalReport evaluate(const TrainSetup& learned, const TrainSetup& fixed,
                    const std::vector<TrainSample>& test_set, const TrainConfig& cfg);

// ---- run configuration ------------------------------------------------

// The experiment around the optimizer: geometry, models, dataset.
struct ProblemConfig {
  int grid = 64;
  std::string init = "radial";  // radial | cartesian | spiral
  int shots = 8;
  int samples_per_shot = 200;   // must be kQueriesPerSegment * n_control
  int n_control = 20;
  double k_extent = 0.47;       // radial/spiral reach; inside the clamp band
  double center_fraction = 0.1; // cartesian center block
  double spiral_turns = 8.0;
  int hidden = 64;
  bool include_time = true;
  int recon_levels = 2;
  int recon_base = 8;
  int coils = 4;
  int phantoms = 40;
  double train_frac = 0.5, val_frac = 0.1, test_frac = 0.4;
  int ellipses = 8;             // random ellipses added per phantom
};

struct RunConfig {
  TrainConfig train;
  ProblemConfig problem;
};

RunConfig default_run_config();
// Strict structural parse: unknown keys and wrong types are config_errors
// naming the key. Relational checks live in validate_run_config so overrides
// can be applied one at a time without tripping on intermediate states.
RunConfig parse_run_config(const std::string& json_text);
// warmup <= epochs, learning-rate signs, samples_per_shot vs n_control,
// limits.grid_size == problem.grid, fraction sum, initializer name.
void validate_run_config(const RunConfig& cfg);
// Read + parse + validate.
RunConfig load_run_config(const std::string& path);
std::string run_config_json(const RunConfig& cfg);
// Dotted-path override, e.g. "train.lr_field=0.02" or "problem.shots=16".
// The leading train./problem. may be omitted when the key is unambiguous.
void set_config_key(RunConfig& cfg, const std::string& assignment);

Trajectory build_initializer(const ProblemConfig& p, const PhysicsLimits& limits);
TrainSample make_train_sample(int grid, int coils, std::uint64_t seed, int ellipses);

struct SplitData {
  std::vector<TrainSample> train, val, test;
};
SplitData build_dataset(const ProblemConfig& p, std::uint64_t seed);

// learned_field=false zeroes the field weights (the fixed baseline); the
// recon init is seed-identical either way so the comparison is paired.
TrainSetup build_setup(const ProblemConfig& p, const PhysicsLimits& limits,
                       std::uint64_t seed, bool learned_field);

}  // namespace ktraj
