#include "ktraj/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "ktraj/checkpoint.hpp"
#include "ktraj/errors.hpp"
#include "ktraj/rng.hpp"

namespace ktraj {

namespace {

constexpr double kClampBand = 0.47;
constexpr double kClampLimit = 0.4999;  // strictly below the open band edge

std::string stage_msg(const char* stage, const char* what) {
  return std::string(stage) + ": " + what;
}

// Reruns component failures with the pipeline stage name prefixed, keeping
// the concrete exception type.
template <class Fn>
decltype(auto) staged(const char* stage, Fn&& fn) {
  try {
    return std::forward<Fn>(fn)();
  } catch (const argument_error& e) {
    throw argument_error(stage_msg(stage, e.what()));
  } catch (const config_error& e) {
    throw config_error(stage_msg(stage, e.what()));
  } catch (const integration_error& e) {
    throw integration_error(stage_msg(stage, e.what()));
  } catch (const io_error& e) {
    throw io_error(stage_msg(stage, e.what()));
  } catch (const undefined_test_error& e) {
    throw undefined_test_error(stage_msg(stage, e.what()));
  }
}

// One shared f_theta on R^2 applied to every segment of the stacked state.
class StackedFieldOde final : public VectorField {
 public:
  StackedFieldOde(const FieldParams& fp, int blocks) : fp_(fp), blocks_(blocks) {
    scratch_.resize(fp.count());
  }
  int dim() const override { return 2 * blocks_; }
  int param_count() const override { return static_cast<int>(fp_.count()); }
  void eval(const double* y, double t, double* dy) const override {
    for (int b = 0; b < blocks_; ++b) field_eval(fp_, y + 2 * b, t, dy + 2 * b);
  }
  void vjp(const double* y, double t, const double* cot, double* cot_state,
           double* cot_params, double& cot_time) const override {
    const std::size_t p = fp_.count();
    std::fill(cot_params, cot_params + p, 0.0);
    cot_time = 0.0;
    for (int b = 0; b < blocks_; ++b) {
      double ct = 0.0;
      field_vjp(fp_, y + 2 * b, t, cot + 2 * b, cot_state + 2 * b, scratch_.data(), ct);
      for (std::size_t i = 0; i < p; ++i) cot_params[i] += scratch_[i];
      cot_time += ct;
    }
  }

 private:
  const FieldParams& fp_;
  int blocks_;
  mutable std::vector<double> scratch_;
};

std::vector<double> query_times() {
  std::vector<double> t(kQueriesPerSegment);
  for (int j = 0; j < kQueriesPerSegment; ++j)
    t[j] = static_cast<double>(j) / (kQueriesPerSegment - 1);
  return t;
}

void pair_norms(const std::vector<double>& xy, std::vector<double>& norms) {
  norms.resize(xy.size() / 2);
  for (std::size_t i = 0; i < norms.size(); ++i)
    norms[i] = std::hypot(xy[2 * i], xy[2 * i + 1]);
}

// d(lambda1*pen_v + lambda2*pen_a)/d(points), accumulated into gpts. The
// penalties are the mean hinge excess of the velocity/acceleration vector
// norms, mirroring kinematics() and check_limits().
void add_penalty_grads(std::vector<double>& gpts, const Trajectory& traj,
                       const PhysicsLimits& lim, double l1w, double l2w) {
  if (l1w == 0.0 && l2w == 0.0) return;
  const double scale = lim.grid_size / lim.fov;
  const double inv_dt = 1.0 / traj.dwell;
  const double cv = scale * inv_dt;
  const double ca = scale * inv_dt * inv_dt;
  const double vlim = lim.gamma * lim.g_max;
  const double alim = lim.gamma * lim.s_max;
  const int sps = traj.samples_per_shot;
  const int nv = sps - 1, na = sps - 2;
  const double n_v = static_cast<double>(traj.shots) * nv;
  const double n_a = static_cast<double>(traj.shots) * na;
  auto idx = [&](int s, int i, int d) {
    return (static_cast<std::size_t>(s) * sps + i) * 2 + d;
  };
  for (int s = 0; s < traj.shots; ++s) {
    if (l1w != 0.0) {
      for (int i = 0; i < nv; ++i) {
        const double vx = (traj.at(s, i + 1, 0) - traj.at(s, i, 0)) * cv;
        const double vy = (traj.at(s, i + 1, 1) - traj.at(s, i, 1)) * cv;
        const double n = std::hypot(vx, vy);
        if (n <= vlim) continue;
        const double coef = l1w / (n_v * n);
        const double gx = coef * vx * cv, gy = coef * vy * cv;
        gpts[idx(s, i + 1, 0)] += gx;
        gpts[idx(s, i, 0)] -= gx;
        gpts[idx(s, i + 1, 1)] += gy;
        gpts[idx(s, i, 1)] -= gy;
      }
    }
    if (l2w != 0.0) {
      for (int i = 0; i < na; ++i) {
        const double ax =
            (traj.at(s, i + 2, 0) - 2.0 * traj.at(s, i + 1, 0) + traj.at(s, i, 0)) * ca;
        const double ay =
            (traj.at(s, i + 2, 1) - 2.0 * traj.at(s, i + 1, 1) + traj.at(s, i, 1)) * ca;
        const double n = std::hypot(ax, ay);
        if (n <= alim) continue;
        const double coef = l2w / (n_a * n);
        const double gx = coef * ax * ca, gy = coef * ay * ca;
        gpts[idx(s, i + 2, 0)] += gx;
        gpts[idx(s, i + 1, 0)] -= 2.0 * gx;
        gpts[idx(s, i, 0)] += gx;
        gpts[idx(s, i + 2, 1)] += gy;
        gpts[idx(s, i + 1, 1)] -= 2.0 * gy;
        gpts[idx(s, i, 1)] += gy;
      }
    }
  }
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("train_joint: cannot open " + tmp);
    f << text;
    if (!f) throw io_error("train_joint: write failure on " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw io_error("train_joint: cannot rename " + tmp);
}

struct RunningStats {
  double total = 0, l1 = 0, ssim_l = 0, pv = 0, pa = 0;
  double psnr_s = 0, ssim_s = 0, fv = 0, fa = 0;
  int n = 0;

  void add(const PipelineResult& r, const TrainSample& s) {
    total += r.loss.total;
    l1 += r.loss.l1;
    ssim_l += r.loss.ssim_loss;
    pv += r.loss.penalty_v;
    pa += r.loss.penalty_a;
    psnr_s += psnr(r.output, s.image, 1.0);
    ssim_s += ssim(r.output, s.image, s.grid, s.grid, 1.0).mean;
    fv += r.frac_velocity_ok;
    fa += r.frac_accel_ok;
    ++n;
  }
  std::string row(int epoch, const char* split) const {
    const double k = n ? 1.0 / n : 0.0;
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "%d,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", epoch,
                  split, total * k, l1 * k, ssim_l * k, pv * k, pa * k, psnr_s * k,
                  ssim_s * k, fv * k, fa * k);
    return buf;
  }
};

}  // namespace

double smooth_clamp(double v) {
  const double a = std::fabs(v);
  if (a <= kClampBand) return v;
  const double w = kClampLimit - kClampBand;
  return std::copysign(kClampBand + w * std::tanh((a - kClampBand) / w), v);
}

double smooth_clamp_deriv(double v) {
  const double a = std::fabs(v);
  if (a <= kClampBand) return 1.0;
  const double w = kClampLimit - kClampBand;
  const double th = std::tanh((a - kClampBand) / w);
  return 1.0 - th * th;
}

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw config_error("train.epochs must be >= 1");
  if (cfg.warmup_epochs < 0 || cfg.warmup_epochs > cfg.epochs)
    throw config_error("train.warmup_epochs must lie in [0, epochs]");
  if (!(cfg.lr_field >= 0.0))
    throw config_error("train.lr_field must be >= 0 (0 freezes the field)");
  if (!(cfg.lr_recon > 0.0)) throw config_error("train.lr_recon must be > 0");
  if (!(cfg.lambda1 >= 0.0)) throw config_error("train.lambda1 must be >= 0");
  if (!(cfg.lambda2 >= 0.0)) throw config_error("train.lambda2 must be >= 0");
  if (cfg.batch_size < 1) throw config_error("train.batch_size must be >= 1");
  if (cfg.limits.grid_size < 1) throw config_error("train.limits.grid_size must be >= 1");
  if (!(cfg.limits.fov > 0.0)) throw config_error("train.limits.fov must be > 0");
  if (!(cfg.limits.dwell > 0.0)) throw config_error("train.limits.dwell must be > 0");
  if (!(cfg.limits.gamma > 0.0)) throw config_error("train.limits.gamma must be > 0");
}

Trajectory assemble_trajectory(const FieldParams& field, const Trajectory& init,
                               const ControlState& control, const OdeConfig& ode,
                               std::vector<double>* raw_out,
                               std::vector<std::vector<double>>* states_out) {
  const int q = kQueriesPerSegment;
  const int shots = init.shots, sps = init.samples_per_shot, nc = control.n_control;

  staged("config", [&] {
    if (shots < 1 || sps < 1) throw argument_error("initializer trajectory is empty");
    if (nc < 1 || sps != q * nc)
      throw argument_error("samples_per_shot must equal " + std::to_string(q) +
                           " * n_control");
    if (control.values.size() != static_cast<std::size_t>(shots) * nc * 2)
      throw argument_error("control state does not match the trajectory");
    if (field.state_dim != 2) throw argument_error("field state_dim must be 2");
    if (field.weights.size() != field.count())
      throw argument_error("field weight vector has the wrong length");
    if (!(init.dwell > 0.0)) throw argument_error("trajectory dwell must be > 0");
  });

  // Stacked ODE: every segment from its own control point over t in [0,1].
  const int segs = shots * nc;
  const std::vector<double> tgrid = query_times();
  StackedFieldOde fode(field, segs);
  std::vector<std::vector<double>> states =
      staged("ode", [&] { return integrate(fode, control.values, tgrid, ode); });

  // Delta-form assembly onto the initializer samples, then the band clamp.
  std::vector<double> raw(static_cast<std::size_t>(shots) * sps * 2);
  Trajectory assembled;
  assembled.shots = shots;
  assembled.samples_per_shot = sps;
  assembled.dwell = init.dwell;
  assembled.points.resize(raw.size());
  for (int s = 0; s < shots; ++s)
    for (int i = 0; i < nc; ++i) {
      const int seg = s * nc + i;
      for (int j = 0; j < q; ++j)
        for (int d = 0; d < 2; ++d) {
          const std::size_t e = (static_cast<std::size_t>(s) * sps + i * q + j) * 2 + d;
          raw[e] = init.at(s, i * q + j, d) +
                   (states[j][2 * seg + d] - states[0][2 * seg + d]);
          assembled.points[e] = smooth_clamp(raw[e]);
        }
    }
  if (raw_out) *raw_out = std::move(raw);
  if (states_out) *states_out = std::move(states);
  return assembled;
}

PipelineResult forward_pipeline(const FieldParams& field, const ReconParams& recon,
                                const Trajectory& init, const ControlState& control,
                                const TrainSample& sample, const TrainConfig& cfg,
                                PipelineTrace* trace, double loss_scale) {
  const int shots = init.shots, sps = init.samples_per_shot, nc = control.n_control;
  const int grid = sample.grid;

  staged("config", [&] {
    if (grid < 1 || sample.image.size() != static_cast<std::size_t>(grid) * grid)
      throw argument_error("sample image does not match its grid");
    if (cfg.limits.grid_size != grid)
      throw argument_error("limits.grid_size must match the sample grid");
    if (sample.coils.maps.empty()) throw argument_error("sample provides no coil maps");
    for (const auto& m : sample.coils.maps)
      if (m.grid != grid) throw argument_error("coil map grid does not match the sample");
    if (!(loss_scale > 0.0)) throw argument_error("loss_scale must be > 0");
  });

  std::vector<double> raw;
  std::vector<std::vector<double>> states;
  Trajectory assembled = assemble_trajectory(field, init, control, cfg.ode, &raw, &states);
  const std::vector<double> tgrid = query_times();

  // Kinematic band penalties on the assembled (physical) trajectory.
  double pen_v = 0.0, pen_a = 0.0;
  ConstraintReport limits_rep;
  staged("penalty", [&] {
    const Kinematics kin = kinematics(assembled, cfg.limits);
    std::vector<double> norms;
    pair_norms(kin.velocity, norms);
    pen_v = shrinkage_penalty(norms, cfg.limits.gamma * cfg.limits.g_max);
    pair_norms(kin.acceleration, norms);
    pen_a = shrinkage_penalty(norms, cfg.limits.gamma * cfg.limits.s_max);
    limits_rep = check_limits(kin, cfg.limits);
  });

  // Simulated acquisition and adjoint images, one coil at a time.
  const int coils = static_cast<int>(sample.coils.maps.size());
  const double adjoint_norm = 1.0 / (static_cast<double>(shots) * sps);
  std::vector<ComplexImage> coil_images(coils);
  std::vector<std::complex<double>> signals(static_cast<std::size_t>(coils) * shots * sps);
  std::vector<ComplexImage> coil_adjoint(coils);
  staged("acquisition", [&] {
    for (int c = 0; c < coils; ++c) {
      coil_images[c] = make_image(grid);
      for (std::size_t i = 0; i < coil_images[c].data.size(); ++i)
        coil_images[c].data[i] = sample.coils.maps[c].data[i] * sample.image[i];
      const auto sig = nufft_forward(coil_images[c], assembled.points, cfg.gridding);
      std::copy(sig.begin(), sig.end(),
                signals.begin() + static_cast<std::size_t>(c) * shots * sps);
    }
  });
  staged("adjoint", [&] {
    for (int c = 0; c < coils; ++c) {
      const std::vector<std::complex<double>> sig(
          signals.begin() + static_cast<std::size_t>(c) * shots * sps,
          signals.begin() + static_cast<std::size_t>(c + 1) * shots * sps);
      coil_adjoint[c] = nufft_adjoint(sig, assembled.points, grid, cfg.gridding);
      for (auto& z : coil_adjoint[c].data) z *= adjoint_norm;
    }
  });

  // Coil combine, recon net, and the image loss, all on one tape.
  auto tape = std::make_unique<diff::Tape>();
  diff::TapeTensor input_leaf, root;
  ReconTrace rtrace;
  LossReport rep;
  PipelineResult out;
  staged("recon", [&] {
    std::vector<double> r = rss(coil_adjoint);
    input_leaf = tape->leaf({1, grid, grid}, std::move(r), true);
    rtrace = recon_forward(recon, *tape, input_leaf);
  });
  staged("loss", [&] {
    diff::TapeTensor gt = tape->leaf({1, grid, grid}, sample.image, false);
    diff::TapeTensor l1n = l1_node(*tape, rtrace.output, gt);
    diff::TapeTensor sn = ssim_node(*tape, rtrace.output, gt, 1.0);
    diff::TapeTensor one = tape->leaf({1}, {1.0}, false);
    diff::TapeTensor om = tape->add(one, tape->mul_scalar(sn, -1.0));
    diff::TapeTensor image_node = tape->add(l1n, om);
    root = loss_scale == 1.0 ? image_node : tape->mul_scalar(image_node, loss_scale);
    rep.l1 = tape->values(l1n)[0];
    rep.ssim_loss = tape->values(om)[0];
    rep.image_loss = tape->values(image_node)[0];
    rep.penalty_v = pen_v;
    rep.penalty_a = pen_a;
    double total = rep.image_loss;
    if (cfg.lambda1 != 0.0) total += cfg.lambda1 * pen_v;
    if (cfg.lambda2 != 0.0) total += cfg.lambda2 * pen_a;
    rep.total = loss_scale == 1.0 ? total : loss_scale * total;
    out.output = tape->values(rtrace.output);
  });

  out.loss = rep;
  out.frac_velocity_ok = limits_rep.frac_velocity_ok;
  out.frac_accel_ok = limits_rep.frac_accel_ok;

  if (trace) {
    trace->grid = grid;
    trace->shots = shots;
    trace->samples_per_shot = sps;
    trace->n_control = nc;
    trace->t_grid = tgrid;
    trace->states = std::move(states);
    trace->raw_points = std::move(raw);
    trace->assembled = std::move(assembled);
    trace->coil_signals = std::move(signals);
    trace->coil_images = std::move(coil_images);
    trace->coil_adjoint = std::move(coil_adjoint);
    trace->adjoint_norm = adjoint_norm;
    trace->tape = std::move(tape);
    trace->input_leaf = input_leaf;
    trace->loss_node = root;
    trace->recon_trace = rtrace;
    trace->field = field;
    trace->recon = recon;
    trace->lambda1 = cfg.lambda1 * loss_scale;
    trace->lambda2 = cfg.lambda2 * loss_scale;
    trace->loss_scale = loss_scale;
    trace->limits = cfg.limits;
    trace->gridding = cfg.gridding;
    trace->ode = cfg.ode;
    trace->loss = rep;
  }
  return out;
}

PipelineGrads backward_pipeline(PipelineTrace& tr) {
  if (!tr.tape) throw argument_error("backward_pipeline: trace has no tape");
  staged("loss", [&] { tr.tape->backward(tr.loss_node); });

  PipelineGrads g;
  g.recon = staged("recon", [&] { return recon_param_grad(*tr.tape, tr.recon, tr.recon_trace); });

  const int grid = tr.grid;
  const int n = grid * grid;
  const int coils = static_cast<int>(tr.coil_adjoint.size());
  const std::size_t m = static_cast<std::size_t>(tr.shots) * tr.samples_per_shot;
  const std::vector<double>& r = tr.tape->values(tr.input_leaf);
  std::vector<double> gr(n, 0.0);
  if (tr.tape->has_grad(tr.input_leaf)) gr = tr.tape->grad(tr.input_leaf);

  // d total / d points: the acquisition path (signal depends on k), the
  // adjoint-operator path (gridding back also depends on k), then the
  // penalty subgradients, all chained through the band clamp.
  std::vector<double> gpts(m * 2, 0.0);
  staged("gradient", [&] {
    for (int c = 0; c < coils; ++c) {
      ComplexImage chat = make_image(grid);
      for (int i = 0; i < n; ++i)
        chat.data[i] = r[i] > 0.0
                           ? tr.coil_adjoint[c].data[i] * (gr[i] / r[i])
                           : std::complex<double>(0.0, 0.0);
      std::vector<std::complex<double>> cot_sig =
          nufft_forward(chat, tr.assembled.points, tr.gridding);
      for (auto& z : cot_sig) z *= tr.adjoint_norm;
      const std::vector<double> g1 =
          nufft_point_grad(tr.coil_images[c], tr.assembled.points, cot_sig, tr.gridding);
      const std::vector<std::complex<double>> sig(tr.coil_signals.begin() + c * m,
                                                  tr.coil_signals.begin() + (c + 1) * m);
      const std::vector<double> g2 =
          nufft_point_grad(chat, tr.assembled.points, sig, tr.gridding);
      for (std::size_t i = 0; i < gpts.size(); ++i)
        gpts[i] += g1[i] + tr.adjoint_norm * g2[i];
    }
    add_penalty_grads(gpts, tr.assembled, tr.limits, tr.lambda1, tr.lambda2);
  });

  // Through the clamp, then gather per-query cotangents for the stacked state.
  const int q = kQueriesPerSegment, nc = tr.n_control, sps = tr.samples_per_shot;
  const int segs = tr.shots * nc;
  std::vector<std::vector<double>> cots(q, std::vector<double>(2 * segs, 0.0));
  for (int s = 0; s < tr.shots; ++s)
    for (int i = 0; i < nc; ++i) {
      const int seg = s * nc + i;
      for (int j = 0; j < q; ++j)
        for (int d = 0; d < 2; ++d) {
          const std::size_t e = (static_cast<std::size_t>(s) * sps + i * q + j) * 2 + d;
          const double gv = gpts[e] * smooth_clamp_deriv(tr.raw_points[e]);
          cots[j][2 * seg + d] += gv;
          cots[0][2 * seg + d] -= gv;  // the delta subtracts the segment start
        }
    }

  StackedFieldOde fode(tr.field, segs);
  const AdjointBundle bundle = staged("ode", [&] {
    return integrate_adjoint(fode, tr.states.back(), tr.t_grid, cots, tr.ode);
  });
  g.field = bundle.a_params;
  return g;
}

AdamState make_adam_state(std::size_t n) {
  AdamState st;
  st.m.assign(n, 0.0);
  st.v.assign(n, 0.0);
  return st;
}

void adam_step(std::vector<double>& params, const std::vector<double>& grads,
               AdamState& state, double lr) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size())
    throw argument_error("adam_step: parameter, gradient, and state sizes must match");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

TrainResult train_joint(const TrainData& data, const TrainSetup& setup,
                        const TrainConfig& cfg, const std::string& out_dir) {
  validate_train_config(cfg);
  if (data.train.empty()) throw argument_error("train_joint: training set is empty");
  if (data.val.empty()) throw argument_error("train_joint: validation split required");

  const ControlState control = extract_control_points(setup.init, setup.n_control);
  FieldParams field = setup.field;
  ReconParams recon = setup.recon;
  AdamState adam_f = make_adam_state(field.weights.size());
  AdamState adam_r = make_adam_state(recon.weights.size());
  Rng shuffler(Rng::mix(cfg.seed, 0x7368756666u));

  TrainResult out;
  out.best_val_total = std::numeric_limits<double>::infinity();
  out.history = "epoch,split,total,l1,ssim_loss,pen_v,pen_a,psnr,ssim,frac_v_ok,frac_a_ok\n";

  const int n_train = static_cast<int>(data.train.size());
  std::vector<int> order(n_train);
  for (int i = 0; i < n_train; ++i) order[i] = i;

  auto save_best = [&] {
    if (out_dir.empty()) return;
    save_field(out.field, out_dir + "/field_best");
    Checkpoint ck;
    Tensor w;
    w.name = "weights";
    w.shape = {static_cast<std::uint64_t>(out.recon.weights.size())};
    w.data = out.recon.weights;
    ck.tensors.push_back(std::move(w));
    ck.meta.numbers["levels"] = out.recon.levels;
    ck.meta.numbers["base_channels"] = out.recon.base_channels;
    ck.meta.numbers["best_epoch"] = out.best_epoch;
    ck.meta.numbers["best_val_total"] = out.best_val_total;
    save_checkpoint(ck, out_dir + "/recon_best");
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    TrainConfig ecfg = cfg;
    if (epoch < cfg.warmup_epochs) {
      ecfg.lambda1 = 0.0;  // penalties contribute exactly nothing during warm-up
      ecfg.lambda2 = 0.0;
    }

    shuffler.shuffle(order);
    RunningStats tstat;
    int batch_index = 0;
    for (int start = 0; start < n_train; start += cfg.batch_size, ++batch_index) {
      const int count = std::min(cfg.batch_size, n_train - start);
      std::vector<double> gfield(field.weights.size(), 0.0);
      std::vector<double> grecon(recon.weights.size(), 0.0);
      for (int k = 0; k < count; ++k) {
        const TrainSample& s = data.train[order[start + k]];
        PipelineTrace trace;
        const PipelineResult res =
            forward_pipeline(field, recon, setup.init, control, s, ecfg, &trace);
        if (!std::isfinite(res.loss.total))
          throw integration_error("train_joint: non-finite loss at epoch " +
                                  std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_index));
        const PipelineGrads g = backward_pipeline(trace);
        for (std::size_t i = 0; i < gfield.size(); ++i) gfield[i] += g.field[i];
        for (std::size_t i = 0; i < grecon.size(); ++i) grecon[i] += g.recon[i];
        tstat.add(res, s);
      }
      const double inv = 1.0 / count;
      for (double& v : gfield) v *= inv;
      for (double& v : grecon) v *= inv;
      adam_step(field.weights, gfield, adam_f, cfg.lr_field);
      adam_step(recon.weights, grecon, adam_r, cfg.lr_recon);
    }

    RunningStats vstat;
    for (const TrainSample& s : data.val) {
      const PipelineResult res =
          forward_pipeline(field, recon, setup.init, control, s, ecfg);
      if (!std::isfinite(res.loss.total))
        throw integration_error("train_joint: non-finite validation loss at epoch " +
                                std::to_string(epoch));
      vstat.add(res, s);
    }

    out.history += tstat.row(epoch, "train");
    out.history += vstat.row(epoch, "val");

    const double val_total = vstat.total / vstat.n;
    if (val_total < out.best_val_total) {
      out.best_val_total = val_total;
      out.best_epoch = epoch;
      out.field = field;
      out.recon = recon;
      save_best();
    }
  }

  if (!out_dir.empty()) write_text_atomic(out_dir + "/history.csv", out.history);
  return out;
}

EvalReport evaluate(const TrainSetup& learned, const TrainSetup& fixed,
                    const std::vector<TrainSample>& test_set, const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (test_set.empty()) throw argument_error("evaluate: test set is empty");

  const ControlState cl = extract_control_points(learned.init, learned.n_control);
  const ControlState cf = extract_control_points(fixed.init, fixed.n_control);

  EvalReport rep;
  rep.csv = "case,method,psnr_db,ssim\n";
  std::vector<double> pl, pf, sl, sf;
  char buf[160];
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const TrainSample& s = test_set[i];
    const PipelineResult a =
        forward_pipeline(learned.field, learned.recon, learned.init, cl, s, cfg);
    const PipelineResult b =
        forward_pipeline(fixed.field, fixed.recon, fixed.init, cf, s, cfg);
    const double pa = psnr(a.output, s.image, 1.0);
    const double pb = psnr(b.output, s.image, 1.0);
    const double sa = ssim(a.output, s.image, s.grid, s.grid, 1.0).mean;
    const double sb = ssim(b.output, s.image, s.grid, s.grid, 1.0).mean;
    pl.push_back(pa);
    pf.push_back(pb);
    sl.push_back(sa);
    sf.push_back(sb);
    std::snprintf(buf, sizeof buf, "%zu,learned,%.17g,%.17g\n", i, pa, sa);
    rep.csv += buf;
    std::snprintf(buf, sizeof buf, "%zu,fixed,%.17g,%.17g\n", i, pb, sb);
    rep.csv += buf;
  }
  const double inv = 1.0 / static_cast<double>(test_set.size());
  for (std::size_t i = 0; i < pl.size(); ++i) {
    rep.mean_psnr_learned += pl[i] * inv;
    rep.mean_psnr_fixed += pf[i] * inv;
    rep.mean_ssim_learned += sl[i] * inv;
    rep.mean_ssim_fixed += sf[i] * inv;
  }
  rep.psnr_gain_db = rep.mean_psnr_learned - rep.mean_psnr_fixed;
  rep.ssim_gain = rep.mean_ssim_learned - rep.mean_ssim_fixed;
  rep.psnr_test = wilcoxon_signed_rank(pl, pf);  // sign convention: learned - fixed
  rep.ssim_test = wilcoxon_signed_rank(sl, sf);
  return rep;
}

// ---- run configuration --------------------------------------------------

namespace {

using nlohmann::json;

void require_keys(const json& j, const std::string& scope,
                  std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw config_error("config: " + (scope.empty() ? std::string("document") : scope) +
                       " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        ok = true;
        break;
      }
    if (!ok) throw config_error("config: unknown key '" + scope + it.key() + "'");
  }
}

double getd(const json& j, const std::string& scope, const char* key, double cur) {
  if (!j.contains(key)) return cur;
  const json& v = j.at(key);
  if (!v.is_number()) throw config_error("config: " + scope + key + " must be a number");
  return v.get<double>();
}

int geti(const json& j, const std::string& scope, const char* key, int cur) {
  if (!j.contains(key)) return cur;
  const json& v = j.at(key);
  if (!v.is_number_integer())
    throw config_error("config: " + scope + key + " must be an integer");
  return v.get<int>();
}

std::uint64_t getu(const json& j, const std::string& scope, const char* key,
                   std::uint64_t cur) {
  if (!j.contains(key)) return cur;
  const json& v = j.at(key);
  if (!(v.is_number_integer() && v.get<double>() >= 0))
    throw config_error("config: " + scope + key + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}

bool getb(const json& j, const std::string& scope, const char* key, bool cur) {
  if (!j.contains(key)) return cur;
  const json& v = j.at(key);
  if (!v.is_boolean()) throw config_error("config: " + scope + key + " must be a boolean");
  return v.get<bool>();
}

std::string gets(const json& j, const std::string& scope, const char* key,
                 const std::string& cur) {
  if (!j.contains(key)) return cur;
  const json& v = j.at(key);
  if (!v.is_string()) throw config_error("config: " + scope + key + " must be a string");
  return v.get<std::string>();
}

bool subtree_has(const json& j, const std::vector<std::string>& parts) {
  const json* cur = &j;
  for (const std::string& p : parts) {
    if (!cur->is_object() || !cur->contains(p)) return false;
    cur = &cur->at(p);
  }
  return true;
}

}  // namespace

RunConfig default_run_config() {
  RunConfig cfg;
  // Kinematics at the segment timescale: the per-sample spacing is the 4 us
  // dwell scaled by the 10 samples each control segment spans. At the raw
  // 4 us spacing the slew limit pins every sample triple to within 4.7e-4
  // of collinear, which anchors the trajectory to the initializer and leaves
  // nothing for the field to learn.
  cfg.train.limits.dwell = 4e-6 * kQueriesPerSegment;
  return cfg;
}

RunConfig parse_run_config(const std::string& json_text) {
  json j = json::parse(json_text, nullptr, false);
  if (j.is_discarded()) throw config_error("config: invalid JSON");
  require_keys(j, "", {"train", "problem"});

  RunConfig cfg = default_run_config();
  if (j.contains("train")) {
    const json& t = j.at("train");
    require_keys(t, "train.",
                 {"epochs", "warmup_epochs", "lr_field", "lr_recon", "lambda1", "lambda2",
                  "batch_size", "seed", "ode", "gridding", "limits"});
    TrainConfig& c = cfg.train;
    c.epochs = geti(t, "train.", "epochs", c.epochs);
    c.warmup_epochs = geti(t, "train.", "warmup_epochs", c.warmup_epochs);
    c.lr_field = getd(t, "train.", "lr_field", c.lr_field);
    c.lr_recon = getd(t, "train.", "lr_recon", c.lr_recon);
    c.lambda1 = getd(t, "train.", "lambda1", c.lambda1);
    c.lambda2 = getd(t, "train.", "lambda2", c.lambda2);
    c.batch_size = geti(t, "train.", "batch_size", c.batch_size);
    c.seed = getu(t, "train.", "seed", c.seed);
    if (t.contains("ode")) {
      const json& o = t.at("ode");
      require_keys(o, "train.ode.", {"rtol", "atol", "max_steps", "initial_step", "safety"});
      c.ode.rtol = getd(o, "train.ode.", "rtol", c.ode.rtol);
      c.ode.atol = getd(o, "train.ode.", "atol", c.ode.atol);
      c.ode.max_steps = geti(o, "train.ode.", "max_steps", c.ode.max_steps);
      c.ode.initial_step = getd(o, "train.ode.", "initial_step", c.ode.initial_step);
      c.ode.safety = getd(o, "train.ode.", "safety", c.ode.safety);
    }
    if (t.contains("gridding")) {
      const json& g = t.at("gridding");
      require_keys(g, "train.gridding.", {"oversampling", "kernel_width", "kernel_beta"});
      c.gridding.oversampling = getd(g, "train.gridding.", "oversampling", c.gridding.oversampling);
      c.gridding.kernel_width = geti(g, "train.gridding.", "kernel_width", c.gridding.kernel_width);
      c.gridding.kernel_beta = getd(g, "train.gridding.", "kernel_beta", c.gridding.kernel_beta);
    }
    if (t.contains("limits")) {
      const json& l = t.at("limits");
      require_keys(l, "train.limits.",
                   {"g_max", "s_max", "gamma", "dwell", "fov", "grid_size"});
      c.limits.g_max = getd(l, "train.limits.", "g_max", c.limits.g_max);
      c.limits.s_max = getd(l, "train.limits.", "s_max", c.limits.s_max);
      c.limits.gamma = getd(l, "train.limits.", "gamma", c.limits.gamma);
      c.limits.dwell = getd(l, "train.limits.", "dwell", c.limits.dwell);
      c.limits.fov = getd(l, "train.limits.", "fov", c.limits.fov);
      c.limits.grid_size = geti(l, "train.limits.", "grid_size", c.limits.grid_size);
    }
  }
  if (j.contains("problem")) {
    const json& p = j.at("problem");
    require_keys(p, "problem.",
                 {"grid", "init", "shots", "samples_per_shot", "n_control", "k_extent",
                  "center_fraction", "spiral_turns", "hidden", "include_time",
                  "recon_levels", "recon_base", "coils", "phantoms", "train_frac",
                  "val_frac", "test_frac", "ellipses"});
    ProblemConfig& c = cfg.problem;
    c.grid = geti(p, "problem.", "grid", c.grid);
    c.init = gets(p, "problem.", "init", c.init);
    c.shots = geti(p, "problem.", "shots", c.shots);
    c.samples_per_shot = geti(p, "problem.", "samples_per_shot", c.samples_per_shot);
    c.n_control = geti(p, "problem.", "n_control", c.n_control);
    c.k_extent = getd(p, "problem.", "k_extent", c.k_extent);
    c.center_fraction = getd(p, "problem.", "center_fraction", c.center_fraction);
    c.spiral_turns = getd(p, "problem.", "spiral_turns", c.spiral_turns);
    c.hidden = geti(p, "problem.", "hidden", c.hidden);
    c.include_time = getb(p, "problem.", "include_time", c.include_time);
    c.recon_levels = geti(p, "problem.", "recon_levels", c.recon_levels);
    c.recon_base = geti(p, "problem.", "recon_base", c.recon_base);
    c.coils = geti(p, "problem.", "coils", c.coils);
    c.phantoms = geti(p, "problem.", "phantoms", c.phantoms);
    c.train_frac = getd(p, "problem.", "train_frac", c.train_frac);
    c.val_frac = getd(p, "problem.", "val_frac", c.val_frac);
    c.test_frac = getd(p, "problem.", "test_frac", c.test_frac);
    c.ellipses = geti(p, "problem.", "ellipses", c.ellipses);
  }
  return cfg;
}

void validate_run_config(const RunConfig& cfg) {
  validate_train_config(cfg.train);
  const ProblemConfig& p = cfg.problem;
  if (p.grid < 16) throw config_error("problem.grid must be >= 16");
  if (p.init != "radial" && p.init != "cartesian" && p.init != "spiral")
    throw config_error("problem.init must be radial, cartesian, or spiral");
  if (p.shots < 1) throw config_error("problem.shots must be >= 1");
  if (p.n_control < 1) throw config_error("problem.n_control must be >= 1");
  if (p.samples_per_shot != kQueriesPerSegment * p.n_control)
    throw config_error("problem.samples_per_shot must equal " +
                       std::to_string(kQueriesPerSegment) + " * problem.n_control");
  if (!(p.k_extent > 0.0 && p.k_extent <= 0.5))
    throw config_error("problem.k_extent must lie in (0, 0.5]");
  if (p.hidden < 1) throw config_error("problem.hidden must be >= 1");
  if (p.recon_levels < 1) throw config_error("problem.recon_levels must be >= 1");
  if (p.recon_base < 1) throw config_error("problem.recon_base must be >= 1");
  if (p.coils < 1) throw config_error("problem.coils must be >= 1");
  if (p.phantoms < 3) throw config_error("problem.phantoms must be >= 3");
  if (p.ellipses < 0) throw config_error("problem.ellipses must be >= 0");
  const double fsum = p.train_frac + p.val_frac + p.test_frac;
  if (std::fabs(fsum - 1.0) > 1e-9)
    throw config_error("problem split fractions must sum to 1");
  if (cfg.train.limits.grid_size != p.grid)
    throw config_error("train.limits.grid_size must match problem.grid");
  if (p.grid % (1 << p.recon_levels) != 0)
    throw config_error("problem.grid must be divisible by 2^recon_levels");
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  RunConfig cfg = parse_run_config(ss.str());
  validate_run_config(cfg);
  return cfg;
}

std::string run_config_json(const RunConfig& cfg) {
  json j;
  json& t = j["train"];
  t["epochs"] = cfg.train.epochs;
  t["warmup_epochs"] = cfg.train.warmup_epochs;
  t["lr_field"] = cfg.train.lr_field;
  t["lr_recon"] = cfg.train.lr_recon;
  t["lambda1"] = cfg.train.lambda1;
  t["lambda2"] = cfg.train.lambda2;
  t["batch_size"] = cfg.train.batch_size;
  t["seed"] = cfg.train.seed;
  t["ode"] = {{"rtol", cfg.train.ode.rtol},
              {"atol", cfg.train.ode.atol},
              {"max_steps", cfg.train.ode.max_steps},
              {"initial_step", cfg.train.ode.initial_step},
              {"safety", cfg.train.ode.safety}};
  t["gridding"] = {{"oversampling", cfg.train.gridding.oversampling},
                   {"kernel_width", cfg.train.gridding.kernel_width},
                   {"kernel_beta", cfg.train.gridding.kernel_beta}};
  t["limits"] = {{"g_max", cfg.train.limits.g_max},
                 {"s_max", cfg.train.limits.s_max},
                 {"gamma", cfg.train.limits.gamma},
                 {"dwell", cfg.train.limits.dwell},
                 {"fov", cfg.train.limits.fov},
                 {"grid_size", cfg.train.limits.grid_size}};
  json& p = j["problem"];
  p["grid"] = cfg.problem.grid;
  p["init"] = cfg.problem.init;
  p["shots"] = cfg.problem.shots;
  p["samples_per_shot"] = cfg.problem.samples_per_shot;
  p["n_control"] = cfg.problem.n_control;
  p["k_extent"] = cfg.problem.k_extent;
  p["center_fraction"] = cfg.problem.center_fraction;
  p["spiral_turns"] = cfg.problem.spiral_turns;
  p["hidden"] = cfg.problem.hidden;
  p["include_time"] = cfg.problem.include_time;
  p["recon_levels"] = cfg.problem.recon_levels;
  p["recon_base"] = cfg.problem.recon_base;
  p["coils"] = cfg.problem.coils;
  p["phantoms"] = cfg.problem.phantoms;
  p["train_frac"] = cfg.problem.train_frac;
  p["val_frac"] = cfg.problem.val_frac;
  p["test_frac"] = cfg.problem.test_frac;
  p["ellipses"] = cfg.problem.ellipses;
  return j.dump(2) + "\n";
}

void set_config_key(RunConfig& cfg, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw config_error("config: override must look like key=value, got '" + assignment +
                       "'");
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (pos <= key.size()) {
    const std::size_t dot = key.find('.', pos);
    if (dot == std::string::npos) {
      parts.push_back(key.substr(pos));
      break;
    }
    parts.push_back(key.substr(pos, dot - pos));
    pos = dot + 1;
  }
  for (const std::string& p : parts)
    if (p.empty()) throw config_error("config: malformed key '" + key + "'");

  json doc = json::parse(run_config_json(cfg));
  if (parts.front() != "train" && parts.front() != "problem") {
    if (subtree_has(doc.at("train"), parts))
      parts.insert(parts.begin(), "train");
    else if (subtree_has(doc.at("problem"), parts))
      parts.insert(parts.begin(), "problem");
    else
      throw config_error("config: unknown key '" + key + "'");
  }

  json* cur = &doc;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!cur->is_object() || !cur->contains(parts[i]))
      throw config_error("config: unknown key '" + key + "'");
    cur = &cur->at(parts[i]);
  }
  if (!cur->is_object() || !cur->contains(parts.back()))
    throw config_error("config: unknown key '" + key + "'");

  json v = json::parse(value, nullptr, false);
  if (v.is_discarded() || v.is_object() || v.is_array()) v = value;  // raw string
  (*cur)[parts.back()] = v;
  cfg = parse_run_config(doc.dump());
}

Trajectory build_initializer(const ProblemConfig& p, const PhysicsLimits& limits) {
  Trajectory t;
  if (p.init == "radial") {
    t = init_radial(p.shots, p.samples_per_shot, p.k_extent);
  } else if (p.init == "spiral") {
    t = init_spiral(p.shots, p.samples_per_shot, p.spiral_turns, p.k_extent);
  } else if (p.init == "cartesian") {
    t = init_cartesian(p.shots, p.grid, p.center_fraction, p.samples_per_shot);
  } else {
    throw config_error("problem.init must be radial, cartesian, or spiral");
  }
  t.dwell = limits.dwell;
  return t;
}

TrainSample make_train_sample(int grid, int coils, std::uint64_t seed, int ellipses) {
  Phantom ph = make_phantom(grid, seed, ellipses);
  TrainSample s;
  s.grid = grid;
  s.image = std::move(ph.image);
  s.coils = make_coils(grid, coils, Rng::mix(seed, 0xC011u));
  return s;
}

SplitData build_dataset(const ProblemConfig& p, std::uint64_t seed) {
  std::vector<TrainSample> all(p.phantoms);
  for (int i = 0; i < p.phantoms; ++i)
    all[i] = make_train_sample(p.grid, p.coils, Rng::mix(seed, 0xDA7Au + i), p.ellipses);
  const DatasetSplit sp =
      dataset_split(p.phantoms, p.train_frac, p.val_frac, p.test_frac, Rng::mix(seed, 0x59u));
  SplitData out;
  for (int i : sp.train) out.train.push_back(std::move(all[i]));
  for (int i : sp.val) out.val.push_back(std::move(all[i]));
  for (int i : sp.test) out.test.push_back(std::move(all[i]));
  return out;
}

TrainSetup build_setup(const ProblemConfig& p, const PhysicsLimits& limits,
                       std::uint64_t seed, bool learned_field) {
  TrainSetup s;
  s.init = build_initializer(p, limits);
  s.n_control = p.n_control;
  if (learned_field) {
    Rng rng(Rng::mix(seed, 0xF1E1Du));
    s.field = field_init(2, p.hidden, p.include_time, rng);
    // Zero the output layer so the learned trajectory starts exactly at the
    // (feasible) initializer; a random field at epoch 0 produces a trajectory
    // that violates the hardware limits by orders of magnitude and training
    // never recovers.
    const std::size_t head =
        static_cast<std::size_t>(s.field.hidden) * s.field.input_dim() +
        s.field.hidden;
    std::fill(s.field.weights.begin() + static_cast<std::ptrdiff_t>(head),
              s.field.weights.end(), 0.0);
  } else {
    s.field.state_dim = 2;
    s.field.hidden = p.hidden;
    s.field.include_time = p.include_time;
    s.field.weights.assign(s.field.count(), 0.0);
  }
  s.recon = recon_build(p.recon_levels, p.recon_base, Rng::mix(seed, 0xBEC0u));
  return s;
}

}  // namespace ktraj
