#include "ktraj/cli.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ktraj/checkpoint.hpp"
#include "ktraj/datakit.hpp"
#include "ktraj/diffcore.hpp"
#include "ktraj/errors.hpp"
#include "ktraj/field.hpp"
#include "ktraj/geometry.hpp"
#include "ktraj/nufft.hpp"
#include "ktraj/objective.hpp"
#include "ktraj/recon.hpp"
#include "ktraj/rng.hpp"
#include "ktraj/trainer.hpp"

namespace ktraj::cli {

namespace {

namespace fs = std::filesystem;

struct GlobalArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

RunConfig resolve_config(const GlobalArgs& g) {
  RunConfig cfg =
      g.config_path.empty() ? default_run_config() : load_run_config(g.config_path);
  for (const std::string& kv : g.overrides) set_config_key(cfg, kv);
  if (g.seed_given) cfg.train.seed = g.seed;
  validate_run_config(cfg);
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open " + path);
  f << text;
  if (!f) throw io_error("write failure on " + path);
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// ---- tiny deterministic SVG line plots ----------------------------------

struct Series {
  std::string color;
  std::vector<double> x, y;
};

std::string svg_line_chart(const std::vector<Series>& series, const std::string& title,
                           const std::string& xlabel, const std::string& ylabel) {
  const double W = 640, H = 400, ml = 64, mr = 16, mt = 32, mb = 44;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const Series& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmax <= xmin) xmax = xmin + 1.0;
  if (ymax <= ymin) ymax = ymin + 1.0;
  const double yl = ymin - 0.05 * (ymax - ymin), yh = ymax + 0.05 * (ymax - ymin);
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - yl) / (yh - yl) * (H - mt - mb); };

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
      << title << "</text>\n";
  // axes
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
      << H - mb << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\""
      << H - mb << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 4.0;
    const double yv = yl + (yh - yl) * i / 4.0;
    out << "<text x=\"" << fmt("%.1f", px(xv)) << "\" y=\"" << H - mb + 16
        << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt("%.4g", xv) << "</text>\n";
    out << "<text x=\"" << ml - 6 << "\" y=\"" << fmt("%.1f", py(yv) + 3)
        << "\" text-anchor=\"end\" font-size=\"10\">" << fmt("%.4g", yv) << "</text>\n";
  }
  out << "<text x=\"" << W / 2 << "\" y=\"" << H - 8
      << "\" text-anchor=\"middle\" font-size=\"11\">" << xlabel << "</text>\n"
      << "<text x=\"14\" y=\"" << H / 2
      << "\" text-anchor=\"middle\" font-size=\"11\" transform=\"rotate(-90 14 " << H / 2
      << ")\">" << ylabel << "</text>\n";
  for (const Series& s : series) {
    out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      out << fmt("%.2f", px(s.x[i])) << "," << fmt("%.2f", py(s.y[i])) << " ";
    out << "\"/>\n";
  }
  out << "</svg>\n";
  return out.str();
}

std::string svg_trajectory(const std::vector<const Trajectory*>& trajs,
                           const std::vector<std::string>& colors,
                           const std::string& title) {
  const double W = 560, H = 560, m = 36;
  auto px = [&](double k) { return m + (k + 0.5) * (W - 2 * m); };
  auto py = [&](double k) { return H - m - (k + 0.5) * (H - 2 * m); };
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<rect x=\"" << m << "\" y=\"" << m << "\" width=\"" << W - 2 * m
      << "\" height=\"" << H - 2 * m << "\" fill=\"none\" stroke=\"black\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
      << title << "</text>\n";
  for (std::size_t t = 0; t < trajs.size(); ++t) {
    const Trajectory& tr = *trajs[t];
    for (int s = 0; s < tr.shots; ++s) {
      out << "<polyline fill=\"none\" stroke=\"" << colors[t]
          << "\" stroke-width=\"1\" points=\"";
      for (int i = 0; i < tr.samples_per_shot; ++i)
        out << fmt("%.2f", px(tr.at(s, i, 0))) << "," << fmt("%.2f", py(tr.at(s, i, 1)))
            << " ";
      out << "\"/>\n";
    }
  }
  out << "</svg>\n";
  return out.str();
}

// ---- shared artifact plumbing --------------------------------------------

ReconParams load_recon_checkpoint(const std::string& stem) {
  const Checkpoint ck = load_checkpoint(stem);
  ReconParams rp;
  rp.levels = static_cast<int>(ck.meta.numbers.at("levels"));
  rp.base_channels = static_cast<int>(ck.meta.numbers.at("base_channels"));
  rp.weights = ck.require("weights").data;
  if (rp.weights.size() != recon_param_count(rp.levels, rp.base_channels))
    throw io_error("recon checkpoint " + stem + " has inconsistent weight count");
  return rp;
}

struct TrainedBundle {
  TrainSetup setup;
};

TrainedBundle load_trained(const RunConfig& cfg, const std::string& dir, bool learned) {
  TrainedBundle b;
  b.setup = build_setup(cfg.problem, cfg.train.limits, cfg.train.seed, learned);
  b.setup.field = load_field(dir + "/field_best");
  b.setup.recon = load_recon_checkpoint(dir + "/recon_best");
  return b;
}

Trajectory learned_trajectory(const TrainSetup& setup, const OdeConfig& ode) {
  const ControlState control = extract_control_points(setup.init, setup.n_control);
  return assemble_trajectory(setup.field, setup.init, control, ode);
}

double offcenter_sidelobe(const std::vector<double>& p, int grid, int exclude) {
  const int cx = grid / 2, cy = grid / 2;
  double m = 0.0;
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x)
      if (std::abs(x - cx) > exclude || std::abs(y - cy) > exclude)
        m = std::max(m, p[static_cast<std::size_t>(y) * grid + x]);
  return m;
}

// ---- subcommand bodies ----------------------------------------------------

int cmd_init_traj(const GlobalArgs& g, const std::string& kind, int shots, int samples) {
  const RunConfig cfg = resolve_config(g);
  Trajectory t;
  if (kind == "radial") {
    t = init_radial(shots, samples, cfg.problem.k_extent);
  } else if (kind == "spiral") {
    t = init_spiral(shots, samples, cfg.problem.spiral_turns, cfg.problem.k_extent);
  } else if (kind == "cartesian") {
    t = init_cartesian(shots, cfg.problem.grid, cfg.problem.center_fraction, samples);
  } else {
    throw config_error("init-traj: unknown kind '" + kind + "'");
  }
  t.dwell = cfg.train.limits.dwell;
  ensure_dir(g.out_dir);
  const std::string stem = g.out_dir + "/trajectory";
  save_trajectory(t, cfg.train.limits.fov, stem);
  write_text(g.out_dir + "/trajectory.svg",
             svg_trajectory({&t}, {"#1f77b4"}, kind + " initializer"));
  std::printf("wrote %s: %d shots x %d samples (%s)\n", stem.c_str(), t.shots,
              t.samples_per_shot, kind.c_str());
  return 0;
}

int cmd_train(const GlobalArgs& g) {
  const RunConfig cfg = resolve_config(g);
  ensure_dir(g.out_dir + "/learned");
  ensure_dir(g.out_dir + "/fixed");
  write_text(g.out_dir + "/config.json", run_config_json(cfg));

  const SplitData data = build_dataset(cfg.problem, cfg.train.seed);
  TrainData td;
  td.train = data.train;
  td.val = data.val;

  const TrainSetup learned = build_setup(cfg.problem, cfg.train.limits, cfg.train.seed, true);
  const TrainSetup fixed = build_setup(cfg.problem, cfg.train.limits, cfg.train.seed, false);
  TrainConfig fixed_cfg = cfg.train;
  fixed_cfg.lr_field = 0.0;  // the baseline keeps its initializer

  std::printf("training learned trajectory (%d epochs, %zu train / %zu val)...\n",
              cfg.train.epochs, td.train.size(), td.val.size());
  const TrainResult rl = train_joint(td, learned, cfg.train, g.out_dir + "/learned");
  std::printf("  best val %.6g at epoch %d\n", rl.best_val_total, rl.best_epoch);

  std::printf("training fixed baseline...\n");
  const TrainResult rf = train_joint(td, fixed, fixed_cfg, g.out_dir + "/fixed");
  std::printf("  best val %.6g at epoch %d\n", rf.best_val_total, rf.best_epoch);
  return 0;
}

int cmd_eval(const GlobalArgs& g) {
  const RunConfig cfg = resolve_config(g);
  const SplitData data = build_dataset(cfg.problem, cfg.train.seed);
  const TrainedBundle learned = load_trained(cfg, g.out_dir + "/learned", true);
  const TrainedBundle fixed = load_trained(cfg, g.out_dir + "/fixed", false);

  const EvalReport rep = evaluate(learned.setup, fixed.setup, data.test, cfg.train);
  ensure_dir(g.out_dir);
  write_text(g.out_dir + "/metrics.csv", rep.csv);

  std::ostringstream s;
  s << "{\n"
    << "  \"test_cases\": " << data.test.size() << ",\n"
    << "  \"mean_psnr_learned\": " << fmt("%.17g", rep.mean_psnr_learned) << ",\n"
    << "  \"mean_psnr_fixed\": " << fmt("%.17g", rep.mean_psnr_fixed) << ",\n"
    << "  \"psnr_gain_db\": " << fmt("%.17g", rep.psnr_gain_db) << ",\n"
    << "  \"psnr_wilcoxon_p\": " << fmt("%.17g", rep.psnr_test.p_value) << ",\n"
    << "  \"mean_ssim_learned\": " << fmt("%.17g", rep.mean_ssim_learned) << ",\n"
    << "  \"mean_ssim_fixed\": " << fmt("%.17g", rep.mean_ssim_fixed) << ",\n"
    << "  \"ssim_gain\": " << fmt("%.17g", rep.ssim_gain) << ",\n"
    << "  \"ssim_wilcoxon_p\": " << fmt("%.17g", rep.ssim_test.p_value) << "\n"
    << "}\n";
  write_text(g.out_dir + "/eval_summary.json", s.str());

  std::printf("PSNR learned %.3f dB vs fixed %.3f dB (gain %+.3f dB, p=%.4g)\n",
              rep.mean_psnr_learned, rep.mean_psnr_fixed, rep.psnr_gain_db,
              rep.psnr_test.p_value);
  std::printf("SSIM learned %.4f vs fixed %.4f (gain %+.4f, p=%.4g)\n",
              rep.mean_ssim_learned, rep.mean_ssim_fixed, rep.ssim_gain,
              rep.ssim_test.p_value);
  return 0;
}

int cmd_psf(const GlobalArgs& g) {
  const RunConfig cfg = resolve_config(g);
  const int grid = cfg.problem.grid;
  ensure_dir(g.out_dir);

  const Trajectory init =
      build_initializer(cfg.problem, cfg.train.limits);
  const std::vector<double> pf = psf(init.points, grid, cfg.train.gridding);
  save_raw_f32(pf, {grid, grid}, g.out_dir + "/psf_fixed");
  save_svg_heatmap(pf, grid, grid, g.out_dir + "/psf_fixed.svg", "fixed PSF");
  std::printf("fixed PSF side lobe (>3 px): %.6g\n", offcenter_sidelobe(pf, grid, 3));

  const std::string field_stem = g.out_dir + "/learned/field_best";
  if (fs::exists(field_stem + ".bin")) {
    const TrainedBundle learned = load_trained(cfg, g.out_dir + "/learned", true);
    const Trajectory lt = learned_trajectory(learned.setup, cfg.train.ode);
    const std::vector<double> pl = psf(lt.points, grid, cfg.train.gridding);
    save_raw_f32(pl, {grid, grid}, g.out_dir + "/psf_learned");
    save_svg_heatmap(pl, grid, grid, g.out_dir + "/psf_learned.svg", "learned PSF");
    std::printf("learned PSF side lobe (>3 px): %.6g\n", offcenter_sidelobe(pl, grid, 3));
  } else {
    std::printf("no trained field at %s, skipping learned PSF\n", field_stem.c_str());
  }
  return 0;
}

int cmd_export_gradients(const GlobalArgs& g, const std::string& traj_path, bool learned) {
  const RunConfig cfg = resolve_config(g);
  Trajectory t;
  if (!traj_path.empty()) {
    t = load_trajectory(traj_path);
  } else if (learned) {
    const TrainedBundle b = load_trained(cfg, g.out_dir + "/learned", true);
    t = learned_trajectory(b.setup, cfg.train.ode);
  } else {
    t = build_initializer(cfg.problem, cfg.train.limits);
  }
  ensure_dir(g.out_dir);
  const std::string path = g.out_dir + "/waveforms.csv";
  export_waveforms(t, cfg.train.limits, path);
  const ConstraintReport rep = check_limits(kinematics(t, cfg.train.limits), cfg.train.limits);
  std::printf("wrote %s (%d shots x %d samples, frac_v_ok %.4f, frac_a_ok %.4f)\n",
              path.c_str(), t.shots, t.samples_per_shot, rep.frac_velocity_ok,
              rep.frac_accel_ok);
  return 0;
}

std::vector<double> history_series(const std::string& csv, const std::string& split,
                                   int col) {
  std::vector<double> out;
  std::istringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  while (std::getline(ss, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() > static_cast<std::size_t>(col) && cells[1] == split)
      out.push_back(std::stod(cells[col]));
  }
  return out;
}

int cmd_plot(const GlobalArgs& g) {
  const RunConfig cfg = resolve_config(g);
  ensure_dir(g.out_dir);

  const Trajectory init = build_initializer(cfg.problem, cfg.train.limits);
  std::vector<const Trajectory*> trajs{&init};
  std::vector<std::string> colors{"#9aa0a6"};
  Trajectory lt;
  const std::string field_stem = g.out_dir + "/learned/field_best";
  if (fs::exists(field_stem + ".bin")) {
    const TrainedBundle b = load_trained(cfg, g.out_dir + "/learned", true);
    lt = learned_trajectory(b.setup, cfg.train.ode);
    trajs.push_back(&lt);
    colors.push_back("#d62728");
  }
  write_text(g.out_dir + "/trajectory.svg",
             svg_trajectory(trajs, colors, trajs.size() > 1
                                               ? "initializer (gray) vs learned (red)"
                                               : "initializer"));
  std::printf("wrote %s/trajectory.svg\n", g.out_dir.c_str());

  const std::string hist_path = g.out_dir + "/learned/history.csv";
  if (fs::exists(hist_path)) {
    std::ifstream f(hist_path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string csv = ss.str();
    const std::vector<double> tr = history_series(csv, "train", 2);
    const std::vector<double> va = history_series(csv, "val", 2);
    std::vector<double> ep(tr.size());
    for (std::size_t i = 0; i < ep.size(); ++i) ep[i] = static_cast<double>(i);
    std::vector<Series> series{{"#1f77b4", ep, tr}, {"#d62728", ep, va}};
    write_text(g.out_dir + "/curves.svg",
               svg_line_chart(series, "loss: train (blue), val (red)", "epoch", "total"));
    std::printf("wrote %s/curves.svg\n", g.out_dir.c_str());
  } else {
    std::printf("no training history at %s, skipping curves\n", hist_path.c_str());
  }
  return 0;
}

// ---- gradcheck -------------------------------------------------------------

struct CheckLine {
  std::string name;
  double err;
  double tol;
  bool ok() const { return err <= tol; }
};

CheckLine check_field_vjp() {
  Rng rng(2024);
  FieldParams fp = field_init(2, 8, true, rng);
  const double y[2] = {0.21, -0.34}, t = 0.4;
  const double cot[2] = {0.7, -1.1};
  std::vector<double> gp(fp.count());
  double gy[2], gt;
  field_vjp(fp, y, t, cot, gy, gp.data(), gt);

  double worst = 0.0;
  const double h = 1e-6;
  auto dot_eval = [&](const FieldParams& f, const double* yy, double tt) {
    double out[2];
    field_eval(f, yy, tt, out);
    return cot[0] * out[0] + cot[1] * out[1];
  };
  for (std::size_t i = 0; i < fp.count(); i += 7) {
    FieldParams fu = fp, fd = fp;
    fu.weights[i] += h;
    fd.weights[i] -= h;
    const double fdg = (dot_eval(fu, y, t) - dot_eval(fd, y, t)) / (2 * h);
    worst = std::max(worst, std::fabs(gp[i] - fdg) / std::max(1.0, std::fabs(fdg)));
  }
  for (int d = 0; d < 2; ++d) {
    double yu[2] = {y[0], y[1]}, yd[2] = {y[0], y[1]};
    yu[d] += h;
    yd[d] -= h;
    const double fdg = (dot_eval(fp, yu, t) - dot_eval(fp, yd, t)) / (2 * h);
    worst = std::max(worst, std::fabs(gy[d] - fdg) / std::max(1.0, std::fabs(fdg)));
  }
  const double fdt = (dot_eval(fp, y, t + h) - dot_eval(fp, y, t - h)) / (2 * h);
  worst = std::max(worst, std::fabs(gt - fdt) / std::max(1.0, std::fabs(fdt)));
  return {"field-vjp", worst, 1e-6};
}

CheckLine check_ode_adjoint() {
  Rng rng(77);
  FieldParams fp = field_init(2, 8, true, rng);
  FieldOde ode(fp);
  OdeConfig cfg;
  cfg.rtol = 1e-10;
  cfg.atol = 1e-12;
  const std::vector<double> y0{0.3, -0.2};
  const std::vector<double> tg{0.0, 1.0};
  const std::vector<double> cot{1.0, -0.5};

  const std::vector<std::vector<double>> yT = integrate(ode, y0, tg, cfg);
  const AdjointBundle b = integrate_adjoint(ode, yT.back(), tg, cot, cfg);

  double worst = 0.0;
  for (std::size_t i = 0; i < fp.count(); i += 5) {
    const double h = 1e-5 * std::max(1.0, std::fabs(fp.weights[i]));
    FieldParams fu = fp, fd = fp;
    fu.weights[i] += h;
    fd.weights[i] -= h;
    FieldOde ou(fu), od(fd);
    const auto su = integrate(ou, y0, tg, cfg);
    const auto sd = integrate(od, y0, tg, cfg);
    const double fdg = (cot[0] * (su.back()[0] - sd.back()[0]) +
                        cot[1] * (su.back()[1] - sd.back()[1])) /
                       (2 * h);
    worst = std::max(worst, std::fabs(b.a_params[i] - fdg) / std::max(1.0, std::fabs(fdg)));
  }
  return {"ode-adjoint", worst, 1e-4};
}

CheckLine check_nufft_point_grad() {
  Rng rng(31);
  const int grid = 16, m = 40;
  ComplexImage img = make_image(grid);
  for (auto& z : img.data) z = {rng.normal(), rng.normal()};
  std::vector<double> pts(2 * m);
  for (double& p : pts) p = rng.uniform(-0.47, 0.47);
  std::vector<std::complex<double>> cot(m);
  for (auto& z : cot) z = {rng.normal(), rng.normal()};

  // The gridded gradient approximates the exact transform's derivative, so
  // finite differences run against the direct sum.
  const std::vector<double> gp = nufft_point_grad(img, pts, cot);
  auto loss = [&](const std::vector<double>& p) {
    const auto sig = ndft_forward(img, p);
    double v = 0.0;
    for (int j = 0; j < m; ++j)
      v += cot[j].real() * sig[j].real() + cot[j].imag() * sig[j].imag();
    return v;
  };
  double num = 0.0, den = 0.0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<double> pu = pts, pd = pts;
    pu[i] += h;
    pd[i] -= h;
    const double fdg = (loss(pu) - loss(pd)) / (2 * h);
    num += (gp[i] - fdg) * (gp[i] - fdg);
    den += fdg * fdg;
  }
  return {"nufft-point-grad", std::sqrt(num / den), 1e-4};
}

CheckLine check_recon_grad() {
  const int grid = 16;
  Rng rng(55);
  ReconParams rp = recon_build(1, 2, 99);
  std::vector<double> img(static_cast<std::size_t>(grid) * grid);
  for (double& v : img) v = rng.uniform(0.0, 1.0);
  std::vector<double> ref(img.size());
  for (double& v : ref) v = rng.uniform(0.0, 1.0);

  auto loss_of = [&](const ReconParams& p, std::vector<double>* grads) {
    diff::Tape tape;
    const diff::TapeTensor in = tape.leaf({1, grid, grid}, img, false);
    const diff::TapeTensor gt = tape.leaf({1, grid, grid}, ref, false);
    const ReconTrace tr = recon_forward(p, tape, in);
    const diff::TapeTensor l = hybrid_node(tape, tr.output, gt, 1.0);
    const double v = tape.values(l)[0];
    if (grads) {
      tape.backward(l);
      *grads = recon_param_grad(tape, p, tr);
    }
    return v;
  };
  std::vector<double> g;
  loss_of(rp, &g);
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < rp.weights.size(); i += 37) {
    ReconParams pu = rp, pd = rp;
    pu.weights[i] += h;
    pd.weights[i] -= h;
    const double fdg = (loss_of(pu, nullptr) - loss_of(pd, nullptr)) / (2 * h);
    worst = std::max(worst, std::fabs(g[i] - fdg) / std::max(1.0, std::fabs(fdg)));
  }
  return {"recon-grad", worst, 1e-5};
}

// The acceptance-grade end-to-end check: full pipeline gradient against
// central differences at the pinned small scale.
std::pair<CheckLine, CheckLine> check_pipeline() {
  const int grid = 16, shots = 2, nc = 8;
  const Trajectory init = init_radial(shots, kQueriesPerSegment * nc, 0.45);
  const ControlState control = extract_control_points(init, nc);
  Rng rng(404);
  FieldParams field = field_init(2, 8, true, rng);
  const std::size_t head = static_cast<std::size_t>(field.input_dim()) * 8 + 8;
  for (std::size_t i = head; i < field.weights.size(); ++i) field.weights[i] *= 50.0;
  const ReconParams recon = recon_build(1, 2, 505);
  const TrainSample sample = make_train_sample(grid, 2, 31, 4);
  TrainConfig cfg;
  cfg.limits.grid_size = grid;
  cfg.limits.fov = grid;
  cfg.limits.dwell = 1.0;
  cfg.limits.gamma = 1.0;
  cfg.limits.g_max = 0.008;
  cfg.limits.s_max = 1e-4;
  cfg.lambda1 = 0.05;
  cfg.lambda2 = 0.05;
  cfg.ode.rtol = 1e-9;
  cfg.ode.atol = 1e-11;

  PipelineTrace tr;
  forward_pipeline(field, recon, init, control, sample, cfg, &tr);
  const PipelineGrads g = backward_pipeline(tr);
  auto loss_at = [&](const FieldParams& f, const ReconParams& r) {
    return forward_pipeline(f, r, init, control, sample, cfg).loss.total;
  };

  std::vector<std::size_t> fprobe;
  for (std::size_t i = 0; i < field.weights.size(); i += 6) fprobe.push_back(i);
  std::vector<double> fd(fprobe.size());
  double fd_max = 0.0;
  for (std::size_t i = 0; i < fprobe.size(); ++i) {
    const double h = 1e-5 * std::max(1.0, std::fabs(field.weights[fprobe[i]]));
    FieldParams fu = field, fdn = field;
    fu.weights[fprobe[i]] += h;
    fdn.weights[fprobe[i]] -= h;
    fd[i] = (loss_at(fu, recon) - loss_at(fdn, recon)) / (2 * h);
    fd_max = std::max(fd_max, std::fabs(fd[i]));
  }
  double worst_f = 0.0;
  for (std::size_t i = 0; i < fprobe.size(); ++i) {
    const double denom = std::max(std::fabs(fd[i]), 1e-3 * fd_max);
    worst_f = std::max(worst_f, std::fabs(g.field[fprobe[i]] - fd[i]) / denom);
  }

  // Loss evaluations carry ~1e-12 jitter from summed-area cancellation in the
  // SSIM term, so the step has to stay well above it.
  double worst_r = 0.0;
  for (std::size_t i = 0; i < recon.weights.size(); i += 61) {
    ReconParams pu = recon, pd = recon;
    const double h = 1e-4;
    pu.weights[i] += h;
    pd.weights[i] -= h;
    const double fdg = (loss_at(field, pu) - loss_at(field, pd)) / (2 * h);
    worst_r = std::max(worst_r, std::fabs(g.recon[i] - fdg) / std::max(1e-6, std::fabs(fdg)));
  }
  return {{"pipeline-field-grad", worst_f, 5e-3}, {"pipeline-recon-grad", worst_r, 5e-3}};
}

int cmd_gradcheck() {
  std::vector<CheckLine> lines;
  lines.push_back(check_field_vjp());
  lines.push_back(check_ode_adjoint());
  lines.push_back(check_nufft_point_grad());
  lines.push_back(check_recon_grad());
  const auto pl = check_pipeline();
  lines.push_back(pl.first);
  lines.push_back(pl.second);

  bool all = true;
  for (const CheckLine& l : lines) {
    std::printf("%s %-20s max_rel %.3e (tol %.0e)\n", l.ok() ? "PASS" : "FAIL",
                l.name.c_str(), l.err, l.tol);
    all = all && l.ok();
  }
  return all ? 0 : 2;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"physics-constrained k-space trajectory learning"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalArgs g;
  app.add_option("--config", g.config_path, "run configuration JSON");
  app.add_option("--out-dir", g.out_dir, "output directory (default .)");
  app.add_option("--set", g.overrides, "override config key, e.g. train.epochs=5")
      ->take_all();
  app.add_option("--seed", g.seed, "override train.seed")->trigger_on_parse();

  std::string kind = "radial";
  int shots = 16, samples = 1000;
  CLI::App* c_init = app.add_subcommand("init-traj", "write a trajectory initializer");
  c_init->add_option("--kind", kind, "cartesian|radial|spiral");
  c_init->add_option("--shots", shots, "number of shots (default 16)");
  c_init->add_option("--samples", samples, "samples per shot (default 1000)");

  CLI::App* c_train =
      app.add_subcommand("train", "train the learned trajectory and the fixed baseline");
  CLI::App* c_eval = app.add_subcommand("eval", "evaluate trained runs on the test split");
  CLI::App* c_psf = app.add_subcommand("psf", "write point-spread functions");

  std::string traj_path;
  bool use_learned = false;
  CLI::App* c_export =
      app.add_subcommand("export-gradients", "write gradient/slew waveform CSV");
  c_export->add_option("--traj", traj_path, "trajectory file (default: config initializer)");
  c_export->add_flag("--learned", use_learned, "use the trained field in out-dir");

  CLI::App* c_plot = app.add_subcommand("plot", "render trajectory and curve SVGs");
  CLI::App* c_grad = app.add_subcommand("gradcheck", "run finite-difference suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // --help: usage to stdout, exit 0
  } catch (const CLI::ParseError& e) {
    std::fputs(app.help().c_str(), stderr);
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  g.seed_given = app.count("--seed") > 0;

  try {
    if (c_init->parsed()) return cmd_init_traj(g, kind, shots, samples);
    if (c_train->parsed()) return cmd_train(g);
    if (c_eval->parsed()) return cmd_eval(g);
    if (c_psf->parsed()) return cmd_psf(g);
    if (c_export->parsed()) return cmd_export_gradients(g, traj_path, use_learned);
    if (c_plot->parsed()) return cmd_plot(g);
    if (c_grad->parsed()) return cmd_gradcheck();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ktraj: %s\n", e.what());
    return 2;
  }
  return 1;
}

}  // namespace ktraj::cli
