#include "ktraj/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "ktraj/errors.hpp"

namespace ktraj {

namespace {

constexpr double kPi = 3.14159265358979323846264338328;

Trajectory make_empty(int shots, int samples, double dwell = 4e-6) {
  Trajectory t;
  t.shots = shots;
  t.samples_per_shot = samples;
  t.dwell = dwell;
  t.points.assign(static_cast<std::size_t>(shots) * samples * 2, 0.0);
  return t;
}

void require(bool cond, const char* msg) {
  if (!cond) throw argument_error(msg);
}

}  // namespace

Trajectory init_radial(int n_shots, int samples_per_shot, double k_extent) {
  require(n_shots >= 1, "init_radial: n_shots must be >= 1");
  require(samples_per_shot >= 1, "init_radial: samples_per_shot must be >= 1");
  require(k_extent > 0.0, "init_radial: k_extent must be positive");
  if (k_extent > 0.5) throw argument_error("init_radial: k_extent exceeds the normalized band [-0.5, 0.5)");

  Trajectory t = make_empty(n_shots, samples_per_shot);
  const double step = 2.0 * k_extent / samples_per_shot;
  for (int shot = 0; shot < n_shots; ++shot) {
    const double angle = kPi * shot / n_shots;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    for (int i = 0; i < samples_per_shot; ++i) {
      const double r = -k_extent + step * i;
      t.at(shot, i, 0) = r * c;
      t.at(shot, i, 1) = r * s;
    }
  }
  return t;
}

Trajectory init_cartesian(int n_lines, int grid_size, double center_fraction,
                          int samples_per_shot) {
  require(n_lines >= 1, "init_cartesian: n_lines must be >= 1");
  require(grid_size >= 1, "init_cartesian: grid_size must be >= 1");
  require(samples_per_shot >= 1, "init_cartesian: samples_per_shot must be >= 1");
  require(center_fraction >= 0.0 && center_fraction <= 1.0,
          "init_cartesian: center_fraction must lie in [0, 1]");

  const int n_center = static_cast<int>(std::lround(center_fraction * grid_size));
  if (n_lines + n_center > grid_size)
    throw argument_error("init_cartesian: n_lines + center lines exceed grid_size");

  const int center_start = (grid_size - n_center) / 2;
  std::set<int> lines;
  for (int i = 0; i < n_center; ++i) lines.insert(center_start + i);

  std::vector<int> outer;
  outer.reserve(grid_size - n_center);
  for (int i = 0; i < grid_size; ++i)
    if (!lines.count(i)) outer.push_back(i);

  for (int j = 0; j < n_lines; ++j) {
    const std::size_t idx = static_cast<std::size_t>(j) * outer.size() / n_lines;
    lines.insert(outer[idx]);
  }

  Trajectory t = make_empty(static_cast<int>(lines.size()), samples_per_shot);
  int shot = 0;
  for (int line : lines) {
    const double ky = -0.5 + static_cast<double>(line) / grid_size;
    for (int i = 0; i < samples_per_shot; ++i) {
      t.at(shot, i, 0) = -0.5 + static_cast<double>(i) / samples_per_shot;
      t.at(shot, i, 1) = ky;
    }
    ++shot;
  }
  return t;
}

Trajectory init_spiral(int n_interleaves, int samples_per_shot, double turns,
                       double k_extent) {
  require(n_interleaves >= 1, "init_spiral: n_interleaves must be >= 1");
  require(samples_per_shot >= 1, "init_spiral: samples_per_shot must be >= 1");
  require(turns > 0.0, "init_spiral: turns must be positive");
  require(k_extent > 0.0, "init_spiral: k_extent must be positive");
  if (k_extent > 0.5) throw argument_error("init_spiral: k_extent exceeds the normalized band [-0.5, 0.5)");

  Trajectory t = make_empty(n_interleaves, samples_per_shot);
  for (int shot = 0; shot < n_interleaves; ++shot) {
    const double offset = 2.0 * kPi * shot / n_interleaves;
    for (int i = 0; i < samples_per_shot; ++i) {
      const double s = samples_per_shot > 1
                           ? static_cast<double>(i) / (samples_per_shot - 1)
                           : 0.0;
      const double r = k_extent * s;
      const double a = 2.0 * kPi * turns * s + offset;
      t.at(shot, i, 0) = r * std::cos(a);
      t.at(shot, i, 1) = r * std::sin(a);
    }
  }
  return t;
}

ControlState extract_control_points(const Trajectory& traj, int n_control) {
  require(n_control >= 1, "extract_control_points: n_control must be >= 1");
  if (traj.samples_per_shot % n_control != 0)
    throw argument_error("extract_control_points: samples_per_shot not divisible by n_control");

  const int per = traj.samples_per_shot / n_control;
  ControlState cs;
  cs.n_control = n_control;
  cs.segment_duration = traj.dwell * per;
  cs.values.resize(static_cast<std::size_t>(traj.shots) * n_control * 2);
  for (int shot = 0; shot < traj.shots; ++shot)
    for (int c = 0; c < n_control; ++c)
      for (int d = 0; d < 2; ++d)
        cs.values[(static_cast<std::size_t>(shot) * n_control + c) * 2 + d] =
            traj.at(shot, c * per, d);
  return cs;
}

Kinematics kinematics(const Trajectory& traj, const PhysicsLimits& limits) {
  require(traj.samples_per_shot >= 3, "kinematics: need at least 3 samples per shot");
  const double scale = limits.grid_size / limits.fov;  // normalized -> 1/m
  const double inv_dt = 1.0 / traj.dwell;
  const int nv = traj.samples_per_shot - 1;
  const int na = traj.samples_per_shot - 2;

  Kinematics kin;
  kin.shots = traj.shots;
  kin.samples_per_shot = traj.samples_per_shot;
  kin.velocity.resize(static_cast<std::size_t>(traj.shots) * nv * 2);
  kin.acceleration.resize(static_cast<std::size_t>(traj.shots) * na * 2);

  for (int shot = 0; shot < traj.shots; ++shot) {
    for (int i = 0; i < nv; ++i)
      for (int d = 0; d < 2; ++d)
        kin.velocity[(static_cast<std::size_t>(shot) * nv + i) * 2 + d] =
            (traj.at(shot, i + 1, d) - traj.at(shot, i, d)) * scale * inv_dt;
    for (int i = 0; i < na; ++i)
      for (int d = 0; d < 2; ++d)
        kin.acceleration[(static_cast<std::size_t>(shot) * na + i) * 2 + d] =
            (traj.at(shot, i + 2, d) - 2.0 * traj.at(shot, i + 1, d) + traj.at(shot, i, d)) *
            scale * inv_dt * inv_dt;
  }

  kin.gradient.resize(kin.velocity.size());
  kin.slew.resize(kin.acceleration.size());
  const double inv_gamma = 1.0 / limits.gamma;
  for (std::size_t i = 0; i < kin.velocity.size(); ++i)
    kin.gradient[i] = kin.velocity[i] * inv_gamma;
  for (std::size_t i = 0; i < kin.acceleration.size(); ++i)
    kin.slew[i] = kin.acceleration[i] * inv_gamma;
  return kin;
}

ConstraintReport check_limits(const Kinematics& kin, const PhysicsLimits& limits) {
  const double v_lim = limits.gamma * limits.g_max;
  const double a_lim = limits.gamma * limits.s_max;

  ConstraintReport rep;
  const std::size_t nv = kin.velocity.size() / 2;
  const std::size_t na = kin.acceleration.size() / 2;

  std::size_t v_ok = 0;
  double v_max = 0.0;
  for (std::size_t i = 0; i < nv; ++i) {
    const double n = std::hypot(kin.velocity[2 * i], kin.velocity[2 * i + 1]);
    if (n <= v_lim) ++v_ok;
    v_max = std::max(v_max, n);
  }
  std::size_t a_ok = 0;
  double a_max = 0.0;
  for (std::size_t i = 0; i < na; ++i) {
    const double n = std::hypot(kin.acceleration[2 * i], kin.acceleration[2 * i + 1]);
    if (n <= a_lim) ++a_ok;
    a_max = std::max(a_max, n);
  }

  rep.frac_velocity_ok = nv ? static_cast<double>(v_ok) / nv : 1.0;
  rep.frac_accel_ok = na ? static_cast<double>(a_ok) / na : 1.0;
  rep.max_velocity_excess = std::max(0.0, v_max - v_lim);
  rep.max_accel_excess = std::max(0.0, a_max - a_lim);
  return rep;
}

void export_waveforms(const Trajectory& traj, const PhysicsLimits& limits,
                      const std::string& path) {
  const Kinematics kin = kinematics(traj, limits);
  const double scale = limits.grid_size / limits.fov;

  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw io_error("export_waveforms: cannot open " + path);

  std::fputs("shot,idx,t_s,kx_invm,ky_invm,gx_Tpm,gy_Tpm,sx_Tpms,sy_Tpms\n", f);
  const int ns = traj.samples_per_shot;
  for (int shot = 0; shot < traj.shots; ++shot) {
    for (int i = 0; i < ns; ++i) {
      double gx = 0.0, gy = 0.0, sx = 0.0, sy = 0.0;
      if (i < ns - 1) {
        gx = kin.gradient[(static_cast<std::size_t>(shot) * (ns - 1) + i) * 2];
        gy = kin.gradient[(static_cast<std::size_t>(shot) * (ns - 1) + i) * 2 + 1];
      }
      if (i >= 1 && i <= ns - 2) {
        sx = kin.slew[(static_cast<std::size_t>(shot) * (ns - 2) + i - 1) * 2];
        sy = kin.slew[(static_cast<std::size_t>(shot) * (ns - 2) + i - 1) * 2 + 1];
      }
      std::fprintf(f, "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", shot, i,
                   i * traj.dwell, traj.at(shot, i, 0) * scale, traj.at(shot, i, 1) * scale,
                   gx, gy, sx, sy);
    }
  }
  if (std::fclose(f) != 0) throw io_error("export_waveforms: write failure on " + path);
}

void save_trajectory(const Trajectory& traj, double fov, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("save_trajectory: cannot open " + path);

  const char magic[4] = {'K', 'T', 'R', 'J'};
  const std::uint32_t version = 1;
  const std::uint64_t shots = static_cast<std::uint64_t>(traj.shots);
  const std::uint64_t samples = static_cast<std::uint64_t>(traj.samples_per_shot);
  f.write(magic, 4);
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&shots), 8);
  f.write(reinterpret_cast<const char*>(&samples), 8);
  f.write(reinterpret_cast<const char*>(traj.points.data()),
          static_cast<std::streamsize>(traj.points.size() * sizeof(double)));
  if (!f) throw io_error("save_trajectory: write failure on " + path);
  f.close();

  nlohmann::json side;
  side["dwell"] = traj.dwell;
  side["fov"] = fov;
  std::ofstream sf(path + ".json");
  if (!sf) throw io_error("save_trajectory: cannot open " + path + ".json");
  sf << side.dump(2) << "\n";
  if (!sf) throw io_error("save_trajectory: write failure on " + path + ".json");
}

Trajectory load_trajectory(const std::string& path, double* fov) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("load_trajectory: cannot open " + path);

  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t shots = 0, samples = 0;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&shots), 8);
  f.read(reinterpret_cast<char*>(&samples), 8);
  if (!f || std::memcmp(magic, "KTRJ", 4) != 0)
    throw io_error("load_trajectory: " + path + " is not a KTRJ trajectory file");
  if (version != 1)
    throw io_error("load_trajectory: unsupported KTRJ version in " + path);

  Trajectory t = make_empty(static_cast<int>(shots), static_cast<int>(samples));
  f.read(reinterpret_cast<char*>(t.points.data()),
         static_cast<std::streamsize>(t.points.size() * sizeof(double)));
  if (!f) throw io_error("load_trajectory: truncated point data in " + path);

  std::ifstream sf(path + ".json");
  if (sf) {
    nlohmann::json side = nlohmann::json::parse(sf, nullptr, false);
    if (!side.is_discarded()) {
      if (side.contains("dwell")) t.dwell = side["dwell"].get<double>();
      if (fov && side.contains("fov")) *fov = side["fov"].get<double>();
    }
  }
  return t;
}

}  // namespace ktraj
