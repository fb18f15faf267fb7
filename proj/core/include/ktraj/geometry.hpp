#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace ktraj {

// Hardware limits plus the acquisition geometry needed to convert normalized
// k-space to physical units (k_phys = k_norm * grid_size / fov, in 1/m).
struct PhysicsLimits {
  double g_max = 50e-3;     // gradient amplitude, T/m
  double s_max = 200.0;     // slew rate, T/m/s
  double gamma = 42.577e6;  // gyromagnetic ratio, Hz/T (proton)
  double dwell = 4e-6;      // sample spacing, s
  double fov = 0.22;        // field of view, m
  int grid_size = 64;       // reconstruction matrix size
};

// Multi-shot 2D sampling trajectory in normalized k-space units
// (cycles/pixel, band [-0.5, 0.5)). points is row-major (shot, sample, {kx,ky}).
struct Trajectory {
  int shots = 0;
  int samples_per_shot = 0;
  double dwell = 4e-6;  // s
  std::vector<double> points;

  double at(int shot, int sample, int dim) const {
    return points[(static_cast<std::size_t>(shot) * samples_per_shot + sample) * 2 + dim];
  }
  double& at(int shot, int sample, int dim) {
    return points[(static_cast<std::size_t>(shot) * samples_per_shot + sample) * 2 + dim];
  }
};

// First sample of every equal-length segment, flattened shot-major.
struct ControlState {
  std::vector<double> values;  // shots * n_control * 2
  int n_control = 0;
  double segment_duration = 0.0;  // s
};

// Finite-difference kinematics in physical units. velocity is forward
// differences (shots, samples-1, 2); acceleration central second differences
// (shots, samples-2, 2). gradient = velocity/gamma, slew = acceleration/gamma.
struct Kinematics {
  int shots = 0;
  int samples_per_shot = 0;
  std::vector<double> velocity;      // 1/m/s
  std::vector<double> acceleration;  // 1/m/s^2
  std::vector<double> gradient;      // T/m
  std::vector<double> slew;          // T/m/s
};

struct ConstraintReport {
  double frac_velocity_ok = 1.0;
  double frac_accel_ok = 1.0;
  double max_velocity_excess = 0.0;  // 1/m/s
  double max_accel_excess = 0.0;     // 1/m/s^2
};

// Straight spokes through the origin, shot i rotated by i*pi/n_shots, sampled
// uniformly from -k_extent to +k_extent with the +k_extent endpoint excluded.
Trajectory init_radial(int n_shots, int samples_per_shot, double k_extent = 0.5);

// Contiguous fully sampled central block of round(center_fraction*grid_size)
// phase-encode lines plus n_lines equispaced lines from the remaining region.
// Each line is a frequency-encode readout along kx; lines stack along ky.
Trajectory init_cartesian(int n_lines, int grid_size, double center_fraction,
                          int samples_per_shot);

// Uniform-density Archimedean spiral (radius linear in the arc parameter) from
// the origin to k_extent over `turns` revolutions; interleave j rotated by
// j*2*pi/n_interleaves. Default extent stays clear of the band edge so integer
// turn counts cannot land a coordinate exactly on +0.5.
Trajectory init_spiral(int n_interleaves, int samples_per_shot, double turns = 8.0,
                       double k_extent = 0.48);

ControlState extract_control_points(const Trajectory& traj, int n_control);

Kinematics kinematics(const Trajectory& traj, const PhysicsLimits& limits);

ConstraintReport check_limits(const Kinematics& kin, const PhysicsLimits& limits);

// CSV with header shot,idx,t_s,kx_invm,ky_invm,gx_Tpm,gy_Tpm,sx_Tpms,sy_Tpms.
// gx/gy hold the forward difference at idx (last row 0); sx/sy hold the central
// second difference centered at idx (first and last rows 0).
void export_waveforms(const Trajectory& traj, const PhysicsLimits& limits,
                      const std::string& path);

// Flat little-endian f64 binary with a 24-byte header (magic KTRJ, version,
// shots, samples_per_shot) plus a JSON sidecar <path>.json carrying dwell/fov.
void save_trajectory(const Trajectory& traj, double fov, const std::string& path);
Trajectory load_trajectory(const std::string& path, double* fov = nullptr);

}  // namespace ktraj
