#pragma once

#include <functional>
#include <optional>
#include <string>

#include "deop/linalg.hpp"
#include "deop/rng.hpp"
#include "deop/tape.hpp"

namespace deop {

struct TimeGrid {
  double t0 = 0.0;
  double dt = 0.0;
  int n_points = 0;

  TimeGrid() = default;
  TimeGrid(double t0_, double dt_, int n_points_);

  double t(int k) const { return t0 + k * dt; }
  double t_end() const { return t(n_points - 1); }
};

// State samples on a uniform grid, one row per grid point. A diverging
// trajectory is clamped at +-clamp_cap from the first bad step on and
// flagged instead of erroring: unstable dynamics are data here.
struct StateTrajectory {
  TimeGrid grid;
  Matrix states;  // n_points x dim
  bool diverged = false;

  int dim() const { return static_cast<int>(states.cols()); }
  Vector row(int k) const { return states.row(k).transpose(); }
};

// Evaluation rule (t, y) -> dy/dt, plus an optional per-dimension
// diffusion rule for SDE paths.
struct VectorField {
  int dim = 0;
  std::function<void(double t, const Vector& y, Vector& dydt)> drift;
  std::function<void(double t, const Vector& y, Vector& g)> diffusion;

  bool has_diffusion() const { return static_cast<bool>(diffusion); }
};

inline constexpr double kDefaultClampCap = 1e6;

// Classical fixed-step 4th-order Runge-Kutta on the grid.
StateTrajectory rk4_integrate(const VectorField& field, const Vector& y0,
                              const TimeGrid& grid,
                              double clamp_cap = kDefaultClampCap);

struct Rk45Stats {
  int accepted = 0;
  int rejected = 0;
  double max_accepted_error = 0.0;  // scaled error estimate, <= 1 on accept
};

// Dormand-Prince 5(4) with PI step control; dense output via cubic
// Hermite interpolation on each accepted step, resampled onto out_grid.
StateTrajectory rk45_integrate(const VectorField& field, const Vector& y0,
                               double t0, double t1, double rtol, double atol,
                               const TimeGrid& out_grid,
                               Rk45Stats* stats = nullptr,
                               double clamp_cap = kDefaultClampCap);

// Euler-Maruyama: y_{k+1} = y_k + F dt + G sqrt(dt) z_k with z_k standard
// normal per dimension. Deterministic given the rng seed.
StateTrajectory euler_maruyama(const VectorField& field, const Vector& y0,
                               const TimeGrid& grid, Rng& rng,
                               double clamp_cap = kDefaultClampCap);

// --- differentiable unrolls -------------------------------------------------

// Field as a tape-graph builder; y is dim x batch, the result must have
// the same shape.
using TapedField = std::function<Var(Tape&, Var y)>;

// Differentiable clamp to [-cap, cap] (subgradient 0 outside).
Var taped_clamp(Tape& tape, Var y, double cap);

// Unrolls RK4 on the tape; returns the state at every grid point
// (n_points entries, first is y0). Gradients flow to y0 and to any
// parameters used inside the field builder.
std::vector<Var> rk4_unroll(Tape& tape, const TapedField& field, Var y0,
                            const TimeGrid& grid,
                            double clamp_cap = kDefaultClampCap);

// Euler-Maruyama unroll with fixed noise increments (noise[k] is a
// dim x batch constant); used for K-path SDE rollouts with common
// random numbers.
std::vector<Var> em_unroll(Tape& tape, const TapedField& drift,
                           const TapedField& diffusion, Var y0,
                           const TimeGrid& grid,
                           const std::vector<Matrix>& noise,
                           double clamp_cap = kDefaultClampCap);

// Trajectory dump: header `t,y_0,...,y_{d-1},diverged`.
std::string trajectory_to_csv(const StateTrajectory& traj);
StateTrajectory trajectory_from_csv(const std::string& csv);

}  // namespace deop
