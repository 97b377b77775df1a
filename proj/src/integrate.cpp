#include "deop/integrate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace deop {

TimeGrid::TimeGrid(double t0_, double dt_, int n_points_)
    : t0(t0_), dt(dt_), n_points(n_points_) {
  if (dt <= 0.0) throw std::invalid_argument("TimeGrid: dt must be > 0");
  if (n_points < 2)
    throw std::invalid_argument("TimeGrid: n_points must be >= 2");
}

namespace {

// Clamp a freshly computed state into [-cap, cap]; NaNs fall back to the
// previous value. Returns true if anything had to be fixed.
bool sanitize(const Vector& prev, Vector& y, double cap) {
  bool touched = false;
  for (int i = 0; i < y.size(); ++i) {
    double v = y[i];
    if (std::isnan(v)) {
      v = std::clamp(prev[i], -cap, cap);
      touched = true;
    } else if (v > cap) {
      v = cap;
      touched = true;
    } else if (v < -cap) {
      v = -cap;
      touched = true;
    }
    y[i] = v;
  }
  return touched;
}

}  // namespace

StateTrajectory rk4_integrate(const VectorField& field, const Vector& y0,
                              const TimeGrid& grid, double clamp_cap) {
  if (y0.size() != field.dim)
    throw std::invalid_argument("rk4_integrate: y0 dimension mismatch");

  StateTrajectory traj;
  traj.grid = grid;
  traj.states.resize(grid.n_points, field.dim);
  traj.states.row(0) = y0.transpose();

  Vector y = y0, k1(field.dim), k2(field.dim), k3(field.dim), k4(field.dim),
         tmp(field.dim);
  const double dt = grid.dt;
  for (int k = 0; k + 1 < grid.n_points; ++k) {
    const double t = grid.t(k);
    field.drift(t, y, k1);
    tmp = y + 0.5 * dt * k1;
    field.drift(t + 0.5 * dt, tmp, k2);
    tmp = y + 0.5 * dt * k2;
    field.drift(t + 0.5 * dt, tmp, k3);
    tmp = y + dt * k3;
    field.drift(t + dt, tmp, k4);
    Vector y_next = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (sanitize(y, y_next, clamp_cap)) traj.diverged = true;
    y = y_next;
    traj.states.row(k + 1) = y.transpose();
  }
  return traj;
}

namespace {

// Dormand-Prince 5(4) tableau
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                 a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33,
                 a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                 b5 = -2187.0 / 6784, b6 = 11.0 / 84;
// embedded 4th-order weights
constexpr double e1 = 5179.0 / 57600, e3 = 7571.0 / 16695, e4 = 393.0 / 640,
                 e5 = -92097.0 / 339200, e6 = 187.0 / 2100, e7 = 1.0 / 40;

struct DenseSeg {
  double t0, dt;
  Vector y0, y1, f0, f1;
};

Vector hermite_eval(const DenseSeg& s, double t) {
  double th = (t - s.t0) / s.dt;
  double th2 = th * th, th3 = th2 * th;
  double h00 = 2 * th3 - 3 * th2 + 1;
  double h10 = th3 - 2 * th2 + th;
  double h01 = -2 * th3 + 3 * th2;
  double h11 = th3 - th2;
  return h00 * s.y0 + (h10 * s.dt) * s.f0 + h01 * s.y1 + (h11 * s.dt) * s.f1;
}

}  // namespace

StateTrajectory rk45_integrate(const VectorField& field, const Vector& y0,
                               double t0, double t1, double rtol, double atol,
                               const TimeGrid& out_grid, Rk45Stats* stats,
                               double clamp_cap) {
  if (t1 <= t0) throw std::invalid_argument("rk45_integrate: t1 must be > t0");
  if (rtol <= 0.0 || atol <= 0.0)
    throw std::invalid_argument("rk45_integrate: tolerances must be > 0");
  if (y0.size() != field.dim)
    throw std::invalid_argument("rk45_integrate: y0 dimension mismatch");

  StateTrajectory traj;
  traj.grid = out_grid;
  traj.states.resize(out_grid.n_points, field.dim);

  const int d = field.dim;
  Vector y = y0, k1(d), k2(d), k3(d), k4(d), k5(d), k6(d), k7(d), tmp(d),
         y5(d), err(d);
  double t = t0;
  double dt = (t1 - t0) / 100.0;
  double prev_err = 1.0;  // PI controller memory
  int out_idx = 0;
  bool diverged = false;

  field.drift(t, y, k1);

  auto emit_upto = [&](const DenseSeg& seg) {
    while (out_idx < out_grid.n_points &&
           out_grid.t(out_idx) <= seg.t0 + seg.dt + 1e-12) {
      Vector v = hermite_eval(seg, std::min(out_grid.t(out_idx), seg.t0 + seg.dt));
      if (sanitize(seg.y0, v, clamp_cap)) diverged = true;
      traj.states.row(out_idx) = v.transpose();
      ++out_idx;
    }
  };

  // exact grid head at t0
  if (out_grid.t(0) <= t0 + 1e-12) {
    traj.states.row(0) = y.transpose();
    out_idx = 1;
  }

  while (t < t1 - 1e-12 && out_idx < out_grid.n_points) {
    dt = std::min(dt, t1 - t);
    if (dt < 1e-12) {
      diverged = true;
      break;
    }

    tmp = y + dt * (a21 * k1);
    field.drift(t + c2 * dt, tmp, k2);
    tmp = y + dt * (a31 * k1 + a32 * k2);
    field.drift(t + c3 * dt, tmp, k3);
    tmp = y + dt * (a41 * k1 + a42 * k2 + a43 * k3);
    field.drift(t + c4 * dt, tmp, k4);
    tmp = y + dt * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
    field.drift(t + c5 * dt, tmp, k5);
    tmp = y + dt * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
    field.drift(t + dt, tmp, k6);
    y5 = y + dt * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    field.drift(t + dt, y5, k7);  // FSAL
    err = dt * ((b1 - e1) * k1 + (b3 - e3) * k3 + (b4 - e4) * k4 +
                (b5 - e5) * k5 + (b6 - e6) * k6 - e7 * k7);

    bool finite = y5.allFinite() && err.allFinite();
    double err_norm = 0.0;
    if (finite) {
      for (int i = 0; i < d; ++i) {
        double sc = atol + rtol * std::max(std::abs(y[i]), std::abs(y5[i]));
        double e = err[i] / sc;
        err_norm += e * e;
      }
      err_norm = std::sqrt(err_norm / d);
    } else {
      err_norm = 10.0;
    }

    if (err_norm <= 1.0 && finite) {
      DenseSeg seg{t, dt, y, y5, k1, k7};
      if (stats) {
        stats->accepted += 1;
        stats->max_accepted_error = std::max(stats->max_accepted_error, err_norm);
      }
      t += dt;
      y = y5;
      k1 = k7;
      emit_upto(seg);
      // PI step control (Gustafsson)
      double fac = 0.9 * std::pow(std::max(err_norm, 1e-10), -0.7 / 5.0) *
                   std::pow(std::max(prev_err, 1e-10), 0.4 / 5.0);
      prev_err = std::max(err_norm, 1e-10);
      dt *= std::clamp(fac, 0.2, 5.0);
    } else {
      if (stats) stats->rejected += 1;
      dt *= std::clamp(0.9 * std::pow(err_norm, -0.2), 0.1, 0.9);
    }
  }

  // pad any remaining grid points with the final state
  for (; out_idx < out_grid.n_points; ++out_idx) {
    traj.states.row(out_idx) = y.transpose();
    if (t < t1 - 1e-9) diverged = true;
  }
  traj.diverged = diverged;
  return traj;
}

StateTrajectory euler_maruyama(const VectorField& field, const Vector& y0,
                               const TimeGrid& grid, Rng& rng,
                               double clamp_cap) {
  if (!field.has_diffusion())
    throw std::invalid_argument("euler_maruyama: field has no diffusion rule");
  if (y0.size() != field.dim)
    throw std::invalid_argument("euler_maruyama: y0 dimension mismatch");

  StateTrajectory traj;
  traj.grid = grid;
  traj.states.resize(grid.n_points, field.dim);
  traj.states.row(0) = y0.transpose();

  Vector y = y0, f(field.dim), g(field.dim);
  const double dt = grid.dt;
  const double sdt = std::sqrt(dt);
  for (int k = 0; k + 1 < grid.n_points; ++k) {
    field.drift(grid.t(k), y, f);
    field.diffusion(grid.t(k), y, g);
    Vector y_next = y + dt * f;
    for (int i = 0; i < field.dim; ++i) y_next[i] += g[i] * sdt * rng.normal();
    if (sanitize(y, y_next, clamp_cap)) traj.diverged = true;
    y = y_next;
    traj.states.row(k + 1) = y.transpose();
  }
  return traj;
}

Var taped_clamp(Tape& tape, Var y, double cap) {
  const Matrix& v = tape.value(y);
  // fast path: nothing near the rails, keep the graph small
  if (v.cwiseAbs().maxCoeff() < 0.9 * cap) return y;
  Matrix capm = Matrix::Constant(v.rows(), v.cols(), cap);
  Var c = tape.constant(capm);
  // lower clamp: relu(y + cap) - cap, then upper: cap - relu(cap - y)
  Var lo = tape.sub(tape.relu(tape.add(y, c)), c);
  return tape.sub(c, tape.relu(tape.sub(c, lo)));
}

std::vector<Var> rk4_unroll(Tape& tape, const TapedField& field, Var y0,
                            const TimeGrid& grid, double clamp_cap) {
  std::vector<Var> states;
  states.reserve(grid.n_points);
  states.push_back(y0);
  Var y = y0;
  const double dt = grid.dt;
  for (int k = 0; k + 1 < grid.n_points; ++k) {
    Var k1 = field(tape, y);
    Var k2 = field(tape, tape.add(y, tape.scale(k1, 0.5 * dt)));
    Var k3 = field(tape, tape.add(y, tape.scale(k2, 0.5 * dt)));
    Var k4 = field(tape, tape.add(y, tape.scale(k3, dt)));
    Var incr = tape.add(tape.add(k1, tape.scale(k2, 2.0)),
                        tape.add(tape.scale(k3, 2.0), k4));
    y = tape.add(y, tape.scale(incr, dt / 6.0));
    y = taped_clamp(tape, y, clamp_cap);
    states.push_back(y);
  }
  return states;
}

std::vector<Var> em_unroll(Tape& tape, const TapedField& drift,
                           const TapedField& diffusion, Var y0,
                           const TimeGrid& grid,
                           const std::vector<Matrix>& noise,
                           double clamp_cap) {
  if (static_cast<int>(noise.size()) + 1 < grid.n_points)
    throw std::invalid_argument("em_unroll: not enough noise increments");
  std::vector<Var> states;
  states.reserve(grid.n_points);
  states.push_back(y0);
  Var y = y0;
  const double dt = grid.dt;
  const double sdt = std::sqrt(dt);
  for (int k = 0; k + 1 < grid.n_points; ++k) {
    Var f = drift(tape, y);
    Var g = diffusion(tape, y);
    Var z = tape.constant(sdt * noise[k]);
    y = tape.add(y, tape.add(tape.scale(f, dt), tape.mul(g, z)));
    y = taped_clamp(tape, y, clamp_cap);
    states.push_back(y);
  }
  return states;
}

std::string trajectory_to_csv(const StateTrajectory& traj) {
  std::ostringstream os;
  os << "t";
  for (int j = 0; j < traj.dim(); ++j) os << ",y_" << j;
  os << ",diverged\n";
  char buf[32];
  for (int k = 0; k < traj.grid.n_points; ++k) {
    std::snprintf(buf, sizeof(buf), "%.17g", traj.grid.t(k));
    os << buf;
    for (int j = 0; j < traj.dim(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", traj.states(k, j));
      os << "," << buf;
    }
    os << "," << (traj.diverged ? 1 : 0) << "\n";
  }
  return os.str();
}

StateTrajectory trajectory_from_csv(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line))
    throw std::runtime_error("trajectory_from_csv: empty input");
  int n_cols = 1;
  for (char ch : line)
    if (ch == ',') ++n_cols;
  int dim = n_cols - 2;
  if (dim < 1) throw std::runtime_error("trajectory_from_csv: bad header");

  std::vector<double> ts;
  std::vector<Vector> rows;
  bool diverged = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    ts.push_back(std::stod(cell));
    Vector r(dim);
    for (int j = 0; j < dim; ++j) {
      std::getline(ls, cell, ',');
      r[j] = std::stod(cell);
    }
    std::getline(ls, cell, ',');
    if (std::stoi(cell) != 0) diverged = true;
    rows.push_back(r);
  }
  if (rows.size() < 2) throw std::runtime_error("trajectory_from_csv: too few rows");

  StateTrajectory traj;
  traj.grid = TimeGrid(ts[0], ts[1] - ts[0], static_cast<int>(ts.size()));
  traj.states.resize(rows.size(), dim);
  for (std::size_t k = 0; k < rows.size(); ++k)
    traj.states.row(k) = rows[k].transpose();
  traj.diverged = diverged;
  return traj;
}

}  // namespace deop
