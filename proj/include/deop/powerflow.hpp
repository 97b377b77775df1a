#pragma once

#include <optional>

#include "deop/power.hpp"

namespace deop {

struct SolveReport {
  bool converged = false;
  int iterations = 0;
  double equality_residual = 0.0;   // max-abs over h
  double inequality_violation = 0.0;  // max over positive g
  double objective = 0.0;
};

// Polar-form Newton-Raphson power flow. Generator buses are PV (fixed
// vm_gen, fixed p_gen except at the slack generator), everything else PQ.
// Returns the full dispatch implied by the solution: slack generator p and
// all generator q are read off the converged voltages.
struct PfResult {
  DispatchDecision u;
  SolveReport report;
};
PfResult newton_power_flow(const PowerNetwork& net, const Vector& p_load,
                           const Vector& q_load, const Vector& p_gen,
                           const Vector& vm_gen, double tol = 1e-8,
                           int max_iter = 50);

struct AcopfConfig {
  double tol_equality = 1e-5;
  double tol_gradient = 1e-5;
  int max_outer = 200;
  int max_inner = 400;
  double mu0 = 10.0;        // initial penalty weight
  double mu_max = 1e8;
  std::optional<DispatchDecision> warm_start;
};

// Augmented-Lagrangian dispatch solve of the steady-state AC-OPF:
// outer loop on the power-balance equalities (and line/angle
// inequalities), projected-gradient inner solves respecting the box
// bounds on (p, q, |V|). A local optimum is accepted.
struct AcopfResult {
  DispatchDecision u;
  SolveReport report;
};
AcopfResult solve_acopf(const PowerNetwork& net, const Vector& p_load,
                        const Vector& q_load, const AcopfConfig& cfg = {});

}  // namespace deop
