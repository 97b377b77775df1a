#pragma once

#include <complex>
#include <string>
#include <vector>

#include "deop/integrate.hpp"
#include "deop/linalg.hpp"

namespace deop {

// Classical machine model of a synchronous generator behind transient
// reactance. State convention: (delta [rad], omega [per-unit speed]);
// d(delta)/dt = omega_s * (omega - 1) with omega_s in rad/s, and
// M = 2H [s] multiplies d(omega)/dt. Residual checks are convention
// independent.
struct GeneratorParams {
  int bus = 0;             // bus index (0-based) the machine sits on
  double M = 6.0;          // 2H, seconds
  double D = 0.0;          // damping, pu torque per pu speed deviation
  double P_m = 0.0;        // mechanical power, pu
  double X_d = 0.1;        // transient reactance, pu
  double omega_s = 2.0 * 3.14159265358979323846 * 60.0;  // rad/s
  double delta_max = 3.14159265358979323846 / 2.0;       // rad
};

struct Bus {
  int id = 0;           // original bus number
  double v_min = 0.9, v_max = 1.1;
  double p_load = 0.0, q_load = 0.0;  // nominal, pu
  double gs = 0.0, bs = 0.0;          // shunt, pu
};

struct Branch {
  int from = 0, to = 0;   // 0-based bus indices
  double r = 0.0, x = 0.0, b_charge = 0.0;
  double s_max = 0.0;     // thermal limit, pu (0 = unlimited)
  double theta_max = 0.0; // angle difference limit, rad (>= pi = unlimited)
  double tap = 1.0;
};

struct Generator {
  int bus = 0;  // 0-based
  double p_min = 0.0, p_max = 0.0;
  double q_min = 0.0, q_max = 0.0;
  double c2 = 0.0, c1 = 0.0, c0 = 0.0;  // cost: c2 p^2 + c1 p + c0 (p in pu)
  double v_setpoint = 1.0;
};

struct PowerNetwork {
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Generator> generators;
  std::vector<GeneratorParams> dynamics;  // aligned with generators
  int ref_bus = 0;  // 0-based
  double base_mva = 100.0;

  int n_bus() const { return static_cast<int>(buses.size()); }
  int n_branch() const { return static_cast<int>(branches.size()); }
  int n_gen() const { return static_cast<int>(generators.size()); }
  int gen_at_bus(int bus) const;  // -1 if none
};

// Per-generator (p, q) setpoints plus per-bus voltage magnitude/angle.
struct DispatchDecision {
  Vector p_gen;  // n_gen
  Vector q_gen;  // n_gen
  Vector vm;     // n_bus
  Vector va;     // n_bus, va[ref] = 0
};

// MATPOWER-style case text (bus/gen/branch/gencost tables, per-unit on
// baseMVA). Only the fields used above are consumed.
PowerNetwork load_matpower_case(const std::string& path);
// Generator dynamics sidecar: JSON keyed by generator bus number.
void load_dynamics_sidecar(PowerNetwork& net, const std::string& path);

// Initial conditions of the machine model from the dispatch at its bus:
// closed form for (delta0, E_q0) plus omega0 = omega_s (caller's speed
// convention; pass 1.0 for per-unit).
struct InitConditions {
  double delta0 = 0.0;
  double e_q0 = 0.0;
  double omega0 = 0.0;
};
InitConditions init_conditions(double p_r, double q_r, double v_g,
                               double theta_g, double x_d, double omega_s);

// Swing dynamics for one generator given its (fixed) parameters and the
// dispatch-dependent quantities (E_q0, |V|g, theta_g).
VectorField swing_field(const GeneratorParams& gen, double e_q0, double v_g,
                        double theta_g);

// max over the grid of max(0, delta(t) - delta_max); 0 means stable.
double stability_violation(const StateTrajectory& traj, double delta_max,
                           int delta_component = 0);

// Static AC-OPF residuals at a decision. h: per-bus complex power balance
// (real parts then imaginary parts), plus the reference-angle pin.
// g: signed slacks, positive = violated, grouped as
// [vm bounds, gen p bounds, gen q bounds, line flows, angle diffs].
struct AcopfResiduals {
  Vector h;            // 2*n_bus + 1
  Vector g;            // see grouping above
  Vector flow_from;    // |S_ij| per branch, from side
  Vector flow_to;      // |S_ij| per branch, to side
};
AcopfResiduals acopf_residuals(const DispatchDecision& u,
                               const PowerNetwork& net,
                               const Vector& p_load, const Vector& q_load);

double acopf_objective(const DispatchDecision& u, const PowerNetwork& net);

// Complex bus injections implied by (vm, va): S_i = V_i * conj(I_i).
void bus_injections(const PowerNetwork& net, const Vector& vm,
                    const Vector& va, Vector& p_inj, Vector& q_inj);

// Branch admittance pieces used by residuals, power flow and the taped
// training graph.
struct BranchAdmittance {
  double gff, bff, gft, bft, gtf, btf, gtt, btt;
};
BranchAdmittance branch_admittance(const Branch& br);

}  // namespace deop
