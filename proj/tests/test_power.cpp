#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "deop/power.hpp"
#include "deop/powerflow.hpp"
#include "deop/rng.hpp"

using namespace deop;

namespace {

PowerNetwork load_case9() {
  PowerNetwork net = load_matpower_case(std::string(DEOP_DATA_DIR) + "/case9.m");
  load_dynamics_sidecar(net, std::string(DEOP_DATA_DIR) + "/case9_dynamics.json");
  return net;
}

// bus 0 (slack, generator) --- x=0.1 line --- bus 1 (load 0.5+j0.2)
PowerNetwork two_bus() {
  PowerNetwork net;
  Bus b0, b1;
  b0.id = 1;
  b1.id = 2;
  b1.p_load = 0.5;
  b1.q_load = 0.2;
  net.buses = {b0, b1};
  Branch br;
  br.from = 0;
  br.to = 1;
  br.r = 0.0;
  br.x = 0.1;
  net.branches = {br};
  Generator g;
  g.bus = 0;
  g.p_min = -5;
  g.p_max = 5;
  g.q_min = -5;
  g.q_max = 5;
  g.v_setpoint = 1.0;
  g.c2 = 1;
  g.c1 = 2;
  g.c0 = 3;
  net.generators = {g};
  net.ref_bus = 0;
  return net;
}

Vector loads_p(const PowerNetwork& net) {
  Vector p(net.n_bus());
  for (int i = 0; i < net.n_bus(); ++i) p[i] = net.buses[i].p_load;
  return p;
}
Vector loads_q(const PowerNetwork& net) {
  Vector q(net.n_bus());
  for (int i = 0; i < net.n_bus(); ++i) q[i] = net.buses[i].q_load;
  return q;
}

}  // namespace

TEST_CASE("matpower case9 loads with expected structure") {
  PowerNetwork net = load_case9();
  CHECK(net.n_bus() == 9);
  CHECK(net.n_branch() == 9);
  CHECK(net.n_gen() == 3);
  CHECK(net.ref_bus == 0);
  CHECK(net.buses[4].p_load == doctest::Approx(0.9));
  CHECK(net.buses[8].q_load == doctest::Approx(0.5));
  CHECK(net.generators[1].p_max == doctest::Approx(3.0));
  // gencost converted onto the pu power base
  CHECK(net.generators[0].c2 == doctest::Approx(0.11 * 1e4));
  CHECK(net.generators[0].c1 == doctest::Approx(5.0 * 100));
  REQUIRE(net.dynamics.size() == 3);
  CHECK(net.dynamics[0].M == doctest::Approx(2 * 23.64));
  CHECK(net.dynamics[2].X_d == doctest::Approx(0.1813));
}

TEST_CASE("init_conditions: zero injection degenerate case") {
  InitConditions ic = init_conditions(0.0, 0.0, 1.05, 0.3, 0.1, 1.0);
  CHECK(ic.delta0 == doctest::Approx(0.3));
  CHECK(ic.e_q0 == doctest::Approx(1.05));
  CHECK(ic.omega0 == 1.0);
  CHECK_THROWS(init_conditions(0.1, 0.1, 0.0, 0.0, 0.1, 1.0));
}

TEST_CASE("init_conditions satisfy the active/reactive power equations") {
  Rng rng(21);
  for (int rep = 0; rep < 1000; ++rep) {
    double p = rng.uniform(0.1, 2.5);
    double q = rng.uniform(-1.0, 1.5);
    double v = rng.uniform(0.9, 1.1);
    double th = rng.uniform(-0.5, 0.5);
    double xd = rng.uniform(0.05, 0.2);
    InitConditions ic = init_conditions(p, q, v, th, xd, 1.0);
    double r1 = ic.e_q0 * v * std::sin(ic.delta0 - th) / xd - p;
    double r2 = (ic.e_q0 * v * std::cos(ic.delta0 - th) - v * v) / xd - q;
    CHECK(std::abs(r1) < 1e-12);
    CHECK(std::abs(r2) < 1e-12);
  }
}

TEST_CASE("swing_field is zero at the steady-state point when P_m = p_r") {
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    double p = rng.uniform(0.1, 2.5);
    double q = rng.uniform(-1.0, 1.5);
    double v = rng.uniform(0.9, 1.1);
    double th = rng.uniform(-0.5, 0.5);
    GeneratorParams gen;
    gen.M = 6.0;
    gen.D = 1.0;
    gen.P_m = p;  // steady state by construction
    gen.X_d = 0.15;
    InitConditions ic = init_conditions(p, q, v, th, gen.X_d, 1.0);
    VectorField f = swing_field(gen, ic.e_q0, v, th);
    Vector y(2), dy(2);
    y << ic.delta0, ic.omega0;
    f.drift(0.0, y, dy);
    CHECK(dy.norm() < 1e-10);
  }
}

TEST_CASE("swing_field: delta frozen at synchronous speed, drift off it") {
  GeneratorParams gen;
  gen.P_m = 1.0;
  gen.X_d = 0.1;
  VectorField f = swing_field(gen, 1.0, 1.0, 0.0);
  Vector y(2), dy(2);
  y << 0.4, 1.0;  // omega = synchronous
  f.drift(0.0, y, dy);
  CHECK(dy[0] == 0.0);
  CHECK(dy[1] != 0.0);
}

TEST_CASE("mechanical power beyond the pull-out limit diverges past delta_max") {
  GeneratorParams gen;
  gen.M = 6.0;
  gen.D = 0.5;
  gen.P_m = 2.0;  // coupling below is E*v/X = 1.0 < P_m: no equilibrium
  gen.X_d = 1.0;
  VectorField f = swing_field(gen, 1.0, 1.0, 0.0);
  Vector y0(2);
  y0 << 0.1, 1.0;
  StateTrajectory tr = rk4_integrate(f, y0, TimeGrid(0, 1e-3, 3001));
  CHECK(stability_violation(tr, gen.delta_max) > 0.0);
  CHECK(tr.states(3000, 0) > tr.states(0, 0) + 1.0);
}

TEST_CASE("stability_violation arithmetic") {
  StateTrajectory tr;
  tr.grid = TimeGrid(0, 0.1, 3);
  tr.states.resize(3, 2);
  tr.states << 0.5, 1.0, 1.2, 1.0, 0.8, 1.0;
  CHECK(stability_violation(tr, 1.5) == 0.0);
  CHECK(stability_violation(tr, 0.9) == doctest::Approx(0.3));
}

TEST_CASE("undamped swing conserves its first integral") {
  GeneratorParams gen;
  gen.M = 6.0;
  gen.D = 0.0;
  gen.P_m = 0.9;
  gen.X_d = 0.15;
  double e = 1.1, v = 1.0, th = 0.1;
  double coupling = e * v / gen.X_d;
  VectorField f = swing_field(gen, e, v, th);
  Vector y0(2);
  y0 << 0.05, 1.0;  // displaced from equilibrium, swings freely
  StateTrajectory tr = rk4_integrate(f, y0, TimeGrid(0, 1e-3, 1001));
  auto energy = [&](double d, double w) {
    return 0.5 * gen.M * gen.omega_s * (w - 1.0) * (w - 1.0) - gen.P_m * d -
           coupling * std::cos(d - th);
  };
  double e0 = energy(tr.states(0, 0), tr.states(0, 1));
  double drift = 0.0;
  for (int k = 0; k < tr.grid.n_points; ++k)
    drift = std::max(drift,
                     std::abs(energy(tr.states(k, 0), tr.states(k, 1)) - e0));
  CHECK(drift < 1e-4);
}

TEST_CASE("swing trajectory: rk45 agrees with rk4 at dt=1e-4") {
  GeneratorParams gen;
  gen.M = 6.02;  // 2H for H=3.01
  gen.D = 0.5;
  gen.P_m = 0.85;
  gen.X_d = 0.1813;
  InitConditions ic = init_conditions(0.7, 0.2, 1.02, 0.05, gen.X_d, 1.0);
  VectorField f = swing_field(gen, ic.e_q0, 1.02, 0.05);
  Vector y0(2);
  y0 << ic.delta0, ic.omega0;

  TimeGrid fine(0, 1e-4, 10001);
  StateTrajectory ref = rk4_integrate(f, y0, fine);
  TimeGrid coarse(0, 1e-3, 1001);
  StateTrajectory adaptive =
      rk45_integrate(f, y0, 0.0, 1.0, 1e-6, 1e-8, coarse);
  CHECK(!adaptive.diverged);
  double worst = 0.0;
  for (int k = 0; k < coarse.n_points; ++k) {
    for (int j = 0; j < 2; ++j)
      worst = std::max(worst, std::abs(adaptive.states(k, j) -
                                       ref.states(10 * k, j)));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("two-bus acopf residuals match hand-computed flows") {
  PowerNetwork net = two_bus();
  DispatchDecision u;
  u.p_gen.resize(1);
  u.q_gen.resize(1);
  u.vm.resize(2);
  u.va.resize(2);
  u.vm << 1.02, 0.97;
  u.va << 0.0, -0.05;
  // hand flow on x=0.1 line: b_series = -10, so bft = +10
  double pf = 1.02 * 0.97 * 10.0 * std::sin(0.05);
  double qf = 10.0 * 1.02 * 1.02 - 10.0 * 1.02 * 0.97 * std::cos(0.05);
  u.p_gen[0] = pf;
  u.q_gen[0] = qf;

  AcopfResiduals r = acopf_residuals(u, net, loads_p(net), loads_q(net));
  // balance holds exactly at bus 0 by construction
  CHECK(std::abs(r.h[0]) < 1e-12);
  CHECK(std::abs(r.h[2]) < 1e-12);
  CHECK(r.h[4] == 0.0);  // reference angle pin
  // bus 1 carries the load mismatch; lossless line, so pt = -pf exactly
  double pt = -pf;
  double expected_h1 = -0.5 - pt;
  CHECK(r.h[1] == doctest::Approx(expected_h1).epsilon(1e-12));
  CHECK(r.flow_from[0] == doctest::Approx(std::hypot(pf, qf)));
}

TEST_CASE("newton power flow solves the two-bus case to the closed form") {
  PowerNetwork net = two_bus();
  Vector p_gen(1), vm_gen(1);
  p_gen << 0.0;  // slack picks it up
  vm_gen << 1.0;
  PfResult pf = newton_power_flow(net, loads_p(net), loads_q(net), p_gen, vm_gen);
  REQUIRE(pf.report.converged);
  CHECK(pf.report.iterations < 10);

  // closed form: V2^2 solves V2^4 - 0.96 V2^2 + 0.0029 = 0 (larger root)
  double v22 = (0.96 + std::sqrt(0.96 * 0.96 - 4 * 0.0029)) / 2.0;
  double v2 = std::sqrt(v22);
  double th2 = std::asin(-0.05 / v2);
  CHECK(std::abs(pf.u.vm[1] - v2) < 1e-8);
  CHECK(std::abs(pf.u.va[1] - th2) < 1e-8);

  // residual oracle: converged solution satisfies the balance equations
  AcopfResiduals r = acopf_residuals(pf.u, net, loads_p(net), loads_q(net));
  CHECK(r.h.cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("newton power flow: flat case with zero loads stays flat") {
  PowerNetwork net = two_bus();
  net.buses[1].p_load = 0.0;
  net.buses[1].q_load = 0.0;
  Vector p_gen(1), vm_gen(1);
  p_gen << 0.0;
  vm_gen << 1.0;
  PfResult pf = newton_power_flow(net, loads_p(net), loads_q(net), p_gen, vm_gen);
  REQUIRE(pf.report.converged);
  CHECK(pf.report.iterations <= 1);
  CHECK(pf.u.vm[1] == doctest::Approx(1.0));
  CHECK(pf.u.va[1] == doctest::Approx(0.0));
}

TEST_CASE("newton power flow converges on the nominal 9-bus case") {
  PowerNetwork net = load_case9();
  Vector p_gen(3), vm_gen(3);
  p_gen << 0.723, 1.63, 0.85;
  vm_gen << 1.04, 1.025, 1.025;
  PfResult pf = newton_power_flow(net, loads_p(net), loads_q(net), p_gen, vm_gen);
  REQUIRE(pf.report.converged);
  CHECK(pf.report.iterations < 10);
  AcopfResiduals r = acopf_residuals(pf.u, net, loads_p(net), loads_q(net));
  CHECK(r.h.cwiseAbs().maxCoeff() < 1e-8);
  // textbook solution: slack picks up ~0.716 pu
  CHECK(pf.u.p_gen[0] == doctest::Approx(0.716).epsilon(0.05));
}

TEST_CASE("acopf objective arithmetic") {
  PowerNetwork net = two_bus();
  DispatchDecision u;
  u.p_gen.resize(1);
  u.q_gen = Vector::Zero(1);
  u.vm = Vector::Ones(2);
  u.va = Vector::Zero(2);
  u.p_gen << 2.0;
  CHECK(acopf_objective(u, net) == doctest::Approx(1 * 4 + 2 * 2 + 3));
  u.p_gen << 0.0;
  CHECK(acopf_objective(u, net) == doctest::Approx(3.0));
}
