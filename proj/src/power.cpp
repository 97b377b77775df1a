#include "deop/power.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace deop {

int PowerNetwork::gen_at_bus(int bus) const {
  for (int g = 0; g < n_gen(); ++g)
    if (generators[g].bus == bus) return g;
  return -1;
}

namespace {

// Pulls the numeric rows of one `mpc.<name> = [ ... ];` table.
std::vector<std::vector<double>> parse_table(const std::string& text,
                                             const std::string& name) {
  std::string key = "mpc." + name;
  std::size_t pos = text.find(key + " ");
  if (pos == std::string::npos) pos = text.find(key + "=");
  if (pos == std::string::npos)
    throw std::runtime_error("matpower case: missing table " + key);
  pos = text.find('[', pos);
  std::size_t end = text.find(']', pos);
  if (pos == std::string::npos || end == std::string::npos)
    throw std::runtime_error("matpower case: malformed table " + key);

  std::vector<std::vector<double>> rows;
  std::vector<double> row;
  std::string tok;
  for (std::size_t i = pos + 1; i < end; ++i) {
    char c = text[i];
    if (c == '%') {  // comment to end of line
      while (i < end && text[i] != '\n') ++i;
      c = '\n';
    }
    if (std::isspace(static_cast<unsigned char>(c)) || c == ';' || c == ',') {
      if (!tok.empty()) {
        row.push_back(std::stod(tok));
        tok.clear();
      }
      if ((c == ';' || c == '\n') && !row.empty()) {
        rows.push_back(row);
        row.clear();
      }
    } else {
      tok += c;
    }
  }
  if (!tok.empty()) row.push_back(std::stod(tok));
  if (!row.empty()) rows.push_back(row);
  return rows;
}

double parse_scalar(const std::string& text, const std::string& name,
                    double fallback) {
  std::string key = "mpc." + name;
  std::size_t pos = text.find(key);
  if (pos == std::string::npos) return fallback;
  pos = text.find('=', pos);
  if (pos == std::string::npos) return fallback;
  return std::stod(text.substr(pos + 1));
}

constexpr double kPi = 3.14159265358979323846;

}  // namespace

PowerNetwork load_matpower_case(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open case file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();

  PowerNetwork net;
  net.base_mva = parse_scalar(text, "baseMVA", 100.0);

  auto bus_rows = parse_table(text, "bus");
  for (const auto& r : bus_rows) {
    if (r.size() < 13) throw std::runtime_error("matpower case: short bus row");
    Bus b;
    b.id = static_cast<int>(r[0]);
    int type = static_cast<int>(r[1]);
    b.p_load = r[2] / net.base_mva;
    b.q_load = r[3] / net.base_mva;
    b.gs = r[4] / net.base_mva;
    b.bs = r[5] / net.base_mva;
    b.v_max = r[11];
    b.v_min = r[12];
    if (type == 3) net.ref_bus = static_cast<int>(net.buses.size());
    net.buses.push_back(b);
  }
  auto bus_index = [&](int id) {
    for (int i = 0; i < net.n_bus(); ++i)
      if (net.buses[i].id == id) return i;
    throw std::runtime_error("matpower case: unknown bus id " +
                             std::to_string(id));
  };

  auto gen_rows = parse_table(text, "gen");
  for (const auto& r : gen_rows) {
    if (r.size() < 10) throw std::runtime_error("matpower case: short gen row");
    if (r[7] == 0.0) continue;  // status off
    Generator g;
    g.bus = bus_index(static_cast<int>(r[0]));
    g.q_max = r[3] / net.base_mva;
    g.q_min = r[4] / net.base_mva;
    g.v_setpoint = r[5];
    g.p_max = r[8] / net.base_mva;
    g.p_min = r[9] / net.base_mva;
    net.generators.push_back(g);
  }

  auto br_rows = parse_table(text, "branch");
  for (const auto& r : br_rows) {
    if (r.size() < 11)
      throw std::runtime_error("matpower case: short branch row");
    if (r[10] == 0.0) continue;  // status off
    Branch br;
    br.from = bus_index(static_cast<int>(r[0]));
    br.to = bus_index(static_cast<int>(r[1]));
    br.r = r[2];
    br.x = r[3];
    br.b_charge = r[4];
    br.s_max = r[5] / net.base_mva;
    br.tap = (r.size() > 8 && r[8] != 0.0) ? r[8] : 1.0;
    double angmax = (r.size() > 12) ? r[12] : 360.0;
    double lim = std::abs(angmax) * kPi / 180.0;
    br.theta_max = (lim <= 0.0 || lim >= kPi) ? kPi : lim;
    net.branches.push_back(br);
  }

  auto cost_rows = parse_table(text, "gencost");
  if (cost_rows.size() < net.generators.size())
    throw std::runtime_error("matpower case: gencost rows missing");
  for (std::size_t g = 0; g < net.generators.size(); ++g) {
    const auto& r = cost_rows[g];
    if (r.size() < 7 || r[0] != 2.0 || r[3] != 3.0)
      throw std::runtime_error(
          "matpower case: only 3-term polynomial gencost supported");
    // $/MW^2 and $/MW onto the per-unit power base
    net.generators[g].c2 = r[4] * net.base_mva * net.base_mva;
    net.generators[g].c1 = r[5] * net.base_mva;
    net.generators[g].c0 = r[6];
  }
  return net;
}

void load_dynamics_sidecar(PowerNetwork& net, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dynamics sidecar: " + path);
  nlohmann::json j = nlohmann::json::parse(in);

  double omega_s = j.value("omega_s_rad_per_s", 2.0 * kPi * 60.0);
  double delta_max = j.value("delta_max_rad", kPi / 2.0);

  net.dynamics.assign(net.generators.size(), GeneratorParams{});
  for (auto& gp : net.dynamics) {
    gp.omega_s = omega_s;
    gp.delta_max = delta_max;
  }
  for (const auto& jg : j.at("generators")) {
    int bus_id = jg.at("bus").get<int>();
    int idx = -1;
    for (int g = 0; g < net.n_gen(); ++g)
      if (net.buses[net.generators[g].bus].id == bus_id) idx = g;
    if (idx < 0)
      throw std::runtime_error("dynamics sidecar: no generator at bus " +
                               std::to_string(bus_id));
    GeneratorParams& gp = net.dynamics[idx];
    gp.bus = net.generators[idx].bus;
    gp.M = 2.0 * jg.at("H").get<double>();
    gp.D = jg.at("D").get<double>();
    gp.P_m = jg.at("Pm").get<double>();
    gp.X_d = jg.at("Xd").get<double>();
  }
}

InitConditions init_conditions(double p_r, double q_r, double v_g,
                               double theta_g, double x_d, double omega_s) {
  if (v_g <= 0.0)
    throw std::invalid_argument("init_conditions: v_g must be > 0");
  double a = p_r * x_d;
  double b = q_r * x_d + v_g * v_g;
  InitConditions ic;
  if (a == 0.0 && b == 0.0) {
    // zero injection, degenerate: machine EMF pinned to terminal voltage
    ic.delta0 = theta_g;
    ic.e_q0 = v_g;
  } else {
    ic.delta0 = theta_g + std::atan2(a, b);
    ic.e_q0 = std::sqrt(a * a + b * b) / v_g;
  }
  ic.omega0 = omega_s;
  return ic;
}

VectorField swing_field(const GeneratorParams& gen, double e_q0, double v_g,
                        double theta_g) {
  VectorField f;
  f.dim = 2;
  const double coupling = e_q0 * v_g / gen.X_d;
  const double M = gen.M, D = gen.D, Pm = gen.P_m, ws = gen.omega_s;
  f.drift = [=](double, const Vector& y, Vector& dy) {
    double delta = y[0], omega = y[1];
    dy[0] = ws * (omega - 1.0);
    dy[1] =
        (Pm - D * (omega - 1.0) - coupling * std::sin(delta - theta_g)) / M;
  };
  return f;
}

double stability_violation(const StateTrajectory& traj, double delta_max,
                           int delta_component) {
  double worst = 0.0;
  for (int k = 0; k < traj.grid.n_points; ++k)
    worst = std::max(worst, traj.states(k, delta_component) - delta_max);
  return std::max(0.0, worst);
}

BranchAdmittance branch_admittance(const Branch& br) {
  double denom = br.r * br.r + br.x * br.x;
  if (denom <= 0.0) throw std::invalid_argument("branch with zero impedance");
  double g = br.r / denom;
  double b = -br.x / denom;
  double bc = br.b_charge / 2.0;
  double tau2 = br.tap * br.tap;
  BranchAdmittance a;
  a.gff = g / tau2;
  a.bff = (b + bc) / tau2;
  a.gft = -g / br.tap;
  a.bft = -b / br.tap;
  a.gtf = -g / br.tap;
  a.btf = -b / br.tap;
  a.gtt = g;
  a.btt = b + bc;
  return a;
}

namespace {

struct BranchFlow {
  double pf, qf, pt, qt;
};

BranchFlow branch_flow(const BranchAdmittance& a, double vf, double vt,
                       double tf, double tt) {
  double td = tf - tt;
  double c = std::cos(td), s = std::sin(td);
  BranchFlow fl;
  fl.pf = a.gff * vf * vf + vf * vt * (a.gft * c + a.bft * s);
  fl.qf = -a.bff * vf * vf + vf * vt * (a.gft * s - a.bft * c);
  fl.pt = a.gtt * vt * vt + vf * vt * (a.gtf * c - a.btf * s);
  fl.qt = -a.btt * vt * vt - vf * vt * (a.gtf * s + a.btf * c);
  return fl;
}

}  // namespace

void bus_injections(const PowerNetwork& net, const Vector& vm,
                    const Vector& va, Vector& p_inj, Vector& q_inj) {
  p_inj = Vector::Zero(net.n_bus());
  q_inj = Vector::Zero(net.n_bus());
  for (const Branch& br : net.branches) {
    BranchAdmittance a = branch_admittance(br);
    BranchFlow fl =
        branch_flow(a, vm[br.from], vm[br.to], va[br.from], va[br.to]);
    p_inj[br.from] += fl.pf;
    q_inj[br.from] += fl.qf;
    p_inj[br.to] += fl.pt;
    q_inj[br.to] += fl.qt;
  }
  for (int i = 0; i < net.n_bus(); ++i) {
    p_inj[i] += net.buses[i].gs * vm[i] * vm[i];
    q_inj[i] -= net.buses[i].bs * vm[i] * vm[i];
  }
}

AcopfResiduals acopf_residuals(const DispatchDecision& u,
                               const PowerNetwork& net, const Vector& p_load,
                               const Vector& q_load) {
  const int nb = net.n_bus(), ng = net.n_gen(), nl = net.n_branch();
  if (u.p_gen.size() != ng || u.q_gen.size() != ng || u.vm.size() != nb ||
      u.va.size() != nb)
    throw std::invalid_argument("acopf_residuals: dimension mismatch");

  Vector p_inj, q_inj;
  bus_injections(net, u.vm, u.va, p_inj, q_inj);

  Vector p_gen_bus = Vector::Zero(nb), q_gen_bus = Vector::Zero(nb);
  for (int g = 0; g < ng; ++g) {
    p_gen_bus[net.generators[g].bus] += u.p_gen[g];
    q_gen_bus[net.generators[g].bus] += u.q_gen[g];
  }

  AcopfResiduals res;
  res.h.resize(2 * nb + 1);
  for (int i = 0; i < nb; ++i) {
    res.h[i] = p_gen_bus[i] - p_load[i] - p_inj[i];
    res.h[nb + i] = q_gen_bus[i] - q_load[i] - q_inj[i];
  }
  res.h[2 * nb] = u.va[net.ref_bus];

  res.flow_from.resize(nl);
  res.flow_to.resize(nl);
  std::vector<double> ge;
  ge.reserve(2 * nb + 4 * ng + 3 * nl);
  for (int i = 0; i < nb; ++i) {
    ge.push_back(net.buses[i].v_min - u.vm[i]);
    ge.push_back(u.vm[i] - net.buses[i].v_max);
  }
  for (int g = 0; g < ng; ++g) {
    ge.push_back(net.generators[g].p_min - u.p_gen[g]);
    ge.push_back(u.p_gen[g] - net.generators[g].p_max);
    ge.push_back(net.generators[g].q_min - u.q_gen[g]);
    ge.push_back(u.q_gen[g] - net.generators[g].q_max);
  }
  for (int l = 0; l < nl; ++l) {
    const Branch& br = net.branches[l];
    BranchAdmittance a = branch_admittance(br);
    BranchFlow fl =
        branch_flow(a, u.vm[br.from], u.vm[br.to], u.va[br.from], u.va[br.to]);
    res.flow_from[l] = std::hypot(fl.pf, fl.qf);
    res.flow_to[l] = std::hypot(fl.pt, fl.qt);
    double smax = br.s_max > 0.0 ? br.s_max : 1e9;
    ge.push_back(res.flow_from[l] - smax);
    ge.push_back(res.flow_to[l] - smax);
    ge.push_back(std::abs(u.va[br.from] - u.va[br.to]) - br.theta_max);
  }
  res.g = Eigen::Map<Vector>(ge.data(), static_cast<int>(ge.size()));
  return res;
}

double acopf_objective(const DispatchDecision& u, const PowerNetwork& net) {
  double cost = 0.0;
  for (int g = 0; g < net.n_gen(); ++g) {
    const Generator& gen = net.generators[g];
    cost += gen.c2 * u.p_gen[g] * u.p_gen[g] + gen.c1 * u.p_gen[g] + gen.c0;
  }
  return cost;
}

}  // namespace deop
