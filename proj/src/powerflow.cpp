#include "deop/powerflow.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace deop {

namespace {

// Dense bus admittance matrix (small systems; fine up to a few hundred
// buses).
void build_ybus(const PowerNetwork& net, Matrix& G, Matrix& B) {
  const int n = net.n_bus();
  G = Matrix::Zero(n, n);
  B = Matrix::Zero(n, n);
  for (const Branch& br : net.branches) {
    BranchAdmittance a = branch_admittance(br);
    G(br.from, br.from) += a.gff;
    B(br.from, br.from) += a.bff;
    G(br.to, br.to) += a.gtt;
    B(br.to, br.to) += a.btt;
    G(br.from, br.to) += a.gft;
    B(br.from, br.to) += a.bft;
    G(br.to, br.from) += a.gtf;
    B(br.to, br.from) += a.btf;
  }
  for (int i = 0; i < n; ++i) {
    G(i, i) += net.buses[i].gs;
    B(i, i) += net.buses[i].bs;
  }
}

void ybus_injections(const Matrix& G, const Matrix& B, const Vector& vm,
                     const Vector& va, Vector& p, Vector& q) {
  const int n = static_cast<int>(vm.size());
  p.setZero(n);
  q.setZero(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (G(i, j) == 0.0 && B(i, j) == 0.0) continue;
      double td = va[i] - va[j];
      double c = std::cos(td), s = std::sin(td);
      p[i] += vm[i] * vm[j] * (G(i, j) * c + B(i, j) * s);
      q[i] += vm[i] * vm[j] * (G(i, j) * s - B(i, j) * c);
    }
  }
}

}  // namespace

PfResult newton_power_flow(const PowerNetwork& net, const Vector& p_load,
                           const Vector& q_load, const Vector& p_gen,
                           const Vector& vm_gen, double tol, int max_iter) {
  const int n = net.n_bus();
  Matrix G, B;
  build_ybus(net, G, B);

  std::vector<int> bus_gen(n, -1);
  for (int g = 0; g < net.n_gen(); ++g) bus_gen[net.generators[g].bus] = g;
  const int slack = net.ref_bus;

  // unknowns: va at non-slack buses, vm at PQ (non-generator) buses
  std::vector<int> ang_idx, mag_idx;
  for (int i = 0; i < n; ++i) {
    if (i != slack) ang_idx.push_back(i);
    if (bus_gen[i] < 0) mag_idx.push_back(i);
  }
  const int na = static_cast<int>(ang_idx.size());
  const int nm = static_cast<int>(mag_idx.size());

  Vector vm = Vector::Ones(n), va = Vector::Zero(n);
  for (int i = 0; i < n; ++i)
    if (bus_gen[i] >= 0) vm[i] = vm_gen[bus_gen[i]];

  Vector p_spec = -p_load, q_spec = -q_load;
  for (int g = 0; g < net.n_gen(); ++g)
    if (net.generators[g].bus != slack) p_spec[net.generators[g].bus] += p_gen[g];

  Vector p_calc(n), q_calc(n);
  SolveReport report;
  bool ok = false;
  for (int it = 0; it <= max_iter; ++it) {
    ybus_injections(G, B, vm, va, p_calc, q_calc);
    Vector mis(na + nm);
    for (int k = 0; k < na; ++k) mis[k] = p_spec[ang_idx[k]] - p_calc[ang_idx[k]];
    for (int k = 0; k < nm; ++k)
      mis[na + k] = q_spec[mag_idx[k]] - q_calc[mag_idx[k]];

    report.iterations = it;
    report.equality_residual = mis.size() ? mis.cwiseAbs().maxCoeff() : 0.0;
    if (report.equality_residual < tol) {
      ok = true;
      break;
    }
    if (it == max_iter) break;

    Matrix J(na + nm, na + nm);
    for (int r = 0; r < na; ++r) {
      int i = ang_idx[r];
      for (int c = 0; c < na; ++c) {
        int j = ang_idx[c];
        if (i == j)
          J(r, c) = -q_calc[i] - B(i, i) * vm[i] * vm[i];
        else {
          double td = va[i] - va[j];
          J(r, c) = vm[i] * vm[j] *
                    (G(i, j) * std::sin(td) - B(i, j) * std::cos(td));
        }
      }
      for (int c = 0; c < nm; ++c) {
        int j = mag_idx[c];
        if (i == j)
          J(r, na + c) = p_calc[i] / vm[i] + G(i, i) * vm[i];
        else {
          double td = va[i] - va[j];
          J(r, na + c) =
              vm[i] * (G(i, j) * std::cos(td) + B(i, j) * std::sin(td));
        }
      }
    }
    for (int r = 0; r < nm; ++r) {
      int i = mag_idx[r];
      for (int c = 0; c < na; ++c) {
        int j = ang_idx[c];
        if (i == j)
          J(na + r, c) = p_calc[i] - G(i, i) * vm[i] * vm[i];
        else {
          double td = va[i] - va[j];
          J(na + r, c) = -vm[i] * vm[j] *
                         (G(i, j) * std::cos(td) + B(i, j) * std::sin(td));
        }
      }
      for (int c = 0; c < nm; ++c) {
        int j = mag_idx[c];
        if (i == j)
          J(na + r, na + c) = q_calc[i] / vm[i] - B(i, i) * vm[i];
        else {
          double td = va[i] - va[j];
          J(na + r, na + c) =
              vm[i] * (G(i, j) * std::sin(td) - B(i, j) * std::cos(td));
        }
      }
    }

    Eigen::PartialPivLU<Matrix> lu(J);
    Vector dx = lu.solve(mis);
    if (!dx.allFinite()) break;  // singular Jacobian
    for (int k = 0; k < na; ++k) va[ang_idx[k]] += dx[k];
    for (int k = 0; k < nm; ++k) vm[mag_idx[k]] += dx[na + k];
  }

  PfResult res;
  res.u.vm = vm;
  res.u.va = va;
  res.u.p_gen.resize(net.n_gen());
  res.u.q_gen.resize(net.n_gen());
  ybus_injections(G, B, vm, va, p_calc, q_calc);
  for (int g = 0; g < net.n_gen(); ++g) {
    int i = net.generators[g].bus;
    res.u.q_gen[g] = q_calc[i] + q_load[i];
    res.u.p_gen[g] = (i == slack) ? p_calc[i] + p_load[i] : p_gen[g];
  }
  report.converged = ok;
  res.report = report;
  return res;
}

namespace {

// Variable layout for the AL dispatch solver.
struct Layout {
  int ng, nb;
  int ref;
  int n() const { return 2 * ng + 2 * nb; }
  int ip(int g) const { return g; }
  int iq(int g) const { return ng + g; }
  int ivm(int b) const { return 2 * ng + b; }
  int iva(int b) const { return 2 * ng + nb + b; }
};

Vector pack(const Layout& L, const DispatchDecision& u) {
  Vector z(L.n());
  for (int g = 0; g < L.ng; ++g) {
    z[L.ip(g)] = u.p_gen[g];
    z[L.iq(g)] = u.q_gen[g];
  }
  for (int b = 0; b < L.nb; ++b) {
    z[L.ivm(b)] = u.vm[b];
    z[L.iva(b)] = u.va[b];
  }
  return z;
}

DispatchDecision unpack(const Layout& L, const Vector& z) {
  DispatchDecision u;
  u.p_gen.resize(L.ng);
  u.q_gen.resize(L.ng);
  u.vm.resize(L.nb);
  u.va.resize(L.nb);
  for (int g = 0; g < L.ng; ++g) {
    u.p_gen[g] = z[L.ip(g)];
    u.q_gen[g] = z[L.iq(g)];
  }
  for (int b = 0; b < L.nb; ++b) {
    u.vm[b] = z[L.ivm(b)];
    u.va[b] = z[L.iva(b)];
  }
  u.va[L.ref] = 0.0;
  return u;
}

}  // namespace

AcopfResult solve_acopf(const PowerNetwork& net, const Vector& p_load,
                        const Vector& q_load, const AcopfConfig& cfg) {
  const int nb = net.n_bus(), ng = net.n_gen(), nl = net.n_branch();
  Layout L{ng, nb, net.ref_bus};
  Matrix G, B;
  build_ybus(net, G, B);

  // box bounds (angles free except the reference pin)
  Vector lo(L.n()), hi(L.n());
  for (int g = 0; g < ng; ++g) {
    lo[L.ip(g)] = net.generators[g].p_min;
    hi[L.ip(g)] = net.generators[g].p_max;
    lo[L.iq(g)] = net.generators[g].q_min;
    hi[L.iq(g)] = net.generators[g].q_max;
  }
  for (int b = 0; b < nb; ++b) {
    lo[L.ivm(b)] = net.buses[b].v_min;
    hi[L.ivm(b)] = net.buses[b].v_max;
    lo[L.iva(b)] = -3.2;
    hi[L.iva(b)] = 3.2;
  }
  lo[L.iva(L.ref)] = 0.0;
  hi[L.iva(L.ref)] = 0.0;

  auto project = [&](Vector& z) {
    for (int i = 0; i < L.n(); ++i) z[i] = std::clamp(z[i], lo[i], hi[i]);
  };

  Vector z;
  if (cfg.warm_start) {
    z = pack(L, *cfg.warm_start);
  } else {
    DispatchDecision u0;
    u0.p_gen.resize(ng);
    u0.q_gen = Vector::Zero(ng);
    u0.vm = Vector::Ones(nb);
    u0.va = Vector::Zero(nb);
    double total_load = p_load.sum();
    for (int g = 0; g < ng; ++g) {
      u0.p_gen[g] = std::clamp(total_load / ng, net.generators[g].p_min,
                               net.generators[g].p_max);
      u0.vm[net.generators[g].bus] = net.generators[g].v_setpoint;
    }
    z = pack(L, u0);
  }
  project(z);

  const int nh = 2 * nb;          // power balance (ref pin handled by box)
  const int ngq = 3 * nl;         // line flows (2 sides) + angle diffs
  Vector lam_h = Vector::Zero(nh);
  Vector lam_g = Vector::Zero(ngq);
  double mu = cfg.mu0;

  // normalize the dispatch cost so penalty and objective gradients
  // compete at O(1); reported objective stays unscaled
  double cost_scale = 1.0;
  for (int g = 0; g < ng; ++g)
    cost_scale = std::max(cost_scale,
                          2.0 * net.generators[g].c2 * net.generators[g].p_max +
                              std::abs(net.generators[g].c1));

  Vector p_calc(nb), q_calc(nb);

  // h(z) and J^T weights accumulated into the gradient; `diag` collects a
  // Gauss-Newton diagonal of the AL Hessian for preconditioning; when
  // `J_out`/`act_out` are given, the dense equality Jacobian and the
  // active inequality gradient rows are also assembled (for the polish
  // phase)
  Vector diag;
  struct ActiveRow {
    Vector a;
    double w;
  };
  Matrix* J_out = nullptr;
  std::vector<ActiveRow>* act_out = nullptr;
  auto eval = [&](const Vector& zz, Vector* grad, Vector* h_out,
                  Vector* g_out) {
    DispatchDecision u = unpack(L, zz);
    ybus_injections(G, B, u.vm, u.va, p_calc, q_calc);

    Vector h(nh);
    for (int i = 0; i < nb; ++i) {
      double pg = 0.0, qg = 0.0;
      for (int g = 0; g < ng; ++g)
        if (net.generators[g].bus == i) {
          pg += u.p_gen[g];
          qg += u.q_gen[g];
        }
      h[i] = pg - p_load[i] - p_calc[i];
      h[nb + i] = qg - q_load[i] - q_calc[i];
    }

    // inequality slacks: squared-flow form keeps the gradient smooth
    Vector gq(ngq);
    std::vector<std::array<double, 9>> flow_cache(nl);
    for (int l = 0; l < nl; ++l) {
      const Branch& br = net.branches[l];
      BranchAdmittance a = branch_admittance(br);
      double vf = u.vm[br.from], vt = u.vm[br.to];
      double td = u.va[br.from] - u.va[br.to];
      double c = std::cos(td), s = std::sin(td);
      double pf = a.gff * vf * vf + vf * vt * (a.gft * c + a.bft * s);
      double qf = -a.bff * vf * vf + vf * vt * (a.gft * s - a.bft * c);
      double pt = a.gtt * vt * vt + vf * vt * (a.gtf * c - a.btf * s);
      double qt = -a.btt * vt * vt - vf * vt * (a.gtf * s + a.btf * c);
      double smax = br.s_max > 0.0 ? br.s_max : 1e9;
      gq[3 * l + 0] = pf * pf + qf * qf - smax * smax;
      gq[3 * l + 1] = pt * pt + qt * qt - smax * smax;
      gq[3 * l + 2] = std::abs(td) - br.theta_max;
      flow_cache[l] = {pf, qf, pt, qt, c, s, vf, vt, td};
    }

    double value = 0.0;
    for (int g = 0; g < ng; ++g) {
      const Generator& gen = net.generators[g];
      value += (gen.c2 * u.p_gen[g] * u.p_gen[g] + gen.c1 * u.p_gen[g] +
                gen.c0) /
               cost_scale;
    }
    for (int i = 0; i < nh; ++i)
      value += lam_h[i] * h[i] + 0.5 * mu * h[i] * h[i];
    for (int j = 0; j < ngq; ++j) {
      double t = lam_g[j] / mu + gq[j];
      if (t > 0.0) value += 0.5 * mu * (t * t - (lam_g[j] / mu) * (lam_g[j] / mu));
    }

    if (h_out) *h_out = h;
    if (g_out) *g_out = gq;
    if (!grad) return value;

    grad->setZero(L.n());
    diag.setConstant(L.n(), 1e-8);
    // objective
    for (int g = 0; g < ng; ++g) {
      (*grad)[L.ip(g)] +=
          (2.0 * net.generators[g].c2 * u.p_gen[g] + net.generators[g].c1) /
          cost_scale;
      diag[L.ip(g)] += 2.0 * net.generators[g].c2 / cost_scale;
    }

    // equality terms: w = lam + mu h, grad += J_h^T w
    Vector wp(nb), wq(nb);
    for (int i = 0; i < nb; ++i) {
      wp[i] = lam_h[i] + mu * h[i];
      wq[i] = lam_h[nb + i] + mu * h[nb + i];
    }
    if (J_out) J_out->setZero(nh, L.n());
    for (int g = 0; g < ng; ++g) {
      (*grad)[L.ip(g)] += wp[net.generators[g].bus];
      (*grad)[L.iq(g)] += wq[net.generators[g].bus];
      diag[L.ip(g)] += mu;
      diag[L.iq(g)] += mu;
      if (J_out) {
        (*J_out)(net.generators[g].bus, L.ip(g)) = 1.0;
        (*J_out)(nb + net.generators[g].bus, L.iq(g)) = 1.0;
      }
    }
    // d h / d (vm, va) = - d inj / d (vm, va)
    for (int i = 0; i < nb; ++i) {
      for (int j = 0; j < nb; ++j) {
        if (G(i, j) == 0.0 && B(i, j) == 0.0 && i != j) continue;
        double td = u.va[i] - u.va[j];
        double c = std::cos(td), s = std::sin(td);
        double dP_dvj, dP_dtj, dQ_dvj, dQ_dtj;
        if (i == j) {
          dP_dvj = p_calc[i] / u.vm[i] + G(i, i) * u.vm[i];
          dP_dtj = -q_calc[i] - B(i, i) * u.vm[i] * u.vm[i];
          dQ_dvj = q_calc[i] / u.vm[i] - B(i, i) * u.vm[i];
          dQ_dtj = p_calc[i] - G(i, i) * u.vm[i] * u.vm[i];
        } else {
          dP_dvj = u.vm[i] * (G(i, j) * c + B(i, j) * s);
          dP_dtj = u.vm[i] * u.vm[j] * (G(i, j) * s - B(i, j) * c);
          dQ_dvj = u.vm[i] * (G(i, j) * s - B(i, j) * c);
          dQ_dtj = -u.vm[i] * u.vm[j] * (G(i, j) * c + B(i, j) * s);
        }
        // d h_p[i] / d vm[j] = -dP_i/dvm[j], same for the other blocks
        (*grad)[L.ivm(j)] += -wp[i] * dP_dvj - wq[i] * dQ_dvj;
        (*grad)[L.iva(j)] += -wp[i] * dP_dtj - wq[i] * dQ_dtj;
        diag[L.ivm(j)] += mu * (dP_dvj * dP_dvj + dQ_dvj * dQ_dvj);
        diag[L.iva(j)] += mu * (dP_dtj * dP_dtj + dQ_dtj * dQ_dtj);
        if (J_out) {
          (*J_out)(i, L.ivm(j)) = -dP_dvj;
          (*J_out)(i, L.iva(j)) = -dP_dtj;
          (*J_out)(nb + i, L.ivm(j)) = -dQ_dvj;
          (*J_out)(nb + i, L.iva(j)) = -dQ_dtj;
        }
      }
    }

    // inequality terms
    for (int l = 0; l < nl; ++l) {
      const Branch& br = net.branches[l];
      BranchAdmittance a = branch_admittance(br);
      auto& fc = flow_cache[l];
      double pf = fc[0], qf = fc[1], pt = fc[2], qt = fc[3];
      double c = fc[4], s = fc[5], vf = fc[6], vt = fc[7], td = fc[8];

      double wf = 0.0, wt = 0.0;
      {
        double t = lam_g[3 * l + 0] / mu + (pf * pf + qf * qf -
                   (br.s_max > 0 ? br.s_max * br.s_max : 1e18));
        if (t > 0.0) wf = mu * t;
        t = lam_g[3 * l + 1] / mu +
            (pt * pt + qt * qt - (br.s_max > 0 ? br.s_max * br.s_max : 1e18));
        if (t > 0.0) wt = mu * t;
      }
      if (wf != 0.0 || wt != 0.0) {
        double dpf_dvf = 2 * a.gff * vf + vt * (a.gft * c + a.bft * s);
        double dpf_dvt = vf * (a.gft * c + a.bft * s);
        double dpf_dtd = vf * vt * (-a.gft * s + a.bft * c);
        double dqf_dvf = -2 * a.bff * vf + vt * (a.gft * s - a.bft * c);
        double dqf_dvt = vf * (a.gft * s - a.bft * c);
        double dqf_dtd = vf * vt * (a.gft * c + a.bft * s);
        double dpt_dvf = vt * (a.gtf * c - a.btf * s);
        double dpt_dvt = 2 * a.gtt * vt + vf * (a.gtf * c - a.btf * s);
        double dpt_dtd = vf * vt * (-a.gtf * s - a.btf * c);
        double dqt_dvf = -vt * (a.gtf * s + a.btf * c);
        double dqt_dvt = -2 * a.btt * vt - vf * (a.gtf * s + a.btf * c);
        double dqt_dtd = vf * vt * (-a.gtf * c + a.btf * s);

        double af = 2 * (pf * dpf_dvf + qf * dqf_dvf);
        double at = 2 * (pt * dpt_dvf + qt * dqt_dvf);
        double bf = 2 * (pf * dpf_dvt + qf * dqf_dvt);
        double bt = 2 * (pt * dpt_dvt + qt * dqt_dvt);
        double cf = 2 * (pf * dpf_dtd + qf * dqf_dtd);
        double ct = 2 * (pt * dpt_dtd + qt * dqt_dtd);
        (*grad)[L.ivm(br.from)] += wf * af + wt * at;
        (*grad)[L.ivm(br.to)] += wf * bf + wt * bt;
        (*grad)[L.iva(br.from)] += wf * cf + wt * ct;
        (*grad)[L.iva(br.to)] -= wf * cf + wt * ct;
        if (wf != 0.0) {
          diag[L.ivm(br.from)] += mu * af * af;
          diag[L.ivm(br.to)] += mu * bf * bf;
          diag[L.iva(br.from)] += mu * cf * cf;
          diag[L.iva(br.to)] += mu * cf * cf;
          if (act_out) {
            Vector a = Vector::Zero(L.n());
            a[L.ivm(br.from)] = af;
            a[L.ivm(br.to)] = bf;
            a[L.iva(br.from)] = cf;
            a[L.iva(br.to)] = -cf;
            act_out->push_back({std::move(a), mu});
          }
        }
        if (wt != 0.0) {
          diag[L.ivm(br.from)] += mu * at * at;
          diag[L.ivm(br.to)] += mu * bt * bt;
          diag[L.iva(br.from)] += mu * ct * ct;
          diag[L.iva(br.to)] += mu * ct * ct;
          if (act_out) {
            Vector a = Vector::Zero(L.n());
            a[L.ivm(br.from)] = at;
            a[L.ivm(br.to)] = bt;
            a[L.iva(br.from)] = ct;
            a[L.iva(br.to)] = -ct;
            act_out->push_back({std::move(a), mu});
          }
        }
      }
      double ta = lam_g[3 * l + 2] / mu + (std::abs(td) - br.theta_max);
      if (ta > 0.0) {
        double sg = (td >= 0.0) ? 1.0 : -1.0;
        (*grad)[L.iva(br.from)] += mu * ta * sg;
        (*grad)[L.iva(br.to)] -= mu * ta * sg;
        diag[L.iva(br.from)] += mu;
        diag[L.iva(br.to)] += mu;
        if (act_out) {
          Vector a = Vector::Zero(L.n());
          a[L.iva(br.from)] = sg;
          a[L.iva(br.to)] = -sg;
          act_out->push_back({std::move(a), mu});
        }
      }
    }
    return value;
  };

  auto proj_grad_norm = [&](const Vector& zz, const Vector& grad) {
    double worst = 0.0;
    for (int i = 0; i < L.n(); ++i) {
      double proj = std::clamp(zz[i] - grad[i], lo[i], hi[i]);
      worst = std::max(worst, std::abs(zz[i] - proj));
    }
    return worst;
  };

  SolveReport report;
  Vector h, gq, grad(L.n());
  double best_res = 1e30;
  double prev_res = 1e30;
  Vector z_best = z, lam_h_best = lam_h, lam_g_best = lam_g;

  int outer = 0;
  for (; outer < cfg.max_outer; ++outer) {
    // inner: projected gradient on the diagonally preconditioned
    // direction with a Barzilai-Borwein steplength
    double step = 0.5;
    eval(z, &grad, &h, &gq);
    Vector dir = grad.cwiseQuotient(diag);
    for (int inner = 0; inner < cfg.max_inner; ++inner) {
      Vector z_prev = z;
      Vector dir_prev = dir;
      Vector z_new = z - step * dir;
      project(z_new);
      z = z_new;
      eval(z, &grad, &h, &gq);
      dir = grad.cwiseQuotient(diag);
      Vector sz = z - z_prev;
      Vector sy = dir - dir_prev;
      double ss = sz.dot(sz), sdy = sz.dot(sy);
      if (sdy > 1e-18)
        step = std::clamp(ss / sdy, 1e-6, 1e2);
      else
        step = std::min(1.0, step * 2.0);
      if (proj_grad_norm(z, grad) < 0.3 * cfg.tol_gradient) break;
      if (sz.norm() < 1e-15) break;
    }

    // polish: projected Gauss-Newton on the AL (free-set Newton steps with
    // Levenberg-Marquardt damping); plain projected gradient cannot reach
    // the 1e-5 stationarity tolerance in the stiff voltage directions at
    // sane iteration counts
    Matrix J;
    std::vector<ActiveRow> act;
    double damp = 1e-9;
    for (int polish = 0; polish < 30; ++polish) {
      J_out = &J;
      act_out = &act;
      act.clear();
      double val0 = eval(z, &grad, &h, &gq);
      J_out = nullptr;
      act_out = nullptr;
      if (proj_grad_norm(z, grad) < 0.3 * cfg.tol_gradient) break;

      Matrix H = mu * (J.transpose() * J);
      for (const auto& ar : act) H += ar.w * (ar.a * ar.a.transpose());
      for (int g = 0; g < ng; ++g)
        H(L.ip(g), L.ip(g)) += 2.0 * net.generators[g].c2 / cost_scale;

      std::vector<int> free_idx;
      const double edge = 1e-12;
      for (int i = 0; i < L.n(); ++i) {
        bool at_lo = z[i] <= lo[i] + edge && grad[i] > 0.0;
        bool at_hi = z[i] >= hi[i] - edge && grad[i] < 0.0;
        if (!at_lo && !at_hi && hi[i] > lo[i]) free_idx.push_back(i);
      }
      if (free_idx.empty()) break;
      const int nf = static_cast<int>(free_idx.size());
      Matrix Hf(nf, nf);
      Vector gf(nf);
      for (int r = 0; r < nf; ++r) {
        gf[r] = grad[free_idx[r]];
        for (int c = 0; c < nf; ++c) Hf(r, c) = H(free_idx[r], free_idx[c]);
      }

      bool accepted = false;
      for (int attempt = 0; attempt < 8 && !accepted; ++attempt) {
        Matrix Hd = Hf;
        for (int r = 0; r < nf; ++r) Hd(r, r) += damp;
        Vector d = Hd.ldlt().solve(-gf);
        if (!d.allFinite()) {
          damp = std::max(damp * 16.0, 1e-6);
          continue;
        }
        double alpha = 1.0;
        for (int bt = 0; bt < 12; ++bt) {
          Vector z_try = z;
          for (int r = 0; r < nf; ++r) z_try[free_idx[r]] += alpha * d[r];
          project(z_try);
          double val1 = eval(z_try, nullptr, nullptr, nullptr);
          if (val1 <= val0 + 1e-14 * std::abs(val0)) {
            z = z_try;
            accepted = true;
            break;
          }
          alpha *= 0.5;
        }
        if (accepted)
          damp = std::max(damp * 0.25, 1e-9);
        else
          damp = std::max(damp * 16.0, 1e-6);
      }
      if (!accepted) break;
    }

    eval(z, &grad, &h, &gq);
    double res = h.cwiseAbs().maxCoeff();
    double pg_norm = proj_grad_norm(z, grad);
    if (res < best_res) {
      best_res = res;
      z_best = z;
      lam_h_best = lam_h;
      lam_g_best = lam_g;
    }
    if (res < cfg.tol_equality && pg_norm < cfg.tol_gradient) {
      report.converged = true;
      break;
    }

    if (res > 100.0 * std::max(best_res, cfg.tol_equality)) {
      // a dual overshoot derailed the iterate; back off and soften
      z = z_best;
      lam_h = lam_h_best;
      lam_g = lam_g_best;
      mu = std::max(cfg.mu0, mu * 0.25);
      prev_res = best_res;
      continue;
    }

    // dual ascent; stiffen the penalty only while the equality residual
    // is both stalled and above tolerance
    lam_h += mu * h;
    for (int j = 0; j < ngq; ++j)
      lam_g[j] = std::max(0.0, lam_g[j] + mu * gq[j]);
    if (res > 0.5 * prev_res && res > cfg.tol_equality && mu < cfg.mu_max)
      mu *= 2.0;
    prev_res = res;
  }

  if (!report.converged) z = z_best;
  DispatchDecision u = unpack(L, z);
  AcopfResiduals r = acopf_residuals(u, net, p_load, q_load);
  report.iterations = outer;
  report.equality_residual = r.h.cwiseAbs().maxCoeff();
  report.inequality_violation = std::max(0.0, r.g.maxCoeff());
  report.objective = acopf_objective(u, net);

  AcopfResult out;
  out.u = std::move(u);
  out.report = report;
  return out;
}

}  // namespace deop
