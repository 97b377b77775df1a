#include "deop/tape.hpp"

#include <cmath>
#include <sstream>

namespace deop {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void shape_error(const char* prim, const Matrix& a,
                              const Matrix& b) {
  std::ostringstream os;
  os << "shape mismatch in '" << prim << "': " << shape_str(a) << " vs "
     << shape_str(b);
  throw TapeError(os.str());
}

}  // namespace

const Matrix& Gradients::at(const Var& v) const {
  if (!has(v)) throw TapeError("no gradient recorded for this value-ref");
  return grads_[v.id];
}

Var Tape::push(Op op, int a, int b, Matrix value, bool tracked,
               std::vector<int> rows, double scalar) {
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.value = std::move(value);
  n.scalar = scalar;
  n.tracked = tracked;
  n.rows = std::move(rows);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(const Var& v) const {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw TapeError("value-ref does not belong to this tape");
  return nodes_[v.id];
}

void Tape::check_same_shape(const char* prim, const Var& a,
                            const Var& b) const {
  const Matrix& ma = node(a).value;
  const Matrix& mb = node(b).value;
  if (ma.rows() != mb.rows() || ma.cols() != mb.cols())
    shape_error(prim, ma, mb);
}

Var Tape::param(Matrix value) {
  return push(Op::kLeaf, -1, -1, std::move(value), true);
}
Var Tape::constant(Matrix value) {
  return push(Op::kLeaf, -1, -1, std::move(value), false);
}
Var Tape::param(double scalar) {
  return param(Matrix::Constant(1, 1, scalar));
}
Var Tape::constant(double scalar) {
  return constant(Matrix::Constant(1, 1, scalar));
}

Var Tape::add(Var a, Var b) {
  check_same_shape("add", a, b);
  return push(Op::kAdd, a.id, b.id, node(a).value + node(b).value,
              node(a).tracked || node(b).tracked);
}

Var Tape::sub(Var a, Var b) {
  check_same_shape("subtract", a, b);
  return push(Op::kSub, a.id, b.id, node(a).value - node(b).value,
              node(a).tracked || node(b).tracked);
}

Var Tape::mul(Var a, Var b) {
  check_same_shape("multiply", a, b);
  return push(Op::kMul, a.id, b.id,
              node(a).value.cwiseProduct(node(b).value),
              node(a).tracked || node(b).tracked);
}

Var Tape::div(Var a, Var b) {
  check_same_shape("divide", a, b);
  return push(Op::kDiv, a.id, b.id,
              node(a).value.cwiseQuotient(node(b).value),
              node(a).tracked || node(b).tracked);
}

Var Tape::scale(Var a, double c) {
  return push(Op::kScale, a.id, -1, c * node(a).value, node(a).tracked, {},
              c);
}

Var Tape::neg(Var a) {
  return push(Op::kNeg, a.id, -1, -node(a).value, node(a).tracked);
}

Var Tape::matmul(Var a, Var b) {
  const Matrix& ma = node(a).value;
  const Matrix& mb = node(b).value;
  if (ma.cols() != mb.rows()) shape_error("matmul", ma, mb);
  return push(Op::kMatMul, a.id, b.id, ma * mb,
              node(a).tracked || node(b).tracked);
}

Var Tape::sin(Var a) {
  return push(Op::kSin, a.id, -1, node(a).value.array().sin().matrix(),
              node(a).tracked);
}
Var Tape::cos(Var a) {
  return push(Op::kCos, a.id, -1, node(a).value.array().cos().matrix(),
              node(a).tracked);
}
Var Tape::exp(Var a) {
  return push(Op::kExp, a.id, -1, node(a).value.array().exp().matrix(),
              node(a).tracked);
}
Var Tape::sqrt(Var a) {
  return push(Op::kSqrt, a.id, -1, node(a).value.array().sqrt().matrix(),
              node(a).tracked);
}
Var Tape::square(Var a) {
  return push(Op::kSquare, a.id, -1,
              node(a).value.array().square().matrix(), node(a).tracked);
}
Var Tape::abs(Var a) {
  return push(Op::kAbs, a.id, -1, node(a).value.array().abs().matrix(),
              node(a).tracked);
}
Var Tape::relu(Var a) {
  return push(Op::kRelu, a.id, -1,
              node(a).value.array().max(0.0).matrix(), node(a).tracked);
}

Var Tape::atan2(Var y, Var x) {
  check_same_shape("atan2", y, x);
  Matrix v = node(y).value.binaryExpr(
      node(x).value, [](double a, double b) { return std::atan2(a, b); });
  return push(Op::kAtan2, y.id, x.id, std::move(v),
              node(y).tracked || node(x).tracked);
}

Var Tape::sum(Var a) {
  return push(Op::kSum, a.id, -1, Matrix::Constant(1, 1, node(a).value.sum()),
              node(a).tracked);
}

Var Tape::mean(Var a) {
  return push(Op::kMean, a.id, -1,
              Matrix::Constant(1, 1, node(a).value.mean()), node(a).tracked);
}

Var Tape::dot(Var a, Var b) {
  check_same_shape("dot", a, b);
  double v = node(a).value.cwiseProduct(node(b).value).sum();
  return push(Op::kDot, a.id, b.id, Matrix::Constant(1, 1, v),
              node(a).tracked || node(b).tracked);
}

Var Tape::add_col(Var a, Var col) {
  const Matrix& ma = node(a).value;
  const Matrix& mc = node(col).value;
  if (mc.cols() != 1 || mc.rows() != ma.rows())
    shape_error("add-col", ma, mc);
  return push(Op::kAddCol, a.id, col.id, ma.colwise() + mc.col(0),
              node(a).tracked || node(col).tracked);
}

Var Tape::gather_rows(Var a, std::vector<int> rows) {
  const Matrix& ma = node(a).value;
  Matrix out(static_cast<int>(rows.size()), ma.cols());
  for (int i = 0; i < out.rows(); ++i) {
    if (rows[i] < 0 || rows[i] >= ma.rows())
      throw TapeError("gather-rows: row index out of range");
    out.row(i) = ma.row(rows[i]);
  }
  return push(Op::kGatherRows, a.id, -1, std::move(out), node(a).tracked,
              std::move(rows));
}

Var Tape::vstack(Var a, Var b) {
  const Matrix& ma = node(a).value;
  const Matrix& mb = node(b).value;
  if (ma.cols() != mb.cols()) shape_error("vstack", ma, mb);
  Matrix out(ma.rows() + mb.rows(), ma.cols());
  out.topRows(ma.rows()) = ma;
  out.bottomRows(mb.rows()) = mb;
  return push(Op::kVStack, a.id, b.id, std::move(out),
              node(a).tracked || node(b).tracked);
}

const Matrix& Tape::value(const Var& v) const { return node(v).value; }

Gradients Tape::backward(const Var& output) const {
  const Node& out = node(output);
  if (out.value.rows() != 1 || out.value.cols() != 1)
    throw TapeError("backward: output is not scalar (" +
                    shape_str(out.value) + ")");

  std::vector<Matrix> adj(nodes_.size());
  auto acc = [&](int id, const Matrix& g) {
    if (!nodes_[id].tracked) return;
    if (adj[id].size() == 0)
      adj[id] = g;
    else
      adj[id] += g;
  };

  adj[output.id] = Matrix::Constant(1, 1, 1.0);

  for (int id = output.id; id >= 0; --id) {
    const Node& n = nodes_[id];
    if (adj[id].size() == 0 || !n.tracked) continue;
    const Matrix& g = adj[id];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd:
        acc(n.a, g);
        acc(n.b, g);
        break;
      case Op::kSub:
        acc(n.a, g);
        acc(n.b, -g);
        break;
      case Op::kMul:
        acc(n.a, g.cwiseProduct(nodes_[n.b].value));
        acc(n.b, g.cwiseProduct(nodes_[n.a].value));
        break;
      case Op::kDiv: {
        const Matrix& bv = nodes_[n.b].value;
        acc(n.a, g.cwiseQuotient(bv));
        acc(n.b, -g.cwiseProduct(n.value).cwiseQuotient(bv));
        break;
      }
      case Op::kScale:
        acc(n.a, n.scalar * g);
        break;
      case Op::kNeg:
        acc(n.a, -g);
        break;
      case Op::kMatMul:
        acc(n.a, g * nodes_[n.b].value.transpose());
        acc(n.b, nodes_[n.a].value.transpose() * g);
        break;
      case Op::kSin:
        acc(n.a, g.cwiseProduct(nodes_[n.a].value.array().cos().matrix()));
        break;
      case Op::kCos:
        acc(n.a, -g.cwiseProduct(nodes_[n.a].value.array().sin().matrix()));
        break;
      case Op::kExp:
        acc(n.a, g.cwiseProduct(n.value));
        break;
      case Op::kSqrt:
        acc(n.a, (0.5 * g.array() / n.value.array()).matrix());
        break;
      case Op::kSquare:
        acc(n.a, (2.0 * g.array() * nodes_[n.a].value.array()).matrix());
        break;
      case Op::kAbs: {
        Matrix s = nodes_[n.a].value.unaryExpr([](double x) {
          return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
        });
        acc(n.a, g.cwiseProduct(s));
        break;
      }
      case Op::kRelu: {
        Matrix s = nodes_[n.a].value.unaryExpr(
            [](double x) { return x > 0.0 ? 1.0 : 0.0; });
        acc(n.a, g.cwiseProduct(s));
        break;
      }
      case Op::kAtan2: {
        const Matrix& y = nodes_[n.a].value;
        const Matrix& x = nodes_[n.b].value;
        Matrix denom = (x.array().square() + y.array().square()).matrix();
        acc(n.a, g.cwiseProduct(x).cwiseQuotient(denom));
        acc(n.b, -g.cwiseProduct(y).cwiseQuotient(denom));
        break;
      }
      case Op::kSum:
        acc(n.a, Matrix::Constant(nodes_[n.a].value.rows(),
                                  nodes_[n.a].value.cols(), g(0, 0)));
        break;
      case Op::kMean:
        acc(n.a, Matrix::Constant(
                     nodes_[n.a].value.rows(), nodes_[n.a].value.cols(),
                     g(0, 0) / static_cast<double>(nodes_[n.a].value.size())));
        break;
      case Op::kDot:
        acc(n.a, g(0, 0) * nodes_[n.b].value);
        acc(n.b, g(0, 0) * nodes_[n.a].value);
        break;
      case Op::kAddCol:
        acc(n.a, g);
        acc(n.b, g.rowwise().sum());
        break;
      case Op::kGatherRows: {
        Matrix gs = Matrix::Zero(nodes_[n.a].value.rows(),
                                 nodes_[n.a].value.cols());
        for (int i = 0; i < static_cast<int>(n.rows.size()); ++i)
          gs.row(n.rows[i]) += g.row(i);
        acc(n.a, gs);
        break;
      }
      case Op::kVStack: {
        int ra = static_cast<int>(nodes_[n.a].value.rows());
        acc(n.a, g.topRows(ra));
        acc(n.b, g.bottomRows(g.rows() - ra));
        break;
      }
    }
  }

  Gradients out_grads;
  out_grads.grads_.resize(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::kLeaf && nodes_[i].tracked && adj[i].size() > 0)
      out_grads.grads_[i] = std::move(adj[i]);
  }
  return out_grads;
}

double finite_diff_check(const std::function<Var(Tape&, Var)>& f,
                         const Vector& point, double step) {
  if (step <= 0.0) throw TapeError("finite_diff_check: step must be > 0");

  Tape tape;
  Var x = tape.param(Matrix(point));
  Var y = f(tape, x);
  if (!tape.value(y).allFinite())
    throw TapeError("finite_diff_check: non-finite function value");
  Gradients g = tape.backward(y);
  Vector auto_grad = Vector::Zero(point.size());
  if (g.has(x)) auto_grad = g.at(x).col(0);

  auto eval = [&](const Vector& p) {
    Tape t;
    Var xp = t.param(Matrix(p));
    Var yp = f(t, xp);
    double v = t.value(yp)(0, 0);
    if (!std::isfinite(v))
      throw TapeError("finite_diff_check: non-finite function value");
    return v;
  };

  double max_rel = 0.0;
  for (int i = 0; i < point.size(); ++i) {
    Vector p1 = point, p2 = point;
    p1[i] += step;
    p2[i] -= step;
    double fd = (eval(p1) - eval(p2)) / (2.0 * step);
    double rel = std::abs(auto_grad[i] - fd) / (std::abs(fd) + 1e-12);
    if (rel > max_rel) max_rel = rel;
  }
  return max_rel;
}

}  // namespace deop
