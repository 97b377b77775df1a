#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "deop/linalg.hpp"

namespace deop {

// Reverse-mode automatic differentiation over dense double-precision
// matrices (vectors are n x 1). Forward values are computed eagerly at
// record time; a tape is built per evaluation and thrown away.

struct TapeError : std::runtime_error {
  explicit TapeError(const std::string& what) : std::runtime_error(what) {}
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,      // elementwise
  kDiv,      // elementwise
  kScale,    // constant scalar multiply
  kNeg,
  kMatMul,   // matrix-matrix; matrix-vector is the n x 1 case
  kSin,
  kCos,
  kExp,
  kSqrt,
  kSquare,
  kAbs,
  kRelu,     // max-with-zero
  kAtan2,    // elementwise atan2(a, b)
  kSum,      // reduce to 1 x 1
  kMean,     // reduce to 1 x 1
  kDot,      // <a, b> over all entries, 1 x 1
  kAddCol,   // a (m x n) + column b (m x 1) broadcast over columns
  kGatherRows,
  kVStack,
};

class Tape;

// Lightweight value reference into a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Per-parameter gradient buffers, indexed by the parameter's Var id.
class Gradients {
 public:
  bool has(const Var& v) const {
    return v.id >= 0 && v.id < static_cast<int>(grads_.size()) &&
           grads_[v.id].size() > 0;
  }
  const Matrix& at(const Var& v) const;

 private:
  friend class Tape;
  std::vector<Matrix> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // leaves
  Var param(Matrix value);            // tracked: receives a gradient
  Var constant(Matrix value);         // untracked
  Var param(double scalar);
  Var constant(double scalar);

  // primitives
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var a, double c);
  Var neg(Var a);
  Var matmul(Var a, Var b);
  Var sin(Var a);
  Var cos(Var a);
  Var exp(Var a);
  Var sqrt(Var a);
  Var square(Var a);
  Var abs(Var a);
  Var relu(Var a);
  Var atan2(Var y, Var x);
  Var sum(Var a);
  Var mean(Var a);
  Var dot(Var a, Var b);
  Var add_col(Var a, Var col);
  Var gather_rows(Var a, std::vector<int> rows);
  Var vstack(Var a, Var b);

  const Matrix& value(const Var& v) const;
  int size() const { return static_cast<int>(nodes_.size()); }

  // d(output)/d(leaf) for every tracked leaf; output must be scalar.
  // Subgradient 0 is used at the kinks of relu/abs.
  Gradients backward(const Var& output) const;

 private:
  struct Node {
    Op op;
    int a = -1, b = -1;
    Matrix value;
    double scalar = 0.0;   // kScale only
    bool tracked = false;  // gradient flows to or through this node
    std::vector<int> rows; // kGatherRows only
  };

  Var push(Op op, int a, int b, Matrix value, bool tracked,
           std::vector<int> rows = {}, double scalar = 0.0);
  const Node& node(const Var& v) const;
  void check_same_shape(const char* prim, const Var& a, const Var& b) const;

  std::vector<Node> nodes_;
};

// Max over coordinates of |autodiff - central difference| /
// (|central difference| + 1e-12) for a taped scalar function of a vector.
double finite_diff_check(const std::function<Var(Tape&, Var)>& f,
                         const Vector& point, double step);

}  // namespace deop
