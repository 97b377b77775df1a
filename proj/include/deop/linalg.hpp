#pragma once

#include <Eigen/Dense>

namespace deop {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace deop
