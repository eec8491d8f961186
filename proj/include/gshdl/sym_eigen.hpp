#pragma once

#include <Eigen/Dense>

namespace gshdl {

struct EigenDecomposition {
    Eigen::VectorXd values;  ///< descending
    Eigen::MatrixXd vectors; ///< orthonormal columns, column i pairs with values[i]
};

/// Eigendecomposition of a real symmetric matrix. Throws a precondition error
/// if the input is not square, not finite, or asymmetric by more than 1e-12.
[[nodiscard]] EigenDecomposition sym_eigen(const Eigen::MatrixXd& m);

} // namespace gshdl
