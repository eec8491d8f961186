#include "gshdl/sym_eigen.hpp"

#include "gshdl/error.hpp"

#include <Eigen/Eigenvalues>

#include <numeric>
#include <vector>

namespace gshdl {

EigenDecomposition sym_eigen(const Eigen::MatrixXd& m)
{
    if (m.rows() != m.cols() || m.rows() == 0) {
        throw Error(ErrorKind::precondition, "sym_eigen: matrix must be square and non-empty");
    }
    if (!m.allFinite()) throw Error(ErrorKind::precondition, "sym_eigen: non-finite entry");
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12) {
        throw Error(ErrorKind::precondition, "sym_eigen: matrix is not symmetric");
    }

    // Householder tridiagonalisation followed by implicit symmetric QR.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::ComputeEigenvectors);
    if (solver.info() != Eigen::Success) {
        throw Error(ErrorKind::numerical, "sym_eigen: eigensolver did not converge");
    }

    // The solver returns ascending eigenvalues; reverse into descending order.
    const Eigen::Index n = m.rows();
    EigenDecomposition out;
    out.values.resize(n);
    out.vectors.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        out.values[i] = solver.eigenvalues()[n - 1 - i];
        out.vectors.col(i) = solver.eigenvectors().col(n - 1 - i);
    }
    return out;
}

} // namespace gshdl
