#pragma once

#include "gshdl/grid.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <span>

namespace gshdl {

/// Maps an out-of-range coordinate into [0, n) by mirroring about the edge
/// pixels without repeating them (..., 2, 1, | 0, 1, ..., n-1, | n-2, ...).
[[nodiscard]] std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) noexcept;

/// Same-size 2-D convolution of a single-channel grid,
/// out[p] = sum_q in[p - q] * k[q], with symmetric reflection at the borders.
/// Kernels may be up to twice the input size along each axis.
[[nodiscard]] Grid2D conv2d_same(const Grid2D& input, const Kernel2D& kernel);

struct ComplexResponse {
    Grid2D real;
    Grid2D imag;
};

[[nodiscard]] ComplexResponse conv2d_same(const Grid2D& input, const ComplexKernel2D& kernel);

/// Convolves one plane with several kernels of identical shape in a single
/// matrix product. Output channel i is the response to kernels[i].
[[nodiscard]] Grid2D conv2d_same_bank(const Grid2D& input, std::span<const Kernel2D> kernels);

enum class PatchOrientation {
    convolution, ///< column entries in[p - q]
    correlation, ///< column entries in[p + q]
};

/// Unrolled neighbourhoods of a multi-channel grid with reflected borders.
/// Rows are pixels (row-major); column (c * kh + a) * kw + b holds channel c
/// at kernel offset (a - kh/2, b - kw/2).
[[nodiscard]] Eigen::MatrixXd patch_matrix(const Grid2D& input, std::size_t kh, std::size_t kw,
                                           PatchOrientation orientation);

} // namespace gshdl
