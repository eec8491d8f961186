#pragma once

#include "gshdl/grid.hpp"
#include "gshdl/scatternet.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace gshdl {

/// Mean-removed, vectorised patches, one per column. A column is laid out
/// channel-major, then row, then column within the patch (the same order as
/// patch_matrix()), so a principal direction reshapes directly into an RBM
/// filter.
struct PatchMatrix {
    std::size_t patch_height = 0;
    std::size_t patch_width = 0;
    std::size_t channels = 0;
    Eigen::MatrixXd columns;

    [[nodiscard]] std::size_t dimension() const noexcept { return patch_height * patch_width * channels; }
    [[nodiscard]] std::size_t count() const noexcept { return static_cast<std::size_t>(columns.cols()); }
};

struct CheckerboardResult {
    bool is_checkerboard = false;
    double score = 0.0;
};

/// Leading principal directions of a patch set, plus the next-ranked
/// directions held in reserve for replacing flagged filters.
struct PriorFilterSet {
    std::size_t patch_height = 0;
    std::size_t patch_width = 0;
    std::size_t channels = 0;
    Eigen::MatrixXd filters; ///< dimension x K, orthonormal columns
    Eigen::VectorXd eigenvalues;
    std::vector<bool> checkerboard_flags;
    std::vector<double> checkerboard_scores;

    Eigen::MatrixXd spares;
    Eigen::VectorXd spare_eigenvalues;
    std::vector<bool> spare_flags;
    std::vector<double> spare_scores;

    [[nodiscard]] std::size_t size() const noexcept { return static_cast<std::size_t>(filters.cols()); }
    [[nodiscard]] std::size_t dimension() const noexcept { return patch_height * patch_width * channels; }
    [[nodiscard]] std::size_t flagged_count() const noexcept;

    friend bool operator==(const PriorFilterSet&, const PriorFilterSet&) = default;
};

/// Draws `count` patch locations uniformly over every valid (fully inside)
/// position of every image and removes each patch's mean.
[[nodiscard]] PatchMatrix sample_patches(std::span<const Grid2D> features, std::size_t patch_size, std::size_t count,
                                         std::uint64_t seed);
[[nodiscard]] PatchMatrix sample_patches(std::span<const FeatureStack> features, std::size_t patch_size,
                                         std::size_t count, std::uint64_t seed);

/// K leading eigenvectors of X X^T as filters, each screened for checkerboard
/// structure. Up to `spare_count` further eigenvectors are kept as spares.
[[nodiscard]] PriorFilterSet learn_pca_filters(const PatchMatrix& x, std::size_t num_filters,
                                               std::size_t spare_count = 0);

/// Fraction of spectral energy whose row and column frequencies both exceed
/// 3/4 of Nyquist. Odd sides are extended by mirroring about the edge samples
/// to an even period, so an exact Nyquist bin always exists. Filters with a
/// score of at least 0.5 are flagged.
[[nodiscard]] CheckerboardResult detect_checkerboard(const Kernel2D& filter);
/// Multi-channel variant: energies of each channel's spectrum are summed.
/// `values` is laid out channel-major like a PatchMatrix column.
[[nodiscard]] CheckerboardResult detect_checkerboard(std::span<const double> values, std::size_t height,
                                                     std::size_t width, std::size_t channels);

/// || X - V V^T X ||_F^2
[[nodiscard]] double reconstruction_error(const PatchMatrix& x, const Eigen::MatrixXd& basis);

} // namespace gshdl
