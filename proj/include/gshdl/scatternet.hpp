#pragma once

#include "gshdl/grid.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace gshdl {

/// How multi-channel (RGB) inputs enter the scattering cascade.
enum class ColorMode {
    independent, ///< every input channel is scattered and the results concatenated
    luminance,   ///< RGB is reduced to Rec.601 luma first
};

struct ScatterConfig {
    std::size_t num_scales = 2;
    /// Orientation of each bandpass filter's wave vector, degrees from the +x
    /// (column) axis towards +y (row).
    std::vector<double> orientations_deg{15.0, 45.0, 75.0, 105.0, 135.0, 165.0};
    /// Offset k of the log(U + k) transform applied at the finest scale.
    double log_k_finest = 1.1;
    /// Also scatter a 2x decimated copy and upsample it back (appended channels).
    bool dual_resolution = false;
    ColorMode color = ColorMode::independent;

    /// Throws a config error for J outside [1, 3], no orientations or k <= 0.
    void validate() const;
    /// Width 2^J of the smoothing window in pixels.
    [[nodiscard]] double smoothing_scale() const noexcept;

    friend bool operator==(const ScatterConfig&, const ScatterConfig&) = default;
};

/// Oriented analytic bandpass kernels plus the smoothing lowpass.
struct FilterBank {
    std::size_t num_scales = 0;
    std::size_t num_orientations = 0;
    /// Kernel for (scale j, orientation r) lives at (j - 1) * num_orientations + r.
    std::vector<ComplexKernel2D> bandpass;
    Kernel2D lowpass;

    [[nodiscard]] const ComplexKernel2D& at(std::size_t scale, std::size_t orientation) const;
    /// FNV-1a digest of every kernel value, used to tie saved models to a bank.
    [[nodiscard]] std::uint64_t fingerprint() const;
};

/// Provenance of one scattering channel. Scales are 1-based; unused path
/// elements are -1.
struct ScatterPath {
    int layer = 0;
    int input_channel = 0;
    int resolution = 0;
    int scale1 = -1;
    int orientation1 = -1;
    int scale2 = -1;
    int orientation2 = -1;

    friend bool operator==(const ScatterPath&, const ScatterPath&) = default;
};

struct FeatureStack {
    Grid2D layer0;
    Grid2D layer1;
    Grid2D layer2; ///< empty when J = 1
    std::vector<ScatterPath> path_index;

    [[nodiscard]] std::size_t channels() const noexcept;
    /// All layers stacked L0, L1, L2 in path_index order.
    [[nodiscard]] Grid2D concatenated() const;
};

[[nodiscard]] FilterBank build_filter_bank(const ScatterConfig& config);

/// sqrt((x * psi_re)^2 + (x * psi_im)^2) for a single-channel x.
[[nodiscard]] Grid2D modulus_envelope(const Grid2D& x, const ComplexKernel2D& psi);

/// Pointwise log(U + k). Requires k > 0 and U >= 0.
[[nodiscard]] Grid2D parametric_log(const Grid2D& u, double k);

/// Channel layout produced by scatter() for the given configuration and
/// number of input channels (after colour handling).
[[nodiscard]] std::vector<ScatterPath> enumerate_paths(const ScatterConfig& config, std::size_t input_channels);

[[nodiscard]] FeatureStack scatter(const Grid2D& image, const FilterBank& bank, const ScatterConfig& config);

/// Rec.601 luma of a 3-channel grid; single-channel grids pass through.
[[nodiscard]] Grid2D to_luminance(const Grid2D& image);

} // namespace gshdl
