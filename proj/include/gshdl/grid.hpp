#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace gshdl {

/// Multi-channel image plane stack. Values are stored channel-major, each
/// channel a contiguous row-major height x width plane.
class Grid2D {
  public:
    Grid2D() = default;
    Grid2D(std::size_t height, std::size_t width, std::size_t channels = 1, double fill = 0.0);
    Grid2D(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> values);

    [[nodiscard]] std::size_t height() const noexcept { return height_; }
    [[nodiscard]] std::size_t width() const noexcept { return width_; }
    [[nodiscard]] std::size_t channels() const noexcept { return channels_; }
    [[nodiscard]] std::size_t plane_size() const noexcept { return height_ * width_; }
    [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
    [[nodiscard]] bool empty() const noexcept { return values_.empty(); }

    double& operator()(std::size_t c, std::size_t y, std::size_t x) noexcept
    {
        return values_[(c * height_ + y) * width_ + x];
    }
    double operator()(std::size_t c, std::size_t y, std::size_t x) const noexcept
    {
        return values_[(c * height_ + y) * width_ + x];
    }

    [[nodiscard]] std::span<double> plane(std::size_t c) noexcept
    {
        return {values_.data() + c * plane_size(), plane_size()};
    }
    [[nodiscard]] std::span<const double> plane(std::size_t c) const noexcept
    {
        return {values_.data() + c * plane_size(), plane_size()};
    }

    [[nodiscard]] std::vector<double>& values() noexcept { return values_; }
    [[nodiscard]] const std::vector<double>& values() const noexcept { return values_; }
    [[nodiscard]] double* data() noexcept { return values_.data(); }
    [[nodiscard]] const double* data() const noexcept { return values_.data(); }

    /// Copy of a single channel as a one-channel grid.
    [[nodiscard]] Grid2D channel(std::size_t c) const;
    /// Copy of the listed channels, in the listed order.
    [[nodiscard]] Grid2D select_channels(std::span<const std::size_t> indices) const;

    /// Throws a data error naming `what` if any value is NaN or infinite.
    void require_finite(std::string_view what) const;

    friend bool operator==(const Grid2D&, const Grid2D&) = default;

  private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::size_t channels_ = 0;
    std::vector<double> values_;
};

/// Per-channel affine standardisation fitted over a set of grids.
struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stddev;

    /// Zero mean, unit variance per channel over all pixels of all grids.
    /// Constant channels get a unit scale.
    [[nodiscard]] static ChannelStats fit(std::span<const Grid2D> grids);
    [[nodiscard]] Grid2D apply(const Grid2D& g) const;
    [[nodiscard]] std::size_t channels() const noexcept { return mean.size(); }

    friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

/// Stacks grids of identical spatial size along the channel axis.
[[nodiscard]] Grid2D concat_channels(std::span<const Grid2D> parts);

/// Real spatial kernel with odd dimensions; element (0, 0) is the top-left
/// tap and the center sits at (height / 2, width / 2).
struct Kernel2D {
    std::size_t height = 1;
    std::size_t width = 1;
    std::vector<double> values{1.0};

    Kernel2D() = default;
    Kernel2D(std::size_t h, std::size_t w, std::vector<double> v);

    [[nodiscard]] double operator()(std::size_t y, std::size_t x) const noexcept { return values[y * width + x]; }
    double& operator()(std::size_t y, std::size_t x) noexcept { return values[y * width + x]; }
    [[nodiscard]] double sum() const noexcept;
    [[nodiscard]] double l1_norm() const noexcept;

    friend bool operator==(const Kernel2D&, const Kernel2D&) = default;
};

/// Complex kernel stored as separate real and imaginary parts of equal shape.
struct ComplexKernel2D {
    Kernel2D real;
    Kernel2D imag;
};

/// Integer label raster. Negative values mark void pixels.
struct LabelGrid {
    static constexpr int kVoid = -1;

    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<int> labels;

    LabelGrid() = default;
    LabelGrid(std::size_t h, std::size_t w, int fill = 0) : height(h), width(w), labels(h * w, fill) {}

    int& operator()(std::size_t y, std::size_t x) noexcept { return labels[y * width + x]; }
    [[nodiscard]] int operator()(std::size_t y, std::size_t x) const noexcept { return labels[y * width + x]; }

    friend bool operator==(const LabelGrid&, const LabelGrid&) = default;
};

} // namespace gshdl
