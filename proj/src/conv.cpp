#include "gshdl/conv.hpp"

#include "gshdl/error.hpp"

#include <cmath>
#include <string>

namespace gshdl {

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) noexcept
{
    if (n == 1) return 0;
    const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
    std::ptrdiff_t m = i % period;
    if (m < 0) m += period;
    if (m >= static_cast<std::ptrdiff_t>(n)) m = period - m;
    return static_cast<std::size_t>(m);
}

namespace {

void check_kernel(const Kernel2D& kernel, std::size_t height, std::size_t width)
{
    if (kernel.height % 2 == 0 || kernel.width % 2 == 0) {
        throw Error(ErrorKind::dimension, "convolution kernel dimensions must be odd");
    }
    if (kernel.values.size() != kernel.height * kernel.width) {
        throw Error(ErrorKind::dimension, "convolution kernel value count does not match its shape");
    }
    if (kernel.height > 2 * height || kernel.width > 2 * width) {
        throw Error(ErrorKind::dimension, "convolution kernel larger than twice the input");
    }
    for (double v : kernel.values) {
        if (!std::isfinite(v)) throw Error(ErrorKind::data, "convolution kernel: non-finite value");
    }
}

void check_single_channel(const Grid2D& input)
{
    if (input.empty()) throw Error(ErrorKind::dimension, "convolution input is empty");
    if (input.channels() != 1) {
        throw Error(ErrorKind::dimension, "conv2d_same expects a single-channel input");
    }
    input.require_finite("convolution input");
}

// Reflected lookup tables: table[i * taps + a] = reflect(i + sign * (a - r)).
std::vector<std::size_t> offset_table(std::size_t n, std::size_t taps, int sign)
{
    const auto r = static_cast<std::ptrdiff_t>(taps / 2);
    std::vector<std::size_t> table(n * taps);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < taps; ++a) {
            const auto offset = static_cast<std::ptrdiff_t>(a) - r;
            table[i * taps + a] = reflect_index(static_cast<std::ptrdiff_t>(i) + sign * offset, n);
        }
    }
    return table;
}

} // namespace

Grid2D conv2d_same(const Grid2D& input, const Kernel2D& kernel)
{
    check_single_channel(input);
    const std::size_t h = input.height();
    const std::size_t w = input.width();
    check_kernel(kernel, h, w);
    const std::size_t kh = kernel.height;
    const std::size_t kw = kernel.width;
    const auto rows = offset_table(h, kh, -1);
    const auto cols = offset_table(w, kw, -1);

    Grid2D out(h, w, 1);
    const double* in = input.data();
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::size_t a = 0; a < kh; ++a) {
                const double* src = in + rows[y * kh + a] * w;
                const double* krow = kernel.values.data() + a * kw;
                const std::size_t* cx = cols.data() + x * kw;
                for (std::size_t b = 0; b < kw; ++b) acc += src[cx[b]] * krow[b];
            }
            out(0, y, x) = acc;
        }
    }
    return out;
}

ComplexResponse conv2d_same(const Grid2D& input, const ComplexKernel2D& kernel)
{
    if (kernel.real.height != kernel.imag.height || kernel.real.width != kernel.imag.width) {
        throw Error(ErrorKind::dimension, "complex kernel parts differ in shape");
    }
    return {conv2d_same(input, kernel.real), conv2d_same(input, kernel.imag)};
}

Eigen::MatrixXd patch_matrix(const Grid2D& input, std::size_t kh, std::size_t kw, PatchOrientation orientation)
{
    if (kh % 2 == 0 || kw % 2 == 0) throw Error(ErrorKind::dimension, "patch dimensions must be odd");
    const std::size_t h = input.height();
    const std::size_t w = input.width();
    if (kh > 2 * h || kw > 2 * w) throw Error(ErrorKind::dimension, "patch larger than twice the input");
    const int sign = orientation == PatchOrientation::convolution ? -1 : 1;
    const auto rows = offset_table(h, kh, sign);
    const auto cols = offset_table(w, kw, sign);

    Eigen::MatrixXd p(static_cast<Eigen::Index>(h * w), static_cast<Eigen::Index>(input.channels() * kh * kw));
    Eigen::Index column = 0;
    for (std::size_t c = 0; c < input.channels(); ++c) {
        const double* plane = input.plane(c).data();
        for (std::size_t a = 0; a < kh; ++a) {
            for (std::size_t b = 0; b < kw; ++b, ++column) {
                double* dst = p.col(column).data();
                for (std::size_t y = 0; y < h; ++y) {
                    const double* src = plane + rows[y * kh + a] * w;
                    const std::size_t* cx = cols.data() + b;
                    for (std::size_t x = 0; x < w; ++x) dst[y * w + x] = src[cx[x * kw]];
                }
            }
        }
    }
    return p;
}

Grid2D conv2d_same_bank(const Grid2D& input, std::span<const Kernel2D> kernels)
{
    check_single_channel(input);
    if (kernels.empty()) throw Error(ErrorKind::dimension, "conv2d_same_bank: no kernels");
    const std::size_t kh = kernels[0].height;
    const std::size_t kw = kernels[0].width;
    Eigen::MatrixXd taps(static_cast<Eigen::Index>(kh * kw), static_cast<Eigen::Index>(kernels.size()));
    for (std::size_t i = 0; i < kernels.size(); ++i) {
        check_kernel(kernels[i], input.height(), input.width());
        if (kernels[i].height != kh || kernels[i].width != kw) {
            throw Error(ErrorKind::dimension, "conv2d_same_bank: kernels differ in shape");
        }
        taps.col(static_cast<Eigen::Index>(i)) =
            Eigen::Map<const Eigen::VectorXd>(kernels[i].values.data(), static_cast<Eigen::Index>(kh * kw));
    }
    const Eigen::MatrixXd patches = patch_matrix(input, kh, kw, PatchOrientation::convolution);
    Grid2D out(input.height(), input.width(), kernels.size());
    Eigen::Map<Eigen::MatrixXd>(out.data(), static_cast<Eigen::Index>(input.plane_size()),
                                static_cast<Eigen::Index>(kernels.size())) = patches * taps;
    return out;
}

} // namespace gshdl
