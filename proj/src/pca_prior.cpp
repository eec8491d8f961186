#include "gshdl/pca_prior.hpp"

#include "gshdl/error.hpp"
#include "gshdl/rng.hpp"
#include "gshdl/sym_eigen.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

namespace gshdl {

namespace {

constexpr double kCheckerboardThreshold = 0.5;

// Flip so the largest-magnitude entry is positive; eigenvectors are only
// defined up to sign.
void canonical_sign(Eigen::Ref<Eigen::VectorXd> v)
{
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
}

void screen(const Eigen::MatrixXd& filters, const PriorFilterSet& shape, std::vector<bool>& flags,
            std::vector<double>& scores)
{
    flags.clear();
    scores.clear();
    for (Eigen::Index k = 0; k < filters.cols(); ++k) {
        const auto res = detect_checkerboard(std::span<const double>(filters.col(k).data(), shape.dimension()),
                                             shape.patch_height, shape.patch_width, shape.channels);
        flags.push_back(res.is_checkerboard);
        scores.push_back(res.score);
    }
}

} // namespace

std::size_t PriorFilterSet::flagged_count() const noexcept
{
    std::size_t n = 0;
    for (bool f : checkerboard_flags) n += f ? 1 : 0;
    return n;
}

PatchMatrix sample_patches(std::span<const Grid2D> features, std::size_t patch_size, std::size_t count,
                           std::uint64_t seed)
{
    if (patch_size % 2 == 0 || patch_size == 0) throw Error(ErrorKind::config, "sample_patches: patch size must be odd");
    if (features.empty()) throw Error(ErrorKind::data, "sample_patches: no feature images");
    const std::size_t channels = features[0].channels();

    std::vector<std::uint64_t> offsets; // cumulative number of valid positions
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < features.size(); ++i) {
        const Grid2D& f = features[i];
        if (f.channels() != channels) throw Error(ErrorKind::data, "sample_patches: channel count differs between images");
        if (f.height() < patch_size || f.width() < patch_size) {
            throw Error(ErrorKind::data, "sample_patches: image " + std::to_string(i) + " is smaller than the patch");
        }
        total += (f.height() - patch_size + 1) * (f.width() - patch_size + 1);
        offsets.push_back(total);
    }

    PatchMatrix out;
    out.patch_height = patch_size;
    out.patch_width = patch_size;
    out.channels = channels;
    const std::size_t dim = out.dimension();
    out.columns.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(count));

    Rng rng(seed);
    for (std::size_t n = 0; n < count; ++n) {
        const std::uint64_t pick = rng.index(total);
        std::size_t img = 0;
        while (offsets[img] <= pick) ++img;
        const std::uint64_t local = pick - (img == 0 ? 0 : offsets[img - 1]);
        const Grid2D& f = features[img];
        const std::size_t span_x = f.width() - patch_size + 1;
        const std::size_t y0 = local / span_x;
        const std::size_t x0 = local % span_x;

        double* col = out.columns.col(static_cast<Eigen::Index>(n)).data();
        std::size_t i = 0;
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t a = 0; a < patch_size; ++a) {
                for (std::size_t b = 0; b < patch_size; ++b) col[i++] = f(c, y0 + a, x0 + b);
            }
        }
        auto column = out.columns.col(static_cast<Eigen::Index>(n));
        column.array() -= column.mean();
    }
    return out;
}

PatchMatrix sample_patches(std::span<const FeatureStack> features, std::size_t patch_size, std::size_t count,
                           std::uint64_t seed)
{
    std::vector<Grid2D> planes;
    planes.reserve(features.size());
    for (const auto& f : features) planes.push_back(f.concatenated());
    return sample_patches(planes, patch_size, count, seed);
}

PriorFilterSet learn_pca_filters(const PatchMatrix& x, std::size_t num_filters, std::size_t spare_count)
{
    const std::size_t dim = x.dimension();
    if (num_filters == 0 || num_filters > dim) {
        throw Error(ErrorKind::config, "learn_pca_filters: filter count must be in [1, patch dimension]");
    }
    if (static_cast<std::size_t>(x.columns.rows()) != dim || x.count() == 0) {
        throw Error(ErrorKind::data, "learn_pca_filters: patch matrix is empty or malformed");
    }

    const auto n = static_cast<Eigen::Index>(dim);
    Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(n, n);
    scatter.selfadjointView<Eigen::Lower>().rankUpdate(x.columns);
    scatter.triangularView<Eigen::StrictlyUpper>() = scatter.transpose();

    const EigenDecomposition eig = sym_eigen(scatter);

    PriorFilterSet set;
    set.patch_height = x.patch_height;
    set.patch_width = x.patch_width;
    set.channels = x.channels;
    const auto k = static_cast<Eigen::Index>(num_filters);
    const auto spares = static_cast<Eigen::Index>(std::min(spare_count, dim - num_filters));
    set.filters = eig.vectors.leftCols(k);
    set.eigenvalues = eig.values.head(k).cwiseMax(0.0);
    set.spares = eig.vectors.middleCols(k, spares);
    set.spare_eigenvalues = eig.values.segment(k, spares).cwiseMax(0.0);
    for (Eigen::Index i = 0; i < set.filters.cols(); ++i) canonical_sign(set.filters.col(i));
    for (Eigen::Index i = 0; i < set.spares.cols(); ++i) canonical_sign(set.spares.col(i));
    screen(set.filters, set, set.checkerboard_flags, set.checkerboard_scores);
    screen(set.spares, set, set.spare_flags, set.spare_scores);
    return set;
}

CheckerboardResult detect_checkerboard(std::span<const double> values, std::size_t height, std::size_t width,
                                       std::size_t channels)
{
    if (values.size() != height * width * channels || values.empty()) {
        throw Error(ErrorKind::dimension, "detect_checkerboard: value count does not match shape");
    }
    // Odd sides are mirrored about their edge samples into a period of 2s - 2,
    // which is even (so an exact Nyquist bin exists) and keeps both constants
    // and alternating patterns intact.
    auto extended = [](std::size_t s) { return s % 2 == 0 || s == 1 ? s : 2 * s - 2; };
    auto source = [](std::size_t i, std::size_t s) { return i < s ? i : 2 * s - 2 - i; };
    const std::size_t m = extended(height);
    const std::size_t n = extended(width);
    // Bin u of a period-s axis sits at u/s cycles, aliased into [-1/2, 1/2];
    // the corner is |f| > 3/8 on both axes.
    auto in_band = [](std::size_t u, std::size_t s) {
        return static_cast<double>(std::min(u, s - u)) / static_cast<double>(s) > 0.375;
    };
    auto twiddles = [](std::size_t s) {
        std::vector<std::complex<double>> t(s * s);
        for (std::size_t u = 0; u < s; ++u) {
            for (std::size_t x = 0; x < s; ++x) {
                t[u * s + x] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(u * x % s) /
                                                   static_cast<double>(s));
            }
        }
        return t;
    };
    const auto row_tw = twiddles(n);
    const auto col_tw = twiddles(m);

    double total = 0.0;
    double corner = 0.0;
    std::vector<std::complex<double>> rows(m * n);
    for (std::size_t c = 0; c < channels; ++c) {
        const double* plane = values.data() + c * height * width;
        for (std::size_t y = 0; y < m; ++y) {
            const double* row = plane + source(y, height) * width;
            for (std::size_t v = 0; v < n; ++v) {
                std::complex<double> acc{0.0, 0.0};
                for (std::size_t x = 0; x < n; ++x) acc += row[source(x, width)] * row_tw[v * n + x];
                rows[y * n + v] = acc;
            }
        }
        for (std::size_t u = 0; u < m; ++u) {
            for (std::size_t v = 0; v < n; ++v) {
                std::complex<double> acc{0.0, 0.0};
                for (std::size_t y = 0; y < m; ++y) acc += rows[y * n + v] * col_tw[u * m + y];
                const double e = std::norm(acc);
                total += e;
                if (in_band(u, m) && in_band(v, n)) corner += e;
            }
        }
    }
    if (!(total > 0.0)) throw Error(ErrorKind::data, "detect_checkerboard: filter is identically zero");
    const double score = std::clamp(corner / total, 0.0, 1.0);
    return {score >= kCheckerboardThreshold, score};
}

CheckerboardResult detect_checkerboard(const Kernel2D& filter)
{
    return detect_checkerboard(filter.values, filter.height, filter.width, 1);
}

double reconstruction_error(const PatchMatrix& x, const Eigen::MatrixXd& basis)
{
    const Eigen::MatrixXd residual = x.columns - basis * (basis.transpose() * x.columns);
    return residual.squaredNorm();
}

} // namespace gshdl
