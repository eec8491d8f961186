#include "gshdl/scatternet.hpp"

#include "gshdl/conv.hpp"
#include "gshdl/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

namespace gshdl {

namespace {

// Finest-scale Gabor parameters; each coarser scale halves the centre
// frequency and doubles the envelope width. xi * sigma ~ 3.7 keeps the
// spectrum one-sided and the DC leak ~1e-3 before correction.
constexpr double kFinestFrequency = 2.0;
constexpr double kFinestSigma = 1.84;

std::size_t bandpass_size(std::size_t scale) { return (std::size_t{1} << (scale + 3)) - 1; }

ComplexKernel2D make_bandpass(std::size_t scale, double orientation_deg)
{
    const double factor = std::ldexp(1.0, static_cast<int>(scale) - 1);
    const double xi = kFinestFrequency / factor;
    const double sigma = kFinestSigma * factor;
    const double theta = orientation_deg * std::numbers::pi / 180.0;
    const double wx = xi * std::cos(theta);
    const double wy = xi * std::sin(theta);
    const std::size_t n = bandpass_size(scale);
    const auto r = static_cast<double>(n / 2);

    std::vector<double> envelope(n * n);
    double mass = 0.0;
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            const double dy = static_cast<double>(y) - r;
            const double dx = static_cast<double>(x) - r;
            envelope[y * n + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            mass += envelope[y * n + x];
        }
    }
    for (double& v : envelope) v /= mass;

    // Subtracting kappa * envelope removes the (real) DC response exactly; the
    // imaginary part is odd and already sums to zero.
    double kappa = 0.0;
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            const double phase = wx * (static_cast<double>(x) - r) + wy * (static_cast<double>(y) - r);
            kappa += envelope[y * n + x] * std::cos(phase);
        }
    }

    ComplexKernel2D k{Kernel2D(n, n, std::vector<double>(n * n)), Kernel2D(n, n, std::vector<double>(n * n))};
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            const double phase = wx * (static_cast<double>(x) - r) + wy * (static_cast<double>(y) - r);
            const double g = envelope[y * n + x];
            k.real(y, x) = g * (std::cos(phase) - kappa);
            k.imag(y, x) = g * std::sin(phase);
        }
    }
    return k;
}

Kernel2D make_lowpass(double sigma)
{
    const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
    const std::size_t n = 2 * radius + 1;
    std::vector<double> v(n * n);
    double mass = 0.0;
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            const double dy = static_cast<double>(y) - static_cast<double>(radius);
            const double dx = static_cast<double>(x) - static_cast<double>(radius);
            v[y * n + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            mass += v[y * n + x];
        }
    }
    for (double& e : v) e /= mass;
    return Kernel2D(n, n, std::move(v));
}

// Envelopes |x * psi| of one plane for every orientation at one scale.
std::vector<Grid2D> envelopes_at_scale(const Grid2D& plane, const FilterBank& bank, std::size_t scale)
{
    std::vector<Kernel2D> parts;
    parts.reserve(2 * bank.num_orientations);
    for (std::size_t r = 0; r < bank.num_orientations; ++r) {
        parts.push_back(bank.at(scale, r).real);
        parts.push_back(bank.at(scale, r).imag);
    }
    const Grid2D responses = conv2d_same_bank(plane, parts);
    std::vector<Grid2D> out;
    out.reserve(bank.num_orientations);
    for (std::size_t r = 0; r < bank.num_orientations; ++r) {
        Grid2D u(plane.height(), plane.width(), 1);
        auto re = responses.plane(2 * r);
        auto im = responses.plane(2 * r + 1);
        for (std::size_t i = 0; i < u.size(); ++i) u.values()[i] = std::sqrt(re[i] * re[i] + im[i] * im[i]);
        out.push_back(std::move(u));
    }
    return out;
}

void append_plane(std::vector<double>& dst, const Grid2D& plane)
{
    dst.insert(dst.end(), plane.values().begin(), plane.values().end());
}

Grid2D make_layer(std::size_t h, std::size_t w, std::size_t channels, std::vector<double> values)
{
    if (channels == 0) return {};
    return Grid2D(h, w, channels, std::move(values));
}

FeatureStack scatter_single_resolution(const Grid2D& image, const FilterBank& bank, const ScatterConfig& config)
{
    const std::size_t h = image.height();
    const std::size_t w = image.width();
    const std::size_t scales = bank.num_scales;
    const std::size_t orients = bank.num_orientations;
    std::vector<double> l0, l1, l2;

    for (std::size_t c = 0; c < image.channels(); ++c) {
        const Grid2D x = image.channel(c);
        append_plane(l0, conv2d_same(x, bank.lowpass));

        // U1[lambda1] for every first-order path, log applied at the finest scale only.
        std::vector<Grid2D> first;
        first.reserve(scales * orients);
        for (std::size_t j = 1; j <= scales; ++j) {
            for (Grid2D& u : envelopes_at_scale(x, bank, j)) {
                first.push_back(j == 1 ? parametric_log(u, config.log_k_finest) : std::move(u));
            }
        }
        for (const Grid2D& u1 : first) append_plane(l1, conv2d_same(u1, bank.lowpass));

        for (std::size_t j1 = 1; j1 <= scales; ++j1) {
            for (std::size_t r1 = 0; r1 < orients; ++r1) {
                Grid2D u1 = first[(j1 - 1) * orients + r1];
                for (double& v : u1.values()) v = std::abs(v);
                for (std::size_t j2 = j1 + 1; j2 <= scales; ++j2) {
                    for (const Grid2D& u2 : envelopes_at_scale(u1, bank, j2)) {
                        append_plane(l2, conv2d_same(u2, bank.lowpass));
                    }
                }
            }
        }
    }

    FeatureStack out;
    const std::size_t c = image.channels();
    out.layer0 = make_layer(h, w, c, std::move(l0));
    out.layer1 = make_layer(h, w, c * scales * orients, std::move(l1));
    const std::size_t n2 = l2.size() / (h * w);
    out.layer2 = make_layer(h, w, n2, std::move(l2));
    return out;
}

Grid2D downsample2(const Grid2D& g)
{
    const std::size_t h = g.height() / 2;
    const std::size_t w = g.width() / 2;
    if (h == 0 || w == 0) throw Error(ErrorKind::dimension, "image too small for dual-resolution scattering");
    Grid2D out(h, w, g.channels());
    for (std::size_t c = 0; c < g.channels(); ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                out(c, y, x) = 0.25 * (g(c, 2 * y, 2 * x) + g(c, 2 * y + 1, 2 * x) + g(c, 2 * y, 2 * x + 1) +
                                       g(c, 2 * y + 1, 2 * x + 1));
            }
        }
    }
    return out;
}

Grid2D upsample_bilinear(const Grid2D& g, std::size_t height, std::size_t width)
{
    Grid2D out(height, width, g.channels());
    auto source = [](std::size_t i, std::size_t n_out, std::size_t n_in, std::size_t& i0, std::size_t& i1, double& t) {
        double s = (static_cast<double>(i) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(n_in - 1));
        i0 = static_cast<std::size_t>(std::floor(s));
        i1 = std::min(i0 + 1, n_in - 1);
        t = s - static_cast<double>(i0);
    };
    for (std::size_t y = 0; y < height; ++y) {
        std::size_t y0, y1;
        double ty;
        source(y, height, g.height(), y0, y1, ty);
        for (std::size_t x = 0; x < width; ++x) {
            std::size_t x0, x1;
            double tx;
            source(x, width, g.width(), x0, x1, tx);
            for (std::size_t c = 0; c < g.channels(); ++c) {
                const double top = (1 - tx) * g(c, y0, x0) + tx * g(c, y0, x1);
                const double bottom = (1 - tx) * g(c, y1, x0) + tx * g(c, y1, x1);
                out(c, y, x) = (1 - ty) * top + ty * bottom;
            }
        }
    }
    return out;
}

Grid2D stack_pair(const Grid2D& a, const Grid2D& b)
{
    if (a.empty()) return {};
    const Grid2D parts[] = {a, b};
    return concat_channels(parts);
}

} // namespace

void ScatterConfig::validate() const
{
    if (num_scales < 1 || num_scales > 3) throw Error(ErrorKind::config, "scatter: number of scales must be in [1, 3]");
    if (orientations_deg.empty()) throw Error(ErrorKind::config, "scatter: at least one orientation is required");
    if (!(log_k_finest > 0.0)) throw Error(ErrorKind::config, "scatter: log offset k must be positive");
}

double ScatterConfig::smoothing_scale() const noexcept { return std::ldexp(1.0, static_cast<int>(num_scales)); }

const ComplexKernel2D& FilterBank::at(std::size_t scale, std::size_t orientation) const
{
    if (scale < 1 || scale > num_scales || orientation >= num_orientations) {
        throw Error(ErrorKind::config, "filter bank index out of range");
    }
    return bandpass[(scale - 1) * num_orientations + orientation];
}

std::uint64_t FilterBank::fingerprint() const
{
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    auto mix = [&hash](const std::vector<double>& values) {
        for (double v : values) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof(double));
            for (unsigned char b : bytes) {
                hash ^= b;
                hash *= 0x100000001b3ULL;
            }
        }
    };
    for (const auto& k : bandpass) {
        mix(k.real.values);
        mix(k.imag.values);
    }
    mix(lowpass.values);
    return hash;
}

std::size_t FeatureStack::channels() const noexcept
{
    return layer0.channels() + layer1.channels() + layer2.channels();
}

Grid2D FeatureStack::concatenated() const
{
    std::vector<Grid2D> parts;
    for (const Grid2D* g : {&layer0, &layer1, &layer2}) {
        if (!g->empty()) parts.push_back(*g);
    }
    return concat_channels(parts);
}

FilterBank build_filter_bank(const ScatterConfig& config)
{
    config.validate();
    FilterBank bank;
    bank.num_scales = config.num_scales;
    bank.num_orientations = config.orientations_deg.size();
    for (std::size_t j = 1; j <= config.num_scales; ++j) {
        for (double theta : config.orientations_deg) bank.bandpass.push_back(make_bandpass(j, theta));
    }
    bank.lowpass = make_lowpass(0.5 * config.smoothing_scale());
    return bank;
}

Grid2D modulus_envelope(const Grid2D& x, const ComplexKernel2D& psi)
{
    const ComplexResponse r = conv2d_same(x, psi);
    Grid2D u(x.height(), x.width(), 1);
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double a = r.real.values()[i];
        const double b = r.imag.values()[i];
        u.values()[i] = std::sqrt(a * a + b * b);
    }
    return u;
}

Grid2D parametric_log(const Grid2D& u, double k)
{
    if (!(k > 0.0)) throw Error(ErrorKind::config, "parametric_log: k must be positive");
    Grid2D out = u;
    for (double& v : out.values()) {
        if (v < 0.0) throw Error(ErrorKind::data, "parametric_log: negative envelope value");
        v = std::log(v + k);
    }
    return out;
}

Grid2D to_luminance(const Grid2D& image)
{
    if (image.channels() == 1) return image;
    if (image.channels() != 3) throw Error(ErrorKind::dimension, "luminance conversion expects 1 or 3 channels");
    Grid2D out(image.height(), image.width(), 1);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.values()[i] = 0.299 * image.plane(0)[i] + 0.587 * image.plane(1)[i] + 0.114 * image.plane(2)[i];
    }
    return out;
}

std::vector<ScatterPath> enumerate_paths(const ScatterConfig& config, std::size_t input_channels)
{
    config.validate();
    const int scales = static_cast<int>(config.num_scales);
    const int orients = static_cast<int>(config.orientations_deg.size());
    const int resolutions = config.dual_resolution ? 2 : 1;
    const int channels = static_cast<int>(config.color == ColorMode::luminance ? 1 : input_channels);

    std::vector<ScatterPath> paths;
    for (int layer = 0; layer <= 2; ++layer) {
        for (int res = 0; res < resolutions; ++res) {
            for (int c = 0; c < channels; ++c) {
                if (layer == 0) {
                    paths.push_back({0, c, res, -1, -1, -1, -1});
                    continue;
                }
                for (int j1 = 1; j1 <= scales; ++j1) {
                    for (int r1 = 0; r1 < orients; ++r1) {
                        if (layer == 1) {
                            paths.push_back({1, c, res, j1, r1, -1, -1});
                            continue;
                        }
                        for (int j2 = j1 + 1; j2 <= scales; ++j2) {
                            for (int r2 = 0; r2 < orients; ++r2) paths.push_back({2, c, res, j1, r1, j2, r2});
                        }
                    }
                }
            }
        }
    }
    return paths;
}

FeatureStack scatter(const Grid2D& image, const FilterBank& bank, const ScatterConfig& config)
{
    config.validate();
    if (bank.num_scales != config.num_scales || bank.num_orientations != config.orientations_deg.size() ||
        bank.bandpass.size() != bank.num_scales * bank.num_orientations) {
        throw Error(ErrorKind::config, "scatter: filter bank does not match configuration");
    }
    image.require_finite("scatter input");
    const Grid2D input = config.color == ColorMode::luminance ? to_luminance(image) : image;

    FeatureStack out = scatter_single_resolution(input, bank, config);
    if (config.dual_resolution) {
        const FeatureStack coarse = scatter_single_resolution(downsample2(input), bank, config);
        const std::size_t h = input.height();
        const std::size_t w = input.width();
        out.layer0 = stack_pair(out.layer0, upsample_bilinear(coarse.layer0, h, w));
        out.layer1 = stack_pair(out.layer1, upsample_bilinear(coarse.layer1, h, w));
        if (!out.layer2.empty()) out.layer2 = stack_pair(out.layer2, upsample_bilinear(coarse.layer2, h, w));
    }
    out.path_index = enumerate_paths(config, image.channels());
    return out;
}

} // namespace gshdl
