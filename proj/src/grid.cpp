#include "gshdl/grid.hpp"

#include "gshdl/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace gshdl {

std::string_view to_string(ErrorKind kind) noexcept
{
    switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::data: return "data";
    case ErrorKind::config: return "config";
    case ErrorKind::precondition: return "precondition";
    case ErrorKind::numerical: return "numerical";
    case ErrorKind::ingestion: return "ingestion";
    case ErrorKind::format: return "format";
    case ErrorKind::checksum: return "checksum";
    case ErrorKind::version: return "version";
    case ErrorKind::render: return "render";
    case ErrorKind::io: return "io";
    }
    return "unknown";
}

Grid2D::Grid2D(std::size_t height, std::size_t width, std::size_t channels, double fill)
    : height_(height), width_(width), channels_(channels), values_(height * width * channels, fill)
{
    if (height == 0 || width == 0 || channels == 0) {
        throw Error(ErrorKind::dimension, "Grid2D requires positive height, width and channel count");
    }
}

Grid2D::Grid2D(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> values)
    : height_(height), width_(width), channels_(channels), values_(std::move(values))
{
    if (height == 0 || width == 0 || channels == 0) {
        throw Error(ErrorKind::dimension, "Grid2D requires positive height, width and channel count");
    }
    if (values_.size() != height * width * channels) {
        throw Error(ErrorKind::dimension, "Grid2D value count does not match height*width*channels");
    }
}

Grid2D Grid2D::channel(std::size_t c) const
{
    auto src = plane(c);
    return Grid2D(height_, width_, 1, std::vector<double>(src.begin(), src.end()));
}

Grid2D Grid2D::select_channels(std::span<const std::size_t> indices) const
{
    if (indices.empty()) {
        throw Error(ErrorKind::dimension, "channel selection must not be empty");
    }
    Grid2D out(height_, width_, indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= channels_) {
            throw Error(ErrorKind::dimension, "channel index out of range");
        }
        auto src = plane(indices[i]);
        std::copy(src.begin(), src.end(), out.plane(i).begin());
    }
    return out;
}

void Grid2D::require_finite(std::string_view what) const
{
    if (!std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); })) {
        throw Error(ErrorKind::data, std::string(what) + ": non-finite value");
    }
}

Grid2D concat_channels(std::span<const Grid2D> parts)
{
    if (parts.empty()) {
        throw Error(ErrorKind::dimension, "concat_channels: nothing to concatenate");
    }
    std::size_t channels = 0;
    for (const auto& p : parts) {
        if (p.height() != parts[0].height() || p.width() != parts[0].width()) {
            throw Error(ErrorKind::dimension, "concat_channels: spatial size mismatch");
        }
        channels += p.channels();
    }
    std::vector<double> values;
    values.reserve(parts[0].plane_size() * channels);
    for (const auto& p : parts) {
        values.insert(values.end(), p.values().begin(), p.values().end());
    }
    return Grid2D(parts[0].height(), parts[0].width(), channels, std::move(values));
}

ChannelStats ChannelStats::fit(std::span<const Grid2D> grids)
{
    if (grids.empty()) throw Error(ErrorKind::data, "ChannelStats::fit: no grids");
    const std::size_t channels = grids[0].channels();
    ChannelStats stats;
    stats.mean.assign(channels, 0.0);
    stats.stddev.assign(channels, 0.0);
    double count = 0.0;
    for (const auto& g : grids) {
        if (g.channels() != channels) throw Error(ErrorKind::dimension, "ChannelStats::fit: channel count differs");
        count += static_cast<double>(g.plane_size());
        for (std::size_t c = 0; c < channels; ++c) {
            for (double v : g.plane(c)) stats.mean[c] += v;
        }
    }
    for (double& m : stats.mean) m /= count;
    for (const auto& g : grids) {
        for (std::size_t c = 0; c < channels; ++c) {
            for (double v : g.plane(c)) stats.stddev[c] += (v - stats.mean[c]) * (v - stats.mean[c]);
        }
    }
    for (double& s : stats.stddev) {
        s = std::sqrt(s / count);
        if (!(s > 1e-12)) s = 1.0;
    }
    return stats;
}

Grid2D ChannelStats::apply(const Grid2D& g) const
{
    if (g.channels() != mean.size()) throw Error(ErrorKind::dimension, "ChannelStats::apply: channel count mismatch");
    Grid2D out = g;
    for (std::size_t c = 0; c < g.channels(); ++c) {
        for (double& v : out.plane(c)) v = (v - mean[c]) / stddev[c];
    }
    return out;
}

Kernel2D::Kernel2D(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v))
{
    if (h % 2 == 0 || w % 2 == 0) {
        throw Error(ErrorKind::dimension, "kernel dimensions must be odd");
    }
    if (values.size() != h * w) {
        throw Error(ErrorKind::dimension, "kernel value count does not match its shape");
    }
}

double Kernel2D::sum() const noexcept
{
    return std::accumulate(values.begin(), values.end(), 0.0);
}

double Kernel2D::l1_norm() const noexcept
{
    double s = 0.0;
    for (double v : values) s += std::abs(v);
    return s;
}

} // namespace gshdl
