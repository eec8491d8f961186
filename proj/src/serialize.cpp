#include "gshdl/serialize.hpp"

#include "gshdl/error.hpp"

namespace gshdl {

namespace {

void put_matrix(ByteWriter& w, const Eigen::MatrixXd& m)
{
    w.u64(static_cast<std::uint64_t>(m.rows()));
    w.u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) w.f64(m(i, j));
    }
}

Eigen::MatrixXd get_matrix(ByteReader& r)
{
    const std::size_t rows = r.count(0);
    const std::size_t cols = r.count(0);
    if (rows != 0 && cols > r.remaining() / 8 / rows) throw Error(ErrorKind::format, "matrix larger than its chunk");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = r.f64();
    }
    return m;
}

void put_vector(ByteWriter& w, const Eigen::VectorXd& v) { w.f64s({v.data(), static_cast<std::size_t>(v.size())}); }

Eigen::VectorXd get_vector(ByteReader& r)
{
    const std::vector<double> v = r.f64s();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void put_flags(ByteWriter& w, const std::vector<bool>& flags)
{
    w.u64(flags.size());
    for (bool f : flags) w.u8(f ? 1 : 0);
}

std::vector<bool> get_flags(ByteReader& r)
{
    std::vector<bool> flags(r.count(1));
    for (std::size_t i = 0; i < flags.size(); ++i) flags[i] = r.u8() != 0;
    return flags;
}

void put_indices(ByteWriter& w, const std::vector<std::size_t>& v)
{
    w.u64(v.size());
    for (std::size_t x : v) w.u64(x);
}

std::vector<std::size_t> get_indices(ByteReader& r)
{
    std::vector<std::size_t> v(r.count(8));
    for (std::size_t& x : v) x = r.u64();
    return v;
}

Chunk finish(std::string_view tag, ByteWriter& w) { return Chunk{make_tag(tag), std::move(w.bytes())}; }

void expect_end(const ByteReader& r, const Chunk& c)
{
    if (!r.at_end()) throw Error(ErrorKind::format, "trailing bytes in chunk " + c.tag_string());
}

} // namespace

void expect_tag(const Chunk& chunk, std::string_view tag)
{
    if (chunk.tag_string() != tag) {
        throw Error(ErrorKind::format, "expected chunk " + std::string(tag) + ", found " + chunk.tag_string());
    }
}

Chunk encode_features(const std::string& name, const FeatureStack& stack)
{
    const Grid2D all = stack.concatenated();
    if (stack.path_index.size() != all.channels()) {
        throw Error(ErrorKind::dimension, "path index does not describe every feature channel");
    }
    ByteWriter w;
    w.str(name);
    w.u32(static_cast<std::uint32_t>(all.height()));
    w.u32(static_cast<std::uint32_t>(all.width()));
    w.u32(static_cast<std::uint32_t>(all.channels()));
    for (const ScatterPath& p : stack.path_index) {
        for (int v : {p.layer, p.input_channel, p.resolution, p.scale1, p.orientation1, p.scale2, p.orientation2}) {
            w.i32(v);
        }
    }
    for (double v : all.values()) w.f32(static_cast<float>(v));
    return finish("FEAT", w);
}

FeatureRecord decode_features(const Chunk& chunk)
{
    expect_tag(chunk, "FEAT");
    ByteReader r(chunk.payload, "FEAT");
    FeatureRecord out;
    out.name = r.str();
    const std::size_t h = r.u32();
    const std::size_t w = r.u32();
    const std::size_t c = r.u32();
    if (h == 0 || w == 0 || c == 0 || c * 28 > r.remaining() || h * w > r.remaining() / 4 / c) {
        throw Error(ErrorKind::format, "FEAT record sizes are inconsistent");
    }
    out.paths.resize(c);
    for (ScatterPath& p : out.paths) {
        p.layer = r.i32();
        p.input_channel = r.i32();
        p.resolution = r.i32();
        p.scale1 = r.i32();
        p.orientation1 = r.i32();
        p.scale2 = r.i32();
        p.orientation2 = r.i32();
    }
    out.values = Grid2D(h, w, c);
    for (double& v : out.values.values()) v = r.f32();
    expect_end(r, chunk);
    return out;
}

Chunk encode_priors(const PriorFilterSet& p)
{
    ByteWriter w;
    w.u64(p.patch_height);
    w.u64(p.patch_width);
    w.u64(p.channels);
    put_matrix(w, p.filters);
    put_vector(w, p.eigenvalues);
    put_flags(w, p.checkerboard_flags);
    w.f64s(p.checkerboard_scores);
    put_matrix(w, p.spares);
    put_vector(w, p.spare_eigenvalues);
    put_flags(w, p.spare_flags);
    w.f64s(p.spare_scores);
    return finish("PRIR", w);
}

PriorFilterSet decode_priors(const Chunk& chunk)
{
    expect_tag(chunk, "PRIR");
    ByteReader r(chunk.payload, "PRIR");
    PriorFilterSet p;
    p.patch_height = r.u64();
    p.patch_width = r.u64();
    p.channels = r.u64();
    p.filters = get_matrix(r);
    p.eigenvalues = get_vector(r);
    p.checkerboard_flags = get_flags(r);
    p.checkerboard_scores = r.f64s();
    p.spares = get_matrix(r);
    p.spare_eigenvalues = get_vector(r);
    p.spare_flags = get_flags(r);
    p.spare_scores = r.f64s();
    expect_end(r, chunk);
    if (static_cast<std::size_t>(p.filters.rows()) != p.dimension() ||
        p.checkerboard_flags.size() != p.size() || p.checkerboard_scores.size() != p.size()) {
        throw Error(ErrorKind::format, "PRIR chunk is internally inconsistent");
    }
    return p;
}

Chunk encode_rbm(const RbmRecord& rec)
{
    const RbmLayer& l = rec.layer;
    ByteWriter w;
    w.u64(l.filter_size);
    w.u64(l.in_channels);
    put_matrix(w, l.weights);
    put_vector(w, l.hidden_bias);
    put_vector(w, l.visible_bias);
    w.f64(l.sigma);
    w.u8(l.init_mode == InitMode::prior ? 1 : 0);
    w.u64(l.filter_origin.size());
    for (int o : l.filter_origin) w.i32(o);
    w.f64s(rec.trace.reconstruction_error);
    put_indices(w, rec.selected);
    return finish("CRBM", w);
}

RbmRecord decode_rbm(const Chunk& chunk)
{
    expect_tag(chunk, "CRBM");
    ByteReader r(chunk.payload, "CRBM");
    RbmRecord rec;
    RbmLayer& l = rec.layer;
    l.filter_size = r.u64();
    l.in_channels = r.u64();
    l.weights = get_matrix(r);
    l.hidden_bias = get_vector(r);
    l.visible_bias = get_vector(r);
    l.sigma = r.f64();
    l.init_mode = r.u8() != 0 ? InitMode::prior : InitMode::random;
    l.filter_origin.resize(r.count(4));
    for (int& o : l.filter_origin) o = r.i32();
    rec.trace.reconstruction_error = r.f64s();
    rec.selected = get_indices(r);
    expect_end(r, chunk);
    try {
        l.validate();
    } catch (const Error& e) {
        throw Error(ErrorKind::format, std::string("CRBM chunk holds an invalid layer: ") + e.what());
    }
    return rec;
}

Chunk encode_stats(const ChannelStats& stats)
{
    ByteWriter w;
    w.f64s(stats.mean);
    w.f64s(stats.stddev);
    return finish("STAT", w);
}

ChannelStats decode_stats(const Chunk& chunk)
{
    expect_tag(chunk, "STAT");
    ByteReader r(chunk.payload, "STAT");
    ChannelStats s;
    s.mean = r.f64s();
    s.stddev = r.f64s();
    expect_end(r, chunk);
    if (s.mean.size() != s.stddev.size()) throw Error(ErrorKind::format, "STAT chunk is internally inconsistent");
    return s;
}

Chunk encode_crf(const CrfRecord& rec)
{
    const CrfWeights& wts = rec.weights;
    ByteWriter w;
    w.u64(wts.num_labels);
    w.u64(wts.num_features);
    put_matrix(w, wts.unary);
    put_matrix(w, wts.pairwise);
    w.u8(wts.fixed_beta ? 1 : 0);
    w.f64(wts.fixed_beta.value_or(0.0));
    w.u64(rec.inference.max_iterations);
    w.f64(rec.inference.damping);
    w.f64(rec.inference.tolerance);
    return finish("CRFW", w);
}

CrfRecord decode_crf(const Chunk& chunk)
{
    expect_tag(chunk, "CRFW");
    ByteReader r(chunk.payload, "CRFW");
    CrfRecord rec;
    CrfWeights& w = rec.weights;
    w.num_labels = r.u64();
    w.num_features = r.u64();
    w.unary = get_matrix(r);
    w.pairwise = get_matrix(r);
    const bool has_beta = r.u8() != 0;
    const double beta = r.f64();
    if (has_beta) w.fixed_beta = beta;
    rec.inference.max_iterations = r.u64();
    rec.inference.damping = r.f64();
    rec.inference.tolerance = r.f64();
    expect_end(r, chunk);
    if (static_cast<std::size_t>(w.unary.rows()) != w.num_labels ||
        static_cast<std::size_t>(w.unary.cols()) != w.num_features + 1 ||
        static_cast<std::size_t>(w.pairwise.rows()) != w.num_labels ||
        static_cast<std::size_t>(w.pairwise.cols()) != w.num_labels) {
        throw Error(ErrorKind::format, "CRFW chunk is internally inconsistent");
    }
    return rec;
}

} // namespace gshdl
