#include "gshdl/crf.hpp"

#include "gshdl/error.hpp"
#include "gshdl/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace gshdl {

std::size_t GridGraph::edge_source(std::size_t e) const noexcept
{
    const std::size_t horizontal = height * (width - 1);
    if (e < horizontal) {
        const std::size_t y = e / (width - 1);
        const std::size_t x = e % (width - 1);
        return y * width + x;
    }
    return e - horizontal;
}

std::size_t GridGraph::edge_target(std::size_t e) const noexcept
{
    const std::size_t horizontal = height * (width - 1);
    return e < horizontal ? edge_source(e) + 1 : edge_source(e) + width;
}

std::size_t GridGraph::degree(std::size_t node) const noexcept
{
    const std::size_t y = node / width;
    const std::size_t x = node % width;
    return (x > 0 ? 1 : 0) + (x + 1 < width ? 1 : 0) + (y > 0 ? 1 : 0) + (y + 1 < height ? 1 : 0);
}

double GridGraph::edge_appearance() const noexcept
{
    const std::size_t edges = num_edges();
    if (edges == 0) return 1.0;
    return static_cast<double>(num_nodes() - 1) / static_cast<double>(edges);
}

void InferenceOptions::validate() const
{
    if (!(damping >= 0.0 && damping < 1.0)) throw Error(ErrorKind::config, "damping must lie in [0, 1)");
    if (!(tolerance >= 0.0)) throw Error(ErrorKind::config, "inference tolerance must be non-negative");
}

CrfWeights CrfWeights::zeros(std::size_t num_labels, std::size_t num_features)
{
    if (num_labels < 2) throw Error(ErrorKind::config, "a CRF needs at least two labels");
    CrfWeights w;
    w.num_labels = num_labels;
    w.num_features = num_features;
    w.unary = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_labels), static_cast<Eigen::Index>(num_features + 1));
    w.pairwise = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_labels), static_cast<Eigen::Index>(num_labels));
    return w;
}

std::size_t CrfWeights::parameter_count() const noexcept
{
    return num_labels * (num_features + 1) + num_labels * (num_labels - 1) / 2;
}

std::vector<double> CrfWeights::flatten() const
{
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (Eigen::Index l = 0; l < unary.rows(); ++l) {
        for (Eigen::Index d = 0; d < unary.cols(); ++d) flat.push_back(unary(l, d));
    }
    for (Eigen::Index a = 0; a < pairwise.rows(); ++a) {
        for (Eigen::Index b = a + 1; b < pairwise.cols(); ++b) flat.push_back(pairwise(a, b));
    }
    return flat;
}

void CrfWeights::assign(std::span<const double> flat)
{
    if (flat.size() != parameter_count()) throw Error(ErrorKind::dimension, "CRF parameter vector has the wrong length");
    std::size_t i = 0;
    for (Eigen::Index l = 0; l < unary.rows(); ++l) {
        for (Eigen::Index d = 0; d < unary.cols(); ++d) unary(l, d) = flat[i++];
    }
    for (Eigen::Index a = 0; a < pairwise.rows(); ++a) {
        pairwise(a, a) = 0.0;
        for (Eigen::Index b = a + 1; b < pairwise.cols(); ++b) {
            pairwise(a, b) = flat[i];
            pairwise(b, a) = flat[i];
            ++i;
        }
    }
}

double calibrate_beta(const Grid2D& image)
{
    const GridGraph g{image.height(), image.width()};
    if (g.num_edges() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
        const std::size_t s = g.edge_source(e);
        const std::size_t t = g.edge_target(e);
        for (std::size_t c = 0; c < image.channels(); ++c) {
            const double d = image.plane(c)[s] - image.plane(c)[t];
            total += d * d;
        }
    }
    const double mean = total / static_cast<double>(g.num_edges());
    return mean > 0.0 ? 1.0 / (2.0 * mean) : 0.0;
}

Potentials build_potentials(const Grid2D& features, const Grid2D& image, const CrfWeights& weights)
{
    if (features.height() != image.height() || features.width() != image.width()) {
        throw Error(ErrorKind::data, "build_potentials: feature and image sizes differ");
    }
    if (features.channels() != weights.num_features ||
        static_cast<std::size_t>(weights.unary.cols()) != weights.num_features + 1 ||
        static_cast<std::size_t>(weights.unary.rows()) != weights.num_labels) {
        throw Error(ErrorKind::data, "build_potentials: feature count does not match the weights");
    }
    const std::size_t c = weights.num_labels;
    Potentials pot;
    pot.graph = {image.height(), image.width()};
    pot.num_labels = c;
    const std::size_t n = pot.graph.num_nodes();

    using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::Map<const Eigen::MatrixXd> f(features.data(), static_cast<Eigen::Index>(n),
                                              static_cast<Eigen::Index>(weights.num_features));
    pot.unary.resize(n * c);
    Eigen::Map<RowMatrix> theta(pot.unary.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
    const auto d = static_cast<Eigen::Index>(weights.num_features);
    theta.noalias() = -(f * weights.unary.leftCols(d).transpose());
    theta.rowwise() -= weights.unary.col(d).transpose();

    const double beta = weights.fixed_beta.value_or(calibrate_beta(image));
    const std::size_t edges = pot.graph.num_edges();
    pot.contrast.resize(edges);
    pot.pairwise.assign(edges * c * c, 0.0);
    for (std::size_t e = 0; e < edges; ++e) {
        const std::size_t s = pot.graph.edge_source(e);
        const std::size_t t = pot.graph.edge_target(e);
        double dist = 0.0;
        for (std::size_t ch = 0; ch < image.channels(); ++ch) {
            const double diff = image.plane(ch)[s] - image.plane(ch)[t];
            dist += diff * diff;
        }
        pot.contrast[e] = std::exp(-beta * dist);
        for (std::size_t a = 0; a < c; ++a) {
            for (std::size_t b = 0; b < c; ++b) {
                if (a != b) {
                    pot.pairwise[(e * c + a) * c + b] =
                        weights.pairwise(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) * pot.contrast[e];
                }
            }
        }
    }
    return pot;
}

namespace {

constexpr double kLogEpsilon = -27.631021115928547; // log(1e-12)

double log_sum_exp(const double* v, std::size_t n)
{
    double m = v[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, v[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - m);
    return m + std::log(s);
}

struct Incidence {
    std::size_t edge;
    bool is_source;
};

// Directed messages are stored at (2 * edge + dir) * C: dir 0 flows
// source -> target (indexed by target label), dir 1 target -> source.
class TrwEngine {
  public:
    TrwEngine(const Potentials& pot, const InferenceOptions& opts)
        : pot_(pot), opts_(opts), c_(pot.num_labels), rho_(pot.graph.edge_appearance())
    {
        opts.validate();
        const GridGraph& g = pot.graph;
        if (c_ == 0 || pot.unary.size() != g.num_nodes() * c_ || pot.pairwise.size() != g.num_edges() * c_ * c_) {
            throw Error(ErrorKind::dimension, "potentials do not match their graph");
        }
        for (double v : pot.unary) {
            if (!std::isfinite(v)) throw Error(ErrorKind::numerical, "non-finite unary potential");
        }
        for (double v : pot.pairwise) {
            if (!std::isfinite(v)) throw Error(ErrorKind::numerical, "non-finite pairwise potential");
        }
        incidence_.resize(g.num_nodes());
        for (std::size_t e = 0; e < g.num_edges(); ++e) {
            incidence_[g.edge_source(e)].push_back({e, true});
            incidence_[g.edge_target(e)].push_back({e, false});
        }
        // Forward raster sends every source -> target message in source
        // order; the backward raster sends target -> source in reverse.
        std::vector<std::size_t> by_source(g.num_edges());
        for (std::size_t e = 0; e < g.num_edges(); ++e) by_source[e] = e;
        std::stable_sort(by_source.begin(), by_source.end(),
                         [&](std::size_t a, std::size_t b) { return g.edge_source(a) < g.edge_source(b); });
        for (std::size_t e : by_source) schedule_.push_back(2 * e);
        std::vector<std::size_t> by_target(g.num_edges());
        for (std::size_t e = 0; e < g.num_edges(); ++e) by_target[e] = e;
        std::stable_sort(by_target.begin(), by_target.end(),
                         [&](std::size_t a, std::size_t b) { return g.edge_target(a) > g.edge_target(b); });
        for (std::size_t e : by_target) schedule_.push_back(2 * e + 1);

        messages_.assign(2 * g.num_edges() * c_, 0.0);
        scratch_a_.resize(c_);
        scratch_z_.resize(c_ * c_);
        scratch_v_.resize(c_);
        scratch_w_.resize(c_);
    }

    [[nodiscard]] double rho() const noexcept { return rho_; }

    // Per-message tape record: sender-label weights exp(z - pre) (C x C),
    // then the normalised fresh message and the stored message, both as
    // probabilities. That is everything the reverse pass differentiates.
    [[nodiscard]] std::size_t record_size() const noexcept { return c_ * c_ + 2 * c_; }

    std::size_t run(std::vector<double>* tape)
    {
        if (tape != nullptr) tape->resize(opts_.max_iterations * schedule_.size() * record_size());
        double* record = tape != nullptr ? tape->data() : nullptr;
        std::size_t it = 0;
        for (; it < opts_.max_iterations; ++it) {
            double change = 0.0;
            for (std::size_t d : schedule_) {
                change = std::max(change, update(d, record));
                if (record != nullptr) record += record_size();
            }
            if (!std::isfinite(change)) throw Error(ErrorKind::numerical, "TRW messages became non-finite");
            if (opts_.tolerance > 0.0 && change <= opts_.tolerance) {
                ++it;
                break;
            }
        }
        if (tape != nullptr) tape->resize(it * schedule_.size() * record_size());
        return it;
    }

    // A_s(x) = -theta_s(x) + rho * sum of incoming messages.
    void node_field(std::size_t s, double* out) const
    {
        for (std::size_t x = 0; x < c_; ++x) out[x] = -pot_.unary[s * c_ + x];
        for (const Incidence& inc : incidence_[s]) {
            const double* m = incoming(inc);
            for (std::size_t x = 0; x < c_; ++x) out[x] += rho_ * m[x];
        }
    }

    [[nodiscard]] const double* incoming(const Incidence& inc) const
    {
        return messages_.data() + (2 * inc.edge + (inc.is_source ? 1 : 0)) * c_;
    }

    [[nodiscard]] double pair_energy(std::size_t e, std::size_t dir, std::size_t x_sender, std::size_t x_receiver) const
    {
        const double* t = pot_.pairwise.data() + e * c_ * c_;
        return dir == 0 ? t[x_sender * c_ + x_receiver] : t[x_receiver * c_ + x_sender];
    }

    [[nodiscard]] std::size_t sender(std::size_t d) const
    {
        return d % 2 == 0 ? pot_.graph.edge_source(d / 2) : pot_.graph.edge_target(d / 2);
    }

    // z(xs, xr) = -theta_e / rho + A_s(xs) - M_rev(xs), laid out xs * C + xr.
    void message_terms(std::size_t d, double* field, double* z) const
    {
        const std::size_t e = d / 2;
        const std::size_t dir = d % 2;
        const std::size_t s = sender(d);
        node_field(s, field);
        const double* rev = messages_.data() + (d ^ 1) * c_;
        for (std::size_t xs = 0; xs < c_; ++xs) {
            const double h = field[xs] - rev[xs];
            for (std::size_t xr = 0; xr < c_; ++xr) z[xs * c_ + xr] = h - pair_energy(e, dir, xs, xr) / rho_;
        }
    }

    // Fills `pre` with log-sum-exp over the sender label of z and, when
    // `weights` is given, the normalised terms exp(z - pre).
    void reduce(const double* z, double* pre, double* weights) const
    {
        for (std::size_t xr = 0; xr < c_; ++xr) {
            double m = z[xr];
            for (std::size_t xs = 1; xs < c_; ++xs) m = std::max(m, z[xs * c_ + xr]);
            double s = 0.0;
            if (weights == nullptr) {
                for (std::size_t xs = 0; xs < c_; ++xs) s += std::exp(z[xs * c_ + xr] - m);
            } else {
                for (std::size_t xs = 0; xs < c_; ++xs) s += weights[xs * c_ + xr] = std::exp(z[xs * c_ + xr] - m);
                for (std::size_t xs = 0; xs < c_; ++xs) weights[xs * c_ + xr] /= s;
            }
            pre[xr] = m + std::log(s);
        }
    }

    double update(std::size_t d, double* record)
    {
        double* z = scratch_z_.data();
        double* pre = scratch_v_.data();
        message_terms(d, scratch_a_.data(), z);
        reduce(z, pre, record);
        const double norm_pre = log_sum_exp(pre, c_);
        double* m = messages_.data() + d * c_;
        double* mixed = scratch_w_.data();
        for (std::size_t x = 0; x < c_; ++x) mixed[x] = (1.0 - opts_.damping) * (pre[x] - norm_pre) + opts_.damping * m[x];
        const double norm = log_sum_exp(mixed, c_);
        double change = 0.0;
        for (std::size_t x = 0; x < c_; ++x) {
            const double next = mixed[x] - norm;
            change = std::max(change, std::abs(next - m[x]));
            m[x] = next;
        }
        if (record != nullptr) {
            double* fresh = record + c_ * c_;
            double* stored = fresh + c_;
            for (std::size_t x = 0; x < c_; ++x) {
                fresh[x] = std::exp(pre[x] - norm_pre);
                stored[x] = std::exp(m[x]);
            }
        }
        return change;
    }

    // Edge logits L(xs, xt) for the current messages, laid out xs * C + xt.
    void edge_logits(std::size_t e, double* field_s, double* field_t, double* logits) const
    {
        const std::size_t s = pot_.graph.edge_source(e);
        const std::size_t t = pot_.graph.edge_target(e);
        node_field(s, field_s);
        node_field(t, field_t);
        const double* to_source = messages_.data() + (2 * e + 1) * c_;
        const double* to_target = messages_.data() + (2 * e) * c_;
        const double* table = pot_.pairwise.data() + e * c_ * c_;
        for (std::size_t a = 0; a < c_; ++a) {
            for (std::size_t b = 0; b < c_; ++b) {
                logits[a * c_ + b] =
                    -table[a * c_ + b] / rho_ + field_s[a] - to_source[a] + field_t[b] - to_target[b];
            }
        }
    }

    Beliefs beliefs(std::size_t iterations) const
    {
        Beliefs out;
        out.graph = pot_.graph;
        out.num_labels = c_;
        out.iterations_run = iterations;
        out.node.resize(pot_.graph.num_nodes() * c_);
        out.edge.resize(pot_.graph.num_edges() * c_ * c_);
        std::vector<double> field(c_);
        for (std::size_t s = 0; s < pot_.graph.num_nodes(); ++s) {
            node_field(s, field.data());
            const double norm = log_sum_exp(field.data(), c_);
            for (std::size_t x = 0; x < c_; ++x) out.node[s * c_ + x] = std::exp(field[x] - norm);
        }
        std::vector<double> fs(c_), ft(c_), logits(c_ * c_);
        for (std::size_t e = 0; e < pot_.graph.num_edges(); ++e) {
            edge_logits(e, fs.data(), ft.data(), logits.data());
            const double norm = log_sum_exp(logits.data(), c_ * c_);
            for (std::size_t i = 0; i < c_ * c_; ++i) out.edge[e * c_ * c_ + i] = std::exp(logits[i] - norm);
        }
        return out;
    }

    // Reverse pass. On entry `grad_messages` holds the adjoints of the final
    // messages and `grad_unary` / `grad_pair` those collected so far.
    void backward(const std::vector<double>& tape, std::size_t iterations, std::vector<double>& grad_messages,
                  std::vector<double>& grad_unary, std::vector<double>& grad_pair) const
    {
        std::vector<double> g_pre(c_), g_h(c_);
        const double* record = tape.data() + iterations * schedule_.size() * record_size();
        for (std::size_t it = iterations; it-- > 0;) {
            for (std::size_t k = schedule_.size(); k-- > 0;) {
                const std::size_t d = schedule_[k];
                record -= record_size();
                const double* weights = record;
                const double* fresh = record + c_ * c_;
                const double* stored = fresh + c_;

                double* g_out = grad_messages.data() + d * c_;
                double sum_out = 0.0;
                for (std::size_t x = 0; x < c_; ++x) sum_out += g_out[x];
                double sum_new = 0.0;
                for (std::size_t x = 0; x < c_; ++x) {
                    const double g_mixed = g_out[x] - stored[x] * sum_out;
                    g_pre[x] = (1.0 - opts_.damping) * g_mixed;
                    sum_new += g_pre[x];
                    g_out[x] = opts_.damping * g_mixed; // now the adjoint of the previous value
                }
                for (std::size_t x = 0; x < c_; ++x) g_pre[x] -= fresh[x] * sum_new;

                const std::size_t e = d / 2;
                const std::size_t dir = d % 2;
                double* g_table = grad_pair.data() + e * c_ * c_;
                std::fill(g_h.begin(), g_h.end(), 0.0);
                for (std::size_t xs = 0; xs < c_; ++xs) {
                    for (std::size_t xr = 0; xr < c_; ++xr) {
                        const double gz = g_pre[xr] * weights[xs * c_ + xr];
                        g_h[xs] += gz;
                        if (dir == 0) {
                            g_table[xs * c_ + xr] -= gz / rho_;
                        } else {
                            g_table[xr * c_ + xs] -= gz / rho_;
                        }
                    }
                }
                double* g_rev = grad_messages.data() + (d ^ 1) * c_;
                for (std::size_t x = 0; x < c_; ++x) g_rev[x] -= g_h[x];
                propagate_field(sender(d), g_h.data(), grad_messages, grad_unary);
            }
        }
    }

    // Adjoint of A_s = -theta_s + rho * incoming.
    void propagate_field(std::size_t s, const double* g_field, std::vector<double>& grad_messages,
                         std::vector<double>& grad_unary) const
    {
        for (std::size_t x = 0; x < c_; ++x) grad_unary[s * c_ + x] -= g_field[x];
        for (const Incidence& inc : incidence_[s]) {
            double* g = grad_messages.data() + (2 * inc.edge + (inc.is_source ? 1 : 0)) * c_;
            for (std::size_t x = 0; x < c_; ++x) g[x] += rho_ * g_field[x];
        }
    }

    [[nodiscard]] std::size_t labels() const noexcept { return c_; }

  private:
    const Potentials& pot_;
    InferenceOptions opts_;
    std::size_t c_;
    double rho_;
    std::vector<std::vector<Incidence>> incidence_;
    std::vector<std::size_t> schedule_;
    std::vector<double> messages_;
    std::vector<double> scratch_a_, scratch_z_, scratch_v_, scratch_w_;
};

void check_labels(const LabelGrid& labels, const GridGraph& g, std::size_t c)
{
    if (labels.height != g.height || labels.width != g.width || labels.labels.size() != g.num_nodes()) {
        throw Error(ErrorKind::dimension, "label grid does not match the graph");
    }
    for (int l : labels.labels) {
        if (l >= static_cast<int>(c)) throw Error(ErrorKind::data, "label out of range");
    }
}

bool scored_node(const GridGraph& g, std::size_t s, bool stride2)
{
    return !stride2 || ((s / g.width) % 2 == 0 && (s % g.width) % 2 == 0);
}

Grid2D crop(const Grid2D& g, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w)
{
    Grid2D out(h, w, g.channels());
    for (std::size_t c = 0; c < g.channels(); ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) out(c, y, x) = g(c, y0 + y, x0 + x);
        }
    }
    return out;
}

} // namespace

Beliefs trw_infer(const Potentials& potentials, const InferenceOptions& opts)
{
    TrwEngine engine(potentials, opts);
    const std::size_t iterations = engine.run(nullptr);
    return engine.beliefs(iterations);
}

CliqueLoss clique_loss(const Beliefs& beliefs, const LabelGrid& labels)
{
    const GridGraph& g = beliefs.graph;
    const std::size_t c = beliefs.num_labels;
    check_labels(labels, g, c);
    const double rho = g.edge_appearance();
    CliqueLoss out;
    auto clamped_log = [&out](double p) {
        if (!(p >= 1e-12)) {
            ++out.clamped;
            return kLogEpsilon;
        }
        return std::log(p);
    };
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
        const int a = labels.labels[g.edge_source(e)];
        const int b = labels.labels[g.edge_target(e)];
        if (a < 0 || b < 0) continue;
        out.value -= clamped_log(beliefs.edge[(e * c + static_cast<std::size_t>(a)) * c + static_cast<std::size_t>(b)]);
    }
    for (std::size_t s = 0; s < g.num_nodes(); ++s) {
        const int y = labels.labels[s];
        if (y < 0) continue;
        const double coeff = 1.0 - rho * static_cast<double>(g.degree(s));
        out.value -= coeff * clamped_log(beliefs.node[s * c + static_cast<std::size_t>(y)]);
    }
    return out;
}

LossGradient loss_and_gradient(const CrfWeights& weights, const CrfExample& example, const LossOptions& opts)
{
    const Potentials pot = build_potentials(example.features, example.image, weights);
    const GridGraph& g = pot.graph;
    const std::size_t c = pot.num_labels;
    check_labels(example.labels, g, c);

    TrwEngine engine(pot, opts.inference);
    std::vector<double> tape;
    const std::size_t iterations = engine.run(&tape);
    const double rho = engine.rho();

    LossGradient out;
    std::vector<double> g_messages(2 * g.num_edges() * c, 0.0);
    std::vector<double> g_unary(g.num_nodes() * c, 0.0);
    std::vector<double> g_pair(g.num_edges() * c * c, 0.0);
    std::vector<double> field(c), field_t(c), logits(c * c);

    for (std::size_t s = 0; s < g.num_nodes(); ++s) {
        const int y = example.labels.labels[s];
        if (y < 0 || !scored_node(g, s, opts.stride2)) continue;
        ++out.scored_nodes;
        const double coeff = 1.0 - rho * static_cast<double>(g.degree(s));
        engine.node_field(s, field.data());
        const double norm = log_sum_exp(field.data(), c);
        double logp = field[static_cast<std::size_t>(y)] - norm;
        if (logp < kLogEpsilon) {
            ++out.clamped;
            out.loss -= coeff * kLogEpsilon;
            continue;
        }
        out.loss -= coeff * logp;
        for (std::size_t x = 0; x < c; ++x) {
            field_t[x] = -coeff * ((x == static_cast<std::size_t>(y) ? 1.0 : 0.0) - std::exp(field[x] - norm));
        }
        engine.propagate_field(s, field_t.data(), g_messages, g_unary);
    }

    std::vector<double> g_field_s(c), g_field_t(c);
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
        const std::size_t s = g.edge_source(e);
        const std::size_t t = g.edge_target(e);
        const int a = example.labels.labels[s];
        const int b = example.labels.labels[t];
        if (a < 0 || b < 0 || !scored_node(g, s, opts.stride2)) continue;
        engine.edge_logits(e, field.data(), field_t.data(), logits.data());
        const double norm = log_sum_exp(logits.data(), c * c);
        const std::size_t truth = static_cast<std::size_t>(a) * c + static_cast<std::size_t>(b);
        const double logp = logits[truth] - norm;
        if (logp < kLogEpsilon) {
            ++out.clamped;
            out.loss -= kLogEpsilon;
            continue;
        }
        out.loss -= logp;
        std::fill(g_field_s.begin(), g_field_s.end(), 0.0);
        std::fill(g_field_t.begin(), g_field_t.end(), 0.0);
        double* g_to_source = g_messages.data() + (2 * e + 1) * c;
        double* g_to_target = g_messages.data() + (2 * e) * c;
        for (std::size_t xa = 0; xa < c; ++xa) {
            for (std::size_t xb = 0; xb < c; ++xb) {
                const std::size_t i = xa * c + xb;
                const double gl = -((i == truth ? 1.0 : 0.0) - std::exp(logits[i] - norm));
                g_pair[e * c * c + i] -= gl / rho;
                g_field_s[xa] += gl;
                g_field_t[xb] += gl;
            }
        }
        for (std::size_t x = 0; x < c; ++x) {
            g_to_source[x] -= g_field_s[x];
            g_to_target[x] -= g_field_t[x];
        }
        engine.propagate_field(s, g_field_s.data(), g_messages, g_unary);
        engine.propagate_field(t, g_field_t.data(), g_messages, g_unary);
    }

    engine.backward(tape, iterations, g_messages, g_unary, g_pair);

    // Chain rule into the weights.
    const std::size_t n = g.num_nodes();
    const std::size_t d = weights.num_features;
    using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::Map<const RowMatrix> g_theta(g_unary.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
    const Eigen::Map<const Eigen::MatrixXd> f(example.features.data(), static_cast<Eigen::Index>(n),
                                              static_cast<Eigen::Index>(d));
    Eigen::MatrixXd g_w(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(d + 1));
    g_w.leftCols(static_cast<Eigen::Index>(d)).noalias() = -(g_theta.transpose() * f);
    g_w.col(static_cast<Eigen::Index>(d)) = -g_theta.colwise().sum().transpose();

    out.gradient.reserve(weights.parameter_count());
    for (Eigen::Index l = 0; l < g_w.rows(); ++l) {
        for (Eigen::Index j = 0; j < g_w.cols(); ++j) out.gradient.push_back(g_w(l, j));
    }
    for (std::size_t a = 0; a < c; ++a) {
        for (std::size_t b = a + 1; b < c; ++b) {
            double acc = 0.0;
            for (std::size_t e = 0; e < g.num_edges(); ++e) {
                acc += pot.contrast[e] * (g_pair[(e * c + a) * c + b] + g_pair[(e * c + b) * c + a]);
            }
            out.gradient.push_back(acc);
        }
    }
    return out;
}

CrfTrainResult train_crf(std::span<const CrfExample> dataset, std::size_t num_labels, const CrfTrainOptions& opts)
{
    if (dataset.empty()) throw Error(ErrorKind::data, "train_crf: empty dataset");
    if (!(opts.l2 >= 0.0)) throw Error(ErrorKind::config, "train_crf: l2 must be non-negative");
    const std::size_t d = dataset[0].features.channels();

    std::vector<CrfExample> examples;
    examples.reserve(dataset.size());
    Rng rng(opts.seed);
    for (const CrfExample& ex : dataset) {
        if (ex.features.channels() != d) throw Error(ErrorKind::data, "train_crf: feature count differs between examples");
        const std::size_t h = ex.features.height();
        const std::size_t w = ex.features.width();
        if (opts.crop_size == 0 || (opts.crop_size >= h && opts.crop_size >= w)) {
            examples.push_back(ex);
            continue;
        }
        const std::size_t ch = std::min(opts.crop_size, h);
        const std::size_t cw = std::min(opts.crop_size, w);
        const std::size_t y0 = rng.index(h - ch + 1);
        const std::size_t x0 = rng.index(w - cw + 1);
        CrfExample cropped{crop(ex.features, y0, x0, ch, cw), crop(ex.image, y0, x0, ch, cw), LabelGrid(ch, cw)};
        for (std::size_t y = 0; y < ch; ++y) {
            for (std::size_t x = 0; x < cw; ++x) cropped.labels(y, x) = ex.labels(y0 + y, x0 + x);
        }
        examples.push_back(std::move(cropped));
    }

    CrfWeights weights = CrfWeights::zeros(num_labels, d);
    weights.fixed_beta = opts.fixed_beta;
    const std::size_t unary_params = num_labels * (d + 1);

    auto make_objective = [&](const LossOptions& loss_opts, bool learn_pairwise) {
        return [&, loss_opts, learn_pairwise](std::span<const double> x, std::span<double> grad) {
            CrfWeights w = weights;
            w.assign(x);
            double loss = 0.0;
            double nodes = 0.0;
            std::fill(grad.begin(), grad.end(), 0.0);
            for (const CrfExample& ex : examples) {
                const LossGradient lg = loss_and_gradient(w, ex, loss_opts);
                loss += lg.loss;
                nodes += static_cast<double>(lg.scored_nodes);
                for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += lg.gradient[i];
            }
            const double scale = nodes > 0.0 ? 1.0 / nodes : 1.0;
            loss *= scale;
            for (std::size_t i = 0; i < grad.size(); ++i) {
                grad[i] = grad[i] * scale + 2.0 * opts.l2 * x[i];
                loss += opts.l2 * x[i] * x[i];
                if (!learn_pairwise && i >= unary_params) grad[i] = 0.0;
            }
            return loss;
        };
    };

    CrfTrainResult result;
    std::vector<double> start = weights.flatten();
    if (opts.warm_start_iterations > 0) {
        LossOptions unary_only = opts.loss;
        unary_only.inference.max_iterations = 0;
        OptimizerOptions warm = opts.optimizer;
        warm.max_iterations = opts.warm_start_iterations;
        const OptimizeResult r = lbfgs_minimize(make_objective(unary_only, false), start, warm);
        start = r.argmin;
        result.warm_start_trace = r.trace;
    }
    const OptimizeResult r = lbfgs_minimize(make_objective(opts.loss, opts.pairwise), start, opts.optimizer);
    weights.assign(r.argmin);
    result.weights = weights;
    result.trace = r.trace;
    return result;
}

LabelGrid segment(const Potentials& potentials, const InferenceOptions& opts)
{
    const Beliefs b = trw_infer(potentials, opts);
    const std::size_t c = b.num_labels;
    LabelGrid out(b.graph.height, b.graph.width);
    for (std::size_t s = 0; s < b.graph.num_nodes(); ++s) {
        std::size_t best = 0;
        for (std::size_t x = 1; x < c; ++x) {
            if (b.node[s * c + x] > b.node[s * c + best]) best = x;
        }
        out.labels[s] = static_cast<int>(best);
    }
    return out;
}

double labeling_energy(const Potentials& potentials, const LabelGrid& labels)
{
    const GridGraph& g = potentials.graph;
    const std::size_t c = potentials.num_labels;
    check_labels(labels, g, c);
    double energy = 0.0;
    for (std::size_t s = 0; s < g.num_nodes(); ++s) {
        energy += potentials.unary[s * c + static_cast<std::size_t>(labels.labels[s])];
    }
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
        const auto a = static_cast<std::size_t>(labels.labels[g.edge_source(e)]);
        const auto b = static_cast<std::size_t>(labels.labels[g.edge_target(e)]);
        energy += potentials.pairwise[(e * c + a) * c + b];
    }
    return energy;
}

} // namespace gshdl
