#include "gshdl/conv_rbm.hpp"

#include "gshdl/conv.hpp"
#include "gshdl/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>

namespace gshdl {

namespace {

constexpr double kInitScale = 0.01;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double logistic(double x)
{
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

std::size_t taps(const RbmLayer& layer) { return layer.filter_size * layer.filter_size; }

// Pixel-major hidden probabilities (HW x K) from correlation patches of v.
Eigen::MatrixXd hidden_probs(const RbmLayer& layer, const Eigen::MatrixXd& patches)
{
    Eigen::MatrixXd pre = patches * layer.weights.transpose();
    const double inv_var = 1.0 / (layer.sigma * layer.sigma);
    for (Eigen::Index k = 0; k < pre.cols(); ++k) {
        double* col = pre.col(k).data();
        const double b = layer.hidden_bias[k];
        for (Eigen::Index p = 0; p < pre.rows(); ++p) col[p] = logistic(col[p] * inv_var + b);
    }
    return pre;
}

// Weights rearranged so that convolution patches of h (HW x K*k*k) times this
// matrix give sum_k W_kc * h_k for every visible channel c.
Eigen::MatrixXd visible_weights(const RbmLayer& layer)
{
    const std::size_t kk = taps(layer);
    Eigen::MatrixXd out(static_cast<Eigen::Index>(layer.num_filters() * kk),
                        static_cast<Eigen::Index>(layer.in_channels));
    for (std::size_t k = 0; k < layer.num_filters(); ++k) {
        for (std::size_t c = 0; c < layer.in_channels; ++c) {
            for (std::size_t t = 0; t < kk; ++t) {
                out(static_cast<Eigen::Index>(k * kk + t), static_cast<Eigen::Index>(c)) =
                    layer.weights(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c * kk + t));
            }
        }
    }
    return out;
}

Grid2D as_grid(const Eigen::MatrixXd& pixel_major, std::size_t height, std::size_t width)
{
    Grid2D g(height, width, static_cast<std::size_t>(pixel_major.cols()));
    Eigen::Map<Eigen::MatrixXd>(g.data(), pixel_major.rows(), pixel_major.cols()) = pixel_major;
    return g;
}

Eigen::Map<const Eigen::MatrixXd> pixel_major(const Grid2D& g)
{
    return {g.data(), static_cast<Eigen::Index>(g.plane_size()), static_cast<Eigen::Index>(g.channels())};
}

Eigen::MatrixXd visible_means(const RbmLayer& layer, const Grid2D& h, const Eigen::MatrixXd& w_visible)
{
    const Eigen::MatrixXd patches = patch_matrix(h, layer.filter_size, layer.filter_size, PatchOrientation::convolution);
    Eigen::MatrixXd mean = patches * w_visible;
    mean.rowwise() += layer.visible_bias.transpose();
    return mean;
}

void check_input(const RbmLayer& layer, const Grid2D& v)
{
    if (v.channels() != layer.in_channels) {
        throw Error(ErrorKind::dimension, "RBM input has " + std::to_string(v.channels()) + " channels, layer expects " +
                                              std::to_string(layer.in_channels));
    }
    v.require_finite("RBM visible input");
}

Grid2D random_crop(const Grid2D& g, std::size_t size, Rng& rng)
{
    if (size == 0 || (size >= g.height() && size >= g.width())) return g;
    const std::size_t h = std::min(size, g.height());
    const std::size_t w = std::min(size, g.width());
    const std::size_t y0 = rng.index(g.height() - h + 1);
    const std::size_t x0 = rng.index(g.width() - w + 1);
    Grid2D out(h, w, g.channels());
    for (std::size_t c = 0; c < g.channels(); ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) out(c, y, x) = g(c, y0 + y, x0 + x);
        }
    }
    return out;
}

RbmLayer blank_layer(std::size_t in_channels, const LayerSpec& spec)
{
    if (spec.num_filters == 0 || spec.filter_size % 2 == 0) {
        throw Error(ErrorKind::config, "layer spec needs at least one filter of odd size");
    }
    RbmLayer layer;
    layer.filter_size = spec.filter_size;
    layer.in_channels = in_channels;
    const auto k = static_cast<Eigen::Index>(spec.num_filters);
    layer.weights = Eigen::MatrixXd::Zero(k, static_cast<Eigen::Index>(in_channels * spec.filter_size * spec.filter_size));
    layer.hidden_bias = Eigen::VectorXd::Zero(k);
    layer.visible_bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(in_channels));
    layer.filter_origin.assign(spec.num_filters, -1);
    return layer;
}

} // namespace

void RbmLayer::validate() const
{
    if (!(sigma > 0.0)) throw Error(ErrorKind::config, "RBM sigma must be positive");
    if (num_filters() == 0) throw Error(ErrorKind::config, "RBM layer has no filters");
    if (static_cast<std::size_t>(weights.cols()) != in_channels * filter_size * filter_size ||
        static_cast<std::size_t>(hidden_bias.size()) != num_filters() ||
        static_cast<std::size_t>(visible_bias.size()) != in_channels) {
        throw Error(ErrorKind::dimension, "RBM parameter shapes are inconsistent");
    }
    if (!weights.allFinite() || !hidden_bias.allFinite() || !visible_bias.allFinite()) {
        throw Error(ErrorKind::numerical, "RBM parameters are not finite");
    }
}

void TrainOptions::validate() const
{
    if (!(learning_rate >= 0.0) || cd_steps < 1 || !(momentum >= 0.0 && momentum < 1.0) || batch_size == 0) {
        throw Error(ErrorKind::config, "invalid RBM training options");
    }
}

RbmLayer init_random(std::size_t in_channels, const LayerSpec& spec, std::uint64_t seed)
{
    RbmLayer layer = blank_layer(in_channels, spec);
    Rng rng(seed);
    for (Eigen::Index i = 0; i < layer.weights.size(); ++i) layer.weights.data()[i] = rng.normal(0.0, kInitScale);
    layer.init_mode = InitMode::random;
    return layer;
}

RbmLayer init_from_priors(const PriorFilterSet& priors, const LayerSpec& spec, std::uint64_t seed)
{
    if (priors.patch_height != spec.filter_size || priors.patch_width != spec.filter_size) {
        throw Error(ErrorKind::config, "prior filter shape does not match the layer spec");
    }
    RbmLayer layer = blank_layer(priors.channels, spec);
    layer.init_mode = InitMode::prior;
    const double dim = static_cast<double>(priors.dimension());

    std::size_t next = 0;
    auto seed_with = [&](const Eigen::VectorXd& direction, int origin) {
        const double norm = direction.norm();
        if (!(norm > 0.0)) return;
        // RMS of the stored filter = kInitScale.
        layer.weights.row(static_cast<Eigen::Index>(next)) = direction.transpose() * (kInitScale * std::sqrt(dim) / norm);
        layer.filter_origin[next] = origin;
        ++next;
    };
    for (std::size_t i = 0; i < priors.size() && next < spec.num_filters; ++i) {
        if (!priors.checkerboard_flags[i]) seed_with(priors.filters.col(static_cast<Eigen::Index>(i)), static_cast<int>(i));
    }
    for (std::size_t i = 0; i < static_cast<std::size_t>(priors.spares.cols()) && next < spec.num_filters; ++i) {
        if (!priors.spare_flags[i]) {
            seed_with(priors.spares.col(static_cast<Eigen::Index>(i)), static_cast<int>(priors.size() + i));
        }
    }
    Rng rng(seed);
    for (; next < spec.num_filters; ++next) {
        for (Eigen::Index j = 0; j < layer.weights.cols(); ++j) {
            layer.weights(static_cast<Eigen::Index>(next), j) = rng.normal(0.0, kInitScale);
        }
    }
    return layer;
}

HiddenSample hidden_given_visible(const RbmLayer& layer, const Grid2D& v, Rng& rng)
{
    check_input(layer, v);
    const Eigen::MatrixXd patches = patch_matrix(v, layer.filter_size, layer.filter_size, PatchOrientation::correlation);
    HiddenSample out;
    out.probabilities = as_grid(hidden_probs(layer, patches), v.height(), v.width());
    out.sample = out.probabilities;
    for (double& p : out.sample.values()) p = rng.bernoulli(p) ? 1.0 : 0.0;
    return out;
}

VisibleSample visible_given_hidden(const RbmLayer& layer, const Grid2D& h, Rng& rng)
{
    if (h.channels() != layer.num_filters()) throw Error(ErrorKind::dimension, "hidden map count does not match filters");
    for (double x : h.values()) {
        if (x != 0.0 && x != 1.0) throw Error(ErrorKind::precondition, "visible_given_hidden expects binary hidden units");
    }
    VisibleSample out;
    out.mean = as_grid(visible_means(layer, h, visible_weights(layer)), h.height(), h.width());
    out.sample = out.mean;
    for (double& x : out.sample.values()) x += layer.sigma * rng.normal();
    return out;
}

double cd_k_update(RbmLayer& layer, std::span<const Grid2D> batch, const TrainOptions& opts, MomentumState& momentum,
                   Rng& rng)
{
    opts.validate();
    layer.validate();
    if (batch.empty()) throw Error(ErrorKind::precondition, "cd_k_update: empty batch");
    const auto k = static_cast<Eigen::Index>(layer.num_filters());
    const auto c = static_cast<Eigen::Index>(layer.in_channels);
    if (momentum.weights.size() == 0) {
        momentum.weights = Eigen::MatrixXd::Zero(layer.weights.rows(), layer.weights.cols());
        momentum.hidden_bias = Eigen::VectorXd::Zero(k);
        momentum.visible_bias = Eigen::VectorXd::Zero(c);
    }

    const double inv_var = 1.0 / (layer.sigma * layer.sigma);
    const Eigen::MatrixXd w_visible = visible_weights(layer);
    Eigen::MatrixXd grad_w = Eigen::MatrixXd::Zero(layer.weights.rows(), layer.weights.cols());
    Eigen::VectorXd grad_b = Eigen::VectorXd::Zero(k);
    Eigen::VectorXd grad_c = Eigen::VectorXd::Zero(c);
    double squared_error = 0.0;
    double pixels = 0.0;
    double values = 0.0;

    for (const Grid2D& v : batch) {
        check_input(layer, v);
        const std::size_t h = v.height();
        const std::size_t w = v.width();
        const Eigen::MatrixXd pos_patches =
            patch_matrix(v, layer.filter_size, layer.filter_size, PatchOrientation::correlation);
        const Eigen::MatrixXd pos_hidden = hidden_probs(layer, pos_patches);

        Eigen::MatrixXd hidden = pos_hidden;
        Eigen::MatrixXd neg_patches;
        Eigen::MatrixXd neg_hidden;
        Eigen::MatrixXd neg_visible;
        for (std::size_t step = 0; step < opts.cd_steps; ++step) {
            Grid2D h_sample = as_grid(hidden, h, w);
            for (double& p : h_sample.values()) p = rng.bernoulli(p) ? 1.0 : 0.0;
            Eigen::MatrixXd mean = visible_means(layer, h_sample, w_visible);
            if (step == 0) {
                squared_error += (pixel_major(v) - mean).squaredNorm();
                values += static_cast<double>(v.size());
            }
            for (Eigen::Index i = 0; i < mean.size(); ++i) mean.data()[i] += layer.sigma * rng.normal();
            neg_visible = std::move(mean);
            neg_patches = patch_matrix(as_grid(neg_visible, h, w), layer.filter_size, layer.filter_size,
                                       PatchOrientation::correlation);
            neg_hidden = hidden_probs(layer, neg_patches);
            hidden = neg_hidden;
        }

        grad_w.noalias() += pos_hidden.transpose() * pos_patches;
        grad_w.noalias() -= neg_hidden.transpose() * neg_patches;
        grad_b += (pos_hidden - neg_hidden).colwise().sum().transpose();
        grad_c += (pixel_major(v) - neg_visible).colwise().sum().transpose();
        pixels += static_cast<double>(h * w);
    }

    const double error = squared_error / values;
    if (!std::isfinite(error) || !grad_w.allFinite()) {
        throw NumericalError("cd_k_update: reconstruction diverged", {});
    }

    const double scale = opts.learning_rate / pixels;
    momentum.weights = opts.momentum * momentum.weights + (scale * inv_var) * grad_w;
    momentum.hidden_bias = opts.momentum * momentum.hidden_bias + scale * grad_b;
    momentum.visible_bias = opts.momentum * momentum.visible_bias + (scale * inv_var) * grad_c;
    layer.weights += momentum.weights;
    layer.hidden_bias += momentum.hidden_bias;
    layer.visible_bias += momentum.visible_bias;
    return error;
}

TrainedRbm train_layer(std::span<const Grid2D> features, const LayerSpec& spec, const PriorFilterSet* priors,
                       const TrainOptions& opts)
{
    opts.validate();
    if (features.empty()) throw Error(ErrorKind::data, "train_layer: no training inputs");
    const std::uint64_t init_seed = derive_seed(opts.seed, 1);
    TrainedRbm out;
    out.layer = priors != nullptr ? init_from_priors(*priors, spec, init_seed)
                                  : init_random(features[0].channels(), spec, init_seed);
    if (out.layer.in_channels != features[0].channels()) {
        throw Error(ErrorKind::config, "train_layer: priors do not match the input channel count");
    }

    Rng rng(derive_seed(opts.seed, 2));
    MomentumState momentum;
    std::vector<std::size_t> order(features.size());
    std::vector<Grid2D> batch;
    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng.engine());
        double error_sum = 0.0;
        for (std::size_t first = 0; first < order.size(); first += opts.batch_size) {
            const std::size_t last = std::min(order.size(), first + opts.batch_size);
            batch.clear();
            for (std::size_t i = first; i < last; ++i) batch.push_back(random_crop(features[order[i]], opts.crop_size, rng));
            error_sum += cd_k_update(out.layer, batch, opts, momentum, rng) * static_cast<double>(batch.size());
        }
        out.trace.reconstruction_error.push_back(error_sum / static_cast<double>(order.size()));
        out.trace.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    return out;
}

Grid2D feature_forward(const RbmLayer& layer, const Grid2D& v)
{
    check_input(layer, v);
    const Eigen::MatrixXd patches = patch_matrix(v, layer.filter_size, layer.filter_size, PatchOrientation::correlation);
    return as_grid(hidden_probs(layer, patches), v.height(), v.width());
}

RbmLayer select_filters(const RbmLayer& layer, std::span<const std::size_t> indices)
{
    if (indices.empty()) throw Error(ErrorKind::config, "select_filters: empty selection");
    RbmLayer out = layer;
    const auto n = static_cast<Eigen::Index>(indices.size());
    out.weights.resize(n, layer.weights.cols());
    out.hidden_bias.resize(n);
    out.filter_origin.clear();
    for (Eigen::Index i = 0; i < n; ++i) {
        const std::size_t src = indices[static_cast<std::size_t>(i)];
        if (src >= layer.num_filters()) throw Error(ErrorKind::config, "select_filters: index out of range");
        out.weights.row(i) = layer.weights.row(static_cast<Eigen::Index>(src));
        out.hidden_bias[i] = layer.hidden_bias[static_cast<Eigen::Index>(src)];
        out.filter_origin.push_back(layer.filter_origin.empty() ? -1 : layer.filter_origin[src]);
    }
    return out;
}

PruneResult prune_filters(const RbmLayer& layer, const SubsetEvaluator& evaluate, const PruneOptions& opts)
{
    const std::size_t k = layer.num_filters();
    if (opts.subsets_per_size == 0) throw Error(ErrorKind::config, "prune_filters: need at least one subset per size");
    Rng rng(opts.seed);
    PruneResult result;

    std::vector<std::size_t> all(k);
    std::iota(all.begin(), all.end(), std::size_t{0});
    result.full_accuracy = evaluate(all);
    ++result.evaluations;
    const double target = result.full_accuracy - opts.tolerance;

    struct Candidate {
        double accuracy;
        std::vector<std::size_t> subset;
    };
    std::map<std::size_t, Candidate> best_at;
    best_at[k] = {result.full_accuracy, all};

    auto best_of = [&](std::size_t size) -> const Candidate& {
        auto it = best_at.find(size);
        if (it != best_at.end()) return it->second;
        Candidate best{-1.0, {}};
        for (std::size_t trial = 0; trial < opts.subsets_per_size; ++trial) {
            std::vector<std::size_t> pool = all;
            std::shuffle(pool.begin(), pool.end(), rng.engine());
            pool.resize(size);
            std::sort(pool.begin(), pool.end());
            const double acc = evaluate(pool);
            ++result.evaluations;
            if (acc > best.accuracy) best = {acc, std::move(pool)};
        }
        return best_at.emplace(size, std::move(best)).first->second;
    };

    std::size_t lo = 1;
    std::size_t hi = k;
    while (lo < hi) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (best_of(mid).accuracy >= target) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    const Candidate& chosen = best_of(hi);
    result.selected = chosen.subset;
    result.selected_accuracy = chosen.accuracy;
    result.layer = select_filters(layer, result.selected);
    return result;
}

} // namespace gshdl
