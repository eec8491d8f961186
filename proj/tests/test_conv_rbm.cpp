#include "gshdl/conv_rbm.hpp"
#include "gshdl/error.hpp"
#include "gshdl/pca_prior.hpp"
#include "gshdl/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

using namespace gshdl;

namespace {

double sigmoid_oracle(double x) { return 0.5 * (1.0 + std::tanh(0.5 * x)); }

RbmLayer pixel_layer(std::vector<double> w, std::vector<double> b, double c, double sigma)
{
    RbmLayer layer;
    layer.filter_size = 1;
    layer.in_channels = 1;
    layer.weights = Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    layer.hidden_bias = Eigen::Map<Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
    layer.visible_bias = Eigen::VectorXd::Constant(1, c);
    layer.sigma = sigma;
    layer.filter_origin.assign(w.size(), -1);
    return layer;
}

std::vector<Grid2D> noise_inputs(std::size_t n, std::size_t size, std::size_t channels, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<Grid2D> out;
    for (std::size_t i = 0; i < n; ++i) {
        Grid2D g(size, size, channels);
        for (double& v : g.values()) v = rng.normal();
        out.push_back(g);
    }
    return out;
}

// Priors over 3x3 single-channel patches built from the standard basis, with
// chosen filters flagged as checkerboards.
PriorFilterSet basis_priors(std::size_t k, std::size_t spares, const std::vector<bool>& flags)
{
    PriorFilterSet p;
    p.patch_height = p.patch_width = 3;
    p.channels = 1;
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(9, 9);
    p.filters = eye.leftCols(static_cast<Eigen::Index>(k));
    p.eigenvalues = Eigen::VectorXd::LinSpaced(static_cast<Eigen::Index>(k), 9.0, 1.0);
    p.checkerboard_flags = flags;
    p.checkerboard_scores.assign(k, 0.0);
    p.spares = eye.middleCols(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(spares));
    p.spare_eigenvalues = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(spares), 0.5);
    p.spare_flags.assign(spares, false);
    p.spare_scores.assign(spares, 0.0);
    return p;
}

} // namespace

TEST_CASE("prior initialisation skips flagged filters and draws spares")
{
    const PriorFilterSet priors = basis_priors(5, 4, {true, false, true, false, true});
    CHECK(priors.flagged_count() == 3);
    const RbmLayer layer = init_from_priors(priors, {5, 3}, 1);
    CHECK(layer.init_mode == InitMode::prior);
    CHECK(layer.num_filters() == 5);
    CHECK(layer.filter_origin == std::vector<int>{1, 3, 5, 6, 7});
    for (std::size_t k = 0; k < 5; ++k) {
        const Eigen::VectorXd w = layer.weights.row(static_cast<Eigen::Index>(k)).transpose();
        const auto origin = static_cast<Eigen::Index>(layer.filter_origin[k]);
        const Eigen::VectorXd dir = origin < 5 ? Eigen::VectorXd(priors.filters.col(origin))
                                               : Eigen::VectorXd(priors.spares.col(origin - 5));
        CHECK(w.dot(dir) / (w.norm() * dir.norm()) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::sqrt(w.squaredNorm() / 9.0) == doctest::Approx(0.01).epsilon(1e-12));
    }
    CHECK(layer.hidden_bias.isZero());
    CHECK(layer.visible_bias.isZero());

    // Not enough unflagged directions: the rest are random.
    const PriorFilterSet few = basis_priors(4, 1, {true, false, true, true});
    const RbmLayer mixed = init_from_priors(few, {4, 3}, 2);
    CHECK(mixed.filter_origin == std::vector<int>{1, 4, -1, -1});
    CHECK(mixed.weights.row(2).norm() > 0.0);
    CHECK(mixed.weights.row(3) != mixed.weights.row(2));

    CHECK_THROWS_AS((void)init_from_priors(priors, {5, 5}, 1), Error);
}

TEST_CASE("random initialisation")
{
    const RbmLayer layer = init_random(4, {300, 3}, 7);
    CHECK(layer.init_mode == InitMode::random);
    CHECK(layer.weights.rows() == 300);
    CHECK(layer.weights.cols() == 36);
    const double rms = std::sqrt(layer.weights.squaredNorm() / static_cast<double>(layer.weights.size()));
    CHECK(rms == doctest::Approx(0.01).epsilon(0.02));
    CHECK(init_random(4, {300, 3}, 7) == layer);
    CHECK_THROWS_AS((void)init_random(4, {0, 3}, 7), Error);
    CHECK_THROWS_AS((void)init_random(4, {2, 4}, 7), Error);
}

TEST_CASE("one-pixel conditionals have the logistic and Gaussian forms")
{
    const double sigma = 0.7;
    const RbmLayer layer = pixel_layer({0.8, -1.3, 0.25}, {0.1, 0.4, -0.6}, 0.3, sigma);
    Rng rng(1);
    for (double v : {-2.0, -0.5, 0.0, 0.9, 3.1}) {
        const HiddenSample h = hidden_given_visible(layer, Grid2D(1, 1, 1, v), rng);
        for (Eigen::Index k = 0; k < 3; ++k) {
            const double expected = sigmoid_oracle(layer.weights(k, 0) * v / (sigma * sigma) + layer.hidden_bias(k));
            CHECK(std::abs(h.probabilities(static_cast<std::size_t>(k), 0, 0) - expected) <= 1e-10);
            const double s = h.sample(static_cast<std::size_t>(k), 0, 0);
            CHECK((s == 0.0 || s == 1.0));
        }
    }
    for (int code = 0; code < 8; ++code) {
        Grid2D h(1, 1, 3);
        for (std::size_t k = 0; k < 3; ++k) h(k, 0, 0) = (code >> k) & 1;
        const VisibleSample v = visible_given_hidden(layer, h, rng);
        double expected = 0.3;
        for (Eigen::Index k = 0; k < 3; ++k) expected += layer.weights(k, 0) * h(static_cast<std::size_t>(k), 0, 0);
        CHECK(std::abs(v.mean(0, 0, 0) - expected) <= 1e-10);
    }
    Grid2D soft(1, 1, 3, 0.5);
    CHECK_THROWS_AS((void)visible_given_hidden(layer, soft, rng), Error);
    CHECK_THROWS_AS((void)hidden_given_visible(layer, Grid2D(1, 1, 2), rng), Error);
}

TEST_CASE("one-pixel conditionals agree with the declared energy")
{
    // Enumerate h and integrate v on a fine grid under exp(-E(v, h)).
    const double sigma = 0.8, c = -0.2;
    const RbmLayer layer = pixel_layer({0.9, -0.6}, {0.3, -0.1}, c, sigma);
    auto energy = [&](double v, int h0, int h1) {
        return (v - c) * (v - c) / (2.0 * sigma * sigma) - h0 * (0.9 * v / (sigma * sigma) + 0.3) -
               h1 * (-0.6 * v / (sigma * sigma) - 0.1);
    };
    Rng rng(2);
    for (double v : {-1.5, 0.0, 0.7, 2.0}) {
        double z = 0.0, on0 = 0.0, on1 = 0.0;
        for (int h0 = 0; h0 < 2; ++h0) {
            for (int h1 = 0; h1 < 2; ++h1) {
                const double p = std::exp(-energy(v, h0, h1));
                z += p;
                on0 += h0 * p;
                on1 += h1 * p;
            }
        }
        const HiddenSample h = hidden_given_visible(layer, Grid2D(1, 1, 1, v), rng);
        CHECK(std::abs(h.probabilities(0, 0, 0) - on0 / z) <= 1e-12);
        CHECK(std::abs(h.probabilities(1, 0, 0) - on1 / z) <= 1e-12);
    }
    for (int h0 = 0; h0 < 2; ++h0) {
        for (int h1 = 0; h1 < 2; ++h1) {
            double mass = 0.0, first = 0.0, second = 0.0;
            const double dv = 1e-3;
            for (double v = -12.0; v <= 12.0; v += dv) {
                const double p = std::exp(-energy(v, h0, h1));
                mass += p;
                first += v * p;
                second += v * v * p;
            }
            const double mean = first / mass;
            const double var = second / mass - mean * mean;
            Grid2D h(1, 1, 2);
            h(0, 0, 0) = h0;
            h(1, 0, 0) = h1;
            CHECK(std::abs(visible_given_hidden(layer, h, rng).mean(0, 0, 0) - mean) <= 1e-6);
            CHECK(std::abs(var - sigma * sigma) <= 1e-6);
        }
    }
}

TEST_CASE("visible samples have the conditional mean and variance")
{
    const double sigma = 1.3;
    const RbmLayer layer = pixel_layer({0.5}, {0.0}, 0.25, sigma);
    Rng rng(3);
    const std::size_t n = 200 * 200;
    const VisibleSample s = visible_given_hidden(layer, Grid2D(200, 200, 1, 1.0), rng);
    double mean = 0.0, sq = 0.0;
    for (double v : s.sample.values()) mean += v;
    mean /= static_cast<double>(n);
    for (double v : s.sample.values()) sq += (v - mean) * (v - mean);
    const double var = sq / static_cast<double>(n - 1);
    CHECK(std::abs(mean - 0.75) <= 4.0 * sigma / std::sqrt(static_cast<double>(n)));
    // Standard error of a sample variance is about var * sqrt(2 / n).
    CHECK(std::abs(var - sigma * sigma) <= 4.0 * sigma * sigma * std::sqrt(2.0 / static_cast<double>(n)));

    const HiddenSample h = hidden_given_visible(layer, Grid2D(200, 200, 1, 2.0), rng);
    double on = 0.0;
    for (double v : h.sample.values()) on += v;
    const double p = sigmoid_oracle(0.5 * 2.0 / (sigma * sigma));
    CHECK(std::abs(on / static_cast<double>(n) - p) <= 4.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(n)));
}

TEST_CASE("a zero learning rate leaves the layer bit-identical")
{
    RbmLayer layer = init_random(3, {4, 3}, 5);
    const RbmLayer before = layer;
    TrainOptions opts;
    opts.learning_rate = 0.0;
    MomentumState momentum;
    Rng rng(1);
    const auto batch = noise_inputs(2, 8, 3, 4);
    const double err = cd_k_update(layer, batch, opts, momentum, rng);
    CHECK(std::isfinite(err));
    CHECK(err > 0.0);
    CHECK(layer == before);
}

TEST_CASE("expected CD-1 update equals the exact likelihood gradient on a one-pixel model")
{
    // One hidden unit over one pixel. The model marginal of h is analytic:
    //   logit p(h = 1) = b + w c / s^2 + w^2 / (2 s^2).
    // The hidden bias is chosen so that the data-averaged p(h | v) equals that
    // marginal; one Gibbs step from the data then lands exactly on the model
    // distribution, so the expected CD-1 update is the likelihood gradient.
    const double w = 1.5, c = 0.2, sigma = 1.0;
    Rng data_rng(17);
    std::vector<double> data(200);
    for (double& v : data) v = data_rng.normal(1.0, 0.5);

    auto data_on = [&](double b) {
        double s = 0.0;
        for (double v : data) s += sigmoid_oracle(w * v / (sigma * sigma) + b);
        return s / static_cast<double>(data.size());
    };
    auto model_on = [&](double b) { return sigmoid_oracle(b + w * c / (sigma * sigma) + w * w / (2.0 * sigma * sigma)); };
    double lo = -20.0, hi = 20.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (data_on(mid) - model_on(mid) > 0.0) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    const double b = 0.5 * (lo + hi);
    const double p1 = model_on(b);
    CHECK(std::abs(data_on(b) - p1) <= 1e-9);

    double data_vh = 0.0, data_v = 0.0;
    for (double v : data) {
        data_vh += v * sigmoid_oracle(w * v / (sigma * sigma) + b);
        data_v += v;
    }
    data_vh /= static_cast<double>(data.size());
    data_v /= static_cast<double>(data.size());
    const double exact_w = (data_vh - p1 * (c + w)) / (sigma * sigma);
    const double exact_c = (data_v - (c + w * p1)) / (sigma * sigma);

    std::vector<Grid2D> batch;
    for (double v : data) batch.emplace_back(1, 1, 1, v);
    TrainOptions opts;
    opts.learning_rate = 1.0;
    opts.momentum = 0.0;
    double mean_w = 0.0, mean_c = 0.0;
    const int runs = 4000;
    for (int s = 0; s < runs; ++s) {
        RbmLayer layer = pixel_layer({w}, {b}, c, sigma);
        MomentumState momentum;
        Rng rng(derive_seed(99, static_cast<std::uint64_t>(s)));
        (void)cd_k_update(layer, batch, opts, momentum, rng);
        mean_w += layer.weights(0, 0) - w;
        mean_c += layer.visible_bias(0) - c;
    }
    mean_w /= runs;
    mean_c /= runs;
    CHECK(std::abs(mean_w - exact_w) <= 0.05 * std::abs(exact_w));
    CHECK(std::abs(mean_c - exact_c) <= 0.05 * std::abs(exact_c));
}

TEST_CASE("cd_k_update raises on divergence and leaves the layer untouched")
{
    RbmLayer layer = pixel_layer({1e300}, {0.0}, 0.0, 1.0);
    const RbmLayer before = layer;
    MomentumState momentum;
    Rng rng(1);
    const std::vector<Grid2D> batch{Grid2D(2, 2, 1, 1e10)};
    CHECK_THROWS_AS((void)cd_k_update(layer, batch, TrainOptions{}, momentum, rng), NumericalError);
    CHECK(layer == before);
}

TEST_CASE("training is deterministic and traces every epoch")
{
    const auto inputs = noise_inputs(6, 12, 2, 8);
    TrainOptions opts;
    opts.epochs = 4;
    opts.batch_size = 4;
    opts.seed = 21;
    const TrainedRbm a = train_layer(inputs, {5, 3}, nullptr, opts);
    const TrainedRbm b = train_layer(inputs, {5, 3}, nullptr, opts);
    CHECK(a.layer == b.layer);
    CHECK(a.trace.reconstruction_error == b.trace.reconstruction_error);
    CHECK(a.trace.reconstruction_error.size() == 4);
    CHECK(a.trace.seconds.size() == 4);
    opts.seed = 22;
    CHECK_FALSE(train_layer(inputs, {5, 3}, nullptr, opts).layer == a.layer);

    opts.crop_size = 6;
    const TrainedRbm cropped = train_layer(inputs, {5, 3}, nullptr, opts);
    CHECK(cropped.layer == train_layer(inputs, {5, 3}, nullptr, opts).layer);
}

TEST_CASE("feature_forward: range, zero layer and stacked shapes")
{
    const auto inputs = noise_inputs(1, 64, 3, 9);
    RbmLayer zero = init_random(3, {4, 3}, 1);
    zero.weights.setZero();
    for (double p : feature_forward(zero, inputs[0]).values()) CHECK(p == 0.5);

    Grid2D x = inputs[0];
    const std::vector<LayerSpec> specs{{6, 3}, {5, 5}, {4, 7}, {2, 9}};
    for (std::size_t l = 0; l < specs.size(); ++l) {
        RbmLayer layer = init_random(x.channels(), specs[l], l);
        layer.weights *= 100.0;
        x = feature_forward(layer, x);
        CHECK(x.height() == 64);
        CHECK(x.width() == 64);
        CHECK(x.channels() == specs[l].num_filters);
        for (double p : x.values()) CHECK((p >= 0.0 && p <= 1.0));
    }
    CHECK_THROWS_AS((void)feature_forward(zero, Grid2D(8, 8, 2)), Error);
}

TEST_CASE("select_filters keeps the listed rows")
{
    const RbmLayer layer = init_random(2, {5, 3}, 3);
    const std::vector<std::size_t> keep{4, 1};
    const RbmLayer sub = select_filters(layer, keep);
    CHECK(sub.num_filters() == 2);
    CHECK(sub.weights.row(0) == layer.weights.row(4));
    CHECK(sub.weights.row(1) == layer.weights.row(1));
    CHECK(sub.visible_bias == layer.visible_bias);
    const std::vector<std::size_t> bad{5};
    CHECK_THROWS_AS((void)select_filters(layer, bad), Error);
    CHECK_THROWS_AS((void)select_filters(layer, std::vector<std::size_t>{}), Error);
}

TEST_CASE("pruning contract")
{
    const RbmLayer layer = init_random(2, {8, 3}, 4);
    // Accuracy grows with the number of distinct even/odd filter pairs covered.
    const SubsetEvaluator eval = [](std::span<const std::size_t> subset) {
        std::set<std::size_t> pairs;
        for (std::size_t i : subset) pairs.insert(i / 2);
        return 60.0 + 10.0 * static_cast<double>(pairs.size());
    };

    PruneOptions infinite;
    infinite.tolerance = std::numeric_limits<double>::infinity();
    const PruneResult one = prune_filters(layer, eval, infinite);
    CHECK(one.selected.size() == 1);
    CHECK(one.layer.num_filters() == 1);

    for (double tol : {0.5, 10.5, 25.0}) {
        PruneOptions opts;
        opts.tolerance = tol;
        opts.seed = 3;
        const PruneResult r = prune_filters(layer, eval, opts);
        CHECK(r.full_accuracy == 100.0);
        CHECK(r.selected.size() <= 8);
        CHECK(r.selected_accuracy >= r.full_accuracy - tol);
        CHECK(r.selected_accuracy == eval(r.selected));
        CHECK(std::set<std::size_t>(r.selected.begin(), r.selected.end()).size() == r.selected.size());
        for (std::size_t i = 0; i < r.selected.size(); ++i) {
            CHECK(r.layer.weights.row(static_cast<Eigen::Index>(i)) ==
                  layer.weights.row(static_cast<Eigen::Index>(r.selected[i])));
        }
        CHECK(prune_filters(layer, eval, opts).selected == r.selected);
    }
}
