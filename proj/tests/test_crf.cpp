#include "gshdl/crf.hpp"
#include "gshdl/error.hpp"
#include "gshdl/rng.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace gshdl;

namespace {

Potentials random_potentials(std::size_t h, std::size_t w, std::size_t c, double scale, Rng& rng)
{
    Potentials p;
    p.graph = {h, w};
    p.num_labels = c;
    p.unary.resize(h * w * c);
    for (double& u : p.unary) u = rng.normal(0.0, scale);
    p.pairwise.resize(p.graph.num_edges() * c * c);
    for (double& v : p.pairwise) v = rng.normal(0.0, scale);
    p.contrast.assign(p.graph.num_edges(), 1.0);
    return p;
}

struct Exact {
    std::vector<double> node;
    std::vector<double> edge;
    std::vector<int> map; ///< labelling of least energy
};

// Independent energy: unary plus pairwise over an explicitly listed edge set.
double energy_of(const Potentials& p, const std::vector<std::pair<std::size_t, std::size_t>>& edges,
                 const std::vector<int>& y)
{
    const std::size_t c = p.num_labels;
    double e = 0.0;
    for (std::size_t s = 0; s < y.size(); ++s) e += p.unary[s * c + static_cast<std::size_t>(y[s])];
    for (std::size_t k = 0; k < edges.size(); ++k) {
        e += p.pairwise[(k * c + static_cast<std::size_t>(y[edges[k].first])) * c + static_cast<std::size_t>(y[edges[k].second])];
    }
    return e;
}

// Edges of an h x w grid listed by hand: horizontal pairs row by row, then
// vertical pairs row by row.
std::vector<std::pair<std::size_t, std::size_t>> grid_edges(std::size_t h, std::size_t w)
{
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x + 1 < w; ++x) out.emplace_back(y * w + x, y * w + x + 1);
    }
    for (std::size_t y = 0; y + 1 < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) out.emplace_back(y * w + x, (y + 1) * w + x);
    }
    return out;
}

Exact brute_force(const Potentials& p)
{
    const std::size_t n = p.graph.num_nodes();
    const std::size_t c = p.num_labels;
    const auto edges = grid_edges(p.graph.height, p.graph.width);
    Exact out;
    out.node.assign(n * c, 0.0);
    out.edge.assign(edges.size() * c * c, 0.0);
    std::vector<int> y(n, 0);
    double z = 0.0, best = INFINITY;
    while (true) {
        const double e = energy_of(p, edges, y);
        const double wgt = std::exp(-e);
        z += wgt;
        if (e < best) {
            best = e;
            out.map = y;
        }
        for (std::size_t s = 0; s < n; ++s) out.node[s * c + static_cast<std::size_t>(y[s])] += wgt;
        for (std::size_t k = 0; k < edges.size(); ++k) {
            out.edge[(k * c + static_cast<std::size_t>(y[edges[k].first])) * c + static_cast<std::size_t>(y[edges[k].second])] += wgt;
        }
        std::size_t i = 0;
        while (i < n && ++y[i] == static_cast<int>(c)) y[i++] = 0;
        if (i == n) break;
    }
    for (double& v : out.node) v /= z;
    for (double& v : out.edge) v /= z;
    return out;
}

CrfExample random_example(std::size_t h, std::size_t w, std::size_t features, std::size_t c, Rng& rng)
{
    CrfExample ex{Grid2D(h, w, features), Grid2D(h, w, 3), LabelGrid(h, w)};
    for (double& v : ex.features.values()) v = rng.normal();
    for (double& v : ex.image.values()) v = rng.uniform();
    for (int& l : ex.labels.labels) l = static_cast<int>(rng.index(c));
    return ex;
}

CrfWeights random_weights(std::size_t c, std::size_t f, Rng& rng)
{
    CrfWeights w = CrfWeights::zeros(c, f);
    std::vector<double> x(w.parameter_count());
    for (double& v : x) v = rng.normal(0.0, 0.7);
    w.assign(x);
    return w;
}

double relative_gap(const std::vector<double>& a, const std::vector<double>& b)
{
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den = std::max({den, a[i] * a[i], b[i] * b[i]});
    }
    double na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(std::max(na, nb)), 1e-12);
}

void check_consistent(const Beliefs& b, double tol)
{
    const std::size_t c = b.num_labels;
    for (std::size_t s = 0; s < b.graph.num_nodes(); ++s) {
        double sum = 0.0;
        for (std::size_t l = 0; l < c; ++l) {
            CHECK(b.node[s * c + l] >= 0.0);
            sum += b.node[s * c + l];
        }
        CHECK(std::abs(sum - 1.0) <= 1e-10);
    }
    for (std::size_t e = 0; e < b.graph.num_edges(); ++e) {
        const std::size_t src = b.graph.edge_source(e), dst = b.graph.edge_target(e);
        double sum = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            double row = 0.0, col = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                row += b.edge[(e * c + i) * c + j];
                col += b.edge[(e * c + j) * c + i];
            }
            sum += row;
            CHECK(std::abs(row - b.node[src * c + i]) <= tol);
            CHECK(std::abs(col - b.node[dst * c + i]) <= tol);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-10);
    }
}

} // namespace

TEST_CASE("grid graph layout")
{
    const GridGraph g{3, 4};
    CHECK(g.num_nodes() == 12);
    CHECK(g.num_edges() == 17);
    const auto edges = grid_edges(3, 4);
    REQUIRE(edges.size() == 17);
    for (std::size_t e = 0; e < 17; ++e) {
        CHECK(g.edge_source(e) == edges[e].first);
        CHECK(g.edge_target(e) == edges[e].second);
    }
    CHECK(g.degree(0) == 2);
    CHECK(g.degree(1) == 3);
    CHECK(g.degree(5) == 4);
    CHECK(g.edge_appearance() == doctest::Approx(11.0 / 17.0));
    CHECK(GridGraph{1, 1}.edge_appearance() == 1.0);
    CHECK(GridGraph{1, 6}.edge_appearance() == 1.0);
}

TEST_CASE("weights: zeros, flatten and assign")
{
    const CrfWeights w = CrfWeights::zeros(3, 4);
    CHECK(w.unary.rows() == 3);
    CHECK(w.unary.cols() == 5);
    CHECK(w.pairwise.isZero());
    CHECK(w.parameter_count() == 3 * 5 + 3);
    CHECK_THROWS_AS((void)CrfWeights::zeros(1, 4), Error);

    CrfWeights v = w;
    std::vector<double> x(v.parameter_count());
    std::iota(x.begin(), x.end(), 1.0);
    v.assign(x);
    CHECK(v.flatten() == x);
    CHECK(v.unary(1, 0) == 6.0);
    CHECK(v.pairwise(0, 1) == 16.0);
    CHECK(v.pairwise(1, 0) == 16.0);
    CHECK(v.pairwise(1, 2) == 18.0);
    CHECK(v.pairwise(2, 2) == 0.0);
}

TEST_CASE("potentials: contrast and zero weights")
{
    Rng rng(1);
    const Grid2D image(5, 6, 3, 0.4);
    CHECK(std::isfinite(calibrate_beta(image)));
    Grid2D feats(5, 6, 2);
    for (double& v : feats.values()) v = rng.normal();
    const Potentials p = build_potentials(feats, image, CrfWeights::zeros(3, 2));
    for (double c : p.contrast) CHECK(c == 1.0);
    for (double u : p.unary) CHECK(u == 0.0);
    for (double v : p.pairwise) CHECK(v == 0.0);

    // Hand-computed beta: one vertical step of height 1 in a 2x2 gray image.
    Grid2D step(2, 2, 1);
    step(0, 1, 0) = 1.0;
    step(0, 1, 1) = 1.0;
    CHECK(calibrate_beta(step) == doctest::Approx(1.0 / (2.0 * 0.5)));

    CrfWeights w = CrfWeights::zeros(2, 2);
    w.unary << 1.0, -2.0, 0.5, 0.0, 3.0, 1.0;
    const Potentials q = build_potentials(feats, image, w);
    const double f0 = feats(0, 0, 0), f1 = feats(1, 0, 0);
    CHECK(q.unary[0] == doctest::Approx(-(1.0 * f0 - 2.0 * f1 + 0.5)));
    CHECK(q.unary[1] == doctest::Approx(-(3.0 * f1 + 1.0)));
    CHECK_THROWS_AS((void)build_potentials(feats, Grid2D(5, 5, 3), w), Error);
    CHECK_THROWS_AS((void)build_potentials(Grid2D(5, 6, 3), image, w), Error);
}

TEST_CASE("single node: beliefs are the softmax of negated energies")
{
    Potentials p;
    p.graph = {1, 1};
    p.num_labels = 3;
    p.unary = {0.5, -1.0, 2.0};
    const Beliefs b = trw_infer(p, {});
    const double z = std::exp(-0.5) + std::exp(1.0) + std::exp(-2.0);
    CHECK(b.node[0] == doctest::Approx(std::exp(-0.5) / z).epsilon(1e-12));
    CHECK(b.node[1] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
    CHECK(b.node[2] == doctest::Approx(std::exp(-2.0) / z).epsilon(1e-12));
}

TEST_CASE("zero inference iterations give per-node softmax beliefs")
{
    Rng rng(2);
    const Potentials p = random_potentials(3, 3, 3, 1.0, rng);
    InferenceOptions opts;
    opts.max_iterations = 0;
    const Beliefs b = trw_infer(p, opts);
    for (std::size_t s = 0; s < 9; ++s) {
        double z = 0.0;
        for (std::size_t l = 0; l < 3; ++l) z += std::exp(-p.unary[s * 3 + l]);
        for (std::size_t l = 0; l < 3; ++l) CHECK(std::abs(b.node[s * 3 + l] - std::exp(-p.unary[s * 3 + l]) / z) <= 1e-12);
    }
}

TEST_CASE("uniform potentials give uniform beliefs")
{
    Potentials p;
    p.graph = {3, 3};
    p.num_labels = 4;
    p.unary.assign(9 * 4, 0.7);
    p.pairwise.assign(p.graph.num_edges() * 16, -0.2);
    p.contrast.assign(p.graph.num_edges(), 1.0);
    const Beliefs b = trw_infer(p, {});
    for (double v : b.node) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    for (double v : b.edge) CHECK(v == doctest::Approx(1.0 / 16.0).epsilon(1e-12));
}

TEST_CASE("beliefs are exact on chains")
{
    Rng rng(3);
    InferenceOptions opts;
    opts.max_iterations = 200;
    opts.tolerance = 1e-13;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.index(7);
        const std::size_t c = 2 + rng.index(2);
        const bool row = trial % 2 == 0;
        const Potentials p = random_potentials(row ? 1 : n, row ? n : 1, c, 1.0, rng);
        const Beliefs b = trw_infer(p, opts);
        const Exact exact = brute_force(p);
        for (std::size_t i = 0; i < exact.node.size(); ++i) CHECK(std::abs(b.node[i] - exact.node[i]) <= 1e-6);
        for (std::size_t i = 0; i < exact.edge.size(); ++i) CHECK(std::abs(b.edge[i] - exact.edge[i]) <= 1e-6);
    }
}

TEST_CASE("beliefs are normalised and locally consistent on loopy grids")
{
    Rng rng(4);
    InferenceOptions opts;
    opts.max_iterations = 500;
    opts.tolerance = 1e-12;
    for (int trial = 0; trial < 10; ++trial) {
        const Potentials p = random_potentials(3 + rng.index(3), 3 + rng.index(3), 2 + rng.index(2), 0.5, rng);
        const Beliefs b = trw_infer(p, opts);
        CHECK(b.iterations_run < 500);
        check_consistent(b, 1e-8);
    }
    // Truncated runs are still normalised.
    const Potentials p = random_potentials(4, 4, 3, 1.0, rng);
    const Beliefs b = trw_infer(p, {});
    for (std::size_t s = 0; s < 16; ++s) CHECK(std::abs(b.node[s * 3] + b.node[s * 3 + 1] + b.node[s * 3 + 2] - 1.0) <= 1e-10);
}

TEST_CASE("adding a constant to one node's energies leaves beliefs unchanged")
{
    Rng rng(5);
    Potentials p = random_potentials(3, 3, 3, 1.0, rng);
    const Beliefs before = trw_infer(p, {});
    for (std::size_t l = 0; l < 3; ++l) p.unary[4 * 3 + l] += 2.5;
    const Beliefs after = trw_infer(p, {});
    for (std::size_t i = 0; i < before.node.size(); ++i) CHECK(std::abs(before.node[i] - after.node[i]) <= 1e-12);
}

TEST_CASE("clique loss")
{
    Beliefs perfect;
    perfect.graph = {2, 2};
    perfect.num_labels = 2;
    LabelGrid y(2, 2);
    y.labels = {0, 1, 1, 1};
    perfect.node.assign(8, 0.0);
    for (std::size_t s = 0; s < 4; ++s) perfect.node[s * 2 + static_cast<std::size_t>(y.labels[s])] = 1.0;
    perfect.edge.assign(4 * 4, 0.0);
    for (std::size_t e = 0; e < 4; ++e) {
        const auto a = static_cast<std::size_t>(y.labels[perfect.graph.edge_source(e)]);
        const auto b = static_cast<std::size_t>(y.labels[perfect.graph.edge_target(e)]);
        perfect.edge[(e * 2 + a) * 2 + b] = 1.0;
    }
    const CliqueLoss zero = clique_loss(perfect, y);
    CHECK(zero.value == 0.0);
    CHECK(zero.clamped == 0);

    // A wrong confident belief is clamped rather than infinite.
    LabelGrid wrong = y;
    wrong.labels[0] = 1;
    const CliqueLoss bad = clique_loss(perfect, wrong);
    CHECK(std::isfinite(bad.value));
    CHECK(bad.clamped > 0);

    Beliefs single;
    single.graph = {1, 1};
    single.num_labels = 5;
    single.node.assign(5, 0.2);
    CHECK(clique_loss(single, LabelGrid(1, 1, 3)).value == doctest::Approx(std::log(5.0)).epsilon(1e-14));
    CHECK(clique_loss(single, LabelGrid(1, 1, LabelGrid::kVoid)).value == 0.0);
    CHECK_THROWS_AS((void)clique_loss(single, LabelGrid(1, 1, 5)), Error);
}

TEST_CASE("analytic gradient matches central finite differences")
{
    Rng rng(6);
    for (int draw = 0; draw < 20; ++draw) {
        const std::size_t side = draw % 2 == 0 ? 3 : 4;
        const std::size_t c = 2 + rng.index(2);
        CrfExample ex = random_example(side, side, 2, c, rng);
        if (draw % 5 == 0) ex.labels.labels[1] = LabelGrid::kVoid;
        CrfWeights w = random_weights(c, 2, rng);
        LossOptions opts;
        opts.stride2 = draw % 3 == 0;
        const LossGradient lg = loss_and_gradient(w, ex, opts);
        std::vector<double> x = w.flatten();
        std::vector<double> fd(x.size());
        const double h = 1e-5;
        for (std::size_t i = 0; i < x.size(); ++i) {
            std::vector<double> up = x, down = x;
            up[i] += h;
            down[i] -= h;
            CrfWeights wu = w, wd = w;
            wu.assign(up);
            wd.assign(down);
            fd[i] = (loss_and_gradient(wu, ex, opts).loss - loss_and_gradient(wd, ex, opts).loss) / (2.0 * h);
        }
        CHECK(relative_gap(lg.gradient, fd) <= 1e-4);
    }
}

TEST_CASE("loss scoring counts")
{
    Rng rng(7);
    const CrfExample ex = random_example(5, 4, 2, 2, rng);
    const CrfWeights w = random_weights(2, 2, rng);
    CHECK(loss_and_gradient(w, ex, {}).scored_nodes == 20);
    LossOptions sub;
    sub.stride2 = true;
    CHECK(loss_and_gradient(w, ex, sub).scored_nodes == 6);
    // Without message passing the loss is the summed node cross-entropy.
    LossOptions none;
    none.inference.max_iterations = 0;
    const LossGradient lg = loss_and_gradient(w, ex, none);
    const Beliefs b = trw_infer(build_potentials(ex.features, ex.image, w), none.inference);
    CHECK(lg.loss == doctest::Approx(clique_loss(b, ex.labels).value).epsilon(1e-12));
}

TEST_CASE("label permutation is equivariant")
{
    Rng rng(8);
    const std::size_t c = 3;
    const CrfExample ex = random_example(4, 4, 3, c, rng);
    const CrfWeights w = random_weights(c, 3, rng);
    const std::vector<int> perm{2, 0, 1};
    CrfWeights pw = w;
    for (std::size_t a = 0; a < c; ++a) {
        pw.unary.row(perm[a]) = w.unary.row(static_cast<Eigen::Index>(a));
        for (std::size_t b = 0; b < c; ++b) pw.pairwise(perm[a], perm[b]) = w.pairwise(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    }
    CrfExample pex = ex;
    for (int& l : pex.labels.labels) l = perm[static_cast<std::size_t>(l)];
    CHECK(loss_and_gradient(w, ex, {}).loss == doctest::Approx(loss_and_gradient(pw, pex, {}).loss).epsilon(1e-12));
    const LabelGrid a = segment(build_potentials(ex.features, ex.image, w), {});
    const LabelGrid b = segment(build_potentials(pex.features, pex.image, pw), {});
    for (std::size_t i = 0; i < a.labels.size(); ++i) CHECK(b.labels[i] == perm[static_cast<std::size_t>(a.labels[i])]);
}

TEST_CASE("segment: unary-only argmin, shift invariance and small-grid oracle")
{
    Rng rng(9);
    Potentials p = random_potentials(4, 5, 3, 1.0, rng);
    std::fill(p.pairwise.begin(), p.pairwise.end(), 0.0);
    const LabelGrid unary = segment(p, {});
    for (std::size_t s = 0; s < 20; ++s) {
        const auto first = p.unary.begin() + static_cast<std::ptrdiff_t>(s * 3);
        CHECK(unary.labels[s] == std::min_element(first, first + 3) - first);
    }

    Potentials q = random_potentials(4, 4, 3, 1.0, rng);
    const LabelGrid base = segment(q, {});
    for (double& u : q.unary) u += 7.25;
    CHECK(segment(q, {}) == base);
    CHECK(segment(q, {}) == base);

    int good = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const Potentials r = random_potentials(2, 2, 2, 1.0, rng);
        const Exact exact = brute_force(r);
        LabelGrid marginal_argmax(2, 2);
        for (std::size_t s = 0; s < 4; ++s) marginal_argmax.labels[s] = exact.node[s * 2 + 1] > exact.node[s * 2] ? 1 : 0;
        const LabelGrid predicted = segment(r, {});
        if (labeling_energy(r, predicted) <= labeling_energy(r, marginal_argmax) + 1e-12) ++good;
    }
    CHECK(good >= 95);

    InferenceOptions converge;
    converge.max_iterations = 200;
    for (int trial = 0; trial < 20; ++trial) {
        const Potentials chain = random_potentials(1, 5, 3, 1.0, rng);
        const Exact exact = brute_force(chain);
        const LabelGrid predicted = segment(chain, converge);
        for (std::size_t s = 0; s < 5; ++s) {
            const auto first = exact.node.begin() + static_cast<std::ptrdiff_t>(s * 3);
            CHECK(predicted.labels[s] == std::max_element(first, first + 3) - first);
        }
    }
}

TEST_CASE("labeling energy by hand")
{
    Potentials p;
    p.graph = {1, 2};
    p.num_labels = 2;
    p.unary = {0.1, 0.2, 0.3, 0.4};
    p.pairwise = {0.0, 1.0, 2.0, 0.0};
    p.contrast = {1.0};
    LabelGrid y(1, 2);
    y.labels = {1, 0};
    CHECK(labeling_energy(p, y) == doctest::Approx(0.2 + 0.3 + 2.0));
}

TEST_CASE("training: separable data, strong regularisation and determinism")
{
    // Feature 0 is +1 on label 1 and -1 on label 0.
    Rng rng(10);
    std::vector<CrfExample> data;
    for (int i = 0; i < 4; ++i) {
        CrfExample ex{Grid2D(6, 6, 1), Grid2D(6, 6, 1), LabelGrid(6, 6)};
        for (std::size_t s = 0; s < 36; ++s) {
            const int y = (s % 6) < 3 ? 0 : 1;
            ex.labels.labels[s] = y;
            ex.features.values()[s] = (y == 1 ? 1.0 : -1.0) + rng.normal(0.0, 0.1);
            ex.image.values()[s] = y;
        }
        data.push_back(ex);
    }
    CrfTrainOptions opts;
    opts.optimizer.max_iterations = 30;
    opts.warm_start_iterations = 20;
    opts.loss.inference.max_iterations = 5;
    const CrfTrainResult r = train_crf(data, 2, opts);
    for (const CrfExample& ex : data) {
        CHECK(segment(build_potentials(ex.features, ex.image, r.weights), {}) == ex.labels);
    }
    CHECK(r.trace.back() <= r.trace.front());
    CHECK(train_crf(data, 2, opts).weights == r.weights);

    CrfTrainOptions heavy = opts;
    heavy.l2 = 1e6;
    const CrfTrainResult small = train_crf(data, 2, heavy);
    double norm = 0.0;
    for (double v : small.weights.flatten()) norm += v * v;
    CHECK(std::sqrt(norm) <= 1e-3);

    CrfTrainOptions unary = opts;
    unary.pairwise = false;
    CHECK(train_crf(data, 2, unary).weights.pairwise.isZero());

    CrfTrainOptions cropped = opts;
    cropped.crop_size = 4;
    cropped.seed = 3;
    CHECK(train_crf(data, 2, cropped).weights == train_crf(data, 2, cropped).weights);

    CHECK_THROWS_AS((void)train_crf(std::vector<CrfExample>{}, 2, opts), Error);
}

TEST_CASE("inference option validation")
{
    InferenceOptions o;
    o.damping = 1.0;
    CHECK_THROWS_AS(o.validate(), Error);
    o.damping = -0.1;
    CHECK_THROWS_AS(o.validate(), Error);
    o.damping = 0.0;
    o.tolerance = -1.0;
    CHECK_THROWS_AS(o.validate(), Error);
}
