#include "gshdl/conv.hpp"
#include "gshdl/error.hpp"
#include "gshdl/lbfgs.hpp"
#include "gshdl/rng.hpp"
#include "gshdl/sym_eigen.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace gshdl;

namespace {

Grid2D random_grid(std::size_t h, std::size_t w, Rng& rng)
{
    Grid2D g(h, w);
    for (double& v : g.values()) v = rng.uniform(-1.0, 1.0);
    return g;
}

Kernel2D random_kernel(std::size_t h, std::size_t w, Rng& rng)
{
    std::vector<double> v(h * w);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return Kernel2D(h, w, v);
}

// Mirror without edge repetition, applied until the index lands inside.
std::ptrdiff_t mirror(std::ptrdiff_t i, std::ptrdiff_t n)
{
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
}

double brute_conv(const Grid2D& in, const Kernel2D& k, std::ptrdiff_t y, std::ptrdiff_t x)
{
    const auto h = static_cast<std::ptrdiff_t>(in.height());
    const auto w = static_cast<std::ptrdiff_t>(in.width());
    const auto cy = static_cast<std::ptrdiff_t>(k.height / 2);
    const auto cx = static_cast<std::ptrdiff_t>(k.width / 2);
    double sum = 0.0;
    for (std::ptrdiff_t a = 0; a < static_cast<std::ptrdiff_t>(k.height); ++a) {
        for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(k.width); ++b) {
            const std::ptrdiff_t sy = mirror(y - (a - cy), h);
            const std::ptrdiff_t sx = mirror(x - (b - cx), w);
            sum += in(0, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) *
                   k(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
        }
    }
    return sum;
}

// Number of eigenvalues of a symmetric matrix below `shift`, from the signs
// of the pivots of an LDL^T factorisation of (m - shift I).
int count_below(const Eigen::MatrixXd& m, double shift)
{
    Eigen::MatrixXd a = m - shift * Eigen::MatrixXd::Identity(m.rows(), m.cols());
    const Eigen::Index n = a.rows();
    int negative = 0;
    for (Eigen::Index k = 0; k < n; ++k) {
        double pivot = a(k, k);
        if (pivot == 0.0) pivot = -1e-300;
        if (pivot < 0.0) ++negative;
        for (Eigen::Index i = k + 1; i < n; ++i) {
            const double f = a(i, k) / pivot;
            for (Eigen::Index j = k + 1; j < n; ++j) a(i, j) -= f * a(k, j);
        }
    }
    return negative;
}

// k-th smallest eigenvalue by bisection on the inertia count.
double bisect_eigenvalue(const Eigen::MatrixXd& m, int k)
{
    double bound = 0.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i) bound = std::max(bound, m.row(i).cwiseAbs().sum());
    double lo = -bound - 1.0;
    double hi = bound + 1.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (count_below(m, mid) > k) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    return 0.5 * (lo + hi);
}

Eigen::MatrixXd random_symmetric(int n, Rng& rng)
{
    Eigen::MatrixXd m(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) m(i, j) = m(j, i) = rng.uniform(-1.0, 1.0);
    }
    return m;
}

} // namespace

TEST_CASE("conv2d_same: identity and DC response")
{
    Rng rng(1);
    const Grid2D x = random_grid(6, 7, rng);
    CHECK(conv2d_same(x, Kernel2D(1, 1, {1.0})) == x);

    const Grid2D c(8, 8, 1, 2.5);
    const Kernel2D k = random_kernel(5, 3, rng);
    const Grid2D y = conv2d_same(c, k);
    for (double v : y.values()) CHECK(v == doctest::Approx(2.5 * k.sum()).epsilon(1e-12));
}

TEST_CASE("conv2d_same matches a nested-loop summation")
{
    Rng rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        const Grid2D x = random_grid(5, 5, rng);
        const Kernel2D k = random_kernel(3, 3, rng);
        const Grid2D y = conv2d_same(x, k);
        for (std::size_t r = 0; r < 5; ++r) {
            for (std::size_t c = 0; c < 5; ++c) {
                CHECK(std::abs(y(0, r, c) - brute_conv(x, k, static_cast<std::ptrdiff_t>(r), static_cast<std::ptrdiff_t>(c))) <= 1e-12);
            }
        }
    }
    // Kernels larger than the input reflect more than once.
    const Grid2D x = random_grid(4, 6, rng);
    const Kernel2D k = random_kernel(7, 11, rng);
    const Grid2D y = conv2d_same(x, k);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 6; ++c) {
            CHECK(std::abs(y(0, r, c) - brute_conv(x, k, static_cast<std::ptrdiff_t>(r), static_cast<std::ptrdiff_t>(c))) <= 1e-12);
        }
    }
}

TEST_CASE("conv2d_same errors")
{
    Rng rng(3);
    const Grid2D x = random_grid(5, 5, rng);
    CHECK_THROWS_AS(Kernel2D(2, 3, std::vector<double>(6, 1.0)), Error);
    try {
        (void)Kernel2D(2, 3, std::vector<double>(6, 1.0));
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::dimension);
    }
    Grid2D bad = x;
    bad(0, 2, 2) = std::numeric_limits<double>::quiet_NaN();
    try {
        (void)conv2d_same(bad, Kernel2D(3, 3, std::vector<double>(9, 1.0)));
        FAIL("expected a data error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::data);
    }
    try {
        (void)conv2d_same(x, Kernel2D(11, 3, std::vector<double>(33, 1.0)));
        FAIL("expected a dimension error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::dimension);
    }
}

TEST_CASE("conv2d_same is linear")
{
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const Grid2D x = random_grid(9, 7, rng);
        const Grid2D y = random_grid(9, 7, rng);
        const Kernel2D k = random_kernel(5, 5, rng);
        const double a = rng.uniform(-2.0, 2.0);
        const double b = rng.uniform(-2.0, 2.0);
        Grid2D mix(9, 7);
        for (std::size_t i = 0; i < mix.size(); ++i) mix.values()[i] = a * x.values()[i] + b * y.values()[i];
        const Grid2D lhs = conv2d_same(mix, k);
        const Grid2D cx = conv2d_same(x, k);
        const Grid2D cy = conv2d_same(y, k);
        for (std::size_t i = 0; i < lhs.size(); ++i) {
            CHECK(std::abs(lhs.values()[i] - (a * cx.values()[i] + b * cy.values()[i])) <= 1e-12);
        }
    }
}

TEST_CASE("conv2d_same is shift-equivariant away from the border")
{
    Rng rng(5);
    const std::size_t n = 16;
    const Grid2D x = random_grid(n, n, rng);
    const Kernel2D k = random_kernel(3, 3, rng);
    Grid2D shifted(n, n);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < n; ++c) shifted(0, r, c) = x(0, (r + n - 2) % n, (c + n - 1) % n);
    }
    const Grid2D a = conv2d_same(x, k);
    const Grid2D b = conv2d_same(shifted, k);
    for (std::size_t r = 4; r < n - 2; ++r) {
        for (std::size_t c = 3; c < n - 2; ++c) CHECK(b(0, r, c) == a(0, r - 2, c - 1));
    }
}

TEST_CASE("conv2d_same_bank agrees with single-kernel convolution")
{
    Rng rng(6);
    const Grid2D x = random_grid(10, 12, rng);
    std::vector<Kernel2D> ks{random_kernel(5, 5, rng), random_kernel(5, 5, rng), random_kernel(5, 5, rng)};
    const Grid2D bank = conv2d_same_bank(x, ks);
    REQUIRE(bank.channels() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        const Grid2D single = conv2d_same(x, ks[i]);
        for (std::size_t p = 0; p < single.size(); ++p) CHECK(std::abs(bank.plane(i)[p] - single.values()[p]) <= 1e-12);
    }
}

TEST_CASE("sym_eigen trivial cases")
{
    const EigenDecomposition id = sym_eigen(Eigen::MatrixXd::Identity(3, 3));
    for (int i = 0; i < 3; ++i) CHECK(id.values[i] == doctest::Approx(1.0).epsilon(1e-14));

    Eigen::MatrixXd d(2, 2);
    d << 2.0, 0.0, 0.0, 5.0;
    const EigenDecomposition e = sym_eigen(d);
    CHECK(e.values[0] == doctest::Approx(5.0));
    CHECK(e.values[1] == doctest::Approx(2.0));
    CHECK(std::abs(std::abs(e.vectors(1, 0)) - 1.0) <= 1e-12);
    CHECK(std::abs(std::abs(e.vectors(0, 1)) - 1.0) <= 1e-12);
}

TEST_CASE("sym_eigen agrees with inertia bisection and reconstructs the input")
{
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const Eigen::MatrixXd m = random_symmetric(6, rng);
        const EigenDecomposition e = sym_eigen(m);
        const double norm = m.norm();
        const Eigen::MatrixXd back = e.vectors * e.values.asDiagonal() * e.vectors.transpose();
        CHECK((back - m).cwiseAbs().maxCoeff() <= 1e-9);
        CHECK((e.vectors.transpose() * e.vectors - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff() <= 1e-10);
        for (int i = 0; i < 6; ++i) {
            CHECK((m * e.vectors.col(i) - e.values[i] * e.vectors.col(i)).norm() <= 1e-9 * norm);
            if (i > 0) CHECK(e.values[i - 1] >= e.values[i]);
            CHECK(std::abs(e.values[i] - bisect_eigenvalue(m, 5 - i)) <= 1e-9);
        }
        CHECK(std::abs(e.values.sum() - m.trace()) <= 1e-9 * std::max(1.0, std::abs(m.trace())));
    }
}

TEST_CASE("sym_eigen rejects asymmetric input")
{
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(3, 3);
    m(0, 1) = 1e-6;
    try {
        (void)sym_eigen(m);
        FAIL("expected a precondition error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::precondition);
    }
}

TEST_CASE("lbfgs: quadratic bowl and Rosenbrock")
{
    const std::vector<double> target{1.5, -2.0, 0.25, 4.0};
    const Objective bowl = [&](std::span<const double> x, std::span<double> g) {
        double f = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            f += (x[i] - target[i]) * (x[i] - target[i]);
            g[i] = 2.0 * (x[i] - target[i]);
        }
        return f;
    };
    OptimizerOptions opts;
    opts.gradient_tolerance = 1e-10;
    const OptimizeResult r = lbfgs_minimize(bowl, {10.0, 10.0, -10.0, 0.0}, opts);
    for (std::size_t i = 0; i < target.size(); ++i) CHECK(std::abs(r.argmin[i] - target[i]) <= 1e-8);

    const Objective rosen = [](std::span<const double> x, std::span<double> g) {
        const double a = 1.0 - x[0];
        const double b = x[1] - x[0] * x[0];
        g[0] = -2.0 * a - 400.0 * x[0] * b;
        g[1] = 200.0 * b;
        return a * a + 100.0 * b * b;
    };
    opts.max_iterations = 500;
    const OptimizeResult rr = lbfgs_minimize(rosen, {-1.2, 1.0}, opts);
    CHECK(std::abs(rr.argmin[0] - 1.0) <= 1e-6);
    CHECK(std::abs(rr.argmin[1] - 1.0) <= 1e-6);
    CHECK(rr.value <= 1e-6);
    for (std::size_t i = 1; i < rr.trace.size(); ++i) CHECK(rr.trace[i] <= rr.trace[i - 1]);
}

TEST_CASE("lbfgs beats a long fixed-step gradient descent on logistic regression")
{
    Rng rng(8);
    std::vector<std::array<double, 2>> pts;
    std::vector<double> y;
    for (int i = 0; i < 20; ++i) {
        const double label = i % 2;
        pts.push_back({rng.normal(label > 0 ? 1.5 : -1.5, 0.5), rng.normal(label > 0 ? 1.0 : -1.0, 0.5)});
        y.push_back(label);
    }
    const Objective loss = [&](std::span<const double> w, std::span<double> g) {
        double f = 0.0;
        std::fill(g.begin(), g.end(), 0.0);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            const double z = w[0] * pts[i][0] + w[1] * pts[i][1] + w[2];
            const double p = 1.0 / (1.0 + std::exp(-z));
            f += std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - y[i] * z;
            const double r = p - y[i];
            g[0] += r * pts[i][0];
            g[1] += r * pts[i][1];
            g[2] += r;
        }
        for (double& gi : g) gi /= static_cast<double>(pts.size());
        return f / static_cast<double>(pts.size());
    };
    std::vector<double> w(3, 0.0), g(3);
    for (int it = 0; it < 1000; ++it) {
        (void)loss(w, g);
        for (int j = 0; j < 3; ++j) w[j] -= 0.1 * g[j];
    }
    const double gd_loss = loss(w, g);
    OptimizerOptions opts;
    opts.max_iterations = 200;
    const OptimizeResult r = lbfgs_minimize(loss, {0.0, 0.0, 0.0}, opts);
    CHECK(r.value <= gd_loss);
    for (std::size_t i = 1; i < r.trace.size(); ++i) CHECK(r.trace[i] <= r.trace[i - 1]);
}

TEST_CASE("lbfgs reports non-finite objectives with the last good iterate")
{
    const Objective nan_everywhere_but_start = [](std::span<const double> x, std::span<double> g) {
        g[0] = 1.0;
        return x[0] == 3.0 ? 1.0 : std::numeric_limits<double>::quiet_NaN();
    };
    try {
        (void)lbfgs_minimize(nan_everywhere_but_start, {3.0}, {});
        FAIL("expected a numerical error");
    } catch (const NumericalError& e) {
        CHECK(e.kind() == ErrorKind::numerical);
        REQUIRE(e.last_good().size() == 1);
        CHECK(e.last_good()[0] == 3.0);
    }
    OptimizerOptions bad;
    bad.gradient_tolerance = 0.0;
    CHECK_THROWS_AS(bad.validate(), Error);
}
