#include "gshdl/lbfgs.hpp"

#include "gshdl/error.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace gshdl {

void OptimizerOptions::validate() const
{
    if (max_iterations == 0 || history_size == 0 || line_search_max_steps == 0 || !(gradient_tolerance > 0.0)) {
        throw Error(ErrorKind::config, "optimizer options must all be positive");
    }
}

namespace {

double dot(std::span<const double> a, std::span<const double> b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double inf_norm(std::span<const double> a)
{
    double m = 0.0;
    for (double v : a) m = std::max(m, std::abs(v));
    return m;
}

bool all_finite(std::span<const double> a)
{
    return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

struct CurvaturePair {
    std::vector<double> s;
    std::vector<double> y;
    double rho;
};

// Two-loop recursion: returns -H * g.
std::vector<double> search_direction(const std::deque<CurvaturePair>& history, std::span<const double> g)
{
    std::vector<double> q(g.begin(), g.end());
    std::vector<double> alpha(history.size());
    for (std::size_t i = history.size(); i-- > 0;) {
        alpha[i] = history[i].rho * dot(history[i].s, q);
        for (std::size_t j = 0; j < q.size(); ++j) q[j] -= alpha[i] * history[i].y[j];
    }
    if (!history.empty()) {
        const auto& last = history.back();
        const double gamma = dot(last.s, last.y) / dot(last.y, last.y);
        for (double& v : q) v *= gamma;
    }
    for (std::size_t i = 0; i < history.size(); ++i) {
        const double beta = history[i].rho * dot(history[i].y, q);
        for (std::size_t j = 0; j < q.size(); ++j) q[j] += history[i].s[j] * (alpha[i] - beta);
    }
    for (double& v : q) v = -v;
    return q;
}

} // namespace

OptimizeResult lbfgs_minimize(const Objective& objective, std::vector<double> start, const OptimizerOptions& opts)
{
    opts.validate();
    constexpr double c1 = 1e-4;
    const std::size_t n = start.size();

    OptimizeResult result;
    std::vector<double> x = std::move(start);
    std::vector<double> g(n);
    double f = objective(x, g);
    ++result.evaluations;
    if (!std::isfinite(f) || !all_finite(g)) {
        throw NumericalError("lbfgs: objective is not finite at the start point", x);
    }
    result.trace.push_back(f);

    std::deque<CurvaturePair> history;
    std::vector<double> x_new(n);
    std::vector<double> g_new(n);

    while (result.iterations < opts.max_iterations) {
        if (inf_norm(g) <= opts.gradient_tolerance) {
            result.converged = true;
            break;
        }

        bool accepted = false;
        // A failed search from a quasi-Newton direction is retried once along
        // the steepest-descent direction with fresh memory.
        for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
            if (attempt == 1) {
                if (history.empty()) break;
                history.clear();
            }
            std::vector<double> d = search_direction(history, g);
            double slope = dot(g, d);
            if (!(slope < 0.0)) {
                history.clear();
                d = search_direction(history, g);
                slope = dot(g, d);
            }
            double step = 1.0;
            if (history.empty()) step = 1.0 / std::max(1.0, std::sqrt(dot(g, g)));

            bool saw_finite = false;
            double f_new = 0.0;
            for (std::size_t ls = 0; ls < opts.line_search_max_steps; ++ls) {
                for (std::size_t i = 0; i < n; ++i) x_new[i] = x[i] + step * d[i];
                f_new = objective(x_new, g_new);
                ++result.evaluations;
                const bool finite = std::isfinite(f_new) && all_finite(g_new);
                saw_finite = saw_finite || finite;
                if (finite && f_new <= f + c1 * step * slope) {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if (!accepted && !saw_finite) {
                throw NumericalError("lbfgs: objective became non-finite during line search", x);
            }
            if (accepted) {
                CurvaturePair pair{std::vector<double>(n), std::vector<double>(n), 0.0};
                for (std::size_t i = 0; i < n; ++i) {
                    pair.s[i] = x_new[i] - x[i];
                    pair.y[i] = g_new[i] - g[i];
                }
                const double sy = dot(pair.s, pair.y);
                if (sy > 1e-12 * std::sqrt(dot(pair.s, pair.s) * dot(pair.y, pair.y))) {
                    pair.rho = 1.0 / sy;
                    history.push_back(std::move(pair));
                    if (history.size() > opts.history_size) history.pop_front();
                }
                x.swap(x_new);
                g.swap(g_new);
                f = f_new;
            }
        }
        if (!accepted) break;
        ++result.iterations;
        result.trace.push_back(f);
    }
    if (!result.converged && inf_norm(g) <= opts.gradient_tolerance) result.converged = true;
    result.argmin = std::move(x);
    result.value = f;
    return result;
}

} // namespace gshdl
