#include "cohort/lbfgs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace cohort {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace

LbfgsResult lbfgs_minimize(
    std::vector<double> x0,
    const std::function<double(const std::vector<double>&, std::vector<double>&)>& fg,
    const LbfgsOptions& opts) {
    const size_t n = x0.size();
    LbfgsResult res;
    res.x = std::move(x0);
    std::vector<double> g(n), x_new(n), g_new(n), dir(n);
    res.f = fg(res.x, g);
    res.evaluations = 1;

    std::deque<std::vector<double>> s_hist, y_hist;
    std::deque<double> rho_hist;

    std::vector<double> best_x = res.x;
    double best_f = res.f;

    for (int it = 0; it < opts.max_iter; ++it) {
        if (max_abs(g) < opts.grad_tol) {
            res.converged = true;
            break;
        }

        // Two-loop recursion for the search direction.
        dir = g;
        std::vector<double> alphas(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            alphas[i] = rho_hist[i] * dot(s_hist[i], dir);
            for (size_t k = 0; k < n; ++k) dir[k] -= alphas[i] * y_hist[i][k];
        }
        if (!s_hist.empty()) {
            double gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
            for (double& d : dir) d *= gamma;
        }
        for (size_t i = 0; i < s_hist.size(); ++i) {
            double beta = rho_hist[i] * dot(y_hist[i], dir);
            for (size_t k = 0; k < n; ++k) dir[k] += (alphas[i] - beta) * s_hist[i][k];
        }
        for (double& d : dir) d = -d;

        double dg = dot(dir, g);
        if (dg >= 0.0) {  // not a descent direction; reset to steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }
        if (s_hist.empty()) {
            // steepest descent, scaled so the unit step is at most |g|-sized
            double gnorm = std::sqrt(dot(g, g));
            double scale = 1.0 / std::max(1.0, gnorm);
            for (size_t k = 0; k < n; ++k) dir[k] = -scale * g[k];
            dg = -scale * gnorm * gnorm;
        }

        // Backtracking Armijo line search.
        double step = 1.0;
        const double c1 = 1e-4;
        double f_new = res.f;
        bool accepted = false;
        for (int ls = 0; ls < opts.max_line_search; ++ls) {
            for (size_t k = 0; k < n; ++k) x_new[k] = res.x[k] + step * dir[k];
            f_new = fg(x_new, g_new);
            res.evaluations++;
            if (std::isfinite(f_new) && f_new <= res.f + c1 * step * dg) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            res.line_search_failed = true;
            break;
        }

        std::vector<double> s(n), y(n);
        for (size_t k = 0; k < n; ++k) {
            s[k] = x_new[k] - res.x[k];
            y[k] = g_new[k] - g[k];
        }
        double sy = dot(s, y);
        double curvature_floor = 1e-10 * std::sqrt(dot(s, s) * dot(y, y));
        if (sy > curvature_floor && sy > 0.0) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opts.memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }

        double f_prev = res.f;
        res.x = x_new;
        res.f = f_new;
        g = g_new;
        res.iterations = it + 1;
        if (res.f < best_f) {
            best_f = res.f;
            best_x = res.x;
        }
        if (std::abs(f_prev - res.f) <= opts.f_tol * (std::abs(f_prev) + 1.0)) {
            res.converged = true;
            break;
        }
    }

    if (best_f < res.f) {
        res.f = best_f;
        res.x = best_x;
    }
    return res;
}

}  // namespace cohort
