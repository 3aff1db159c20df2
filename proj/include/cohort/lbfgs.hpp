#pragma once

#include <functional>
#include <vector>

namespace cohort {

struct LbfgsOptions {
    int max_iter = 200;
    int memory = 8;
    double grad_tol = 1e-6;    // stop when max|g| falls below this
    double f_tol = 1e-10;      // relative objective-change stop
    int max_line_search = 40;
};

struct LbfgsResult {
    std::vector<double> x;
    double f = 0.0;
    int iterations = 0;
    int evaluations = 0;
    bool line_search_failed = false;
    bool converged = false;
};

// Minimizes f(x); fg writes the gradient and returns the value.
LbfgsResult lbfgs_minimize(
    std::vector<double> x0,
    const std::function<double(const std::vector<double>&, std::vector<double>&)>& fg,
    const LbfgsOptions& opts = {});

}  // namespace cohort
