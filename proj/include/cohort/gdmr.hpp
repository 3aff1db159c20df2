#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cohort/common.hpp"
#include "cohort/covariates.hpp"
#include "cohort/types.hpp"

namespace cohort {

struct GdmrHyper {
    int groups = 20;
    double beta = 0.01;     // symmetric Dirichlet word prior
    double sigma = 1.0;     // regression prior std
    double mu = 0.0;        // regression prior mean
    int iters_total = 1000;
    int iters_warm = 700;
    int opt_period = 10;
    uint64_t seed = 0;

    // Baseline ablations realized as frozen special cases.
    bool freeze_lambda = false;  // LDA: lambda pinned at 0, symmetric gamma, no optimization
    bool freeze_gamma = false;   // DMR: gamma pinned near 0, only lambda optimized

    void validate() const;
    double warm_alpha() const { return 50.0 / groups; }
};

struct OptimizerTrace {
    double objective_before = 0.0;
    double objective_after = 0.0;
    double grad_norm = 0.0;
    int steps = 0;
    bool line_search_failed = false;
};

struct FitReport {
    std::vector<double> loglik_trace;      // joint log-likelihood per iteration
    std::vector<OptimizerTrace> optimizer; // one entry per optimizer invocation
    double warm_seconds = 0.0;
    double main_seconds = 0.0;
};

struct GdmrState {
    int G = 0, W = 0, U = 0, D = 0;
    std::vector<std::vector<int>> z;  // per-token group assignments, parallel to corpus.tokens
    std::vector<int> n_gw;            // G x W
    std::vector<int> n_ug;            // U x G
    std::vector<int> n_g;             // G
    std::vector<double> lambda;       // G x D
    std::vector<double> gamma;        // G
    std::vector<double> phi_hat;      // G x W posterior means (stabilization window)
    std::vector<double> theta_hat;    // U x G

    int& ngw(int g, int w) { return n_gw[static_cast<size_t>(g) * W + w]; }
    int ngw(int g, int w) const { return n_gw[static_cast<size_t>(g) * W + w]; }
    int& nug(int u, int g) { return n_ug[static_cast<size_t>(u) * G + g]; }
    int nug(int u, int g) const { return n_ug[static_cast<size_t>(u) * G + g]; }

    bool counts_consistent(const Corpus& corpus) const;
    void recount(const Corpus& corpus);
};

// alpha_ug = exp(clamp(x_u . lambda_g)) + gamma_g
constexpr double kExpClamp = 30.0;
std::vector<double> gdmr_alpha(const double* x, const std::vector<double>& lambda,
                               const std::vector<double>& gamma, int G, int D);
// U x G matrix of alphas for all users.
std::vector<double> gdmr_alpha_matrix(const CovariateMatrix& cov,
                                      const std::vector<double>& lambda,
                                      const std::vector<double>& gamma, int G);

GdmrState gdmr_warm_start(const Corpus& corpus, const GdmrHyper& hyper, Rng& rng);

// One full collapsed-Gibbs sweep using the given U x G document prior.
void gdmr_gibbs_sweep(GdmrState& state, const Corpus& corpus,
                      const std::vector<double>& alpha, const GdmrHyper& hyper, Rng& rng);

// Log-posterior of (lambda, gamma) given the count statistics of one sweep.
double gdmr_log_posterior(const std::vector<double>& lambda, const std::vector<double>& gamma,
                          const CovariateMatrix& cov, const std::vector<int>& n_ug,
                          const std::vector<int>& n_u, const GdmrHyper& hyper);

void gdmr_grad_log_posterior(const std::vector<double>& lambda, const std::vector<double>& gamma,
                             const CovariateMatrix& cov, const std::vector<int>& n_ug,
                             const std::vector<int>& n_u, const GdmrHyper& hyper,
                             std::vector<double>& dlambda, std::vector<double>& dgamma);

struct RegressionOptOptions {
    int max_iter = 100;
    double tol = 1e-6;
};

OptimizerTrace gdmr_optimize_regression(GdmrState& state, const Corpus& corpus,
                                        const CovariateMatrix& cov, const GdmrHyper& hyper,
                                        const RegressionOptOptions& opt = {});

// Collapsed joint log-likelihood log p(w, z | alpha, beta); used for traces.
double gdmr_joint_loglik(const GdmrState& state, const Corpus& corpus,
                         const std::vector<double>& alpha, const GdmrHyper& hyper);

std::pair<GdmrState, FitReport> gdmr_fit(const Corpus& corpus, const CovariateMatrix& cov,
                                         const GdmrHyper& hyper);

void save_gdmr(const GdmrState& state, const GdmrHyper& hyper, const FitReport& report,
               uint64_t vocab_hash, const std::filesystem::path& dir);

struct GdmrModel {
    GdmrState state;
    GdmrHyper hyper;
    uint64_t vocab_hash = 0;
};
GdmrModel load_gdmr(const std::filesystem::path& dir);

}  // namespace cohort
