#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cohort/common.hpp"
#include "cohort/covariates.hpp"
#include "cohort/types.hpp"

namespace cohort {

enum class GstmInit { Spectral, Lda, Random };
enum class ContentPenalty { Laplace, Ridge };

struct GstmHyper {
    int groups = 20;
    int max_em_iters = 75;
    GstmInit init = GstmInit::Spectral;
    double sigma = 1.0;        // prior std for prevalence lambda
    double elbo_tol = 1e-5;    // relative ELBO change threshold
    double frex_omega = 0.7;
    double tau_min = 1e-4;
    ContentPenalty content_penalty = ContentPenalty::Laplace;
    bool freeze_prevalence = false;  // STM baseline: lambda and gamma pinned at 0
    uint64_t seed = 0;

    void validate() const;
};

// Prevalence lives in the (G-1)-dimensional logistic-normal parameterization
// with group G as reference (eta_G = 0).
struct GstmState {
    int G = 0, W = 0, U = 0, D = 0;
    std::vector<double> m;         // W baseline log-frequencies
    std::vector<double> kappa;     // G x W deviations
    std::vector<double> tau;       // G x W Laplace scales
    std::vector<double> lambda;    // (G-1) x D prevalence coefficients
    std::vector<double> gamma;     // G-1 intercepts
    std::vector<double> Sigma;     // (G-1) x (G-1)
    std::vector<double> beta;      // G x W derived word distributions
    std::vector<double> eta_mean;  // U x (G-1)
    std::vector<double> eta_var;   // U x (G-1) diagonal covariances
    std::vector<double> c_ug;      // U x G expected topic counts
    std::vector<uint8_t> e_step_fallback;  // users whose mode finding diverged

    int K() const { return G - 1; }
    double beta_at(int g, int w) const { return beta[static_cast<size_t>(g) * W + w]; }
    void recompute_beta();

    // E[theta_u] via softmax of the variational mean (reference group appended).
    std::vector<double> theta_point(int u) const;
};

struct EStepResult {
    std::vector<double> per_user_elbo;   // likelihood-part lower bound per user
    double total_elbo = 0.0;
    std::vector<double> expected_counts; // G x W
};

struct GstmFitReport {
    std::vector<double> elbo_trace;  // full penalized objective per EM cycle
    int em_iterations = 0;
    bool converged = false;
    int approximation_violations = 0;  // ELBO decreases beyond the logged tolerance
    bool spectral_fallback = false;
    double seconds = 0.0;
};

GstmState gstm_init(const Corpus& corpus, const CovariateMatrix& cov, const GstmHyper& hyper,
                    bool* spectral_fell_back = nullptr);

EStepResult gstm_e_step(GstmState& state, const Corpus& corpus, const CovariateMatrix& cov,
                        int threads = 1);

void gstm_m_step_prevalence(GstmState& state, const CovariateMatrix& cov, const GstmHyper& hyper);

void gstm_m_step_content(GstmState& state, const std::vector<double>& expected_counts,
                         const GstmHyper& hyper);

// Penalized objective: sum of per-user ELBOs + content/prevalence prior terms.
double gstm_objective(const GstmState& state, const EStepResult& e, const GstmHyper& hyper);

std::pair<GstmState, GstmFitReport> gstm_fit(const Corpus& corpus, const CovariateMatrix& cov,
                                             const GstmHyper& hyper, int threads = 1);

struct FrexEntry {
    int word = 0;
    double frequency = 0.0;   // ECDF rank of beta_gw within the topic
    double exclusivity = 0.0; // ECDF rank of beta_gw / sum_g' beta_g'w
    double frex = 0.0;
};
// Per group, sorted descending by FREX.
std::vector<std::vector<FrexEntry>> frex(const GstmState& state, const GstmHyper& hyper);

// Per-user ELBO on held-out users with covariate-predicted prevalence.
std::vector<double> gstm_heldout_elbo(const GstmState& model, const Corpus& heldout,
                                      const CovariateMatrix& heldout_cov, int threads = 1);

void save_gstm(const GstmState& state, const GstmHyper& hyper, const GstmFitReport& report,
               uint64_t vocab_hash, const std::filesystem::path& dir);

struct GstmModel {
    GstmState state;
    GstmHyper hyper;
    uint64_t vocab_hash = 0;
};
GstmModel load_gstm(const std::filesystem::path& dir);

}  // namespace cohort
