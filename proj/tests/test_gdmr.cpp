#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cohort/digamma.hpp"
#include "cohort/gdmr.hpp"
#include "cohort/lbfgs.hpp"
#include "cohort/synth.hpp"

using namespace cohort;

namespace {

CovariateMatrix random_cov(int U, int D, uint64_t seed) {
    CovariateMatrix cov;
    cov.dims = D;
    cov.data.resize(static_cast<size_t>(U) * D);
    for (int d = 0; d < D; ++d) cov.column_names.push_back("x" + std::to_string(d));
    Rng rng(seed);
    std::normal_distribution<double> norm(0.0, 0.5);
    for (auto& v : cov.data) v = norm(rng);
    return cov;
}

}  // namespace

TEST_CASE("digamma matches reference values") {
    CHECK(digamma(1.0) == doctest::Approx(-0.5772156649015329).epsilon(1e-10));
    CHECK(digamma(0.5) == doctest::Approx(-1.9635100260214235).epsilon(1e-10));
    CHECK(digamma(10.0) == doctest::Approx(2.251752589066721).epsilon(1e-10));
    // recurrence psi(x+1) = psi(x) + 1/x
    for (double x : {0.1, 0.7, 2.3, 5.9}) {
        CHECK(digamma(x + 1) == doctest::Approx(digamma(x) + 1.0 / x).epsilon(1e-10));
    }
}

TEST_CASE("lbfgs minimizes Rosenbrock") {
    auto fg = [](const std::vector<double>& x, std::vector<double>& g) {
        double a = 1.0 - x[0], b = x[1] - x[0] * x[0];
        g[0] = -2 * a - 400 * x[0] * b;
        g[1] = 200 * b;
        return a * a + 100 * b * b;
    };
    auto res = lbfgs_minimize({-1.2, 1.0}, fg);
    CHECK(res.converged);
    CHECK(res.x[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(res.x[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("alpha formula: exponential link plus group offset, clamped exponent") {
    std::vector<double> lambda = {1.0, -2.0, 0.5, 0.0};  // G=2, D=2
    std::vector<double> gamma = {0.3, 0.7};
    double x[2] = {1.0, 1.0};
    auto alpha = gdmr_alpha(x, lambda, gamma, 2, 2);
    CHECK(alpha[0] == doctest::Approx(std::exp(-1.0) + 0.3).epsilon(1e-12));
    CHECK(alpha[1] == doctest::Approx(std::exp(0.5) + 0.7).epsilon(1e-12));

    // clamp: huge dot product stays finite
    std::vector<double> big_lambda = {100.0, 100.0, -100.0, -100.0};
    auto clamped = gdmr_alpha(x, big_lambda, gamma, 2, 2);
    CHECK(clamped[0] == doctest::Approx(std::exp(30.0) + 0.3));
    CHECK(clamped[1] == doctest::Approx(std::exp(-30.0) + 0.7));
    for (double a : clamped) CHECK(std::isfinite(a));
}

TEST_CASE("analytic gradient matches central finite differences") {
    const int U = 6, G = 3, D = 4;
    GdmrHyper hyper;
    hyper.groups = G;
    auto cov = random_cov(U, D, 21);
    Rng rng(22);
    std::vector<int> n_ug(U * G), n_u(U, 0);
    for (int u = 0; u < U; ++u)
        for (int g = 0; g < G; ++g) {
            n_ug[u * G + g] = static_cast<int>(rng() % 7);
            n_u[u] += n_ug[u * G + g];
        }
    std::vector<double> lambda(G * D), gamma(G);
    std::normal_distribution<double> norm(0.0, 0.4);
    for (auto& v : lambda) v = norm(rng);
    for (auto& v : gamma) v = 0.5 + std::abs(norm(rng));

    std::vector<double> dl, dg;
    gdmr_grad_log_posterior(lambda, gamma, cov, n_ug, n_u, hyper, dl, dg);

    const double h = 1e-5;
    for (size_t i = 0; i < lambda.size(); ++i) {
        auto lp = lambda, lm = lambda;
        lp[i] += h;
        lm[i] -= h;
        double fd = (gdmr_log_posterior(lp, gamma, cov, n_ug, n_u, hyper) -
                     gdmr_log_posterior(lm, gamma, cov, n_ug, n_u, hyper)) /
                    (2 * h);
        CHECK(dl[i] == doctest::Approx(fd).epsilon(1e-5));
    }
    for (size_t i = 0; i < gamma.size(); ++i) {
        auto gp = gamma, gm = gamma;
        gp[i] += h;
        gm[i] -= h;
        double fd = (gdmr_log_posterior(lambda, gp, cov, n_ug, n_u, hyper) -
                     gdmr_log_posterior(lambda, gm, cov, n_ug, n_u, hyper)) /
                    (2 * h);
        CHECK(dg[i] == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("warm start and Gibbs sweeps keep count tables consistent") {
    SynthGdmrConfig cfg;
    cfg.dims = {25, 40, 3, 4};
    cfg.seed = 31;
    auto synth = synth_gdmr(cfg);
    GdmrHyper hyper;
    hyper.groups = 3;
    Rng rng(32);
    auto state = gdmr_warm_start(synth.corpus, hyper, rng);
    CHECK(state.counts_consistent(synth.corpus));

    std::vector<double> alpha(static_cast<size_t>(state.U) * state.G, hyper.warm_alpha());
    for (int s = 0; s < 5; ++s) gdmr_gibbs_sweep(state, synth.corpus, alpha, hyper, rng);
    CHECK(state.counts_consistent(synth.corpus));
    for (int u = 0; u < state.U; ++u)
        for (size_t i = 0; i < state.z[u].size(); ++i) {
            CHECK(state.z[u][i] >= 0);
            CHECK(state.z[u][i] < state.G);
        }
}

TEST_CASE("regression optimization increases the log-posterior") {
    SynthGdmrConfig cfg;
    cfg.dims = {40, 30, 3, 5};
    cfg.seed = 41;
    auto synth = synth_gdmr(cfg);
    GdmrHyper hyper;
    hyper.groups = 3;
    Rng rng(42);
    auto state = gdmr_warm_start(synth.corpus, hyper, rng);
    std::vector<double> alpha(static_cast<size_t>(state.U) * state.G, hyper.warm_alpha());
    for (int s = 0; s < 20; ++s) gdmr_gibbs_sweep(state, synth.corpus, alpha, hyper, rng);

    state.D = synth.covariates.dims;
    state.lambda.assign(static_cast<size_t>(state.G) * state.D, 0.0);
    state.gamma.assign(state.G, 1.0);
    auto trace = gdmr_optimize_regression(state, synth.corpus, synth.covariates, hyper);
    CHECK(trace.objective_after >= trace.objective_before - 1e-9);
    for (double g : state.gamma) CHECK(g > 0.0);
}

TEST_CASE("freeze flags pin the corresponding parameters") {
    SynthGdmrConfig cfg;
    cfg.dims = {30, 25, 3, 4};
    cfg.seed = 51;
    auto synth = synth_gdmr(cfg);

    GdmrHyper lda;
    lda.groups = 3;
    lda.iters_total = 30;
    lda.iters_warm = 20;
    lda.opt_period = 5;
    lda.seed = 52;
    lda.freeze_lambda = true;
    auto [lda_state, lda_rep] = gdmr_fit(synth.corpus, synth.covariates, lda);
    for (double v : lda_state.lambda) CHECK(v == 0.0);
    // symmetric gamma: all groups share one offset
    for (int g = 1; g < 3; ++g) CHECK(lda_state.gamma[g] == doctest::Approx(lda_state.gamma[0]));

    GdmrHyper dmr = lda;
    dmr.freeze_lambda = false;
    dmr.freeze_gamma = true;
    auto [dmr_state, dmr_rep] = gdmr_fit(synth.corpus, synth.covariates, dmr);
    bool lambda_moved = false;
    for (double v : dmr_state.lambda)
        if (v != 0.0) lambda_moved = true;
    CHECK(lambda_moved);
    for (int g = 1; g < 3; ++g) CHECK(dmr_state.gamma[g] == doctest::Approx(dmr_state.gamma[0]));
}

TEST_CASE("fit produces normalized phi and theta and a finite trace") {
    SynthGdmrConfig cfg;
    cfg.dims = {30, 25, 3, 4};
    cfg.seed = 61;
    auto synth = synth_gdmr(cfg);
    GdmrHyper hyper;
    hyper.groups = 3;
    hyper.iters_total = 40;
    hyper.iters_warm = 25;
    hyper.opt_period = 5;
    hyper.seed = 62;
    auto [state, report] = gdmr_fit(synth.corpus, synth.covariates, hyper);

    for (int g = 0; g < state.G; ++g) {
        double sum = 0.0;
        for (int w = 0; w < state.W; ++w) sum += state.phi_hat[g * state.W + w];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    for (int u = 0; u < state.U; ++u) {
        double sum = 0.0;
        for (int g = 0; g < state.G; ++g) sum += state.theta_hat[u * state.G + g];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(static_cast<int>(report.loglik_trace.size()) == hyper.iters_total);
    for (double v : report.loglik_trace) CHECK(std::isfinite(v));
    // optimizer runs exactly (iters_total - iters_warm) / opt_period times
    CHECK(report.optimizer.size() == 3);
}

TEST_CASE("fit is seed-deterministic") {
    SynthGdmrConfig cfg;
    cfg.dims = {20, 20, 3, 4};
    cfg.seed = 71;
    auto synth = synth_gdmr(cfg);
    GdmrHyper hyper;
    hyper.groups = 3;
    hyper.iters_total = 20;
    hyper.iters_warm = 12;
    hyper.opt_period = 4;
    hyper.seed = 72;
    auto [a, ra] = gdmr_fit(synth.corpus, synth.covariates, hyper);
    auto [b, rb] = gdmr_fit(synth.corpus, synth.covariates, hyper);
    CHECK(a.phi_hat == b.phi_hat);
    CHECK(a.theta_hat == b.theta_hat);
    CHECK(a.lambda == b.lambda);
    CHECK(a.gamma == b.gamma);
}

TEST_CASE("model archive round-trips exactly") {
    SynthGdmrConfig cfg;
    cfg.dims = {15, 20, 3, 4};
    cfg.seed = 81;
    auto synth = synth_gdmr(cfg);
    GdmrHyper hyper;
    hyper.groups = 3;
    hyper.iters_total = 15;
    hyper.iters_warm = 10;
    hyper.opt_period = 5;
    hyper.seed = 82;
    auto [state, report] = gdmr_fit(synth.corpus, synth.covariates, hyper);

    auto dir = std::filesystem::temp_directory_path() / "cohort_test_gdmr_rt";
    std::filesystem::create_directories(dir);
    save_gdmr(state, hyper, report, 12345u, dir);
    auto loaded = load_gdmr(dir);
    CHECK(loaded.vocab_hash == 12345u);
    CHECK(loaded.hyper.groups == hyper.groups);
    CHECK(loaded.state.lambda == state.lambda);
    CHECK(loaded.state.gamma == state.gamma);
    CHECK(loaded.state.phi_hat == state.phi_hat);
    CHECK(loaded.state.theta_hat == state.theta_hat);
    std::filesystem::remove_all(dir);
}

TEST_CASE("hyperparameter validation rejects bad settings") {
    GdmrHyper h;
    h.groups = 1;
    CHECK_THROWS(h.validate());
    h = GdmrHyper{};
    h.beta = 0.0;
    CHECK_THROWS(h.validate());
    h = GdmrHyper{};
    h.iters_warm = h.iters_total + 1;
    CHECK_THROWS(h.validate());
}
