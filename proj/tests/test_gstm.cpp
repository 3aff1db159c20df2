#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cohort/gstm.hpp"
#include "cohort/synth.hpp"

using namespace cohort;

namespace {

SynthOutput small_fixture(uint64_t seed, int users = 40, int vocab = 30, int groups = 3) {
    SynthGstmConfig cfg;
    cfg.dims = {users, vocab, groups, 4};
    cfg.seed = seed;
    return synth_gstm(cfg);
}

GstmHyper small_hyper(int groups = 3, int iters = 15) {
    GstmHyper h;
    h.groups = groups;
    h.max_em_iters = iters;
    h.init = GstmInit::Lda;  // cheap and deterministic for unit tests
    return h;
}

// Exact log p(w_u) for a G=2 model by 1-D quadrature over the logistic-normal
// prevalence coordinate.
double exact_log_marginal_g2(const GstmState& state, const std::vector<int>& tokens,
                             double mu, double var) {
    const int W = state.W;
    const double lo = mu - 12.0 * std::sqrt(var) - 1.0, hi = mu + 12.0 * std::sqrt(var) + 1.0;
    const int N = 20000;
    const double h = (hi - lo) / N;
    double best = -1e300;
    std::vector<double> logf(N + 1);
    for (int i = 0; i <= N; ++i) {
        double eta = lo + i * h;
        double log_prior =
            -0.5 * std::log(2.0 * M_PI * var) - (eta - mu) * (eta - mu) / (2.0 * var);
        double theta0 = 1.0 / (1.0 + std::exp(-eta));  // group 0 vs reference group 1
        double log_lik = 0.0;
        for (int w : tokens)
            log_lik += std::log(theta0 * state.beta_at(0, w) + (1.0 - theta0) * state.beta_at(1, w));
        logf[i] = log_prior + log_lik;
        best = std::max(best, logf[i]);
    }
    double sum = 0.0;
    for (int i = 0; i <= N; ++i) {
        double wgt = (i == 0 || i == N) ? 0.5 : 1.0;  // trapezoid
        sum += wgt * std::exp(logf[i] - best);
    }
    return best + std::log(sum * h);
}

}  // namespace

TEST_CASE("hyperparameter validation") {
    GstmHyper h;
    h.groups = 1;
    CHECK_THROWS(h.validate());
    h = GstmHyper{};
    h.max_em_iters = 0;
    CHECK_THROWS(h.validate());
    h = GstmHyper{};
    h.sigma = -1.0;
    CHECK_THROWS(h.validate());
}

TEST_CASE("initialization produces normalized word distributions") {
    auto synth = small_fixture(1);
    for (auto init : {GstmInit::Spectral, GstmInit::Lda, GstmInit::Random}) {
        GstmHyper h = small_hyper();
        h.init = init;
        h.seed = 2;
        auto state = gstm_init(synth.corpus, synth.covariates, h);
        REQUIRE(state.G == 3);
        REQUIRE(state.W == 30);
        for (int g = 0; g < state.G; ++g) {
            double sum = 0.0;
            for (int w = 0; w < state.W; ++w) {
                CHECK(state.beta_at(g, w) > 0.0);
                sum += state.beta_at(g, w);
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
}

TEST_CASE("e-step expected counts total the corpus tokens") {
    auto synth = small_fixture(3);
    GstmHyper h = small_hyper();
    h.seed = 4;
    auto state = gstm_init(synth.corpus, synth.covariates, h);
    auto e = gstm_e_step(state, synth.corpus, synth.covariates);
    CHECK(std::isfinite(e.total_elbo));
    double total = 0.0;
    for (double c : e.expected_counts) {
        CHECK(c >= -1e-12);
        total += c;
    }
    CHECK(total == doctest::Approx(static_cast<double>(synth.corpus.total_tokens())).epsilon(1e-6));
}

TEST_CASE("EM objective is non-decreasing within logged tolerance") {
    auto synth = small_fixture(5);
    GstmHyper h = small_hyper(3, 25);
    h.seed = 6;
    auto [state, report] = gstm_fit(synth.corpus, synth.covariates, h);
    REQUIRE(report.elbo_trace.size() >= 2);
    for (size_t i = 1; i < report.elbo_trace.size(); ++i) {
        double prev = report.elbo_trace[i - 1];
        double rel = (report.elbo_trace[i] - prev) / (std::abs(prev) + 1.0);
        CHECK(rel >= -1e-6);
    }
    CHECK(report.approximation_violations == 0);
}

TEST_CASE("per-user ELBO lower-bounds the exact log marginal (G=2 quadrature)") {
    SynthGstmConfig cfg;
    cfg.dims = {25, 12, 2, 3};
    cfg.doc_len_mean = 8.0;
    cfg.seed = 7;
    auto synth = synth_gstm(cfg);
    GstmHyper h = small_hyper(2, 12);
    h.seed = 8;
    auto [state, report] = gstm_fit(synth.corpus, synth.covariates, h);

    auto elbo = gstm_heldout_elbo(state, synth.corpus, synth.covariates);
    const int D = synth.covariates.dims;
    REQUIRE(elbo.size() == static_cast<size_t>(synth.corpus.num_users()));
    for (int u = 0; u < synth.corpus.num_users(); ++u) {
        if (synth.corpus.tokens[u].empty()) continue;
        double mu = state.gamma[0];
        for (int d = 0; d < D; ++d) mu += state.lambda[d] * synth.covariates.row(u)[d];
        double exact = exact_log_marginal_g2(state, synth.corpus.tokens[u], mu, state.Sigma[0]);
        CHECK(elbo[u] <= exact + 1e-6);
    }
}

TEST_CASE("Laplace penalty yields strictly sparser kappa than ridge") {
    auto synth = small_fixture(9, 60, 40, 3);
    GstmHyper laplace = small_hyper(3, 20);
    laplace.seed = 10;
    auto [ls, lr] = gstm_fit(synth.corpus, synth.covariates, laplace);

    GstmHyper ridge = laplace;
    ridge.content_penalty = ContentPenalty::Ridge;
    auto [rs, rr] = gstm_fit(synth.corpus, synth.covariates, ridge);

    auto zero_frac = [](const std::vector<double>& kappa) {
        size_t zeros = 0;
        for (double k : kappa)
            if (std::abs(k) < 1e-8) ++zeros;
        return static_cast<double>(zeros) / kappa.size();
    };
    CHECK(zero_frac(ls.kappa) > zero_frac(rs.kappa));
}

TEST_CASE("freeze_prevalence pins lambda and gamma at zero") {
    auto synth = small_fixture(11);
    GstmHyper h = small_hyper(3, 10);
    h.seed = 12;
    h.freeze_prevalence = true;
    auto [state, report] = gstm_fit(synth.corpus, synth.covariates, h);
    for (double v : state.lambda) CHECK(v == 0.0);
    for (double v : state.gamma) CHECK(v == 0.0);
}

TEST_CASE("theta_point is a probability vector") {
    auto synth = small_fixture(13);
    GstmHyper h = small_hyper(3, 8);
    h.seed = 14;
    auto [state, report] = gstm_fit(synth.corpus, synth.covariates, h);
    for (int u = 0; u < state.U; ++u) {
        auto t = state.theta_point(u);
        REQUIRE(t.size() == 3);
        double sum = 0.0;
        for (double v : t) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("FREX balances frequency and exclusivity") {
    // Construct a state by hand: word 0 frequent in group 0 but shared, word 1
    // exclusive to group 0 and reasonably frequent -> word 1 wins on FREX.
    GstmState state;
    state.G = 2;
    state.W = 4;
    state.beta = {0.40, 0.35, 0.15, 0.10,   // group 0
                  0.40, 0.01, 0.30, 0.29};  // group 1
    GstmHyper h;
    h.groups = 2;
    auto table = frex(state, h);
    REQUIRE(table.size() == 2);
    REQUIRE(table[0].size() == 4);
    CHECK(table[0][0].word == 1);  // exclusive + frequent tops group 0
    for (const auto& entry : table[0]) {
        CHECK(entry.frex >= 0.0);
        CHECK(entry.frex <= 1.0);
    }
    // descending order
    for (size_t i = 1; i < table[0].size(); ++i)
        CHECK(table[0][i - 1].frex >= table[0][i].frex);
}

TEST_CASE("fit is seed-deterministic") {
    auto synth = small_fixture(15, 25, 20, 3);
    GstmHyper h = small_hyper(3, 8);
    h.seed = 16;
    auto [a, ra] = gstm_fit(synth.corpus, synth.covariates, h);
    auto [b, rb] = gstm_fit(synth.corpus, synth.covariates, h);
    CHECK(a.beta == b.beta);
    CHECK(a.kappa == b.kappa);
    CHECK(a.lambda == b.lambda);
    CHECK(a.eta_mean == b.eta_mean);
}

TEST_CASE("threaded e-step matches single-threaded") {
    auto synth = small_fixture(17, 50, 30, 3);
    GstmHyper h = small_hyper(3, 6);
    h.seed = 18;
    auto [a, ra] = gstm_fit(synth.corpus, synth.covariates, h, 1);
    auto [b, rb] = gstm_fit(synth.corpus, synth.covariates, h, 4);
    for (size_t i = 0; i < a.beta.size(); ++i)
        CHECK(a.beta[i] == doctest::Approx(b.beta[i]).epsilon(1e-12));
}

TEST_CASE("model archive round-trips") {
    auto synth = small_fixture(19, 20, 15, 3);
    GstmHyper h = small_hyper(3, 6);
    h.seed = 20;
    auto [state, report] = gstm_fit(synth.corpus, synth.covariates, h);
    auto dir = std::filesystem::temp_directory_path() / "cohort_test_gstm_rt";
    std::filesystem::create_directories(dir);
    save_gstm(state, h, report, 999u, dir);
    auto loaded = load_gstm(dir);
    CHECK(loaded.vocab_hash == 999u);
    CHECK(loaded.state.beta == state.beta);
    CHECK(loaded.state.kappa == state.kappa);
    CHECK(loaded.state.tau == state.tau);
    CHECK(loaded.state.m == state.m);
    CHECK(loaded.state.lambda == state.lambda);
    CHECK(loaded.state.gamma == state.gamma);
    CHECK(loaded.state.Sigma == state.Sigma);
    std::filesystem::remove_all(dir);
}
