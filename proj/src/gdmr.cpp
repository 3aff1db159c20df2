#include "cohort/gdmr.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "cohort/digamma.hpp"
#include "cohort/lbfgs.hpp"

namespace cohort {

using nlohmann::json;

void GdmrHyper::validate() const {
    if (groups < 2) throw std::invalid_argument("gdmr: groups must be >= 2");
    if (beta <= 0.0) throw std::invalid_argument("gdmr: beta must be > 0");
    if (sigma <= 0.0) throw std::invalid_argument("gdmr: sigma must be > 0");
    if (iters_warm <= 0 || iters_warm >= iters_total)
        throw std::invalid_argument("gdmr: require 0 < iters_warm < iters_total");
    if (opt_period < 1) throw std::invalid_argument("gdmr: opt_period must be >= 1");
}

bool GdmrState::counts_consistent(const Corpus& corpus) const {
    GdmrState fresh;
    fresh.G = G;
    fresh.W = W;
    fresh.U = U;
    fresh.z = z;
    fresh.recount(corpus);
    return fresh.n_gw == n_gw && fresh.n_ug == n_ug && fresh.n_g == n_g;
}

void GdmrState::recount(const Corpus& corpus) {
    n_gw.assign(static_cast<size_t>(G) * W, 0);
    n_ug.assign(static_cast<size_t>(U) * G, 0);
    n_g.assign(G, 0);
    for (int u = 0; u < U; ++u) {
        for (size_t n = 0; n < corpus.tokens[u].size(); ++n) {
            int g = z[u][n], w = corpus.tokens[u][n];
            ngw(g, w)++;
            nug(u, g)++;
            n_g[g]++;
        }
    }
}

std::vector<double> gdmr_alpha(const double* x, const std::vector<double>& lambda,
                               const std::vector<double>& gamma, int G, int D) {
    std::vector<double> alpha(G);
    for (int g = 0; g < G; ++g) {
        double t = 0.0;
        for (int d = 0; d < D; ++d) t += x[d] * lambda[static_cast<size_t>(g) * D + d];
        if (!std::isfinite(t)) throw std::runtime_error("gdmr_alpha: non-finite covariate product");
        t = std::clamp(t, -kExpClamp, kExpClamp);
        alpha[g] = std::exp(t) + gamma[g];
    }
    return alpha;
}

std::vector<double> gdmr_alpha_matrix(const CovariateMatrix& cov,
                                      const std::vector<double>& lambda,
                                      const std::vector<double>& gamma, int G) {
    const int U = cov.rows(), D = cov.dims;
    std::vector<double> out(static_cast<size_t>(U) * G);
    for (int u = 0; u < U; ++u) {
        auto a = gdmr_alpha(cov.row(u), lambda, gamma, G, D);
        std::copy(a.begin(), a.end(), out.begin() + static_cast<size_t>(u) * G);
    }
    return out;
}

GdmrState gdmr_warm_start(const Corpus& corpus, const GdmrHyper& hyper, Rng& rng) {
    hyper.validate();
    if (corpus.num_users() == 0) throw std::invalid_argument("gdmr: empty corpus");

    GdmrState state;
    state.G = hyper.groups;
    state.W = corpus.vocab_size();
    state.U = corpus.num_users();
    state.z.resize(state.U);
    std::uniform_int_distribution<int> pick(0, state.G - 1);
    for (int u = 0; u < state.U; ++u) {
        state.z[u].resize(corpus.tokens[u].size());
        for (auto& g : state.z[u]) g = pick(rng);
    }
    state.recount(corpus);

    // Plain LDA sweeps with symmetric document prior 50/G.
    std::vector<double> alpha(static_cast<size_t>(state.U) * state.G, hyper.warm_alpha());
    for (int it = 0; it < hyper.iters_warm; ++it)
        gdmr_gibbs_sweep(state, corpus, alpha, hyper, rng);

    state.lambda.assign(static_cast<size_t>(state.G), 0.0);  // resized to G*D by fit
    state.gamma.assign(state.G, hyper.warm_alpha());
    return state;
}

void gdmr_gibbs_sweep(GdmrState& state, const Corpus& corpus,
                      const std::vector<double>& alpha, const GdmrHyper& hyper, Rng& rng) {
    const int G = state.G, W = state.W;
    const double beta = hyper.beta, wbeta = W * beta;
    std::vector<double> weights(G);
    for (int u = 0; u < state.U; ++u) {
        const double* alpha_u = alpha.data() + static_cast<size_t>(u) * G;
        const auto& doc = corpus.tokens[u];
        for (size_t n = 0; n < doc.size(); ++n) {
            const int w = doc[n];
            const int old_g = state.z[u][n];
            state.ngw(old_g, w)--;
            state.nug(u, old_g)--;
            state.n_g[old_g]--;
            for (int g = 0; g < G; ++g) {
                weights[g] = (state.ngw(g, w) + beta) * (state.nug(u, g) + alpha_u[g]) /
                             (state.n_g[g] + wbeta);
            }
            int new_g = G == 1 ? 0 : sample_discrete(weights, rng);
            state.z[u][n] = new_g;
            state.ngw(new_g, w)++;
            state.nug(u, new_g)++;
            state.n_g[new_g]++;
        }
    }
}

double gdmr_log_posterior(const std::vector<double>& lambda, const std::vector<double>& gamma,
                          const CovariateMatrix& cov, const std::vector<int>& n_ug,
                          const std::vector<int>& n_u, const GdmrHyper& hyper) {
    const int U = cov.rows(), D = cov.dims, G = hyper.groups;
    for (double g : gamma)
        if (!(g > 0.0)) throw std::invalid_argument("gdmr_log_posterior: gamma must be > 0");
    double l = 0.0;
    for (int u = 0; u < U; ++u) {
        auto alpha = gdmr_alpha(cov.row(u), lambda, gamma, G, D);
        double a_sum = 0.0;
        for (double a : alpha) a_sum += a;
        l += std::lgamma(a_sum) - std::lgamma(a_sum + n_u[u]);
        for (int g = 0; g < G; ++g)
            l += std::lgamma(alpha[g] + n_ug[static_cast<size_t>(u) * G + g]) - std::lgamma(alpha[g]);
    }
    const double inv2s2 = 1.0 / (2.0 * hyper.sigma * hyper.sigma);
    for (size_t i = 0; i < lambda.size(); ++i) {
        double c = lambda[i] - hyper.mu;
        l -= c * c * inv2s2;
    }
    for (double g : gamma) l -= g;
    return l;
}

void gdmr_grad_log_posterior(const std::vector<double>& lambda, const std::vector<double>& gamma,
                             const CovariateMatrix& cov, const std::vector<int>& n_ug,
                             const std::vector<int>& n_u, const GdmrHyper& hyper,
                             std::vector<double>& dlambda, std::vector<double>& dgamma) {
    const int U = cov.rows(), D = cov.dims, G = hyper.groups;
    dlambda.assign(static_cast<size_t>(G) * D, 0.0);
    dgamma.assign(G, 0.0);
    for (int u = 0; u < U; ++u) {
        const double* x = cov.row(u);
        std::vector<double> expo(G), alpha(G);
        double a_sum = 0.0;
        std::vector<bool> clamped(G, false);
        for (int g = 0; g < G; ++g) {
            double t = 0.0;
            for (int d = 0; d < D; ++d) t += x[d] * lambda[static_cast<size_t>(g) * D + d];
            clamped[g] = std::abs(t) > kExpClamp;
            t = std::clamp(t, -kExpClamp, kExpClamp);
            expo[g] = std::exp(t);
            alpha[g] = expo[g] + gamma[g];
            a_sum += alpha[g];
        }
        double common = digamma(a_sum) - digamma(a_sum + n_u[u]);
        for (int g = 0; g < G; ++g) {
            double bracket = common +
                             digamma(alpha[g] + n_ug[static_cast<size_t>(u) * G + g]) -
                             digamma(alpha[g]);
            dgamma[g] += bracket;
            if (!clamped[g]) {
                double coef = expo[g] * bracket;
                for (int d = 0; d < D; ++d)
                    dlambda[static_cast<size_t>(g) * D + d] += x[d] * coef;
            }
        }
    }
    const double inv_s2 = 1.0 / (hyper.sigma * hyper.sigma);
    for (size_t i = 0; i < dlambda.size(); ++i) dlambda[i] -= (lambda[i] - hyper.mu) * inv_s2;
    for (int g = 0; g < G; ++g) dgamma[g] -= 1.0;  // derivative of -sum(gamma), per coordinate
}

OptimizerTrace gdmr_optimize_regression(GdmrState& state, const Corpus& corpus,
                                        const CovariateMatrix& cov, const GdmrHyper& hyper,
                                        const RegressionOptOptions& opt) {
    const int G = state.G, D = cov.dims;
    std::vector<int> n_u(state.U);
    for (int u = 0; u < state.U; ++u) n_u[u] = corpus.doc_len(u);

    const bool opt_lambda = !hyper.freeze_lambda;
    const bool opt_gamma = !hyper.freeze_gamma;
    // With lambda frozen (plain LDA) gamma must stay symmetric, so a single
    // shared offset is optimized instead of G independent ones.
    const bool shared_gamma = hyper.freeze_lambda;

    // Variables: lambda (when free) followed by rho = log(gamma) (when free).
    const size_t nl = opt_lambda ? static_cast<size_t>(G) * D : 0;
    const size_t ng = opt_gamma ? (shared_gamma ? 1 : static_cast<size_t>(G)) : 0;
    std::vector<double> x0(nl + ng);
    if (opt_lambda) std::copy(state.lambda.begin(), state.lambda.end(), x0.begin());
    for (size_t g = 0; g < ng; ++g) x0[nl + g] = std::log(state.gamma[g]);

    std::vector<double> lam = state.lambda, gam = state.gamma;
    auto unpack = [&](const std::vector<double>& x) {
        if (opt_lambda) std::copy(x.begin(), x.begin() + nl, lam.begin());
        if (opt_gamma)
            for (int g = 0; g < G; ++g) {
                // clamp rho so gamma never underflows to exactly zero
                double rho = std::clamp(x[nl + (shared_gamma ? 0 : g)], -kExpClamp, kExpClamp);
                gam[g] = std::exp(rho);
            }
    };

    std::vector<double> dl, dg;
    auto fg = [&](const std::vector<double>& x, std::vector<double>& grad) {
        unpack(x);
        double f = gdmr_log_posterior(lam, gam, cov, state.n_ug, n_u, hyper);
        gdmr_grad_log_posterior(lam, gam, cov, state.n_ug, n_u, hyper, dl, dg);
        grad.assign(x.size(), 0.0);
        if (opt_lambda)
            for (size_t i = 0; i < nl; ++i) grad[i] = -dl[i];
        if (opt_gamma) {
            for (int g = 0; g < G; ++g)
                grad[nl + (shared_gamma ? 0 : g)] -= dg[g] * gam[g];  // chain rule through exp
        }
        return -f;
    };

    OptimizerTrace trace;
    trace.objective_before =
        gdmr_log_posterior(state.lambda, state.gamma, cov, state.n_ug, n_u, hyper);
    if (x0.empty()) {  // both frozen: nothing to do
        trace.objective_after = trace.objective_before;
        return trace;
    }

    LbfgsOptions lopts;
    lopts.max_iter = opt.max_iter;
    lopts.grad_tol = opt.tol;
    auto res = lbfgs_minimize(std::move(x0), fg, lopts);
    unpack(res.x);
    double after = gdmr_log_posterior(lam, gam, cov, state.n_ug, n_u, hyper);
    if (after >= trace.objective_before) {
        state.lambda = lam;
        state.gamma = gam;
        trace.objective_after = after;
    } else {
        trace.objective_after = trace.objective_before;  // keep entry iterate
    }
    trace.steps = res.iterations;
    trace.line_search_failed = res.line_search_failed;
    std::vector<double> gx(res.x.size());
    fg(res.x, gx);
    double gn = 0.0;
    for (double v : gx) gn += v * v;
    trace.grad_norm = std::sqrt(gn);
    return trace;
}

double gdmr_joint_loglik(const GdmrState& state, const Corpus& corpus,
                         const std::vector<double>& alpha, const GdmrHyper& hyper) {
    const int G = state.G, W = state.W;
    double l = 0.0;
    for (int u = 0; u < state.U; ++u) {
        const double* a = alpha.data() + static_cast<size_t>(u) * G;
        double a_sum = 0.0;
        for (int g = 0; g < G; ++g) a_sum += a[g];
        l += std::lgamma(a_sum) - std::lgamma(a_sum + corpus.doc_len(u));
        for (int g = 0; g < G; ++g)
            l += std::lgamma(a[g] + state.nug(u, g)) - std::lgamma(a[g]);
    }
    const double wb = W * hyper.beta;
    for (int g = 0; g < G; ++g) {
        l += std::lgamma(wb) - std::lgamma(wb + state.n_g[g]);
        for (int w = 0; w < W; ++w)
            if (state.ngw(g, w) > 0)
                l += std::lgamma(state.ngw(g, w) + hyper.beta) - std::lgamma(hyper.beta);
    }
    return l;
}

std::pair<GdmrState, FitReport> gdmr_fit(const Corpus& corpus, const CovariateMatrix& cov,
                                         const GdmrHyper& hyper) {
    hyper.validate();
    if (cov.rows() != corpus.num_users())
        throw std::invalid_argument("gdmr_fit: covariate rows != user count");

    using Clock = std::chrono::steady_clock;
    FitReport report;
    Rng rng(hyper.seed);

    auto t0 = Clock::now();
    GdmrState state = gdmr_warm_start(corpus, hyper, rng);
    state.D = cov.dims;
    state.lambda.assign(static_cast<size_t>(state.G) * state.D, 0.0);
    if (hyper.freeze_gamma) state.gamma.assign(state.G, 1e-6);
    report.warm_seconds = std::chrono::duration<double>(Clock::now() - t0).count();

    {
        // warm phase recorded as its end-of-phase value under the symmetric prior
        std::vector<double> warm_alpha(static_cast<size_t>(state.U) * state.G, hyper.warm_alpha());
        report.loglik_trace.reserve(hyper.iters_total);
        report.loglik_trace.assign(hyper.iters_warm,
                                   gdmr_joint_loglik(state, corpus, warm_alpha, hyper));
    }

    auto t1 = Clock::now();
    std::vector<double> alpha = gdmr_alpha_matrix(cov, state.lambda, state.gamma, state.G);
    const int stab_window = std::min(300, hyper.iters_total - hyper.iters_warm);
    std::vector<double> phi_acc(static_cast<size_t>(state.G) * state.W, 0.0);
    std::vector<double> theta_acc(static_cast<size_t>(state.U) * state.G, 0.0);
    int acc_count = 0;

    for (int it = hyper.iters_warm + 1; it <= hyper.iters_total; ++it) {
        gdmr_gibbs_sweep(state, corpus, alpha, hyper, rng);
        if ((it - hyper.iters_warm) % hyper.opt_period == 0) {
            report.optimizer.push_back(gdmr_optimize_regression(state, corpus, cov, hyper));
            alpha = gdmr_alpha_matrix(cov, state.lambda, state.gamma, state.G);
        }
        report.loglik_trace.push_back(gdmr_joint_loglik(state, corpus, alpha, hyper));

        if (it > hyper.iters_total - stab_window) {
            const double wb = state.W * hyper.beta;
            for (int g = 0; g < state.G; ++g)
                for (int w = 0; w < state.W; ++w)
                    phi_acc[static_cast<size_t>(g) * state.W + w] +=
                        (state.ngw(g, w) + hyper.beta) / (state.n_g[g] + wb);
            for (int u = 0; u < state.U; ++u) {
                const double* a = alpha.data() + static_cast<size_t>(u) * state.G;
                double a_sum = 0.0;
                for (int g = 0; g < state.G; ++g) a_sum += a[g];
                for (int g = 0; g < state.G; ++g)
                    theta_acc[static_cast<size_t>(u) * state.G + g] +=
                        (state.nug(u, g) + a[g]) / (corpus.doc_len(u) + a_sum);
            }
            acc_count++;
        }
    }
    report.main_seconds = std::chrono::duration<double>(Clock::now() - t1).count();

    state.phi_hat.resize(phi_acc.size());
    state.theta_hat.resize(theta_acc.size());
    for (size_t i = 0; i < phi_acc.size(); ++i) state.phi_hat[i] = phi_acc[i] / acc_count;
    for (size_t i = 0; i < theta_acc.size(); ++i) state.theta_hat[i] = theta_acc[i] / acc_count;
    return {std::move(state), std::move(report)};
}

namespace {

void write_f64(const std::filesystem::path& file, const std::vector<double>& v) {
    std::ofstream out(file, std::ios::binary);
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_f64(const std::filesystem::path& file, size_t n) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("missing " + file.string());
    std::vector<double> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error(file.string() + ": truncated");
    return v;
}

}  // namespace

void save_gdmr(const GdmrState& state, const GdmrHyper& hyper, const FitReport& report,
               uint64_t vocab_hash, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_f64(dir / "lambda.f64", state.lambda);
    write_f64(dir / "gamma.f64", state.gamma);
    write_f64(dir / "phi.f64", state.phi_hat);
    write_f64(dir / "theta.f64", state.theta_hat);
    json j;
    j["model"] = "gdmr";
    j["G"] = state.G;
    j["W"] = state.W;
    j["U"] = state.U;
    j["D"] = state.D;
    j["beta"] = hyper.beta;
    j["sigma"] = hyper.sigma;
    j["mu"] = hyper.mu;
    j["iters_total"] = hyper.iters_total;
    j["iters_warm"] = hyper.iters_warm;
    j["opt_period"] = hyper.opt_period;
    j["seed"] = hyper.seed;
    j["freeze_lambda"] = hyper.freeze_lambda;
    j["freeze_gamma"] = hyper.freeze_gamma;
    j["vocab_hash"] = vocab_hash;
    std::ofstream meta(dir / "meta.json");
    meta << j.dump(2) << '\n';

    std::ofstream trace(dir / "trace.csv");
    trace << "iteration,joint_loglik\n";
    for (size_t i = 0; i < report.loglik_trace.size(); ++i)
        trace << (i + 1) << ',' << report.loglik_trace[i] << '\n';
}

GdmrModel load_gdmr(const std::filesystem::path& dir) {
    std::ifstream meta(dir / "meta.json");
    if (!meta) throw std::runtime_error("missing " + (dir / "meta.json").string());
    json j = json::parse(meta);
    GdmrModel m;
    m.state.G = j.at("G").get<int>();
    m.state.W = j.at("W").get<int>();
    m.state.U = j.at("U").get<int>();
    m.state.D = j.at("D").get<int>();
    m.hyper.groups = m.state.G;
    m.hyper.beta = j.at("beta").get<double>();
    m.hyper.sigma = j.at("sigma").get<double>();
    m.hyper.mu = j.at("mu").get<double>();
    m.hyper.iters_total = j.at("iters_total").get<int>();
    m.hyper.iters_warm = j.at("iters_warm").get<int>();
    m.hyper.opt_period = j.at("opt_period").get<int>();
    m.hyper.seed = j.at("seed").get<uint64_t>();
    m.hyper.freeze_lambda = j.value("freeze_lambda", false);
    m.hyper.freeze_gamma = j.value("freeze_gamma", false);
    m.vocab_hash = j.at("vocab_hash").get<uint64_t>();
    m.state.lambda = read_f64(dir / "lambda.f64", static_cast<size_t>(m.state.G) * m.state.D);
    m.state.gamma = read_f64(dir / "gamma.f64", m.state.G);
    m.state.phi_hat = read_f64(dir / "phi.f64", static_cast<size_t>(m.state.G) * m.state.W);
    m.state.theta_hat = read_f64(dir / "theta.f64", static_cast<size_t>(m.state.U) * m.state.G);
    return m;
}

}  // namespace cohort
