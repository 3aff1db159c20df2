#include "cohort/gstm.hpp"

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "cohort/gdmr.hpp"

namespace cohort {

using nlohmann::json;
using Eigen::MatrixXd;
using Eigen::VectorXd;

void GstmHyper::validate() const {
    if (groups < 2) throw std::invalid_argument("gstm: groups must be >= 2");
    if (max_em_iters < 1) throw std::invalid_argument("gstm: max_em_iters must be >= 1");
    if (!(frex_omega > 0.0 && frex_omega < 1.0))
        throw std::invalid_argument("gstm: frex_omega must be in (0,1)");
    if (sigma <= 0.0) throw std::invalid_argument("gstm: sigma must be > 0");
}

void GstmState::recompute_beta() {
    beta.assign(static_cast<size_t>(G) * W, 0.0);
    for (int g = 0; g < G; ++g) {
        double mx = -1e300;
        for (int w = 0; w < W; ++w)
            mx = std::max(mx, m[w] + kappa[static_cast<size_t>(g) * W + w]);
        double sum = 0.0;
        for (int w = 0; w < W; ++w) {
            double e = std::exp(m[w] + kappa[static_cast<size_t>(g) * W + w] - mx);
            beta[static_cast<size_t>(g) * W + w] = e;
            sum += e;
        }
        for (int w = 0; w < W; ++w) beta[static_cast<size_t>(g) * W + w] /= sum;
    }
}

std::vector<double> GstmState::theta_point(int u) const {
    const int k = K();
    std::vector<double> eta(G, 0.0);
    for (int g = 0; g < k; ++g) eta[g] = eta_mean[static_cast<size_t>(u) * k + g];
    double mx = *std::max_element(eta.begin(), eta.end());
    double sum = 0.0;
    std::vector<double> theta(G);
    for (int g = 0; g < G; ++g) {
        theta[g] = std::exp(eta[g] - mx);
        sum += theta[g];
    }
    for (double& t : theta) t /= sum;
    return theta;
}

namespace {

// Weighted median of values with positive weights; minimizes sum w|x - c|.
double weighted_median(std::vector<std::pair<double, double>>& vw) {
    std::sort(vw.begin(), vw.end());
    double total = 0.0;
    for (const auto& [v, w] : vw) total += w;
    double acc = 0.0;
    for (const auto& [v, w] : vw) {
        acc += w;
        if (acc >= 0.5 * total) return v;
    }
    return vw.back().first;
}

std::vector<double> smoothed_log_frequencies(const Corpus& corpus) {
    const int W = corpus.vocab_size();
    std::vector<double> counts(W, 1.0);  // add-one smoothing
    double total = W;
    for (const auto& doc : corpus.tokens)
        for (int w : doc) {
            counts[w] += 1.0;
            total += 1.0;
        }
    std::vector<double> m(W);
    for (int w = 0; w < W; ++w) m[w] = std::log(counts[w] / total);
    return m;
}

// Anchor-word spectral initialization over the word co-occurrence matrix.
// Returns G x W topic rows, or empty on rank deficiency.
std::vector<double> spectral_beta(const Corpus& corpus, int G) {
    const int W = corpus.vocab_size();
    MatrixXd Q = MatrixXd::Zero(W, W);
    VectorXd word_prob = VectorXd::Zero(W);
    double total_pairs = 0.0;
    for (const auto& doc : corpus.tokens) {
        const double n = static_cast<double>(doc.size());
        if (n < 2) continue;
        std::map<int, double> c;
        for (int w : doc) c[w] += 1.0;
        const double denom = n * (n - 1.0);
        for (const auto& [wi, ci] : c) {
            for (const auto& [wj, cj] : c) {
                double v = wi == wj ? ci * (ci - 1.0) : ci * cj;
                Q(wi, wj) += v / denom;
            }
        }
        total_pairs += 1.0;
        for (int w : doc) word_prob[w] += 1.0;
    }
    if (total_pairs == 0.0) return {};
    Q /= total_pairs;
    word_prob /= word_prob.sum();

    // Row-normalize; drop words with empty rows.
    MatrixXd Qbar = Q;
    std::vector<int> usable;
    for (int w = 0; w < W; ++w) {
        double rs = Q.row(w).sum();
        if (rs > 1e-12) {
            Qbar.row(w) /= rs;
            usable.push_back(w);
        } else {
            Qbar.row(w).setZero();
        }
    }
    if (static_cast<int>(usable.size()) < G) return {};

    // Greedy Gram-Schmidt anchor selection.
    std::vector<int> anchors;
    MatrixXd basis(G, W);
    MatrixXd resid(static_cast<int>(usable.size()), W);
    for (size_t i = 0; i < usable.size(); ++i) resid.row(static_cast<int>(i)) = Qbar.row(usable[i]);
    for (int k = 0; k < G; ++k) {
        int best = -1;
        double best_norm = 1e-10;
        for (size_t i = 0; i < usable.size(); ++i) {
            double nn = resid.row(static_cast<int>(i)).squaredNorm();
            if (nn > best_norm) {
                best_norm = nn;
                best = static_cast<int>(i);
            }
        }
        if (best < 0) return {};  // rank deficient
        anchors.push_back(usable[best]);
        VectorXd b = resid.row(best).transpose();
        b /= b.norm();
        basis.row(k) = b.transpose();
        for (size_t i = 0; i < usable.size(); ++i) {
            double proj = resid.row(static_cast<int>(i)).dot(b.transpose());
            resid.row(static_cast<int>(i)) -= proj * b.transpose();
        }
    }

    // RecoverL2: express each word's row as a convex combination of anchor rows
    // via exponentiated gradient.
    MatrixXd A(G, W);
    for (int k = 0; k < G; ++k) A.row(k) = Qbar.row(anchors[k]);
    MatrixXd AAt = A * A.transpose();
    std::vector<double> beta(static_cast<size_t>(G) * W, 0.0);
    for (int w = 0; w < W; ++w) {
        VectorXd c = VectorXd::Constant(G, 1.0 / G);
        VectorXd Aq = A * Qbar.row(w).transpose();
        const double step = 50.0;
        for (int it = 0; it < 100; ++it) {
            VectorXd grad = AAt * c - Aq;
            VectorXd logc = (-step * grad).array() + c.array().log().max(-300.0);
            double mx = logc.maxCoeff();
            c = (logc.array() - mx).exp();
            c /= c.sum();
        }
        for (int g = 0; g < G; ++g)
            beta[static_cast<size_t>(g) * W + w] = word_prob[w] * std::max(c[g], 1e-12);
    }
    for (int g = 0; g < G; ++g) {
        double sum = 0.0;
        for (int w = 0; w < W; ++w) sum += beta[static_cast<size_t>(g) * W + w];
        if (sum <= 0.0) return {};
        for (int w = 0; w < W; ++w) beta[static_cast<size_t>(g) * W + w] /= sum;
    }
    return beta;
}

std::vector<double> lda_beta(const Corpus& corpus, int G, uint64_t seed) {
    GdmrHyper h;
    h.groups = G;
    h.beta = 0.01;
    h.iters_total = 51;
    h.iters_warm = 50;
    h.seed = seed;
    Rng rng(seed);
    GdmrState s = gdmr_warm_start(corpus, h, rng);
    const int W = corpus.vocab_size();
    std::vector<double> beta(static_cast<size_t>(G) * W);
    for (int g = 0; g < G; ++g)
        for (int w = 0; w < W; ++w)
            beta[static_cast<size_t>(g) * W + w] =
                (s.ngw(g, w) + h.beta) / (s.n_g[g] + W * h.beta);
    return beta;
}

}  // namespace

GstmState gstm_init(const Corpus& corpus, const CovariateMatrix& cov, const GstmHyper& hyper,
                    bool* spectral_fell_back) {
    hyper.validate();
    if (corpus.num_users() == 0) throw std::invalid_argument("gstm: empty corpus");
    GstmState st;
    st.G = hyper.groups;
    st.W = corpus.vocab_size();
    st.U = corpus.num_users();
    st.D = cov.dims;
    const int K = st.K();

    st.m = smoothed_log_frequencies(corpus);

    std::vector<double> beta;
    if (hyper.init == GstmInit::Spectral) {
        beta = spectral_beta(corpus, st.G);
        if (beta.empty()) {
            if (spectral_fell_back) *spectral_fell_back = true;
            beta = lda_beta(corpus, st.G, hyper.seed);
        }
    } else if (hyper.init == GstmInit::Lda) {
        beta = lda_beta(corpus, st.G, hyper.seed);
    } else {
        Rng rng(hyper.seed);
        std::vector<double> ones(st.W, 1.0);
        beta.resize(static_cast<size_t>(st.G) * st.W);
        for (int g = 0; g < st.G; ++g) {
            auto row = sample_dirichlet(ones, rng);
            std::copy(row.begin(), row.end(), beta.begin() + static_cast<size_t>(g) * st.W);
        }
    }

    // kappa = log beta - m, identifiability drift pushed into m.
    st.kappa.resize(static_cast<size_t>(st.G) * st.W);
    for (int g = 0; g < st.G; ++g)
        for (int w = 0; w < st.W; ++w)
            st.kappa[static_cast<size_t>(g) * st.W + w] =
                std::log(std::max(beta[static_cast<size_t>(g) * st.W + w], 1e-300)) - st.m[w];
    for (int w = 0; w < st.W; ++w) {
        std::vector<std::pair<double, double>> vw;
        for (int g = 0; g < st.G; ++g)
            vw.emplace_back(st.kappa[static_cast<size_t>(g) * st.W + w], 1.0);
        double med = weighted_median(vw);
        st.m[w] += med;
        for (int g = 0; g < st.G; ++g) st.kappa[static_cast<size_t>(g) * st.W + w] -= med;
    }

    st.tau.assign(static_cast<size_t>(st.G) * st.W, 1.0);
    st.lambda.assign(static_cast<size_t>(K) * st.D, 0.0);
    st.gamma.assign(K, 0.0);
    st.Sigma.assign(static_cast<size_t>(K) * K, 0.0);
    for (int i = 0; i < K; ++i) st.Sigma[static_cast<size_t>(i) * K + i] = 1.0;
    st.eta_mean.assign(static_cast<size_t>(st.U) * K, 0.0);
    st.eta_var.assign(static_cast<size_t>(st.U) * K, 1.0);
    st.c_ug.assign(static_cast<size_t>(st.U) * st.G, 0.0);
    st.e_step_fallback.assign(st.U, false);
    st.recompute_beta();
    return st;
}

EStepResult gstm_e_step(GstmState& state, const Corpus& corpus, const CovariateMatrix& cov,
                        int threads) {
    const int G = state.G, W = state.W, U = state.U, K = state.K(), D = state.D;
    EStepResult res;
    res.per_user_elbo.assign(U, 0.0);
    res.expected_counts.assign(static_cast<size_t>(G) * W, 0.0);

    MatrixXd Sigma(K, K);
    for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) Sigma(i, j) = state.Sigma[static_cast<size_t>(i) * K + j];
    Eigen::LDLT<MatrixXd> ldlt(Sigma);
    MatrixXd Sigma_inv = ldlt.solve(MatrixXd::Identity(K, K));
    double logdet = 0.0;
    for (int i = 0; i < K; ++i) logdet += std::log(std::max(ldlt.vectorD()[i], 1e-300));

    std::vector<double> log_beta(state.beta.size());
    for (size_t i = 0; i < state.beta.size(); ++i)
        log_beta[i] = std::log(std::max(state.beta[i], 1e-300));

    // Per-user expected count buffers, merged after the parallel loop.
    std::vector<std::vector<std::pair<size_t, double>>> count_updates(U);

    parallel_for(static_cast<size_t>(U), threads, [&](size_t uu) {
        const int u = static_cast<int>(uu);
        // Prevalence mean for this user.
        VectorXd mu = VectorXd::Zero(K);
        for (int g = 0; g < K; ++g) {
            double v = state.gamma[g];
            const double* x = cov.row(u);
            for (int d = 0; d < D; ++d) v += x[d] * state.lambda[static_cast<size_t>(g) * D + d];
            mu[g] = v;
        }

        std::map<int, double> doc_counts;
        for (int w : corpus.tokens[u]) doc_counts[w] += 1.0;
        const double n_u = static_cast<double>(corpus.tokens[u].size());

        VectorXd eta(K);
        for (int g = 0; g < K; ++g) eta[g] = state.eta_mean[static_cast<size_t>(u) * K + g];

        auto theta_of = [&](const VectorXd& e) {
            std::vector<double> th(G);
            double mx = 0.0;
            for (int g = 0; g < K; ++g) mx = std::max(mx, e[g]);
            double sum = 0.0;
            for (int g = 0; g < G; ++g) {
                th[g] = std::exp((g < K ? e[g] : 0.0) - mx);
                sum += th[g];
            }
            for (double& t : th) t /= sum;
            return th;
        };

        auto objective = [&](const VectorXd& e) {
            auto th = theta_of(e);
            double f = 0.0;
            for (const auto& [w, c] : doc_counts) {
                double s = 0.0;
                for (int g = 0; g < G; ++g) s += th[g] * state.beta_at(g, w);
                f += c * std::log(std::max(s, 1e-300));
            }
            VectorXd diff = e - mu;
            f -= 0.5 * diff.dot(Sigma_inv * diff);
            return f;
        };

        // Damped Newton to the mode of the collapsed objective.
        double f = objective(eta);
        bool diverged = false;
        for (int it = 0; it < 50; ++it) {
            auto th = theta_of(eta);
            VectorXd grad = VectorXd::Zero(K);
            std::vector<double> cbar(G, 0.0);
            for (const auto& [w, c] : doc_counts) {
                double s = 0.0;
                for (int g = 0; g < G; ++g) s += th[g] * state.beta_at(g, w);
                for (int g = 0; g < G; ++g) cbar[g] += c * th[g] * state.beta_at(g, w) / s;
            }
            for (int g = 0; g < K; ++g) grad[g] = cbar[g] - n_u * th[g];
            grad -= Sigma_inv * (eta - mu);
            if (grad.lpNorm<Eigen::Infinity>() < 1e-9) break;

            MatrixXd H = Sigma_inv;
            for (int i = 0; i < K; ++i) {
                for (int j = 0; j < K; ++j)
                    H(i, j) += n_u * (-(th[i] * th[j]) + (i == j ? th[i] : 0.0));
                H(i, i) += 1e-10;
            }
            VectorXd step = H.ldlt().solve(grad);
            double t = 1.0;
            bool ok = false;
            for (int ls = 0; ls < 30; ++ls) {
                VectorXd cand = eta + t * step;
                double fc = objective(cand);
                if (std::isfinite(fc) && fc >= f - 1e-14) {
                    if (fc >= f) {
                        eta = cand;
                        f = fc;
                        ok = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if (!ok) break;
        }
        if (!std::isfinite(f)) {
            diverged = true;  // keep previous iterate
            for (int g = 0; g < K; ++g) eta[g] = state.eta_mean[static_cast<size_t>(u) * K + g];
        }
        state.e_step_fallback[u] = diverged;

        // Diagonal Laplace covariance from the bound Hessian at the mode.
        auto th = theta_of(eta);
        std::vector<double> v(K);
        for (int g = 0; g < K; ++g) {
            double h = Sigma_inv(g, g) + n_u * th[g] * (1.0 - th[g]) + 1e-10;
            v[g] = 1.0 / h;
        }
        for (int g = 0; g < K; ++g) {
            state.eta_mean[static_cast<size_t>(u) * K + g] = eta[g];
            state.eta_var[static_cast<size_t>(u) * K + g] = v[g];
        }

        // Token soft assignments phi_g ∝ exp(eta_g) beta_gw and the ELBO.
        // E[log theta_g] >= eta_g - log(sum_g' exp(eta_g' + v_g'/2)) (reference v = 0).
        double lse_bound;
        {
            double mx = 0.0;
            for (int g = 0; g < K; ++g) mx = std::max(mx, eta[g] + 0.5 * v[g]);
            double s = std::exp(-mx);
            for (int g = 0; g < K; ++g) s += std::exp(eta[g] + 0.5 * v[g] - mx);
            lse_bound = mx + std::log(s);
        }
        double elbo = 0.0;
        std::vector<double> cbar(G, 0.0);
        for (const auto& [w, c] : doc_counts) {
            std::vector<double> lphi(G);
            for (int g = 0; g < G; ++g)
                lphi[g] = (g < K ? eta[g] : 0.0) + log_beta[static_cast<size_t>(g) * W + w];
            double lse = log_sum_exp(lphi);
            for (int g = 0; g < G; ++g) {
                double phi = std::exp(lphi[g] - lse);
                if (phi < 1e-300) continue;
                // phi * ((eta_g - lse_bound) + log beta - log phi)
                double eterm = (g < K ? eta[g] : 0.0) - lse_bound;
                elbo += c * phi * (eterm + log_beta[static_cast<size_t>(g) * W + w] - std::log(phi));
                cbar[g] += c * phi;
                count_updates[u].emplace_back(static_cast<size_t>(g) * W + w, c * phi);
            }
        }
        for (int g = 0; g < G; ++g) state.c_ug[static_cast<size_t>(u) * G + g] = cbar[g];

        // Gaussian prior expectation and entropy of q(eta).
        VectorXd diff = eta - mu;
        double prior = -0.5 * K * std::log(2.0 * M_PI) - 0.5 * logdet -
                       0.5 * diff.dot(Sigma_inv * diff);
        for (int g = 0; g < K; ++g) prior -= 0.5 * Sigma_inv(g, g) * v[g];
        double entropy = 0.0;
        for (int g = 0; g < K; ++g)
            entropy += 0.5 * std::log(2.0 * M_PI * M_E * v[g]);
        elbo += prior + entropy;
        res.per_user_elbo[u] = elbo;
    });

    for (int u = 0; u < U; ++u) {
        for (const auto& [idx, v] : count_updates[u]) res.expected_counts[idx] += v;
        res.total_elbo += res.per_user_elbo[u];
    }
    return res;
}

void gstm_m_step_prevalence(GstmState& state, const CovariateMatrix& cov, const GstmHyper& hyper) {
    const int U = state.U, K = state.K(), D = state.D;

    MatrixXd resid(U, K);
    if (hyper.freeze_prevalence) {
        for (int u = 0; u < U; ++u)
            for (int g = 0; g < K; ++g)
                resid(u, g) = state.eta_mean[static_cast<size_t>(u) * K + g];
    } else {
        // Ridge regression of eta_mean onto [1, X] per dimension; intercept unpenalized.
        MatrixXd Z(U, D + 1);
        for (int u = 0; u < U; ++u) {
            Z(u, 0) = 1.0;
            for (int d = 0; d < D; ++d) Z(u, d + 1) = cov.row(u)[d];
        }
        MatrixXd ZtZ = Z.transpose() * Z;
        for (int d = 1; d <= D; ++d) ZtZ(d, d) += 1.0 / (hyper.sigma * hyper.sigma);
        Eigen::LDLT<MatrixXd> solver(ZtZ);
        for (int g = 0; g < K; ++g) {
            VectorXd y(U);
            for (int u = 0; u < U; ++u) y[u] = state.eta_mean[static_cast<size_t>(u) * K + g];
            VectorXd b = solver.solve(Z.transpose() * y);
            state.gamma[g] = b[0];
            for (int d = 0; d < D; ++d) state.lambda[static_cast<size_t>(g) * D + d] = b[d + 1];
            resid.col(g) = y - Z * b;
        }
    }

    // Sigma = residual covariance + mean variational variance, floored to PSD.
    MatrixXd S = resid.transpose() * resid / U;
    for (int g = 0; g < K; ++g) {
        double mv = 0.0;
        for (int u = 0; u < U; ++u) mv += state.eta_var[static_cast<size_t>(u) * K + g];
        S(g, g) += mv / U;
    }
    S = 0.5 * (S + S.transpose());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
    VectorXd ev = es.eigenvalues().cwiseMax(1e-8);
    S = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) state.Sigma[static_cast<size_t>(i) * K + j] = S(i, j);
}

void gstm_m_step_content(GstmState& state, const std::vector<double>& expected_counts,
                         const GstmHyper& hyper) {
    const int G = state.G, W = state.W;

    auto penalty = [&](int g, double kappa_val, double tau_val) {
        if (hyper.content_penalty == ContentPenalty::Laplace) return std::abs(kappa_val) / tau_val;
        return 0.5 * kappa_val * kappa_val / (tau_val * tau_val);
    };

    for (int g = 0; g < G; ++g) {
        const double* C = expected_counts.data() + static_cast<size_t>(g) * W;
        double N_g = 0.0;
        for (int w = 0; w < W; ++w) N_g += C[w];
        if (N_g <= 0.0) continue;
        double* kap = state.kappa.data() + static_cast<size_t>(g) * W;
        double* tau = state.tau.data() + static_cast<size_t>(g) * W;

        auto objective = [&]() {
            // sum_w C log beta - penalties (beta implied by m + kappa)
            double mx = -1e300;
            for (int w = 0; w < W; ++w) mx = std::max(mx, state.m[w] + kap[w]);
            double Z = 0.0;
            for (int w = 0; w < W; ++w) Z += std::exp(state.m[w] + kap[w] - mx);
            double lZ = mx + std::log(Z);
            double f = 0.0;
            for (int w = 0; w < W; ++w) {
                if (C[w] > 0.0) f += C[w] * (state.m[w] + kap[w] - lZ);
                f -= penalty(g, kap[w], tau[w]);
            }
            return f;
        };

        double step = 2.0 / N_g;  // softmax Hessian norm bound N_g/2
        double f = objective();
        for (int it = 0; it < 30; ++it) {
            // gradient of the likelihood part: C - N_g * beta_g
            double mx = -1e300;
            for (int w = 0; w < W; ++w) mx = std::max(mx, state.m[w] + kap[w]);
            double Z = 0.0;
            for (int w = 0; w < W; ++w) Z += std::exp(state.m[w] + kap[w] - mx);
            std::vector<double> old_kap(kap, kap + W);
            bool accepted = false;
            double try_step = step;
            for (int bt = 0; bt < 20; ++bt) {
                for (int w = 0; w < W; ++w) {
                    double beta_w = std::exp(state.m[w] + old_kap[w] - mx) / Z;
                    double grad = C[w] - N_g * beta_w;
                    double cand = old_kap[w] + try_step * grad;
                    if (hyper.content_penalty == ContentPenalty::Laplace) {
                        double thr = try_step / tau[w];
                        kap[w] = std::copysign(std::max(std::abs(cand) - thr, 0.0), cand);
                    } else {
                        kap[w] = cand / (1.0 + try_step / (tau[w] * tau[w]));
                    }
                }
                double fc = objective();
                if (fc >= f - 1e-12) {
                    f = fc;
                    accepted = true;
                    break;
                }
                try_step *= 0.5;
            }
            if (!accepted) {
                std::copy(old_kap.begin(), old_kap.end(), kap);
                break;
            }
            double delta = 0.0;
            for (int w = 0; w < W; ++w) delta = std::max(delta, std::abs(kap[w] - old_kap[w]));
            if (delta < 1e-10) break;
        }

        // tau MAP update: positive root of tau^2 + tau - |kappa| = 0, floored.
        // The ridge ablation keeps a fixed scale; adapting it per entry would
        // collapse tau at zero entries and pin them exactly like the Laplace
        // path, defeating the ablation comparison.
        if (hyper.content_penalty == ContentPenalty::Laplace) {
            for (int w = 0; w < W; ++w) {
                double a = std::abs(kap[w]);
                tau[w] = std::max(hyper.tau_min, 0.5 * (-1.0 + std::sqrt(1.0 + 4.0 * a)));
            }
        }
    }

    // Identifiability: shift the weighted median of each kappa column into m.
    for (int w = 0; w < W; ++w) {
        std::vector<std::pair<double, double>> vw;
        for (int g = 0; g < G; ++g)
            vw.emplace_back(state.kappa[static_cast<size_t>(g) * W + w],
                            1.0 / state.tau[static_cast<size_t>(g) * W + w]);
        double med;
        if (hyper.content_penalty == ContentPenalty::Laplace) {
            med = weighted_median(vw);  // cannot increase the weighted L1 penalty
        } else {
            double num = 0.0, den = 0.0;
            for (auto& [v, wt] : vw) {
                num += v * wt * wt;  // weighted mean minimizes the quadratic penalty
                den += wt * wt;
            }
            med = den > 0.0 ? num / den : 0.0;
        }
        if (med != 0.0) {
            state.m[w] += med;
            for (int g = 0; g < G; ++g) state.kappa[static_cast<size_t>(g) * W + w] -= med;
        }
    }
    // Re-solve tau after the shift (Laplace only; see above).
    if (hyper.content_penalty == ContentPenalty::Laplace) {
        for (size_t i = 0; i < state.tau.size(); ++i) {
            double a = std::abs(state.kappa[i]);
            state.tau[i] = std::max(hyper.tau_min, 0.5 * (-1.0 + std::sqrt(1.0 + 4.0 * a)));
        }
    }
    state.recompute_beta();
}

double gstm_objective(const GstmState& state, const EStepResult& e, const GstmHyper& hyper) {
    double f = e.total_elbo;
    for (size_t i = 0; i < state.kappa.size(); ++i) {
        double tau = state.tau[i];
        if (hyper.content_penalty == ContentPenalty::Laplace)
            f += -std::log(2.0 * tau) - std::abs(state.kappa[i]) / tau;
        else
            f += -std::log(tau) - 0.5 * state.kappa[i] * state.kappa[i] / (tau * tau);
        f -= tau;  // Gamma(1,1) hyperprior, up to constants
    }
    const double inv2s2 = 1.0 / (2.0 * hyper.sigma * hyper.sigma);
    for (double l : state.lambda) f -= l * l * inv2s2;
    return f;
}

std::pair<GstmState, GstmFitReport> gstm_fit(const Corpus& corpus, const CovariateMatrix& cov,
                                             const GstmHyper& hyper, int threads) {
    hyper.validate();
    if (cov.rows() != corpus.num_users())
        throw std::invalid_argument("gstm_fit: covariate rows != user count");
    using Clock = std::chrono::steady_clock;
    auto t0 = Clock::now();

    GstmFitReport report;
    GstmState state = gstm_init(corpus, cov, hyper, &report.spectral_fallback);

    double prev = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < hyper.max_em_iters; ++it) {
        EStepResult e = gstm_e_step(state, corpus, cov, threads);
        gstm_m_step_prevalence(state, cov, hyper);
        gstm_m_step_content(state, e.expected_counts, hyper);
        double obj = gstm_objective(state, e, hyper);
        report.elbo_trace.push_back(obj);
        report.em_iterations = it + 1;
        if (std::isfinite(prev)) {
            double rel = (obj - prev) / (std::abs(prev) + 1e-12);
            if (rel < -1e-6) report.approximation_violations++;
            if (std::abs(rel) < hyper.elbo_tol) {
                report.converged = true;
                break;
            }
        }
        prev = obj;
    }
    // Final E-step so the stored variational posterior matches final parameters.
    gstm_e_step(state, corpus, cov, threads);
    report.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return {std::move(state), std::move(report)};
}

std::vector<std::vector<FrexEntry>> frex(const GstmState& state, const GstmHyper& hyper) {
    const int G = state.G, W = state.W;
    std::vector<double> col_sum(W, 0.0);
    for (int g = 0; g < G; ++g)
        for (int w = 0; w < W; ++w) col_sum[w] += state.beta_at(g, w);

    std::vector<std::vector<FrexEntry>> out(G);
    const double omega = hyper.frex_omega;
    for (int g = 0; g < G; ++g) {
        std::vector<double> freq(W), excl(W);
        for (int w = 0; w < W; ++w) {
            freq[w] = state.beta_at(g, w);
            excl[w] = state.beta_at(g, w) / std::max(col_sum[w], 1e-300);
        }
        auto ecdf = [&](const std::vector<double>& vals) {
            std::vector<double> sorted = vals;
            std::sort(sorted.begin(), sorted.end());
            std::vector<double> r(W);
            for (int w = 0; w < W; ++w) {
                auto it = std::upper_bound(sorted.begin(), sorted.end(), vals[w]);
                r[w] = static_cast<double>(it - sorted.begin()) / W;
            }
            return r;
        };
        auto F = ecdf(freq), E = ecdf(excl);
        out[g].resize(W);
        for (int w = 0; w < W; ++w) {
            FrexEntry& e = out[g][w];
            e.word = w;
            e.frequency = F[w];
            e.exclusivity = E[w];
            e.frex = 1.0 / (omega / E[w] + (1.0 - omega) / F[w]);
        }
        std::sort(out[g].begin(), out[g].end(),
                  [](const FrexEntry& a, const FrexEntry& b) {
                      return a.frex != b.frex ? a.frex > b.frex : a.word < b.word;
                  });
    }
    return out;
}

std::vector<double> gstm_heldout_elbo(const GstmState& model, const Corpus& heldout,
                                      const CovariateMatrix& heldout_cov, int threads) {
    GstmState scratch = model;
    scratch.U = heldout.num_users();
    const int K = model.K();
    scratch.eta_mean.assign(static_cast<size_t>(scratch.U) * K, 0.0);
    scratch.eta_var.assign(static_cast<size_t>(scratch.U) * K, 1.0);
    scratch.c_ug.assign(static_cast<size_t>(scratch.U) * model.G, 0.0);
    scratch.e_step_fallback.assign(scratch.U, false);
    EStepResult e = gstm_e_step(scratch, heldout, heldout_cov, threads);
    return e.per_user_elbo;
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

void save_gstm(const GstmState& state, const GstmHyper& hyper, const GstmFitReport& report,
               uint64_t vocab_hash, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_f64(dir / "lambda.f64", state.lambda);
    write_f64(dir / "gamma.f64", state.gamma);
    write_f64(dir / "phi.f64", state.beta);
    write_f64(dir / "kappa.f64", state.kappa);
    write_f64(dir / "tau.f64", state.tau);
    write_f64(dir / "m.f64", state.m);
    write_f64(dir / "sigma_cov.f64", state.Sigma);
    // theta.f64: point estimates from the variational means
    std::vector<double> theta(static_cast<size_t>(state.U) * state.G);
    for (int u = 0; u < state.U; ++u) {
        auto t = state.theta_point(u);
        std::copy(t.begin(), t.end(), theta.begin() + static_cast<size_t>(u) * state.G);
    }
    write_f64(dir / "theta.f64", theta);

    json j;
    j["model"] = "gstm";
    j["G"] = state.G;
    j["W"] = state.W;
    j["U"] = state.U;
    j["D"] = state.D;
    j["sigma"] = hyper.sigma;
    j["max_em_iters"] = hyper.max_em_iters;
    j["elbo_tol"] = hyper.elbo_tol;
    j["frex_omega"] = hyper.frex_omega;
    j["tau_min"] = hyper.tau_min;
    j["seed"] = hyper.seed;
    j["init"] = hyper.init == GstmInit::Spectral ? "spectral"
                : hyper.init == GstmInit::Lda    ? "lda"
                                                 : "random";
    j["content_penalty"] = hyper.content_penalty == ContentPenalty::Laplace ? "laplace" : "ridge";
    j["freeze_prevalence"] = hyper.freeze_prevalence;
    j["vocab_hash"] = vocab_hash;
    std::ofstream meta(dir / "meta.json");
    meta << j.dump(2) << '\n';

    std::ofstream trace(dir / "trace.csv");
    trace << "em_iteration,elbo\n";
    for (size_t i = 0; i < report.elbo_trace.size(); ++i)
        trace << (i + 1) << ',' << report.elbo_trace[i] << '\n';

    auto tables = frex(state, hyper);
    std::ofstream fx(dir / "frex.csv");
    fx << "group,word_index,frequency,exclusivity,frex\n";
    for (int g = 0; g < state.G; ++g)
        for (const auto& e : tables[g])
            fx << g << ',' << e.word << ',' << e.frequency << ',' << e.exclusivity << ','
               << e.frex << '\n';
}

GstmModel load_gstm(const std::filesystem::path& dir) {
    std::ifstream meta(dir / "meta.json");
    if (!meta) throw std::runtime_error("missing " + (dir / "meta.json").string());
    json j = json::parse(meta);
    GstmModel m;
    m.state.G = j.at("G").get<int>();
    m.state.W = j.at("W").get<int>();
    m.state.U = j.at("U").get<int>();
    m.state.D = j.at("D").get<int>();
    const int K = m.state.K();
    m.hyper.groups = m.state.G;
    m.hyper.sigma = j.at("sigma").get<double>();
    m.hyper.max_em_iters = j.at("max_em_iters").get<int>();
    m.hyper.elbo_tol = j.at("elbo_tol").get<double>();
    m.hyper.frex_omega = j.at("frex_omega").get<double>();
    m.hyper.tau_min = j.at("tau_min").get<double>();
    m.hyper.seed = j.at("seed").get<uint64_t>();
    std::string init = j.value("init", "spectral");
    m.hyper.init = init == "lda" ? GstmInit::Lda : init == "random" ? GstmInit::Random : GstmInit::Spectral;
    m.hyper.content_penalty =
        j.value("content_penalty", "laplace") == "ridge" ? ContentPenalty::Ridge : ContentPenalty::Laplace;
    m.hyper.freeze_prevalence = j.value("freeze_prevalence", false);
    m.vocab_hash = j.at("vocab_hash").get<uint64_t>();

    m.state.lambda = read_f64(dir / "lambda.f64", static_cast<size_t>(K) * m.state.D);
    m.state.gamma = read_f64(dir / "gamma.f64", K);
    m.state.beta = read_f64(dir / "phi.f64", static_cast<size_t>(m.state.G) * m.state.W);
    m.state.kappa = read_f64(dir / "kappa.f64", static_cast<size_t>(m.state.G) * m.state.W);
    m.state.tau = read_f64(dir / "tau.f64", static_cast<size_t>(m.state.G) * m.state.W);
    m.state.m = read_f64(dir / "m.f64", m.state.W);
    m.state.Sigma = read_f64(dir / "sigma_cov.f64", static_cast<size_t>(K) * K);
    std::vector<double> theta = read_f64(dir / "theta.f64", static_cast<size_t>(m.state.U) * m.state.G);
    // reconstruct eta_mean from theta (log-ratio to the reference group)
    m.state.eta_mean.assign(static_cast<size_t>(m.state.U) * K, 0.0);
    for (int u = 0; u < m.state.U; ++u) {
        double ref = std::max(theta[static_cast<size_t>(u) * m.state.G + K], 1e-300);
        for (int g = 0; g < K; ++g)
            m.state.eta_mean[static_cast<size_t>(u) * K + g] =
                std::log(std::max(theta[static_cast<size_t>(u) * m.state.G + g], 1e-300) / ref);
    }
    m.state.eta_var.assign(static_cast<size_t>(m.state.U) * K, 1.0);
    m.state.c_ug.assign(static_cast<size_t>(m.state.U) * m.state.G, 0.0);
    m.state.e_step_fallback.assign(m.state.U, false);
    return m;
}

}  // namespace cohort
