#include "cohort/synth.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "cohort/common.hpp"
#include "cohort/gdmr.hpp"

namespace cohort {

namespace {

std::string padded(const char* prefix, int i, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%0*d", prefix, width, i);
    return buf;
}

std::vector<std::string> make_vocab(int W) {
    std::vector<std::string> v(W);
    for (int w = 0; w < W; ++w) v[w] = padded("w", w, 5);
    return v;
}

UserProfile random_profile(const std::string& id, Rng& rng) {
    UserProfile p;
    p.user_id = id;
    std::uniform_int_distribution<int> g(0, 2), a(0, 9), c(0, 4);
    p.gender = static_cast<Gender>(g(rng));
    p.age_bucket = static_cast<AgeBucket>(a(rng));
    static const char* countries[] = {"us", "uk", "ca", "au", ""};
    p.country = countries[c(rng)];
    return p;
}

// One-hot demographics ++ raw N(0, 1/sqrt(D)) embedding block; ground-truth
// lambda refers to exactly these columns.
CovariateMatrix synth_covariates(const std::vector<UserProfile>& profiles, int emb_dims,
                                 bool demographics, Rng& rng) {
    const int U = static_cast<int>(profiles.size());
    CovariateMatrix cov;
    if (demographics) {
        for (const char* g : {"female", "male", "unspecified"})
            cov.column_names.push_back(std::string("gender_") + g);
        for (int a = 0; a <= static_cast<int>(AgeBucket::Unspecified); ++a)
            cov.column_names.push_back(std::string("age_") + to_string(static_cast<AgeBucket>(a)));
    }
    for (int d = 0; d < emb_dims; ++d) cov.column_names.push_back("emb_" + std::to_string(d));
    cov.dims = static_cast<int>(cov.column_names.size());
    cov.data.assign(static_cast<size_t>(U) * cov.dims, 0.0);
    const double emb_sd = emb_dims > 0 ? 1.0 / std::sqrt(static_cast<double>(emb_dims)) : 0.0;
    std::normal_distribution<double> norm(0.0, emb_sd);
    for (int u = 0; u < U; ++u) {
        double* x = cov.row(u);
        int base = 0;
        if (demographics) {
            x[static_cast<int>(profiles[u].gender)] = 1.0;
            x[3 + static_cast<int>(profiles[u].age_bucket)] = 1.0;
            base = 3 + static_cast<int>(AgeBucket::Unspecified) + 1;
        }
        for (int d = 0; d < emb_dims; ++d) x[base + d] = norm(rng);
    }
    return cov;
}

int poisson_len(double mean, Rng& rng) {
    std::poisson_distribution<int> p(mean);
    return std::max(1, p(rng));
}

}  // namespace

SynthOutput synth_gdmr(const SynthGdmrConfig& cfg) {
    const auto [U, W, G, De] = cfg.dims;
    if (G < 2 || W < G || U < 1)
        throw std::invalid_argument("synth_gdmr: require G >= 2, W >= G, U >= 1");
    Rng rng(cfg.seed);

    SynthOutput out;
    out.corpus.vocabulary = make_vocab(W);
    for (int u = 0; u < U; ++u) {
        out.corpus.users.push_back(padded("u", u, 5));
        out.corpus.profiles.push_back(random_profile(out.corpus.users.back(), rng));
    }
    out.corpus.forums.assign(U, "");
    out.corpus.rebuild_user_index();

    out.covariates = synth_covariates(out.corpus.profiles, De, cfg.demographics, rng);
    const int D = out.covariates.dims;

    // phi_g ~ Dir(beta), gamma_g ~ Gamma(1,1), lambda_g ~ N(0, lambda_scale^2)
    std::vector<double> beta_vec(W, cfg.beta);
    out.truth.phi.resize(static_cast<size_t>(G) * W);
    for (int g = 0; g < G; ++g) {
        auto phi = sample_dirichlet(beta_vec, rng);
        std::copy(phi.begin(), phi.end(), out.truth.phi.begin() + static_cast<size_t>(g) * W);
    }
    out.truth.gamma.resize(G);
    std::gamma_distribution<double> gam(1.0, 1.0);
    for (int g = 0; g < G; ++g) out.truth.gamma[g] = gam(rng);
    out.truth.lambda.resize(static_cast<size_t>(G) * D);
    std::normal_distribution<double> lam(0.0, cfg.lambda_scale);
    for (auto& v : out.truth.lambda) v = lam(rng);

    out.truth.theta.resize(static_cast<size_t>(U) * G);
    out.corpus.tokens.resize(U);
    out.truth.z.resize(U);
    for (int u = 0; u < U; ++u) {
        auto alpha = gdmr_alpha(out.covariates.row(u), out.truth.lambda, out.truth.gamma, G, D);
        auto theta = sample_dirichlet(alpha, rng);
        std::copy(theta.begin(), theta.end(), out.truth.theta.begin() + static_cast<size_t>(u) * G);
        int n = poisson_len(cfg.doc_len_mean, rng);
        out.corpus.tokens[u].resize(n);
        out.truth.z[u].resize(n);
        for (int i = 0; i < n; ++i) {
            int g = sample_discrete(theta, rng);
            out.truth.z[u][i] = g;
            std::span<const double> phi_g(out.truth.phi.data() + static_cast<size_t>(g) * W, W);
            out.corpus.tokens[u][i] = sample_discrete(phi_g, rng);
        }
    }
    return out;
}

SynthOutput synth_gstm(const SynthGstmConfig& cfg) {
    const auto [U, W, G, De] = cfg.dims;
    if (G < 2 || W < G || U < 1)
        throw std::invalid_argument("synth_gstm: require G >= 2, W >= G, U >= 1");
    Rng rng(cfg.seed);

    SynthOutput out;
    out.corpus.vocabulary = make_vocab(W);
    for (int u = 0; u < U; ++u) {
        out.corpus.users.push_back(padded("u", u, 5));
        out.corpus.profiles.push_back(random_profile(out.corpus.users.back(), rng));
    }
    out.corpus.forums.assign(U, "");
    out.corpus.rebuild_user_index();

    out.covariates = synth_covariates(out.corpus.profiles, De, cfg.demographics, rng);
    const int D = out.covariates.dims;

    // m centered log baseline; kappa ~ Laplace(0, tau), tau ~ Gamma(1,1)
    out.truth.m.resize(W);
    std::normal_distribution<double> norm01(0.0, 1.0);
    double mean_m = 0.0;
    for (int w = 0; w < W; ++w) {
        out.truth.m[w] = norm01(rng);
        mean_m += out.truth.m[w];
    }
    mean_m /= W;
    for (double& v : out.truth.m) v -= mean_m;

    std::gamma_distribution<double> gam(1.0, 1.0);
    out.truth.kappa.assign(static_cast<size_t>(G) * W, 0.0);
    if (cfg.kappa_scale > 0.0) {
        for (auto& k : out.truth.kappa) {
            double tau = gam(rng);
            k = cfg.kappa_scale * sample_laplace(tau, rng);
        }
    }
    out.truth.phi.resize(static_cast<size_t>(G) * W);  // beta rows
    for (int g = 0; g < G; ++g) {
        double mx = -1e300;
        for (int w = 0; w < W; ++w)
            mx = std::max(mx, out.truth.m[w] + out.truth.kappa[static_cast<size_t>(g) * W + w]);
        double sum = 0.0;
        for (int w = 0; w < W; ++w) {
            double e = std::exp(out.truth.m[w] + out.truth.kappa[static_cast<size_t>(g) * W + w] - mx);
            out.truth.phi[static_cast<size_t>(g) * W + w] = e;
            sum += e;
        }
        for (int w = 0; w < W; ++w) out.truth.phi[static_cast<size_t>(g) * W + w] /= sum;
    }

    out.truth.gamma.resize(G);
    for (int g = 0; g < G; ++g) out.truth.gamma[g] = gam(rng);
    out.truth.lambda.resize(static_cast<size_t>(G) * D);
    std::normal_distribution<double> lam(0.0, cfg.lambda_scale);
    for (auto& v : out.truth.lambda) v = lam(rng);

    out.truth.theta.resize(static_cast<size_t>(U) * G);
    out.corpus.tokens.resize(U);
    out.truth.z.resize(U);
    std::normal_distribution<double> eps(0.0, cfg.sigma_theta);
    for (int u = 0; u < U; ++u) {
        const double* x = out.covariates.row(u);
        std::vector<double> eta(G);
        double mx = -1e300;
        for (int g = 0; g < G; ++g) {
            double mu = out.truth.gamma[g];
            for (int d = 0; d < D; ++d) mu += x[d] * out.truth.lambda[static_cast<size_t>(g) * D + d];
            eta[g] = mu + (cfg.sigma_theta > 0.0 ? eps(rng) : 0.0);
            mx = std::max(mx, eta[g]);
        }
        std::vector<double> theta(G);
        double sum = 0.0;
        for (int g = 0; g < G; ++g) {
            theta[g] = std::exp(eta[g] - mx);
            sum += theta[g];
        }
        for (double& t : theta) t /= sum;
        std::copy(theta.begin(), theta.end(), out.truth.theta.begin() + static_cast<size_t>(u) * G);

        int n = poisson_len(cfg.doc_len_mean, rng);
        out.corpus.tokens[u].resize(n);
        out.truth.z[u].resize(n);
        for (int i = 0; i < n; ++i) {
            int g = sample_discrete(theta, rng);
            out.truth.z[u][i] = g;
            std::span<const double> beta_g(out.truth.phi.data() + static_cast<size_t>(g) * W, W);
            out.corpus.tokens[u][i] = sample_discrete(beta_g, rng);
        }
    }
    return out;
}

SynthCommunityOutput synth_community(const SynthCommunityConfig& cfg) {
    Rng rng(cfg.seed);
    SynthCommunityOutput out;
    const int U = cfg.users, W = cfg.vocab, G = cfg.groups, C = cfg.communities;
    if (C < 1 || G < 2 || W < G) throw std::invalid_argument("synth_community: bad dims");

    out.corpus.vocabulary = make_vocab(W);
    out.truth.community.resize(U);
    for (int u = 0; u < U; ++u) {
        std::string id = padded("u", u, 5);
        out.corpus.users.push_back(id);
        out.corpus.profiles.push_back(random_profile(id, rng));
        out.profiles.push_back(out.corpus.profiles.back());
        out.truth.community[u] = u % C;
    }
    out.corpus.forums.assign(U, "");
    out.corpus.rebuild_user_index();

    // Topic-word distributions: block-diagonal-ish Dirichlet draws.
    std::vector<double> beta_vec(W, 0.05);
    out.truth.phi.resize(static_cast<size_t>(G) * W);
    for (int g = 0; g < G; ++g) {
        auto phi = sample_dirichlet(beta_vec, rng);
        std::copy(phi.begin(), phi.end(), out.truth.phi.begin() + static_cast<size_t>(g) * W);
    }

    // Prevalence: community c prefers topic c mod G.
    out.truth.theta.resize(static_cast<size_t>(U) * G);
    out.corpus.tokens.resize(U);
    for (int u = 0; u < U; ++u) {
        std::vector<double> alpha(G, 0.3);
        alpha[out.truth.community[u] % G] += cfg.topic_sharpness;
        auto theta = sample_dirichlet(alpha, rng);
        std::copy(theta.begin(), theta.end(), out.truth.theta.begin() + static_cast<size_t>(u) * G);
        int n = poisson_len(cfg.doc_len_mean, rng);
        out.corpus.tokens[u].resize(n);
        for (int i = 0; i < n; ++i) {
            int g = sample_discrete(theta, rng);
            std::span<const double> phi_g(out.truth.phi.data() + static_cast<size_t>(g) * W, W);
            out.corpus.tokens[u][i] = sample_discrete(phi_g, rng);
        }
    }

    // Posts: each user posts, then replies mostly inside their community.
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<int> any_user(0, U - 1);
    int post_counter = 0;
    for (int u = 0; u < U; ++u) {
        for (int k = 0; k < cfg.posts_per_user; ++k) {
            Post p;
            p.post_id = padded("p", post_counter++, 7);
            p.author_id = out.corpus.users[u];
            p.body = "";
            if (k > 0) {  // replies after the first post
                int target;
                if (unif(rng) < cfg.within_reply_prob) {
                    // uniform member of the same community
                    int c = out.truth.community[u];
                    std::vector<int> members;
                    for (int v = 0; v < U; ++v)
                        if (out.truth.community[v] == c && v != u) members.push_back(v);
                    target = members.empty() ? u : members[rng() % members.size()];
                } else {
                    target = any_user(rng);
                }
                p.reply_to_author_id = out.corpus.users[target];
            }
            out.posts.push_back(std::move(p));
        }
    }
    return out;
}

}  // namespace cohort
