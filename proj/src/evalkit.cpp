#include "cohort/evalkit.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "cohort/text.hpp"

#include <json.hpp>

namespace cohort {

using nlohmann::json;

namespace {

std::vector<double> temperature_ladder(const AisConfig& cfg) {
    std::vector<double> tau(cfg.temps + 1);
    tau[0] = 0.0;
    if (cfg.schedule == AisSchedule::Linear) {
        for (int s = 1; s <= cfg.temps; ++s) tau[s] = static_cast<double>(s) / cfg.temps;
    } else {
        const double eps = 1e-4;
        for (int s = 1; s <= cfg.temps; ++s)
            tau[s] = std::pow(eps, 1.0 - static_cast<double>(s) / cfg.temps);
        tau[cfg.temps] = 1.0;
    }
    return tau;
}

// One AIS chain; returns log w_AIS.
double ais_chain(std::span<const double> alpha, std::span<const int> tokens,
                 const std::vector<double>& log_phi, int G, int W,
                 const std::vector<double>& tau, int gibbs_steps, Rng& rng) {
    const size_t n = tokens.size();
    std::vector<int> z(n);
    std::vector<double> counts(G, 0.0);
    std::vector<double> w(G);

    // z ~ p(z | alpha) via the Polya urn.
    for (size_t i = 0; i < n; ++i) {
        for (int g = 0; g < G; ++g) w[g] = counts[g] + alpha[g];
        z[i] = sample_discrete(w, rng);
        counts[z[i]] += 1.0;
    }

    auto temp_loglik = [&] {
        double l = 0.0;
        for (size_t i = 0; i < n; ++i) l += log_phi[static_cast<size_t>(z[i]) * W + tokens[i]];
        return l;
    };

    double log_w = 0.0;
    for (size_t s = 1; s < tau.size(); ++s) {
        log_w += (tau[s] - tau[s - 1]) * temp_loglik();
        for (int step = 0; step < gibbs_steps; ++step) {
            for (size_t i = 0; i < n; ++i) {
                counts[z[i]] -= 1.0;
                for (int g = 0; g < G; ++g) {
                    // log-space weights, normalized by max
                    w[g] = std::log(counts[g] + alpha[g]) +
                           tau[s] * log_phi[static_cast<size_t>(g) * W + tokens[i]];
                }
                double mx = *std::max_element(w.begin(), w.end());
                for (int g = 0; g < G; ++g) w[g] = std::exp(w[g] - mx);
                z[i] = sample_discrete(w, rng);
                counts[z[i]] += 1.0;
            }
        }
    }
    return log_w;
}

}  // namespace

AisResult ais_heldout(const std::vector<double>& phi, int G, int W,
                      const std::vector<double>& alpha, const Corpus& heldout,
                      const AisConfig& cfg) {
    if (cfg.runs < 1 || cfg.temps < 1) throw std::invalid_argument("ais: runs and temps must be >= 1");
    const int U = heldout.num_users();
    auto tau = temperature_ladder(cfg);
    std::vector<double> log_phi(phi.size());
    for (size_t i = 0; i < phi.size(); ++i) log_phi[i] = std::log(std::max(phi[i], 1e-300));

    AisResult res;
    std::vector<std::vector<int>> docs(U);
    std::vector<int> evaluated;
    for (int u = 0; u < U; ++u) {
        for (int w : heldout.tokens[u]) {
            if (w >= 0 && w < W)
                docs[u].push_back(w);
            else
                res.oov_dropped++;
        }
        if (docs[u].empty()) {
            res.users_excluded++;
        } else {
            evaluated.push_back(u);
            res.tokens_evaluated += docs[u].size();
        }
    }
    res.users_evaluated = evaluated.size();
    res.per_user.assign(evaluated.size(), 0.0);

    std::vector<double> var_term(evaluated.size(), 0.0);
    parallel_for(evaluated.size(), cfg.threads, [&](size_t idx) {
        const int u = evaluated[idx];
        std::span<const double> a(alpha.data() + static_cast<size_t>(u) * G, G);
        std::vector<double> log_ws(cfg.runs);
        for (int m = 0; m < cfg.runs; ++m) {
            Rng rng(cfg.seed + 0x1000003ull * (static_cast<uint64_t>(u) * cfg.runs + m) + 1);
            log_ws[m] = ais_chain(a, docs[u], log_phi, G, W, tau, cfg.gibbs_steps_per_temp, rng);
        }
        double est = log_sum_exp(log_ws) - std::log(static_cast<double>(cfg.runs));
        res.per_user[idx] = est;
        // delta method: sd(log mean w) ~ sd(w/mean_w)/sqrt(M)
        double v = 0.0;
        for (double lw : log_ws) {
            double r = std::exp(lw - est) - 1.0;
            v += r * r;
        }
        var_term[idx] = cfg.runs > 1 ? v / (cfg.runs - 1) / cfg.runs : 0.0;
    });

    double var_total = 0.0;
    for (size_t i = 0; i < evaluated.size(); ++i) {
        res.total_log_lik += res.per_user[i];
        var_total += var_term[i];
    }
    res.stderr_total = std::sqrt(var_total);
    res.per_token_log_lik =
        res.tokens_evaluated ? res.total_log_lik / static_cast<double>(res.tokens_evaluated) : 0.0;
    return res;
}

double enumerate_log_marginal(const std::vector<double>& phi, int G, int W,
                              std::span<const double> alpha, std::span<const int> tokens) {
    const size_t n = tokens.size();
    double a_sum = 0.0;
    for (double a : alpha) a_sum += a;
    std::vector<int> z(n, 0);
    std::vector<double> terms;
    while (true) {
        std::vector<double> counts(G, 0.0);
        double log_lik = 0.0;
        for (size_t i = 0; i < n; ++i) {
            counts[z[i]] += 1.0;
            log_lik += std::log(std::max(phi[static_cast<size_t>(z[i]) * W + tokens[i]], 1e-300));
        }
        // Dirichlet-multinomial prior mass of this assignment vector
        double log_prior = std::lgamma(a_sum) - std::lgamma(a_sum + static_cast<double>(n));
        for (int g = 0; g < G; ++g)
            log_prior += std::lgamma(alpha[g] + counts[g]) - std::lgamma(alpha[g]);
        terms.push_back(log_prior + log_lik);

        size_t pos = 0;
        while (pos < n && ++z[pos] == G) z[pos++] = 0;
        if (pos == n) break;
    }
    return log_sum_exp(terms);
}

CoherenceResult umass_coherence(const std::vector<double>& phi, int G, int W,
                                const Corpus& reference, int top_m) {
    if (top_m < 2) throw std::invalid_argument("umass_coherence: top_m must be >= 2");
    // Document (= user) sets per word.
    std::vector<std::set<int>> docs_with(W);
    for (int u = 0; u < reference.num_users(); ++u) {
        std::set<int> seen(reference.tokens[u].begin(), reference.tokens[u].end());
        for (int w : seen)
            if (w < W) docs_with[w].insert(u);
    }

    CoherenceResult res;
    res.per_group.resize(G, 0.0);
    for (int g = 0; g < G; ++g) {
        std::vector<int> order(W);
        for (int w = 0; w < W; ++w) order[w] = w;
        std::partial_sort(order.begin(), order.begin() + std::min(top_m, W), order.end(),
                          [&](int a, int b) {
                              double pa = phi[static_cast<size_t>(g) * W + a];
                              double pb = phi[static_cast<size_t>(g) * W + b];
                              return pa != pb ? pa > pb : a < b;
                          });
        const int M = std::min(top_m, W);
        double score = 0.0;
        for (int m = 1; m < M; ++m) {
            for (int l = 0; l < m; ++l) {
                int wm = order[m], wl = order[l];
                size_t d_l = docs_with[wl].size();
                if (d_l == 0) {
                    res.missing_words++;
                    d_l = 1;  // the +1 numerator smoothing keeps the term finite
                }
                size_t joint = 0;
                for (int d : docs_with[wm])
                    if (docs_with[wl].count(d)) joint++;
                score += std::log((static_cast<double>(joint) + 1.0) / static_cast<double>(d_l));
            }
        }
        res.per_group[g] = score;
        res.mean += score;
    }
    res.mean /= G;
    return res;
}

SimilarityStats similarity_stats(std::vector<double> cosines) {
    SimilarityStats s;
    s.pairs = cosines.size();
    if (cosines.empty()) return s;
    std::sort(cosines.begin(), cosines.end());
    s.median = median_of_sorted(cosines);
    s.q1 = quantile_of_sorted(cosines, 0.25);
    s.q3 = quantile_of_sorted(cosines, 0.75);
    s.min = cosines.front();
    s.max = cosines.back();
    return s;
}

GroupSimilarity within_group_similarity(const std::vector<std::vector<int>>& groups,
                                        const std::vector<TfidfVector>& vectors) {
    GroupSimilarity out;
    out.per_group.resize(groups.size());
    for (size_t g = 0; g < groups.size(); ++g) {
        const auto& members = groups[g];
        if (members.size() < 2) {
            out.singleton_groups++;
            continue;
        }
        std::vector<double> cosines;
        for (size_t i = 0; i < members.size(); ++i) {
            for (size_t j = i + 1; j < members.size(); ++j) {
                const auto& a = vectors[members[i]];
                const auto& b = vectors[members[j]];
                if (a.norm == 0.0 || b.norm == 0.0) {
                    out.zero_vector_pairs_skipped++;
                    continue;
                }
                double c = cosine(a, b);
                cosines.push_back(c);
                out.all_pairs.push_back(c);
                out.labeled_pairs.emplace_back(static_cast<int>(g), c);
            }
        }
        out.per_group[g] = similarity_stats(std::move(cosines));
    }
    out.overall = similarity_stats(out.all_pairs);
    return out;
}

GroupSimilarity random_baseline(const std::vector<int>& users,
                                const std::vector<size_t>& group_sizes, uint64_t seed,
                                const std::vector<TfidfVector>& vectors) {
    size_t total = 0;
    for (size_t s : group_sizes) total += s;
    if (total != users.size())
        throw std::invalid_argument("random_baseline: size profile does not match user count");
    std::vector<int> shuffled = users;
    Rng rng(seed);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    std::vector<std::vector<int>> groups;
    size_t pos = 0;
    for (size_t s : group_sizes) {
        groups.emplace_back(shuffled.begin() + pos, shuffled.begin() + pos + s);
        pos += s;
    }
    return within_group_similarity(groups, vectors);
}

void save_eval_report(const EvalReport& report, const std::filesystem::path& file) {
    json j;
    j["held_out_ll"] = {{"total", report.heldout_total_ll},
                        {"per_token", report.heldout_per_token_ll},
                        {"stderr", report.heldout_stderr},
                        {"metric", report.heldout_metric}};
    j["coherence"] = {{"per_group", report.coherence_per_group}, {"mean", report.coherence_mean}};
    auto stats_json = [](const SimilarityStats& s) {
        return json{{"median", s.median}, {"q1", s.q1},   {"q3", s.q3},
                    {"min", s.min},       {"max", s.max}, {"pairs", s.pairs}};
    };
    j["similarity"] = {{"model", stats_json(report.model_similarity)},
                       {"random_baseline", stats_json(report.baseline_similarity)}};
    std::ofstream out(file);
    out << j.dump(2) << '\n';
}

void save_similarities_csv(const GroupSimilarity& model, const GroupSimilarity& baseline,
                           const std::filesystem::path& file) {
    std::ofstream out(file);
    out << "source,group,cosine\n";
    for (const auto& [g, c] : model.labeled_pairs) out << "model," << g << ',' << c << '\n';
    for (const auto& [g, c] : baseline.labeled_pairs) out << "random," << g << ',' << c << '\n';
}

}  // namespace cohort
