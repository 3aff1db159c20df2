#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cohort/common.hpp"
#include "cohort/types.hpp"

namespace cohort {

enum class AisSchedule { Linear, Geometric };

struct AisConfig {
    int temps = 1000;            // S
    AisSchedule schedule = AisSchedule::Linear;
    int runs = 10;               // M independent chains
    int gibbs_steps_per_temp = 1;
    uint64_t seed = 0;
    int threads = 1;
};

struct AisResult {
    double total_log_lik = 0.0;       // sum over evaluated users
    double per_token_log_lik = 0.0;
    double stderr_total = 0.0;        // delta-method stderr over the M runs
    std::vector<double> per_user;     // log-likelihood estimate per evaluated user
    size_t users_evaluated = 0;
    size_t users_excluded = 0;        // empty or all-OOV
    size_t tokens_evaluated = 0;
    size_t oov_dropped = 0;
};

// Held-out log-likelihood for a mixture model with per-user Dirichlet prior
// alpha (U_test x G) and topic-word table phi (G x W). Importance weights are
// combined in log space only.
AisResult ais_heldout(const std::vector<double>& phi, int G, int W,
                      const std::vector<double>& alpha, const Corpus& heldout,
                      const AisConfig& cfg);

// Exact log p(w | phi, alpha) by enumerating assignments; exponential in n.
double enumerate_log_marginal(const std::vector<double>& phi, int G, int W,
                              std::span<const double> alpha, std::span<const int> tokens);

struct CoherenceResult {
    std::vector<double> per_group;
    double mean = 0.0;
    size_t missing_words = 0;  // top words absent from the reference corpus
};

CoherenceResult umass_coherence(const std::vector<double>& phi, int G, int W,
                                const Corpus& reference, int top_m = 10);

struct SimilarityStats {
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    double min = 0.0;
    double max = 0.0;
    size_t pairs = 0;
};

SimilarityStats similarity_stats(std::vector<double> cosines);

struct GroupSimilarity {
    std::vector<SimilarityStats> per_group;     // aligned with input groups (singletons skipped)
    std::vector<double> all_pairs;              // pooled per-pair cosines
    std::vector<std::pair<int, double>> labeled_pairs;  // (group index, cosine)
    SimilarityStats overall;
    size_t singleton_groups = 0;
    size_t zero_vector_pairs_skipped = 0;
};

GroupSimilarity within_group_similarity(const std::vector<std::vector<int>>& groups,
                                        const std::vector<TfidfVector>& vectors);

// Shuffles users into groups with the identical size multiset.
GroupSimilarity random_baseline(const std::vector<int>& users,
                                const std::vector<size_t>& group_sizes, uint64_t seed,
                                const std::vector<TfidfVector>& vectors);

struct EvalReport {
    double heldout_total_ll = 0.0;
    double heldout_per_token_ll = 0.0;
    double heldout_stderr = 0.0;
    std::string heldout_metric;  // "ais" or "elbo"
    std::vector<double> coherence_per_group;
    double coherence_mean = 0.0;
    SimilarityStats model_similarity;
    SimilarityStats baseline_similarity;
};

void save_eval_report(const EvalReport& report, const std::filesystem::path& file);
void save_similarities_csv(const GroupSimilarity& model, const GroupSimilarity& baseline,
                           const std::filesystem::path& file);

}  // namespace cohort
