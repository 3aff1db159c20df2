#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cohort/common.hpp"
#include "cohort/covariates.hpp"
#include "cohort/types.hpp"

namespace cohort {

struct AssignConfig {
    double w_text = 0.7;
    double w_feat = 0.3;
    int min_size = 10;
    int max_size = 30;
    bool exact_transport = false;  // exact capacity assignment for small topics

    void validate() const;
};

struct SupportGroup {
    std::string group_id;  // "Support_group<topic>-<cluster>"
    int topic_id = 0;
    std::vector<int> members;  // user indices
    bool undersized = false;   // flagged remainder below min_size
    double median_similarity = 0.0;
};

struct SupportGroupSet {
    std::vector<SupportGroup> groups;
    std::vector<std::pair<int, std::string>> unassigned;  // (user, reason)
};

// Topic-level assignment: argmax theta seed, centroid build, one combined
// cosine reassignment pass (w_text / w_feat).
struct TopicAssignment {
    std::vector<int> topic_of_user;         // -1 for unassignable users
    std::vector<std::vector<int>> members;  // per topic
    std::vector<int> dropped_topics;
};

TopicAssignment initial_assign(const std::vector<double>& theta, int G,
                               const std::vector<TfidfVector>& tfidf,
                               const CovariateMatrix& cov, const AssignConfig& cfg);

// Size-constrained K-Means over one topic's members. Feature rows are dense
// per-member vectors, already standardized. Emits clusters with sizes in
// [min_size, max_size], or a single flagged undersized group.
struct ConstrainedClusters {
    std::vector<std::vector<int>> clusters;  // member indices into `members`
    bool undersized_remainder = false;
    std::vector<double> wcss_trace;          // non-increasing across iterations
};

ConstrainedClusters constrained_kmeans(const std::vector<std::vector<double>>& features,
                                       const AssignConfig& cfg, uint64_t seed);

// Full pipeline: topic assignment then per-topic size-constrained refinement.
SupportGroupSet form_groups(const std::vector<double>& theta, int G,
                            const std::vector<TfidfVector>& tfidf, const CovariateMatrix& cov,
                            const AssignConfig& cfg, uint64_t seed);

struct ForumSubgroupRow {
    std::string group_id;
    size_t size = 0;  // members of this group inside the forum
    std::optional<double> median_similarity;
};

struct ForumRow {
    std::string forum;
    size_t users = 0;
    std::optional<double> median_similarity;  // null when < 2 users
    std::vector<ForumSubgroupRow> subgroups;
};

std::vector<ForumRow> forum_analysis(const Corpus& corpus, const SupportGroupSet& groups,
                                     const std::vector<TfidfVector>& vectors);

void save_forum_report(const std::vector<ForumRow>& rows, const std::filesystem::path& file);

// Proportional stratified sample over gender x age_bucket with largest-remainder
// rounding; returns all members when the group is not larger than k.
std::vector<int> stratified_sample(const std::vector<int>& members,
                                   const std::vector<UserProfile>& profiles, int k, uint64_t seed);

void save_groups_jsonl(const SupportGroupSet& set, const Corpus& corpus,
                       const std::filesystem::path& file);
SupportGroupSet load_groups_jsonl(const Corpus& corpus, const std::filesystem::path& file);

}  // namespace cohort
