#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cohort/common.hpp"
#include "cohort/covariates.hpp"
#include "cohort/types.hpp"

namespace cohort {

struct InteractionGraph {
    struct Edge {
        int src = 0;
        int dst = 0;
        int weight = 0;
        std::vector<std::string> post_ids;
    };
    int num_nodes = 0;
    std::vector<Edge> edges;                 // sorted by (src, dst)
    std::vector<std::vector<int>> adjacency; // per node, indices into edges
    size_t dropped_replies = 0;              // replies to unknown authors
    size_t self_loops = 0;

    void build_adjacency();
    int out_degree(int node) const { return static_cast<int>(adjacency[node].size()); }
};

// One edge per ordered (replier -> original author) pair; weight = reply count.
// user_index maps author ids to node indices.
InteractionGraph build_graph(const std::vector<Post>& posts,
                             const std::unordered_map<std::string, int>& user_index);

void save_graph(const InteractionGraph& graph, const std::filesystem::path& file);
InteractionGraph load_graph(const std::filesystem::path& file);

struct Node2VecConfig {
    int dims = 64;
    int walks_per_node = 200;
    int walk_len = 30;
    int window = 10;
    double p = 1.0;   // return parameter
    double q = 1.0;   // in-out parameter
    int negatives = 5;
    int epochs = 5;
    double step_size = 0.025;  // linearly decayed
    uint64_t seed = 0;
    bool deterministic = true;  // single-threaded, bit-reproducible
    int threads = 1;
};

// Walks truncate at sinks (no teleport).
std::vector<std::vector<int>> generate_walks(const InteractionGraph& graph,
                                             const Node2VecConfig& cfg);

EmbeddingMatrix node2vec(const InteractionGraph& graph, const Node2VecConfig& cfg);

// Skip-gram training losses per epoch (non-increasing on a fixed walk corpus).
struct SgnsResult {
    EmbeddingMatrix embedding;
    std::vector<double> epoch_loss;
    std::vector<int> isolated_nodes;  // embedding from initialization only
};
SgnsResult train_sgns(const std::vector<std::vector<int>>& walks, int num_nodes,
                      const Node2VecConfig& cfg);

}  // namespace cohort
