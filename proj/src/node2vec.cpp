#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <numeric>

#include "cohort/graph.hpp"

namespace cohort {

namespace {

// Vose alias table for O(1) weighted sampling.
struct AliasTable {
    std::vector<double> prob;
    std::vector<int> alias;

    explicit AliasTable(std::span<const double> w) {
        const int n = static_cast<int>(w.size());
        prob.resize(n);
        alias.resize(n);
        double total = std::accumulate(w.begin(), w.end(), 0.0);
        std::vector<double> scaled(n);
        for (int i = 0; i < n; ++i) scaled[i] = w[i] * n / total;
        std::vector<int> small, large;
        for (int i = 0; i < n; ++i) (scaled[i] < 1.0 ? small : large).push_back(i);
        while (!small.empty() && !large.empty()) {
            int s = small.back(), l = large.back();
            small.pop_back();
            large.pop_back();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] = scaled[l] + scaled[s] - 1.0;
            (scaled[l] < 1.0 ? small : large).push_back(l);
        }
        for (int i : large) prob[i] = 1.0;
        for (int i : small) prob[i] = 1.0;
    }

    int sample(Rng& rng) const {
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        int i = static_cast<int>(unif(rng) * prob.size());
        i = std::min(i, static_cast<int>(prob.size()) - 1);
        return unif(rng) < prob[i] ? i : alias[i];
    }
};

bool has_edge(const InteractionGraph& graph, int from, int to) {
    for (int e : graph.adjacency[from])
        if (graph.edges[e].dst == to) return true;
    return false;
}

}  // namespace

std::vector<std::vector<int>> generate_walks(const InteractionGraph& graph,
                                             const Node2VecConfig& cfg) {
    const int N = graph.num_nodes;
    const bool first_order = cfg.p == 1.0 && cfg.q == 1.0;

    // Per-node alias tables over outgoing edge weights.
    std::vector<std::unique_ptr<AliasTable>> tables(N);
    for (int v = 0; v < N; ++v) {
        if (graph.adjacency[v].empty()) continue;
        std::vector<double> w;
        for (int e : graph.adjacency[v]) w.push_back(graph.edges[e].weight);
        tables[v] = std::make_unique<AliasTable>(w);
    }

    std::vector<std::vector<int>> walks;
    walks.reserve(static_cast<size_t>(N) * cfg.walks_per_node);
    std::vector<size_t> offsets(N);
    for (int v = 0; v < N; ++v) {
        offsets[v] = walks.size();
        walks.resize(walks.size() + cfg.walks_per_node);
    }

    auto walk_from = [&](int start, Rng& rng) {
        std::vector<int> walk{start};
        int prev = -1;
        while (static_cast<int>(walk.size()) < cfg.walk_len) {
            int cur = walk.back();
            const auto& adj = graph.adjacency[cur];
            if (adj.empty()) break;  // sink: truncate
            int next;
            if (first_order || prev < 0) {
                next = graph.edges[adj[tables[cur]->sample(rng)]].dst;
            } else {
                std::vector<double> w(adj.size());
                for (size_t i = 0; i < adj.size(); ++i) {
                    const auto& e = graph.edges[adj[i]];
                    double bias;
                    if (e.dst == prev)
                        bias = 1.0 / cfg.p;
                    else if (has_edge(graph, prev, e.dst))
                        bias = 1.0;
                    else
                        bias = 1.0 / cfg.q;
                    w[i] = e.weight * bias;
                }
                next = graph.edges[adj[sample_discrete(w, rng)]].dst;
            }
            prev = cur;
            walk.push_back(next);
        }
        return walk;
    };

    // Per-start-node seeding keeps walks deterministic under any thread count.
    int threads = cfg.deterministic ? cfg.threads : std::max(1, cfg.threads);
    parallel_for(static_cast<size_t>(N), threads, [&](size_t v) {
        Rng rng(cfg.seed * 0x9e3779b97f4a7c15ull + v + 1);
        for (int k = 0; k < cfg.walks_per_node; ++k)
            walks[offsets[v] + k] = walk_from(static_cast<int>(v), rng);
    });
    return walks;
}

SgnsResult train_sgns(const std::vector<std::vector<int>>& walks, int num_nodes,
                      const Node2VecConfig& cfg) {
    const int d = cfg.dims;
    SgnsResult res;
    res.embedding.dims = d;
    res.embedding.data.assign(static_cast<size_t>(num_nodes) * d, 0.0f);
    std::vector<float> out_vec(static_cast<size_t>(num_nodes) * d, 0.0f);

    Rng init_rng(cfg.seed + 17);
    std::uniform_real_distribution<float> init(-0.5f / d, 0.5f / d);
    for (auto& v : res.embedding.data) v = init(init_rng);

    // Node frequencies over the walk corpus; negatives drawn from freq^0.75.
    std::vector<double> freq(num_nodes, 0.0);
    std::vector<char> in_context(num_nodes, 0);  // appears in a walk with >= 2 nodes
    size_t total_positions = 0;
    for (const auto& w : walks) {
        for (int n : w) {
            freq[n] += 1.0;
            if (w.size() >= 2) in_context[n] = 1;
        }
        total_positions += w.size();
    }
    for (int v = 0; v < num_nodes; ++v)
        if (!in_context[v]) res.isolated_nodes.push_back(v);
    std::vector<double> neg_w(num_nodes);
    for (int v = 0; v < num_nodes; ++v) neg_w[v] = std::pow(freq[v], 0.75);
    double neg_total = std::accumulate(neg_w.begin(), neg_w.end(), 0.0);
    if (neg_total == 0.0) return res;  // empty walk corpus
    AliasTable neg_table(neg_w);

    auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };

    const size_t total_steps = static_cast<size_t>(cfg.epochs) * total_positions;
    std::atomic<size_t> step_counter{0};

    auto train_walk = [&](const std::vector<int>& walk, Rng& rng, double& loss_acc) {
        std::uniform_int_distribution<int> win(1, cfg.window);
        for (size_t i = 0; i < walk.size(); ++i) {
            size_t done = step_counter.fetch_add(1);
            double lr = cfg.step_size * std::max(1e-4, 1.0 - static_cast<double>(done) / total_steps);
            int c = win(rng);  // dynamic window, word2vec-style
            int center = walk[i];
            float* vin = res.embedding.row(center);
            for (int off = -c; off <= c; ++off) {
                if (off == 0) continue;
                long j = static_cast<long>(i) + off;
                if (j < 0 || j >= static_cast<long>(walk.size())) continue;
                int context = walk[j];
                std::vector<float> grad_in(d, 0.0f);
                for (int k = 0; k <= cfg.negatives; ++k) {
                    int target;
                    double label;
                    if (k == 0) {
                        target = context;
                        label = 1.0;
                    } else {
                        target = neg_table.sample(rng);
                        if (target == context) continue;
                        label = 0.0;
                    }
                    float* vout = out_vec.data() + static_cast<size_t>(target) * d;
                    double dot = 0.0;
                    for (int t = 0; t < d; ++t) dot += vin[t] * vout[t];
                    double pred = sigmoid(dot);
                    loss_acc += label == 1.0 ? -std::log(std::max(pred, 1e-10))
                                             : -std::log(std::max(1.0 - pred, 1e-10));
                    double g = (label - pred) * lr;
                    for (int t = 0; t < d; ++t) {
                        grad_in[t] += static_cast<float>(g * vout[t]);
                        vout[t] += static_cast<float>(g * vin[t]);
                    }
                }
                for (int t = 0; t < d; ++t) vin[t] += grad_in[t];
            }
        }
    };

    // Objective on a fixed (center, context, negatives) sample stream; used for
    // the per-epoch trace so epochs are compared on identical samples.
    auto eval_loss = [&] {
        Rng rng(cfg.seed + 2000);
        std::uniform_int_distribution<int> win(1, cfg.window);
        double loss = 0.0;
        for (const auto& walk : walks) {
            for (size_t i = 0; i < walk.size(); ++i) {
                int c = win(rng);
                const float* vin = res.embedding.row(walk[i]);
                for (int off = -c; off <= c; ++off) {
                    if (off == 0) continue;
                    long j = static_cast<long>(i) + off;
                    if (j < 0 || j >= static_cast<long>(walk.size())) continue;
                    int context = walk[j];
                    for (int k = 0; k <= cfg.negatives; ++k) {
                        int target = k == 0 ? context : neg_table.sample(rng);
                        if (k > 0 && target == context) continue;
                        const float* vout = out_vec.data() + static_cast<size_t>(target) * d;
                        double dot = 0.0;
                        for (int t = 0; t < d; ++t) dot += vin[t] * vout[t];
                        double pred = sigmoid(dot);
                        loss += k == 0 ? -std::log(std::max(pred, 1e-10))
                                       : -std::log(std::max(1.0 - pred, 1e-10));
                    }
                }
            }
        }
        return loss;
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss = 0.0;
        if (cfg.deterministic || cfg.threads <= 1) {
            Rng rng(cfg.seed + 1000);
            for (const auto& walk : walks) train_walk(walk, rng, loss);
        } else {
            // hogwild: statistically sound, not bit-reproducible
            std::vector<double> losses(cfg.threads, 0.0);
            parallel_for(walks.size(), cfg.threads, [&](size_t i) {
                thread_local Rng rng(cfg.seed + 1000 + epoch + std::hash<std::thread::id>{}(std::this_thread::get_id()));
                double l = 0.0;
                train_walk(walks[i], rng, l);
                losses[i % cfg.threads] += l;
            });
            for (double l : losses) loss += l;
        }
        (void)loss;
        res.epoch_loss.push_back(eval_loss());
    }
    return res;
}

EmbeddingMatrix node2vec(const InteractionGraph& graph, const Node2VecConfig& cfg) {
    if (graph.num_nodes < 1) throw std::invalid_argument("node2vec: graph has no nodes");
    auto walks = generate_walks(graph, cfg);
    return train_sgns(walks, graph.num_nodes, cfg).embedding;
}

}  // namespace cohort
