#include "cohort/grouper.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <tuple>

#include "cohort/text.hpp"

#include <json.hpp>

namespace cohort {

using nlohmann::json;

void AssignConfig::validate() const {
    if (std::abs(w_text + w_feat - 1.0) > 1e-9)
        throw std::invalid_argument("grouper: w_text + w_feat must equal 1");
    if (min_size < 1 || min_size > max_size)
        throw std::invalid_argument("grouper: require 1 <= min_size <= max_size");
}

namespace {

double dense_cosine(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

double sparse_dense_cosine(const TfidfVector& v, std::span<const double> centroid) {
    double dot = 0.0, nc = 0.0;
    for (double c : centroid) nc += c * c;
    if (v.norm == 0.0 || nc == 0.0) return 0.0;
    for (const auto& [w, x] : v.entries) dot += x * centroid[w];
    return dot / (v.norm * std::sqrt(nc));
}

}  // namespace

TopicAssignment initial_assign(const std::vector<double>& theta, int G,
                               const std::vector<TfidfVector>& tfidf,
                               const CovariateMatrix& cov, const AssignConfig& cfg) {
    cfg.validate();
    const int U = static_cast<int>(tfidf.size());
    if (cov.rows() != U || static_cast<int>(theta.size()) != U * G)
        throw std::invalid_argument("initial_assign: misaligned inputs");
    const int W = [&] {
        int mx = 0;
        for (const auto& v : tfidf)
            for (const auto& [w, x] : v.entries) mx = std::max(mx, w + 1);
        return mx;
    }();

    TopicAssignment out;
    out.topic_of_user.assign(U, -1);
    // Seed by argmax theta, lowest index on ties.
    std::vector<std::vector<int>> seed(G);
    for (int u = 0; u < U; ++u) {
        int best = 0;
        for (int g = 1; g < G; ++g)
            if (theta[static_cast<size_t>(u) * G + g] > theta[static_cast<size_t>(u) * G + best])
                best = g;
        seed[best].push_back(u);
    }

    // Centroids: mean member TF-IDF and mean covariate vector.
    std::vector<std::vector<double>> text_centroid(G, std::vector<double>(W, 0.0));
    std::vector<std::vector<double>> feat_centroid(G, std::vector<double>(cov.dims, 0.0));
    for (int g = 0; g < G; ++g) {
        if (seed[g].empty()) continue;
        for (int u : seed[g]) {
            for (const auto& [w, x] : tfidf[u].entries) text_centroid[g][w] += x;
            for (int d = 0; d < cov.dims; ++d) feat_centroid[g][d] += cov.row(u)[d];
        }
        for (double& v : text_centroid[g]) v /= seed[g].size();
        for (double& v : feat_centroid[g]) v /= seed[g].size();
    }

    // One combined-similarity reassignment pass.
    out.members.assign(G, {});
    for (int u = 0; u < U; ++u) {
        int best = -1;
        double best_score = -2.0;
        for (int g = 0; g < G; ++g) {
            if (seed[g].empty()) continue;  // no centroid to compare against
            double score = cfg.w_text * sparse_dense_cosine(tfidf[u], text_centroid[g]) +
                           cfg.w_feat * dense_cosine(std::span<const double>(cov.row(u), cov.dims),
                                                     feat_centroid[g]);
            if (score > best_score) {
                best_score = score;
                best = g;
            }
        }
        if (best >= 0) {
            out.topic_of_user[u] = best;
            out.members[best].push_back(u);
        }
    }
    for (int g = 0; g < G; ++g)
        if (out.members[g].empty()) out.dropped_topics.push_back(g);
    return out;
}

namespace {

double sqdist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// Min-cost assignment of points to clusters with per-cluster capacity, via
// successive shortest augmenting paths (Bellman-Ford; costs are squared
// distances). Used for the exact_transport option on small topics.
std::vector<int> transport_assign(const std::vector<std::vector<double>>& cost,
                                  std::vector<int> capacity) {
    const int n = static_cast<int>(cost.size());
    const int k = static_cast<int>(capacity.size());
    std::vector<int> assign(n, -1);
    std::vector<int> load(k, 0);
    for (int iter = 0; iter < n; ++iter) {
        // shortest path from any unassigned point over alternating chains
        // (simple version: each augmentation assigns exactly one point, possibly
        // relocating others via Bellman-Ford over the residual graph)
        // Residual nodes: points 0..n-1, clusters n..n+k-1
        const int V = n + k;
        std::vector<double> dist(V, 1e300);
        std::vector<int> prev_edge(V, -1);
        struct E {
            int from, to, point, cluster;
            double w;
        };
        std::vector<E> edges;
        for (int p = 0; p < n; ++p) {
            if (assign[p] == -1) dist[p] = 0.0;
            for (int c = 0; c < k; ++c) {
                if (assign[p] == c) {
                    edges.push_back({n + c, p, p, -1, -cost[p][c]});  // unassign
                } else {
                    edges.push_back({p, n + c, p, c, cost[p][c]});  // assign
                }
            }
        }
        bool changed = true;
        for (int round = 0; round < V && changed; ++round) {
            changed = false;
            for (size_t e = 0; e < edges.size(); ++e) {
                const auto& ed = edges[e];
                if (dist[ed.from] + ed.w < dist[ed.to] - 1e-12) {
                    dist[ed.to] = dist[ed.from] + ed.w;
                    prev_edge[ed.to] = static_cast<int>(e);
                    changed = true;
                }
            }
        }
        int best_c = -1;
        double best_d = 1e300;
        for (int c = 0; c < k; ++c)
            if (load[c] < capacity[c] && dist[n + c] < best_d) {
                best_d = dist[n + c];
                best_c = c;
            }
        if (best_c < 0) break;
        // walk back the augmenting path, flipping assignments
        int node = n + best_c;
        while (prev_edge[node] != -1) {
            const auto& ed = edges[prev_edge[node]];
            if (ed.cluster >= 0)
                assign[ed.point] = ed.cluster;
            node = ed.from;
            if (node < n && assign[node] == -1) break;
            if (node < n) continue;
        }
        load.assign(k, 0);
        for (int p = 0; p < n; ++p)
            if (assign[p] >= 0) load[assign[p]]++;
    }
    return assign;
}

}  // namespace

ConstrainedClusters constrained_kmeans(const std::vector<std::vector<double>>& features,
                                       const AssignConfig& cfg, uint64_t seed) {
    cfg.validate();
    ConstrainedClusters out;
    const int n = static_cast<int>(features.size());
    if (n == 0) return out;
    if (n < cfg.min_size) {
        out.clusters.push_back({});
        for (int i = 0; i < n; ++i) out.clusters[0].push_back(i);
        out.undersized_remainder = true;
        return out;
    }
    const int k = (n + cfg.max_size - 1) / cfg.max_size;
    const int d = static_cast<int>(features[0].size());
    if (k == 1) {
        out.clusters.push_back({});
        for (int i = 0; i < n; ++i) out.clusters[0].push_back(i);
        return out;
    }

    Rng rng(seed);
    // k-means++ seeding
    std::vector<std::vector<double>> centroids;
    std::uniform_int_distribution<int> first(0, n - 1);
    centroids.push_back(features[first(rng)]);
    std::vector<double> d2(n);
    while (static_cast<int>(centroids.size()) < k) {
        for (int i = 0; i < n; ++i) {
            double best = 1e300;
            for (const auto& c : centroids) best = std::min(best, sqdist(features[i], c));
            d2[i] = best;
        }
        centroids.push_back(features[sample_discrete(d2, rng)]);
    }

    std::vector<int> assign(n, -1);
    std::vector<int> best_assign;
    double best_wcss = 1e300;
    for (int iter = 0; iter < 50; ++iter) {
        // capacity-respecting assignment
        std::vector<int> load(k, 0);
        std::fill(assign.begin(), assign.end(), -1);
        if (cfg.exact_transport && n <= 300) {
            std::vector<std::vector<double>> cost(n, std::vector<double>(k));
            for (int i = 0; i < n; ++i)
                for (int c = 0; c < k; ++c) cost[i][c] = sqdist(features[i], centroids[c]);
            assign = transport_assign(cost, std::vector<int>(k, cfg.max_size));
            for (int i = 0; i < n; ++i)
                if (assign[i] >= 0) load[assign[i]]++;
        } else {
            // greedy: globally closest (point, centroid) pairs first
            std::vector<std::tuple<double, int, int>> pairs;
            pairs.reserve(static_cast<size_t>(n) * k);
            for (int i = 0; i < n; ++i)
                for (int c = 0; c < k; ++c)
                    pairs.emplace_back(sqdist(features[i], centroids[c]), i, c);
            std::sort(pairs.begin(), pairs.end());
            int assigned = 0;
            for (const auto& [dist, i, c] : pairs) {
                if (assign[i] != -1 || load[c] >= cfg.max_size) continue;
                assign[i] = c;
                load[c]++;
                if (++assigned == n) break;
            }
        }
        for (int i = 0; i < n; ++i)
            if (assign[i] < 0) {  // capacity exhausted for preferred clusters
                int c = 0;
                while (load[c] >= cfg.max_size) ++c;
                assign[i] = c;
                load[c]++;
            }

        double wcss = 0.0;
        for (int i = 0; i < n; ++i) wcss += sqdist(features[i], centroids[assign[i]]);
        if (wcss >= best_wcss - 1e-12) break;
        best_wcss = wcss;
        best_assign = assign;
        out.wcss_trace.push_back(wcss);

        for (auto& c : centroids) std::fill(c.begin(), c.end(), 0.0);
        std::vector<int> counts(k, 0);
        for (int i = 0; i < n; ++i) {
            for (int t = 0; t < d; ++t) centroids[assign[i]][t] += features[i][t];
            counts[assign[i]]++;
        }
        for (int c = 0; c < k; ++c)
            if (counts[c] > 0)
                for (int t = 0; t < d; ++t) centroids[c][t] /= counts[c];
    }
    assign = best_assign.empty() ? assign : best_assign;

    // Repair pass: pull nearest points into undersized clusters from clusters
    // that can spare them.
    std::vector<int> load(k, 0);
    for (int i = 0; i < n; ++i) load[assign[i]]++;
    for (int guard = 0; guard < n * k; ++guard) {
        int small = -1;
        for (int c = 0; c < k; ++c)
            if (load[c] < cfg.min_size) {
                small = c;
                break;
            }
        if (small < 0) break;
        // centroid of the undersized cluster
        std::vector<double> centroid(d, 0.0);
        if (load[small] > 0) {
            for (int i = 0; i < n; ++i)
                if (assign[i] == small)
                    for (int t = 0; t < d; ++t) centroid[t] += features[i][t];
            for (double& v : centroid) v /= load[small];
        }
        int best_i = -1;
        double best_d = 1e300;
        for (int i = 0; i < n; ++i) {
            if (assign[i] == small) continue;
            if (load[assign[i]] <= cfg.min_size) continue;  // donor must stay feasible
            double dist = sqdist(features[i], centroid);
            if (dist < best_d) {
                best_d = dist;
                best_i = i;
            }
        }
        if (best_i < 0) {
            // no donor above min: relax to any donor that keeps size >= 1
            for (int i = 0; i < n; ++i) {
                if (assign[i] == small || load[assign[i]] <= 1) continue;
                double dist = sqdist(features[i], centroid);
                if (dist < best_d) {
                    best_d = dist;
                    best_i = i;
                }
            }
        }
        if (best_i < 0) break;
        load[assign[best_i]]--;
        assign[best_i] = small;
        load[small]++;
    }

    out.clusters.assign(k, {});
    for (int i = 0; i < n; ++i) out.clusters[assign[i]].push_back(i);
    // drop empties (possible when repair emptied a donor)
    out.clusters.erase(std::remove_if(out.clusters.begin(), out.clusters.end(),
                                      [](const auto& c) { return c.empty(); }),
                       out.clusters.end());
    for (const auto& c : out.clusters)
        if (static_cast<int>(c.size()) < cfg.min_size) out.undersized_remainder = true;
    return out;
}

SupportGroupSet form_groups(const std::vector<double>& theta, int G,
                            const std::vector<TfidfVector>& tfidf, const CovariateMatrix& cov,
                            const AssignConfig& cfg, uint64_t seed) {
    auto topics = initial_assign(theta, G, tfidf, cov, cfg);
    SupportGroupSet set;
    int cluster_counter = 0;

    // tf-idf random projection appended to covariates as clustering features
    const int proj_dims = 32;
    int W = 0;
    for (const auto& v : tfidf)
        for (const auto& [w, x] : v.entries) W = std::max(W, w + 1);
    Rng proj_rng(seed ^ 0xabcdef12345ull);
    std::vector<double> proj(static_cast<size_t>(W) * proj_dims);
    std::normal_distribution<double> norm01(0.0, 1.0 / std::sqrt(proj_dims));
    for (auto& v : proj) v = norm01(proj_rng);

    for (int g = 0; g < G; ++g) {
        const auto& members = topics.members[g];
        if (members.empty()) continue;
        std::vector<std::vector<double>> features(members.size());
        for (size_t i = 0; i < members.size(); ++i) {
            int u = members[i];
            features[i].assign(cov.dims + proj_dims, 0.0);
            for (int dd = 0; dd < cov.dims; ++dd) features[i][dd] = cov.row(u)[dd];
            for (const auto& [w, x] : tfidf[u].entries)
                for (int p = 0; p < proj_dims; ++p)
                    features[i][cov.dims + p] += x * proj[static_cast<size_t>(w) * proj_dims + p];
        }
        // standardize columns over the topic's members
        const int FD = cov.dims + proj_dims;
        for (int dd = 0; dd < FD; ++dd) {
            double mean = 0.0;
            for (const auto& f : features) mean += f[dd];
            mean /= features.size();
            double var = 0.0;
            for (const auto& f : features) var += (f[dd] - mean) * (f[dd] - mean);
            var /= features.size();
            double sd = var > 1e-12 ? std::sqrt(var) : 0.0;
            for (auto& f : features) f[dd] = sd > 0.0 ? (f[dd] - mean) / sd : 0.0;
        }

        auto clusters = constrained_kmeans(features, cfg, seed + 1000 + g);
        for (const auto& cluster : clusters.clusters) {
            SupportGroup grp;
            grp.topic_id = g;
            grp.group_id =
                "Support_group" + std::to_string(g) + "-" + std::to_string(cluster_counter++);
            for (int idx : cluster) grp.members.push_back(members[idx]);
            grp.undersized = static_cast<int>(grp.members.size()) < cfg.min_size;
            std::vector<double> cosines;
            for (size_t i = 0; i < grp.members.size(); ++i)
                for (size_t j = i + 1; j < grp.members.size(); ++j)
                    cosines.push_back(cosine(tfidf[grp.members[i]], tfidf[grp.members[j]]));
            std::sort(cosines.begin(), cosines.end());
            grp.median_similarity = cosines.empty() ? 0.0 : median_of_sorted(cosines);
            set.groups.push_back(std::move(grp));
        }
    }
    for (int u = 0; u < static_cast<int>(tfidf.size()); ++u)
        if (topics.topic_of_user[u] < 0) set.unassigned.emplace_back(u, "no nonempty topic centroid");
    return set;
}

std::vector<ForumRow> forum_analysis(const Corpus& corpus, const SupportGroupSet& groups,
                                     const std::vector<TfidfVector>& vectors) {
    std::map<std::string, std::vector<int>> forums;
    for (int u = 0; u < corpus.num_users(); ++u)
        if (!corpus.forums[u].empty()) forums[corpus.forums[u]].push_back(u);

    auto median_sim = [&](const std::vector<int>& users) -> std::optional<double> {
        if (users.size() < 2) return std::nullopt;
        std::vector<double> cosines;
        for (size_t i = 0; i < users.size(); ++i)
            for (size_t j = i + 1; j < users.size(); ++j)
                cosines.push_back(cosine(vectors[users[i]], vectors[users[j]]));
        std::sort(cosines.begin(), cosines.end());
        return median_of_sorted(cosines);
    };

    std::vector<ForumRow> rows;
    for (const auto& [forum, users] : forums) {
        ForumRow row;
        row.forum = forum;
        row.users = users.size();
        row.median_similarity = median_sim(users);
        std::set<int> in_forum(users.begin(), users.end());
        for (const auto& grp : groups.groups) {
            std::vector<int> inter;
            for (int u : grp.members)
                if (in_forum.count(u)) inter.push_back(u);
            if (inter.empty()) continue;
            ForumSubgroupRow sub;
            sub.group_id = grp.group_id;
            sub.size = inter.size();
            sub.median_similarity = median_sim(inter);
            row.subgroups.push_back(std::move(sub));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void save_forum_report(const std::vector<ForumRow>& rows, const std::filesystem::path& file) {
    std::ofstream out(file);
    out << "forum,forum_users,forum_median_similarity,group_id,subgroup_size,subgroup_median_similarity\n";
    for (const auto& row : rows) {
        auto fmt = [](const std::optional<double>& v) {
            return v ? std::to_string(*v) : std::string("null");
        };
        if (row.subgroups.empty()) {
            out << row.forum << ',' << row.users << ',' << fmt(row.median_similarity) << ",,,\n";
        }
        for (const auto& sub : row.subgroups) {
            out << row.forum << ',' << row.users << ',' << fmt(row.median_similarity) << ','
                << sub.group_id << ',' << sub.size << ',' << fmt(sub.median_similarity) << '\n';
        }
    }
}

std::vector<int> stratified_sample(const std::vector<int>& members,
                                   const std::vector<UserProfile>& profiles, int k,
                                   uint64_t seed) {
    if (members.empty()) throw std::invalid_argument("stratified_sample: empty group");
    if (static_cast<int>(members.size()) <= k) return members;

    std::map<std::pair<int, int>, std::vector<int>> strata;
    for (int u : members)
        strata[{static_cast<int>(profiles[u].gender),
                static_cast<int>(profiles[u].age_bucket)}].push_back(u);

    // Largest-remainder proportional allocation.
    const double n = static_cast<double>(members.size());
    std::vector<std::pair<double, std::pair<int, int>>> remainders;  // (frac, key)
    std::map<std::pair<int, int>, int> alloc;
    int used = 0;
    for (const auto& [key, users] : strata) {
        double exact = k * users.size() / n;
        int base = static_cast<int>(exact);
        alloc[key] = base;
        used += base;
        remainders.push_back({exact - base, key});
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (int i = 0; used < k && i < static_cast<int>(remainders.size()); ++i) {
        auto key = remainders[i].second;
        if (alloc[key] < static_cast<int>(strata[key].size())) {
            alloc[key]++;
            used++;
        }
    }
    // spill any leftover (strata exhausted) into whichever strata have room
    for (auto& [key, users] : strata) {
        while (used < k && alloc[key] < static_cast<int>(users.size())) {
            alloc[key]++;
            used++;
        }
    }

    Rng rng(seed);
    std::vector<int> out;
    for (auto& [key, users] : strata) {
        std::shuffle(users.begin(), users.end(), rng);
        for (int i = 0; i < alloc[key]; ++i) out.push_back(users[i]);
    }
    std::sort(out.begin(), out.end());
    return out;
}

void save_groups_jsonl(const SupportGroupSet& set, const Corpus& corpus,
                       const std::filesystem::path& file) {
    std::ofstream out(file);
    for (const auto& grp : set.groups) {
        json j;
        j["group_id"] = grp.group_id;
        j["topic_id"] = grp.topic_id;
        std::vector<std::string> ids;
        for (int u : grp.members) ids.push_back(corpus.users[u]);
        j["members"] = ids;
        j["size"] = grp.members.size();
        j["median_similarity"] = grp.median_similarity;
        j["undersized"] = grp.undersized;
        out << j.dump() << '\n';
    }
}

SupportGroupSet load_groups_jsonl(const Corpus& corpus, const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("missing " + file.string());
    SupportGroupSet set;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        SupportGroup grp;
        grp.group_id = j.at("group_id").get<std::string>();
        grp.topic_id = j.at("topic_id").get<int>();
        for (const auto& id : j.at("members")) {
            auto it = corpus.user_index.find(id.get<std::string>());
            if (it == corpus.user_index.end())
                throw std::runtime_error("groups.jsonl: unknown user " + id.get<std::string>());
            grp.members.push_back(it->second);
        }
        grp.median_similarity = j.value("median_similarity", 0.0);
        grp.undersized = j.value("undersized", false);
        set.groups.push_back(std::move(grp));
    }
    return set;
}

}  // namespace cohort
