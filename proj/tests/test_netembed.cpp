#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "cohort/common.hpp"
#include "cohort/covariates.hpp"
#include "cohort/graph.hpp"

using namespace cohort;

namespace {

Post reply(const std::string& id, const std::string& from, const std::string& to) {
    Post p;
    p.post_id = id;
    p.author_id = from;
    p.reply_to_author_id = to;
    return p;
}

std::unordered_map<std::string, int> index_of(const std::vector<std::string>& users) {
    std::unordered_map<std::string, int> idx;
    for (size_t i = 0; i < users.size(); ++i) idx[users[i]] = static_cast<int>(i);
    return idx;
}

double embedding_cosine(const EmbeddingMatrix& emb, int a, int b) {
    double dot = 0, na = 0, nb = 0;
    for (int d = 0; d < emb.dims; ++d) {
        dot += emb.row(a)[d] * emb.row(b)[d];
        na += emb.row(a)[d] * emb.row(a)[d];
        nb += emb.row(b)[d] * emb.row(b)[d];
    }
    return dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("two replies produce one edge of weight 2 with both post ids") {
    auto idx = index_of({"A", "B"});
    std::vector<Post> posts = {reply("p1", "A", "B"), reply("p2", "A", "B")};
    auto graph = build_graph(posts, idx);
    REQUIRE(graph.edges.size() == 1);
    CHECK(graph.edges[0].src == idx["A"]);
    CHECK(graph.edges[0].dst == idx["B"]);
    CHECK(graph.edges[0].weight == 2);
    CHECK(graph.edges[0].post_ids == std::vector<std::string>{"p1", "p2"});
}

TEST_CASE("no replies gives nodes and zero edges") {
    auto idx = index_of({"A", "B", "C"});
    std::vector<Post> posts(1);
    posts[0].post_id = "p1";
    posts[0].author_id = "A";
    auto graph = build_graph(posts, idx);
    CHECK(graph.num_nodes == 3);
    CHECK(graph.edges.empty());
}

TEST_CASE("reply to unknown author is dropped and counted") {
    auto idx = index_of({"A"});
    std::vector<Post> posts = {reply("p1", "A", "ghost")};
    auto graph = build_graph(posts, idx);
    CHECK(graph.edges.empty());
    CHECK(graph.dropped_replies == 1);
}

TEST_CASE("graph build matches brute-force pair counting and is order-independent") {
    std::vector<std::string> users;
    for (int i = 0; i < 20; ++i) users.push_back("u" + std::to_string(i));
    auto idx = index_of(users);
    Rng rng(9);
    std::vector<Post> posts;
    for (int i = 0; i < 500; ++i)
        posts.push_back(reply("p" + std::to_string(i), users[rng() % 20], users[rng() % 20]));

    std::map<std::pair<int, int>, int> brute;
    for (const auto& p : posts) brute[{idx[p.author_id], idx[*p.reply_to_author_id]}]++;

    auto graph = build_graph(posts, idx);
    REQUIRE(graph.edges.size() == brute.size());
    for (const auto& e : graph.edges) CHECK(e.weight == brute.at({e.src, e.dst}));

    std::vector<Post> shuffled = posts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    auto graph2 = build_graph(shuffled, idx);
    REQUIRE(graph2.edges.size() == graph.edges.size());
    for (size_t i = 0; i < graph.edges.size(); ++i) {
        CHECK(graph.edges[i].src == graph2.edges[i].src);
        CHECK(graph.edges[i].dst == graph2.edges[i].dst);
        CHECK(graph.edges[i].weight == graph2.edges[i].weight);
    }
}

TEST_CASE("self replies are allowed but flagged") {
    auto idx = index_of({"A"});
    std::vector<Post> posts = {reply("p1", "A", "A")};
    auto graph = build_graph(posts, idx);
    REQUIRE(graph.edges.size() == 1);
    CHECK(graph.self_loops == 1);
}

TEST_CASE("p=q=1 walk transitions match edge-weight ratios") {
    // node 0 -> 1 (weight 3), 0 -> 2 (weight 1); expect 75/25 next-node split
    auto idx = index_of({"a", "b", "c"});
    std::vector<Post> posts;
    int pid = 0;
    for (int i = 0; i < 3; ++i) posts.push_back(reply("p" + std::to_string(pid++), "a", "b"));
    posts.push_back(reply("p" + std::to_string(pid++), "a", "c"));
    // return edges so walks of length 2 keep restarting from node 0's choices
    posts.push_back(reply("p" + std::to_string(pid++), "b", "a"));
    posts.push_back(reply("p" + std::to_string(pid++), "c", "a"));
    auto graph = build_graph(posts, idx);

    Node2VecConfig cfg;
    cfg.walks_per_node = 40000;
    cfg.walk_len = 3;
    cfg.p = 1.0;
    cfg.q = 1.0;
    cfg.seed = 1;
    auto walks = generate_walks(graph, cfg);
    size_t to_b = 0, to_c = 0;
    for (const auto& w : walks) {
        for (size_t i = 0; i + 1 < w.size(); ++i) {
            if (w[i] == 0 && w[i + 1] == 1) ++to_b;
            if (w[i] == 0 && w[i + 1] == 2) ++to_c;
        }
    }
    double frac_b = static_cast<double>(to_b) / (to_b + to_c);
    CHECK(frac_b == doctest::Approx(0.75).epsilon(0.015));
}

TEST_CASE("walk corpus size and truncation at sinks") {
    // 10-node directed cycle with one sink appended
    std::vector<std::string> users;
    for (int i = 0; i < 10; ++i) users.push_back("u" + std::to_string(i));
    auto idx = index_of(users);
    std::vector<Post> posts;
    for (int i = 0; i < 9; ++i)
        posts.push_back(reply("p" + std::to_string(i), users[i], users[i + 1]));
    // node 9 is a sink
    auto graph = build_graph(posts, idx);

    Node2VecConfig cfg;
    cfg.walks_per_node = 200;
    cfg.walk_len = 30;
    cfg.seed = 2;
    auto walks = generate_walks(graph, cfg);
    CHECK(walks.size() == 2000);
    for (const auto& w : walks) {
        CHECK(w.size() <= 30);
        if (w.size() < 30) CHECK(graph.out_degree(w.back()) == 0);  // truncated only at sinks
    }
}

TEST_CASE("two cliques separate in embedding space; training loss non-increasing") {
    std::vector<std::string> users;
    for (int i = 0; i < 10; ++i) users.push_back("u" + std::to_string(i));
    auto idx = index_of(users);
    std::vector<Post> posts;
    int pid = 0;
    auto clique = [&](int lo, int hi) {
        for (int a = lo; a < hi; ++a)
            for (int b = lo; b < hi; ++b)
                if (a != b)
                    for (int r = 0; r < 3; ++r)
                        posts.push_back(reply("p" + std::to_string(pid++), users[a], users[b]));
    };
    clique(0, 5);
    clique(5, 10);
    auto graph = build_graph(posts, idx);

    Node2VecConfig cfg;
    cfg.dims = 16;
    cfg.walks_per_node = 30;
    cfg.walk_len = 10;
    cfg.window = 4;
    cfg.seed = 3;
    auto walks = generate_walks(graph, cfg);
    auto result = train_sgns(walks, graph.num_nodes, cfg);
    REQUIRE(static_cast<int>(result.epoch_loss.size()) == cfg.epochs);
    for (size_t e = 1; e < result.epoch_loss.size(); ++e)
        CHECK(result.epoch_loss[e] <= result.epoch_loss[e - 1] + 1e-9);

    double intra = 0, inter = 0;
    int n_intra = 0, n_inter = 0;
    for (int a = 0; a < 10; ++a)
        for (int b = a + 1; b < 10; ++b) {
            double c = embedding_cosine(result.embedding, a, b);
            if ((a < 5) == (b < 5)) {
                intra += c;
                ++n_intra;
            } else {
                inter += c;
                ++n_inter;
            }
        }
    CHECK(intra / n_intra > inter / n_inter);
}

TEST_CASE("isolated nodes are flagged and embeddings stay finite") {
    auto idx = index_of({"a", "b", "lonely"});
    std::vector<Post> posts = {reply("p1", "a", "b"), reply("p2", "b", "a")};
    auto graph = build_graph(posts, idx);
    Node2VecConfig cfg;
    cfg.dims = 8;
    cfg.walks_per_node = 10;
    cfg.walk_len = 5;
    cfg.window = 2;
    cfg.seed = 4;
    auto result = train_sgns(generate_walks(graph, cfg), graph.num_nodes, cfg);
    CHECK(result.isolated_nodes == std::vector<int>{2});
    for (int u = 0; u < 3; ++u)
        for (int d = 0; d < cfg.dims; ++d) CHECK(std::isfinite(result.embedding.row(u)[d]));
}

TEST_CASE("node2vec deterministic mode is bit-reproducible") {
    auto idx = index_of({"a", "b", "c", "d"});
    std::vector<Post> posts = {reply("p1", "a", "b"), reply("p2", "b", "c"),
                               reply("p3", "c", "d"), reply("p4", "d", "a"),
                               reply("p5", "b", "a")};
    auto graph = build_graph(posts, idx);
    Node2VecConfig cfg;
    cfg.dims = 8;
    cfg.walks_per_node = 20;
    cfg.walk_len = 8;
    cfg.window = 3;
    cfg.seed = 5;
    cfg.deterministic = true;
    auto e1 = node2vec(graph, cfg);
    auto e2 = node2vec(graph, cfg);
    CHECK(e1.data == e2.data);
}

TEST_CASE("covariate encoding: one-hot blocks, unspecified indicator, standardization") {
    std::vector<UserProfile> profiles(4);
    profiles[0] = {"u0", Gender::Female, AgeBucket::A20_29, "US", 2010};
    profiles[1] = {"u1", Gender::Male, AgeBucket::A30_39, "DE", std::nullopt};
    profiles[2] = {"u2", Gender::Unspecified, AgeBucket::Unspecified, "", std::nullopt};
    profiles[3] = {"u3", Gender::Female, AgeBucket::A20_29, "US", 2012};

    EmbeddingMatrix emb;
    emb.dims = 3;
    emb.data = {1, 2, 5, 1, 4, 5, 1, 6, 5, 1, 8, 5};  // col 0 and 2 constant
    auto cov = covariates(profiles, emb);
    REQUIRE(cov.rows() == 4);

    // each categorical block sums to exactly 1 per user
    auto block_sum = [&](int u, const std::string& prefix) {
        double s = 0.0;
        for (int d = 0; d < cov.dims; ++d)
            if (cov.column_names[d].rfind(prefix, 0) == 0) s += cov.row(u)[d];
        return s;
    };
    for (int u = 0; u < 4; ++u) {
        CHECK(block_sum(u, "gender_") == doctest::Approx(1.0));
        CHECK(block_sum(u, "age_") == doctest::Approx(1.0));
        CHECK(block_sum(u, "country_") == doctest::Approx(1.0));
    }
    // user 2 hits the explicit unspecified indicators
    for (int d = 0; d < cov.dims; ++d) {
        if (cov.column_names[d] == "gender_unspecified") CHECK(cov.row(2)[d] == 1.0);
        if (cov.column_names[d] == "age_unspecified") CHECK(cov.row(2)[d] == 1.0);
        if (cov.column_names[d] == "country_unspecified") CHECK(cov.row(2)[d] == 1.0);
    }

    // embedding columns standardized: mean 0, variance 1 (constant column -> zeros)
    for (int d = 0; d < cov.dims; ++d) {
        if (cov.column_names[d].rfind("emb_", 0) != 0) continue;
        double mean = 0.0, var = 0.0;
        for (int u = 0; u < 4; ++u) mean += cov.row(u)[d];
        mean /= 4;
        for (int u = 0; u < 4; ++u) var += (cov.row(u)[d] - mean) * (cov.row(u)[d] - mean);
        var /= 4;
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
        bool constant_col = (cov.column_names[d] == "emb_0" || cov.column_names[d] == "emb_2");
        CHECK(var == doctest::Approx(constant_col ? 0.0 : 1.0).epsilon(1e-9));
    }

    // the ablation view drops exactly the embedding block
    auto no_emb = cov.without_embedding_columns();
    CHECK(no_emb.dims == cov.dims - 3);
    for (const auto& name : no_emb.column_names) CHECK(name.rfind("emb_", 0) != 0);
}

TEST_CASE("embedding and covariate archives round-trip") {
    EmbeddingMatrix emb;
    emb.dims = 4;
    emb.data = {0.5f, -1.0f, 2.0f, 3.5f, 1.0f, 0.0f, -2.0f, 4.0f};
    auto dir = std::filesystem::temp_directory_path() / "cohort_test_emb_rt";
    std::filesystem::create_directories(dir);
    save_embedding(emb, dir / "embedding.bin");
    auto loaded = load_embedding(dir / "embedding.bin");
    CHECK(loaded.dims == emb.dims);
    CHECK(loaded.data == emb.data);

    std::vector<UserProfile> profiles(2);
    profiles[0] = {"u0", Gender::Female, AgeBucket::A20_29, "US", std::nullopt};
    profiles[1] = {"u1", Gender::Male, AgeBucket::A30_39, "DE", std::nullopt};
    auto cov = covariates(profiles, loaded);
    save_covariates(cov, dir);
    auto cov2 = load_covariates(dir);
    CHECK(cov2.dims == cov.dims);
    CHECK(cov2.data == cov.data);
    CHECK(cov2.column_names == cov.column_names);
    std::filesystem::remove_all(dir);
}
