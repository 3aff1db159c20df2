#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cohort/evalkit.hpp"
#include "cohort/text.hpp"

using namespace cohort;

namespace {

Corpus corpus_from_tokens(std::vector<std::vector<int>> tokens, int vocab) {
    Corpus c;
    for (int w = 0; w < vocab; ++w) c.vocabulary.push_back("w" + std::to_string(w));
    for (size_t u = 0; u < tokens.size(); ++u) c.users.push_back("u" + std::to_string(u));
    c.tokens = std::move(tokens);
    c.profiles.resize(c.users.size());
    c.forums.resize(c.users.size());
    c.rebuild_user_index();
    return c;
}

// G=2, W=3 mixture used by several AIS cases.
const std::vector<double> kPhi = {0.6, 0.3, 0.1,   // group 0
                                  0.1, 0.2, 0.7};  // group 1

}  // namespace

TEST_CASE("enumeration oracle matches a hand-computed single-token marginal") {
    // n = 1: p(w) = sum_g alpha_g / alpha_sum * phi_gw, exactly.
    std::vector<double> alpha = {0.4, 0.8};
    std::vector<int> tokens = {2};
    double expect = std::log(0.4 / 1.2 * 0.1 + 0.8 / 1.2 * 0.7);
    double got = enumerate_log_marginal(kPhi, 2, 3, alpha, tokens);
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("AIS estimate matches exact enumeration on a small document") {
    std::vector<double> alpha = {0.4, 0.8};
    std::vector<int> doc = {0, 2, 1, 2};
    double exact = enumerate_log_marginal(kPhi, 2, 3, alpha, doc);

    Corpus heldout = corpus_from_tokens({doc}, 3);
    AisConfig cfg;
    cfg.temps = 800;
    cfg.runs = 30;
    cfg.seed = 11;
    auto res = ais_heldout(kPhi, 2, 3, alpha, heldout, cfg);
    REQUIRE(res.users_evaluated == 1);
    CHECK(res.total_log_lik == doctest::Approx(exact).epsilon(0.02));
    CHECK(res.per_token_log_lik == doctest::Approx(exact / 4.0).epsilon(0.02));
    CHECK(res.stderr_total < 0.1);
    CHECK(res.stderr_total > 0.0);
}

TEST_CASE("geometric temperature schedule also recovers the exact marginal") {
    std::vector<double> alpha = {0.5, 0.5};
    std::vector<int> doc = {0, 1, 2};
    double exact = enumerate_log_marginal(kPhi, 2, 3, alpha, doc);
    Corpus heldout = corpus_from_tokens({doc}, 3);
    AisConfig cfg;
    cfg.temps = 800;
    cfg.runs = 30;
    cfg.seed = 13;
    cfg.schedule = AisSchedule::Geometric;
    auto res = ais_heldout(kPhi, 2, 3, alpha, heldout, cfg);
    CHECK(res.total_log_lik == doctest::Approx(exact).epsilon(0.02));
}

TEST_CASE("AIS drops OOV tokens and excludes empty or all-OOV users") {
    // user 0: one valid + one OOV token, user 1: empty, user 2: all OOV.
    Corpus heldout = corpus_from_tokens({{0, 7}, {}, {9, 8}}, 3);
    std::vector<double> alpha = {0.5, 0.5,   //
                                 0.5, 0.5,   //
                                 0.5, 0.5};
    AisConfig cfg;
    cfg.temps = 400;
    cfg.runs = 40;
    cfg.seed = 17;
    auto res = ais_heldout(kPhi, 2, 3, alpha, heldout, cfg);
    CHECK(res.users_evaluated == 1);
    CHECK(res.users_excluded == 2);
    CHECK(res.oov_dropped == 3);
    CHECK(res.tokens_evaluated == 1);
    // only the single in-vocabulary token contributes to the estimate
    double expect = std::log(0.5 * 0.6 + 0.5 * 0.1);
    CHECK(res.total_log_lik == doctest::Approx(expect).epsilon(0.03));
}

TEST_CASE("AIS totals are the sum of per-user estimates and are deterministic") {
    Corpus heldout = corpus_from_tokens({{0, 1}, {2, 2, 1}}, 3);
    std::vector<double> alpha = {0.4, 0.8,   //
                                 1.0, 0.3};
    AisConfig cfg;
    cfg.temps = 100;
    cfg.runs = 6;
    cfg.seed = 19;
    auto a = ais_heldout(kPhi, 2, 3, alpha, heldout, cfg);
    auto b = ais_heldout(kPhi, 2, 3, alpha, heldout, cfg);
    CHECK(a.per_user == b.per_user);
    double sum = 0.0;
    for (double v : a.per_user) sum += v;
    CHECK(a.total_log_lik == doctest::Approx(sum).epsilon(1e-12));
    CHECK(a.tokens_evaluated == 5);

    cfg.threads = 4;
    auto c = ais_heldout(kPhi, 2, 3, alpha, heldout, cfg);
    CHECK(c.per_user == a.per_user);  // per-(user,run) seeding is thread-count invariant
}

TEST_CASE("AIS rejects invalid configuration") {
    Corpus heldout = corpus_from_tokens({{0}}, 3);
    std::vector<double> alpha = {0.5, 0.5};
    AisConfig cfg;
    cfg.runs = 0;
    CHECK_THROWS(ais_heldout(kPhi, 2, 3, alpha, heldout, cfg));
    cfg.runs = 1;
    cfg.temps = 0;
    CHECK_THROWS(ais_heldout(kPhi, 2, 3, alpha, heldout, cfg));
}

TEST_CASE("UMass coherence matches a hand computation") {
    // docs_with: w0 = {0,1,3}, w1 = {0,2}, w2 = {2,3}
    Corpus ref = corpus_from_tokens({{0, 1}, {0}, {1, 2}, {0, 2}}, 3);
    std::vector<double> phi = {0.5, 0.3, 0.2,   // top-2: w0, w1
                               0.1, 0.2, 0.7};  // top-2: w2, w1
    auto res = umass_coherence(phi, 2, 3, ref, 2);
    double g0 = std::log((1.0 + 1.0) / 3.0);  // D(w1,w0)=1, D(w0)=3
    double g1 = std::log((1.0 + 1.0) / 2.0);  // D(w1,w2)=1, D(w2)=2
    CHECK(res.per_group[0] == doctest::Approx(g0).epsilon(1e-9));
    CHECK(res.per_group[1] == doctest::Approx(g1).epsilon(1e-9));
    CHECK(res.mean == doctest::Approx(0.5 * (g0 + g1)).epsilon(1e-9));
    CHECK(res.missing_words == 0);
}

TEST_CASE("UMass coherence with top_m=3 sums all ordered pairs") {
    Corpus ref = corpus_from_tokens({{0, 1}, {0}, {1, 2}, {0, 2}}, 3);
    std::vector<double> phi = {0.5, 0.3, 0.2, 0.1, 0.2, 0.7};
    auto res = umass_coherence(phi, 2, 3, ref, 3);
    // group 0 order: w0, w1, w2 -> pairs (w1|w0), (w2|w0), (w2|w1)
    double g0 = std::log(2.0 / 3.0) + std::log((1.0 + 1.0) / 3.0) + std::log((1.0 + 1.0) / 2.0);
    CHECK(res.per_group[0] == doctest::Approx(g0).epsilon(1e-9));
    CHECK_THROWS(umass_coherence(phi, 2, 3, ref, 1));
}

TEST_CASE("UMass counts top words missing from the reference corpus") {
    // w2 never appears in the reference; as the top word it conditions the pair.
    Corpus ref = corpus_from_tokens({{0, 1}, {0, 1}}, 3);
    std::vector<double> phi = {0.1, 0.2, 0.7};  // top-2: w2, w1 -> pair (w1 | w2)
    auto res = umass_coherence(phi, 1, 3, ref, 2);
    CHECK(res.missing_words == 1);
    CHECK(std::isfinite(res.per_group[0]));
    // joint(w1, w2) = 0, D(w2) clamped to 1 -> log((0+1)/1) = 0
    CHECK(res.per_group[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("similarity_stats computes quartiles of the sorted pair list") {
    auto s = similarity_stats({0.9, 0.1, 0.5, 0.3, 0.7});
    CHECK(s.pairs == 5);
    CHECK(s.median == doctest::Approx(0.5));
    CHECK(s.min == doctest::Approx(0.1));
    CHECK(s.max == doctest::Approx(0.9));
    CHECK(s.q1 >= s.min);
    CHECK(s.q1 <= s.median);
    CHECK(s.q3 >= s.median);
    CHECK(s.q3 <= s.max);

    auto even = similarity_stats({0.2, 0.4, 0.6, 0.8});
    CHECK(even.median == doctest::Approx(0.5));

    auto empty = similarity_stats({});
    CHECK(empty.pairs == 0);
    CHECK(empty.median == 0.0);
}

TEST_CASE("within-group similarity skips singletons and zero vectors") {
    // Three users; user 2 has an all-zero vector.
    std::vector<TfidfVector> vecs(4);
    vecs[0].entries = {{0, 1.0}};
    vecs[0].norm = 1.0;
    vecs[1].entries = {{0, 0.6}, {1, 0.8}};
    vecs[1].norm = 1.0;
    vecs[2].norm = 0.0;  // empty user
    vecs[3].entries = {{1, 1.0}};
    vecs[3].norm = 1.0;

    std::vector<std::vector<int>> groups = {{0, 1, 2}, {3}};
    auto sim = within_group_similarity(groups, vecs);
    CHECK(sim.singleton_groups == 1);
    CHECK(sim.zero_vector_pairs_skipped == 2);
    REQUIRE(sim.all_pairs.size() == 1);
    CHECK(sim.all_pairs[0] == doctest::Approx(0.6));
    CHECK(sim.overall.median == doctest::Approx(0.6));
    REQUIRE(sim.labeled_pairs.size() == 1);
    CHECK(sim.labeled_pairs[0].first == 0);
}

TEST_CASE("random baseline preserves the group-size profile and validates it") {
    std::vector<TfidfVector> vecs(6);
    for (int i = 0; i < 6; ++i) {
        vecs[i].entries = {{i % 2, 1.0}};
        vecs[i].norm = 1.0;
    }
    std::vector<int> users = {0, 1, 2, 3, 4, 5};
    auto base = random_baseline(users, {4, 2}, 23, vecs);
    // 4-member group yields C(4,2)=6 pairs, 2-member group 1 pair.
    CHECK(base.per_group.size() == 2);
    CHECK(base.per_group[0].pairs + base.per_group[1].pairs == 7);
    CHECK(base.singleton_groups == 0);

    auto again = random_baseline(users, {4, 2}, 23, vecs);
    CHECK(again.all_pairs == base.all_pairs);  // seed-deterministic

    CHECK_THROWS(random_baseline(users, {4, 3}, 23, vecs));
}

TEST_CASE("eval report JSON and similarities CSV round-trip") {
    EvalReport rep;
    rep.heldout_total_ll = -123.5;
    rep.heldout_per_token_ll = -2.47;
    rep.heldout_stderr = 0.8;
    rep.heldout_metric = "ais";
    rep.coherence_per_group = {-1.5, -2.5};
    rep.coherence_mean = -2.0;
    rep.model_similarity.median = 0.9;
    rep.model_similarity.pairs = 10;
    rep.baseline_similarity.median = 0.2;
    rep.baseline_similarity.pairs = 10;

    auto dir = std::filesystem::temp_directory_path() / "cohort_test_evalkit";
    std::filesystem::create_directories(dir);
    save_eval_report(rep, dir / "eval.json");
    std::ifstream in(dir / "eval.json");
    auto j = nlohmann::json::parse(in);
    CHECK(j["held_out_ll"]["total"].get<double>() == doctest::Approx(-123.5));
    CHECK(j["held_out_ll"]["metric"].get<std::string>() == "ais");
    CHECK(j["coherence"]["mean"].get<double>() == doctest::Approx(-2.0));
    CHECK(j["similarity"]["model"]["median"].get<double>() == doctest::Approx(0.9));
    CHECK(j["similarity"]["random_baseline"]["pairs"].get<size_t>() == 10);

    GroupSimilarity model, baseline;
    model.labeled_pairs = {{0, 0.75}, {1, 0.5}};
    baseline.labeled_pairs = {{0, 0.1}};
    save_similarities_csv(model, baseline, dir / "similarities.csv");
    std::ifstream csv(dir / "similarities.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "source,group,cosine");
    std::getline(csv, line);
    CHECK(line == "model,0,0.75");
    std::getline(csv, line);
    CHECK(line == "model,1,0.5");
    std::getline(csv, line);
    CHECK(line == "random,0,0.1");
    std::filesystem::remove_all(dir);
}
