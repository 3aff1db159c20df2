#include "cohort/pipeline.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cohort/covariates.hpp"
#include "cohort/evalkit.hpp"
#include "cohort/gdmr.hpp"
#include "cohort/graph.hpp"
#include "cohort/grouper.hpp"
#include "cohort/gstm.hpp"
#include "cohort/synth.hpp"
#include "cohort/text.hpp"

namespace cohort {

using nlohmann::json;

namespace {

constexpr const char* kStageVersion = "1";

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: bad boolean for " + key + ": " + v);
}

}  // namespace

void RunConfig::validate() const {
    if (data != "synth_community" && data != "synth_gdmr" && data != "synth_gstm" &&
        data != "ingest")
        throw ConfigError("config: unknown data stage '" + data + "'");
    if (data == "ingest" && (posts_file.empty() || profiles_file.empty()))
        throw ConfigError("config: ingest mode needs posts_file and profiles_file");
    if (!(split_frac > 0.0 && split_frac < 1.0))
        throw ConfigError("config: split_frac must lie in (0,1)");
    if (groups < 2) throw ConfigError("config: groups must be >= 2");
    if (gdmr_warm > gdmr_iters)
        throw ConfigError("config: gdmr_warm must not exceed gdmr_iters");
    if (out_dir.empty()) throw ConfigError("config: out_dir must be set");
    if (min_size < 1 || min_size > max_size)
        throw ConfigError("config: require 1 <= min_size <= max_size");
    if (std::abs(w_text + w_feat - 1.0) > 1e-9)
        throw ConfigError("config: w_text + w_feat must equal 1");
    if (ais_temps < 1 || ais_runs < 1)
        throw ConfigError("config: ais_temps and ais_runs must be >= 1");
    if (threads < 1) throw ConfigError("config: threads must be >= 1");
}

std::string RunConfig::canonical() const {
    std::ostringstream out;
    out.precision(17);
    out << "ais_runs=" << ais_runs << '\n'
        << "ais_temps=" << ais_temps << '\n'
        << "beta=" << beta << '\n'
        << "data=" << data << '\n'
        << "deterministic=" << (deterministic ? 1 : 0) << '\n'
        << "emb_dims=" << emb_dims << '\n'
        << "emb_p=" << emb_p << '\n'
        << "emb_q=" << emb_q << '\n'
        << "emb_walk_len=" << emb_walk_len << '\n'
        << "emb_walks=" << emb_walks << '\n'
        << "emb_window=" << emb_window << '\n'
        << "gdmr_iters=" << gdmr_iters << '\n'
        << "gdmr_opt_period=" << gdmr_opt_period << '\n'
        << "gdmr_warm=" << gdmr_warm << '\n'
        << "groups=" << groups << '\n'
        << "gstm_init=" << gstm_init << '\n'
        << "gstm_max_iters=" << gstm_max_iters << '\n'
        << "max_df_frac=" << max_df_frac << '\n'
        << "max_size=" << max_size << '\n'
        << "min_df=" << min_df << '\n'
        << "min_size=" << min_size << '\n'
        << "posts_file=" << posts_file << '\n'
        << "profiles_file=" << profiles_file << '\n'
        << "seed=" << seed << '\n'
        << "sigma=" << sigma << '\n'
        << "split_frac=" << split_frac << '\n'
        << "synth_communities=" << synth_communities << '\n'
        << "synth_groups=" << synth_groups << '\n'
        << "synth_users=" << synth_users << '\n'
        << "synth_vocab=" << synth_vocab << '\n'
        << "w_feat=" << w_feat << '\n'
        << "w_text=" << w_text << '\n';
    return out.str();
}

uint64_t RunConfig::config_hash() const { return fnv1a(canonical()); }

RunConfig parse_run_config_text(const std::string& text) {
    RunConfig cfg;
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    // Environment overrides: COHORT_<UPPERCASE_KEY>
    static const char* keys[] = {
        "data",        "posts_file",      "profiles_file", "min_df",          "max_df_frac",
        "synth_users", "synth_vocab",     "synth_groups",  "synth_communities", "seed",
        "split_frac",  "out_dir",         "emb_dims",      "emb_walks",       "emb_walk_len",
        "emb_window",  "emb_p",           "emb_q",         "groups",          "beta",
        "sigma",       "gdmr_iters",      "gdmr_warm",     "gdmr_opt_period", "gstm_max_iters",
        "gstm_init",   "ais_temps",       "ais_runs",      "w_text",          "w_feat",
        "min_size",    "max_size",        "threads",       "deterministic"};
    for (const char* key : keys) {
        std::string env = "COHORT_";
        for (const char* c = key; *c; ++c) env += static_cast<char>(std::toupper(*c));
        if (const char* v = std::getenv(env.c_str())) kv[key] = v;
    }

    for (const auto& [key, value] : kv) {
        try {
            if (key == "data") cfg.data = value;
            else if (key == "posts_file") cfg.posts_file = value;
            else if (key == "profiles_file") cfg.profiles_file = value;
            else if (key == "min_df") cfg.min_df = std::stoi(value);
            else if (key == "max_df_frac") cfg.max_df_frac = std::stod(value);
            else if (key == "synth_users") cfg.synth_users = std::stoi(value);
            else if (key == "synth_vocab") cfg.synth_vocab = std::stoi(value);
            else if (key == "synth_groups") cfg.synth_groups = std::stoi(value);
            else if (key == "synth_communities") cfg.synth_communities = std::stoi(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "split_frac") cfg.split_frac = std::stod(value);
            else if (key == "out_dir") cfg.out_dir = value;
            else if (key == "emb_dims") cfg.emb_dims = std::stoi(value);
            else if (key == "emb_walks") cfg.emb_walks = std::stoi(value);
            else if (key == "emb_walk_len") cfg.emb_walk_len = std::stoi(value);
            else if (key == "emb_window") cfg.emb_window = std::stoi(value);
            else if (key == "emb_p") cfg.emb_p = std::stod(value);
            else if (key == "emb_q") cfg.emb_q = std::stod(value);
            else if (key == "groups") cfg.groups = std::stoi(value);
            else if (key == "beta") cfg.beta = std::stod(value);
            else if (key == "sigma") cfg.sigma = std::stod(value);
            else if (key == "gdmr_iters") cfg.gdmr_iters = std::stoi(value);
            else if (key == "gdmr_warm") cfg.gdmr_warm = std::stoi(value);
            else if (key == "gdmr_opt_period") cfg.gdmr_opt_period = std::stoi(value);
            else if (key == "gstm_max_iters") cfg.gstm_max_iters = std::stoi(value);
            else if (key == "gstm_init") cfg.gstm_init = value;
            else if (key == "ais_temps") cfg.ais_temps = std::stoi(value);
            else if (key == "ais_runs") cfg.ais_runs = std::stoi(value);
            else if (key == "w_text") cfg.w_text = std::stod(value);
            else if (key == "w_feat") cfg.w_feat = std::stod(value);
            else if (key == "min_size") cfg.min_size = std::stoi(value);
            else if (key == "max_size") cfg.max_size = std::stoi(value);
            else if (key == "threads") cfg.threads = std::stoi(value);
            else if (key == "deterministic") cfg.deterministic = parse_bool(value, key);
            else throw ConfigError("config: unknown key '" + key + "'");
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("config: bad value for " + key + ": " + value);
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig parse_run_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("config: cannot open " + file.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config_text(buf.str());
}

namespace {

Corpus subset_corpus(const Corpus& corpus, const std::vector<int>& keep) {
    Corpus out;
    out.vocabulary = corpus.vocabulary;
    for (int u : keep) {
        out.users.push_back(corpus.users[u]);
        out.tokens.push_back(corpus.tokens[u]);
        out.profiles.push_back(corpus.profiles[u]);
        out.forums.push_back(corpus.forums[u]);
    }
    out.rebuild_user_index();
    return out;
}

}  // namespace

std::pair<Corpus, Corpus> split(const Corpus& corpus, double frac, uint64_t seed) {
    const int U = corpus.num_users();
    if (U < 2) throw StageError("split: corpus needs at least 2 users");
    int n_train = static_cast<int>(frac * U);
    if (n_train < 1 || n_train >= U)
        throw StageError("split: fraction leaves an empty side");
    std::vector<int> order(U);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed ^ 0x5eedfeedull);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> train(order.begin(), order.begin() + n_train);
    std::vector<int> test(order.begin() + n_train, order.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {subset_corpus(corpus, train), subset_corpus(corpus, test)};
}

void write_manifest(const std::filesystem::path& dir, const RunConfig& cfg,
                    const std::string& stage, uint64_t vocab_hash) {
    json j;
    std::ostringstream hex;
    hex << std::hex << cfg.config_hash();
    j["config_hash"] = hex.str();
    j["seed"] = cfg.seed;
    j["stage"] = stage;
    j["stage_version"] = kStageVersion;
    if (vocab_hash) {
        std::ostringstream vh;
        vh << std::hex << vocab_hash;
        j["vocab_hash"] = vh.str();
    }
    std::ofstream out(dir / "manifest.json");
    out << j.dump(2) << '\n';
}

void save_comparison_csv(const std::vector<ComparisonRow>& table,
                         const std::filesystem::path& file) {
    std::ofstream out(file);
    out.precision(6);
    out << std::fixed;
    out << "model,heldout_total_ll,heldout_per_token_ll,coherence,heldout_metric\n";
    for (const auto& row : table)
        out << '"' << row.model << "\"," << row.heldout_total_ll << ','
            << row.heldout_per_token_ll << ',' << row.coherence << ',' << row.heldout_metric
            << '\n';
}

RunResult run_pipeline(const RunConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    const fs::path root(cfg.out_dir);
    fs::create_directories(root);

    // ---- data stage -------------------------------------------------------
    Corpus corpus;
    std::vector<Post> posts;  // empty when no interaction data exists
    CovariateMatrix synthetic_cov;
    bool have_posts = false;
    try {
        if (cfg.data == "synth_community") {
            SynthCommunityConfig sc;
            sc.users = cfg.synth_users;
            sc.vocab = cfg.synth_vocab;
            sc.groups = cfg.synth_groups;
            sc.communities = cfg.synth_communities;
            sc.seed = cfg.seed;
            auto out = synth_community(sc);
            corpus = std::move(out.corpus);
            posts = std::move(out.posts);
            have_posts = true;
        } else if (cfg.data == "synth_gdmr" || cfg.data == "synth_gstm") {
            SynthDims dims{cfg.synth_users, cfg.synth_vocab, cfg.synth_groups, cfg.emb_dims};
            if (cfg.data == "synth_gdmr") {
                SynthGdmrConfig sg;
                sg.dims = dims;
                sg.seed = cfg.seed;
                auto out = synth_gdmr(sg);
                corpus = std::move(out.corpus);
                synthetic_cov = std::move(out.covariates);
            } else {
                SynthGstmConfig sg;
                sg.dims = dims;
                sg.seed = cfg.seed;
                auto out = synth_gstm(sg);
                corpus = std::move(out.corpus);
                synthetic_cov = std::move(out.covariates);
            }
        } else {  // ingest
            IngestReport report;
            std::ifstream pin(cfg.posts_file);
            if (!pin) throw StageError("ingest: cannot open " + cfg.posts_file);
            posts = read_posts_jsonl(pin, report);
            std::ifstream fin(cfg.profiles_file);
            if (!fin) throw StageError("ingest: cannot open " + cfg.profiles_file);
            auto profiles = read_profiles_jsonl(fin, report);
            PreprocessConfig prep;
            prep.min_df = cfg.min_df;
            prep.max_df_frac = cfg.max_df_frac;
            corpus = ingest(posts, profiles, prep, &report);
            have_posts = true;
        }
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(std::string("data stage: ") + e.what());
    }
    const uint64_t vhash = vocabulary_hash(corpus);
    fs::create_directories(root / "corpus");
    save_corpus(corpus, root / "corpus");
    write_manifest(root / "corpus", cfg, "data", vhash);

    // ---- embedding stage --------------------------------------------------
    CovariateMatrix cov_full;
    try {
        if (have_posts) {
            auto graph = build_graph(posts, corpus.user_index);
            Node2VecConfig nc;
            nc.dims = cfg.emb_dims;
            nc.walks_per_node = cfg.emb_walks;
            nc.walk_len = cfg.emb_walk_len;
            nc.window = cfg.emb_window;
            nc.p = cfg.emb_p;
            nc.q = cfg.emb_q;
            nc.seed = cfg.seed + 17;
            nc.deterministic = cfg.deterministic;
            nc.threads = cfg.deterministic ? 1 : cfg.threads;
            auto emb = node2vec(graph, nc);
            fs::create_directories(root / "embedding");
            save_graph(graph, root / "embedding" / "graph.tsv");
            save_embedding(emb, root / "embedding" / "embedding.bin");
            write_manifest(root / "embedding", cfg, "embed", vhash);
            cov_full = covariates(corpus.profiles, emb);
        } else {
            cov_full = synthetic_cov;
        }
    } catch (const std::exception& e) {
        throw StageError(std::string("embed stage: ") + e.what());
    }

    // ---- split ------------------------------------------------------------
    auto [train, test] = split(corpus, cfg.split_frac, cfg.seed);
    std::vector<int> train_idx, test_idx;
    for (const auto& id : train.users) train_idx.push_back(corpus.user_index.at(id));
    for (const auto& id : test.users) test_idx.push_back(corpus.user_index.at(id));
    CovariateMatrix cov_train = cov_full.subset(train_idx);
    CovariateMatrix cov_test = cov_full.subset(test_idx);
    CovariateMatrix cov_train_ne = cov_train.without_embedding_columns();
    CovariateMatrix cov_test_ne = cov_test.without_embedding_columns();

    // ---- model rows -------------------------------------------------------
    RunResult result;
    result.dir = root;
    const fs::path models = root / "models";
    fs::create_directories(models);
    std::vector<double> gdmr_full_theta;  // feeds group formation

    auto eval_gdmr = [&](const GdmrState& state, const CovariateMatrix& tcov,
                         ComparisonRow& row) {
        auto alpha = gdmr_alpha_matrix(tcov, state.lambda, state.gamma, state.G);
        AisConfig ac;
        ac.temps = cfg.ais_temps;
        ac.runs = cfg.ais_runs;
        ac.seed = cfg.seed + 101;
        ac.threads = cfg.threads;
        auto ais = ais_heldout(state.phi_hat, state.G, state.W, alpha, test, ac);
        row.heldout_total_ll = ais.total_log_lik;
        row.heldout_per_token_ll = ais.per_token_log_lik;
        row.heldout_metric = "ais";
        row.coherence = umass_coherence(state.phi_hat, state.G, state.W, train).mean;
    };

    auto run_gdmr_row = [&](const std::string& label, const std::string& slug,
                            const CovariateMatrix& fit_cov, const CovariateMatrix& tcov,
                            bool freeze_lambda, bool freeze_gamma) {
        try {
            GdmrHyper h;
            h.groups = cfg.groups;
            h.beta = cfg.beta;
            h.sigma = cfg.sigma;
            h.iters_total = cfg.gdmr_iters;
            h.iters_warm = cfg.gdmr_warm;
            h.opt_period = cfg.gdmr_opt_period;
            h.seed = cfg.seed;
            h.freeze_lambda = freeze_lambda;
            h.freeze_gamma = freeze_gamma;
            auto [state, report] = gdmr_fit(train, fit_cov, h);
            fs::create_directories(models / slug);
            save_gdmr(state, h, report, vhash, models / slug);
            write_manifest(models / slug, cfg, "fit-gdmr", vhash);
            ComparisonRow row;
            row.model = label;
            eval_gdmr(state, tcov, row);
            result.table.push_back(row);
            if (slug == "gdmr_emb") gdmr_full_theta = state.theta_hat;
        } catch (const std::exception& e) {
            throw StageError("model '" + label + "': " + e.what());
        }
    };

    auto run_gstm_row = [&](const std::string& label, const std::string& slug,
                            bool freeze_prevalence) {
        try {
            GstmHyper h;
            h.groups = cfg.groups;
            h.max_em_iters = cfg.gstm_max_iters;
            h.sigma = cfg.sigma;
            h.seed = cfg.seed;
            h.freeze_prevalence = freeze_prevalence;
            if (cfg.gstm_init == "spectral") h.init = GstmInit::Spectral;
            else if (cfg.gstm_init == "lda") h.init = GstmInit::Lda;
            else if (cfg.gstm_init == "random") h.init = GstmInit::Random;
            else throw ConfigError("config: unknown gstm_init '" + cfg.gstm_init + "'");
            auto [state, report] = gstm_fit(train, cov_train, h, cfg.threads);
            fs::create_directories(models / slug);
            save_gstm(state, h, report, vhash, models / slug);
            write_manifest(models / slug, cfg, "fit-gstm", vhash);
            ComparisonRow row;
            row.model = label;
            auto per_user = gstm_heldout_elbo(state, test, cov_test, cfg.threads);
            for (double v : per_user) row.heldout_total_ll += v;
            size_t toks = test.total_tokens();
            row.heldout_per_token_ll = toks ? row.heldout_total_ll / toks : 0.0;
            row.heldout_metric = "elbo";
            row.coherence = umass_coherence(state.beta, state.G, state.W, train).mean;
            result.table.push_back(row);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError("model '" + label + "': " + e.what());
        }
    };

    run_gdmr_row("LDA Model", "lda", cov_train_ne, cov_test_ne, true, false);
    run_gdmr_row("DMR Model", "dmr", cov_train_ne, cov_test_ne, false, true);
    run_gdmr_row("gDMR Model (without node embeddings)", "gdmr_noemb", cov_train_ne,
                 cov_test_ne, false, false);
    run_gdmr_row("gDMR Model (with node embeddings)", "gdmr_emb", cov_train, cov_test, false,
                 false);
    run_gstm_row("STM Model", "stm", true);
    run_gstm_row("gSTM Model", "gstm", false);

    save_comparison_csv(result.table, root / "comparison.csv");

    // ---- group formation + evaluation report ------------------------------
    try {
        auto vectors = tfidf(train);
        AssignConfig ac;
        ac.w_text = cfg.w_text;
        ac.w_feat = cfg.w_feat;
        ac.min_size = cfg.min_size;
        ac.max_size = cfg.max_size;
        auto groups = form_groups(gdmr_full_theta, cfg.groups, vectors, cov_train, ac,
                                  cfg.seed + 7);
        fs::create_directories(root / "groups");
        save_groups_jsonl(groups, train, root / "groups" / "groups.jsonl");
        auto forums = forum_analysis(train, groups, vectors);
        save_forum_report(forums, root / "groups" / "forum_report.csv");
        write_manifest(root / "groups", cfg, "form-groups", vhash);

        std::vector<std::vector<int>> member_lists;
        std::vector<size_t> sizes;
        std::vector<int> pooled;
        for (const auto& g : groups.groups) {
            member_lists.push_back(g.members);
            sizes.push_back(g.members.size());
            pooled.insert(pooled.end(), g.members.begin(), g.members.end());
        }
        auto model_sim = within_group_similarity(member_lists, vectors);
        auto base_sim = random_baseline(pooled, sizes, cfg.seed + 9, vectors);
        save_similarities_csv(model_sim, base_sim, root / "similarities.csv");

        EvalReport report;
        const auto& headline = result.table[3];  // gDMR with embeddings
        report.heldout_total_ll = headline.heldout_total_ll;
        report.heldout_per_token_ll = headline.heldout_per_token_ll;
        report.heldout_metric = headline.heldout_metric;
        report.coherence_mean = headline.coherence;
        report.model_similarity = model_sim.overall;
        report.baseline_similarity = base_sim.overall;
        save_eval_report(report, root / "eval.json");
    } catch (const std::exception& e) {
        throw StageError(std::string("grouping stage: ") + e.what());
    }

    write_manifest(root, cfg, "run", vhash);
    return result;
}

}  // namespace cohort
