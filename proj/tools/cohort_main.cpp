#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cohort/covariates.hpp"
#include "cohort/evalkit.hpp"
#include "cohort/gdmr.hpp"
#include "cohort/graph.hpp"
#include "cohort/grouper.hpp"
#include "cohort/gstm.hpp"
#include "cohort/pipeline.hpp"
#include "cohort/synth.hpp"
#include "cohort/text.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cohort;

namespace {

int cmd_ingest(const std::string& posts_file, const std::string& profiles_file,
               const std::string& out, int min_df, double max_df_frac) {
    IngestReport report;
    std::ifstream pin(posts_file);
    if (!pin) {
        std::cerr << "error: cannot open " << posts_file << "\n";
        return 3;
    }
    auto posts = read_posts_jsonl(pin, report);
    std::ifstream fin(profiles_file);
    if (!fin) {
        std::cerr << "error: cannot open " << profiles_file << "\n";
        return 3;
    }
    auto profiles = read_profiles_jsonl(fin, report);
    PreprocessConfig prep;
    prep.min_df = min_df;
    prep.max_df_frac = max_df_frac;
    Corpus corpus = ingest(posts, profiles, prep, &report);
    fs::create_directories(out);
    save_corpus(corpus, out);
    auto graph = build_graph(posts, corpus.user_index);
    save_graph(graph, fs::path(out) / "graph.tsv");
    std::cout << "users=" << corpus.num_users() << " vocab=" << corpus.vocab_size()
              << " tokens=" << corpus.total_tokens() << " posts_rejected=" << report.posts_rejected
              << " profiles_rejected=" << report.profiles_rejected
              << " empty_users=" << report.empty_users << "\n";
    for (const auto& e : report.errors) std::cerr << e << "\n";
    return 0;
}

int cmd_synth(const std::string& model, int users, int vocab, int groups, uint64_t seed,
              const std::string& out) {
    fs::create_directories(out);
    if (model == "gdmr") {
        SynthGdmrConfig cfg;
        cfg.dims = {users, vocab, groups, 8};
        cfg.seed = seed;
        auto res = synth_gdmr(cfg);
        save_corpus(res.corpus, out);
        save_covariates(res.covariates, out);
    } else if (model == "gstm") {
        SynthGstmConfig cfg;
        cfg.dims = {users, vocab, groups, 8};
        cfg.seed = seed;
        auto res = synth_gstm(cfg);
        save_corpus(res.corpus, out);
        save_covariates(res.covariates, out);
    } else if (model == "community") {
        SynthCommunityConfig cfg;
        cfg.users = users;
        cfg.vocab = vocab;
        cfg.groups = groups;
        cfg.seed = seed;
        auto res = synth_community(cfg);
        save_corpus(res.corpus, out);
        auto graph = build_graph(res.posts, res.corpus.user_index);
        save_graph(graph, fs::path(out) / "graph.tsv");
    } else {
        std::cerr << "error: unknown synth model '" << model << "'\n";
        return 2;
    }
    std::cout << "wrote " << out << "\n";
    return 0;
}

int cmd_embed(const std::string& corpus_dir, const Node2VecConfig& nc, const std::string& out) {
    Corpus corpus = load_corpus(corpus_dir);
    auto graph = load_graph(fs::path(corpus_dir) / "graph.tsv");
    if (graph.num_nodes < corpus.num_users()) graph.num_nodes = corpus.num_users();
    graph.build_adjacency();
    auto emb = node2vec(graph, nc);
    fs::create_directories(out);
    save_embedding(emb, fs::path(out) / "embedding.bin");
    auto cov = covariates(corpus.profiles, emb);
    save_covariates(cov, out);
    std::cout << "embedded " << graph.num_nodes << " nodes, covariate dims=" << cov.dims << "\n";
    return 0;
}

uint64_t check_vocab(uint64_t model_hash, const Corpus& corpus, const std::string& what) {
    uint64_t h = vocabulary_hash(corpus);
    if (model_hash != h)
        throw StageError("vocabulary hash mismatch between model and " + what +
                         " corpus; refusing to evaluate");
    return h;
}

int cmd_eval(const std::string& model_dir, const std::string& corpus_dir,
             const std::string& heldout_dir, const std::string& covariates_dir, int ais_temps,
             int ais_runs, uint64_t seed, int threads, const std::string& out) {
    const std::string cov_dir = covariates_dir.empty() ? heldout_dir : covariates_dir;
    Corpus train = load_corpus(corpus_dir);
    Corpus heldout = load_corpus(heldout_dir);
    std::ifstream meta(fs::path(model_dir) / "meta.json");
    if (!meta) {
        std::cerr << "error: missing " << model_dir << "/meta.json\n";
        return 3;
    }
    json j = json::parse(meta);
    const std::string kind = j.at("model").get<std::string>();
    fs::create_directories(out);
    EvalReport report;
    if (kind == "gdmr") {
        auto model = load_gdmr(model_dir);
        check_vocab(model.vocab_hash, train, "reference");
        check_vocab(model.vocab_hash, heldout, "held-out");
        auto hcov = load_covariates(cov_dir);
        if (hcov.rows() != heldout.num_users())
            throw StageError("eval: covariate rows do not match held-out users");
        auto alpha = gdmr_alpha_matrix(hcov, model.state.lambda, model.state.gamma, model.state.G);
        AisConfig ac;
        ac.temps = ais_temps;
        ac.runs = ais_runs;
        ac.seed = seed;
        ac.threads = threads;
        auto ais = ais_heldout(model.state.phi_hat, model.state.G, model.state.W, alpha, heldout, ac);
        report.heldout_total_ll = ais.total_log_lik;
        report.heldout_per_token_ll = ais.per_token_log_lik;
        report.heldout_stderr = ais.stderr_total;
        report.heldout_metric = "ais";
        auto coh = umass_coherence(model.state.phi_hat, model.state.G, model.state.W, train);
        report.coherence_per_group = coh.per_group;
        report.coherence_mean = coh.mean;
    } else if (kind == "gstm") {
        auto model = load_gstm(model_dir);
        check_vocab(model.vocab_hash, train, "reference");
        check_vocab(model.vocab_hash, heldout, "held-out");
        auto hcov = load_covariates(cov_dir);
        if (hcov.rows() != heldout.num_users())
            throw StageError("eval: covariate rows do not match held-out users");
        auto per_user = gstm_heldout_elbo(model.state, heldout, hcov, threads);
        for (double v : per_user) report.heldout_total_ll += v;
        size_t toks = heldout.total_tokens();
        report.heldout_per_token_ll = toks ? report.heldout_total_ll / toks : 0.0;
        report.heldout_metric = "elbo";
        auto coh = umass_coherence(model.state.beta, model.state.G, model.state.W, train);
        report.coherence_per_group = coh.per_group;
        report.coherence_mean = coh.mean;
    } else {
        std::cerr << "error: unknown model kind '" << kind << "'\n";
        return 3;
    }
    save_eval_report(report, fs::path(out) / "eval.json");
    std::cout << "held-out " << report.heldout_metric << " total=" << report.heldout_total_ll
              << " per-token=" << report.heldout_per_token_ll
              << " coherence=" << report.coherence_mean << "\n";
    return 0;
}

int cmd_form_groups(const std::string& model_dir, const std::string& corpus_dir,
                    const AssignConfig& ac, uint64_t seed, const std::string& out) {
    Corpus corpus = load_corpus(corpus_dir);
    std::ifstream meta(fs::path(model_dir) / "meta.json");
    if (!meta) {
        std::cerr << "error: missing " << model_dir << "/meta.json\n";
        return 3;
    }
    json j = json::parse(meta);
    const std::string kind = j.at("model").get<std::string>();
    std::vector<double> theta;
    int G = 0;
    if (kind == "gdmr") {
        auto model = load_gdmr(model_dir);
        check_vocab(model.vocab_hash, corpus, "grouping");
        theta = model.state.theta_hat;
        G = model.state.G;
    } else {
        auto model = load_gstm(model_dir);
        check_vocab(model.vocab_hash, corpus, "grouping");
        G = model.state.G;
        theta.resize(static_cast<size_t>(model.state.U) * G);
        for (int u = 0; u < model.state.U; ++u) {
            auto t = model.state.theta_point(u);
            std::copy(t.begin(), t.end(), theta.begin() + static_cast<size_t>(u) * G);
        }
    }
    auto cov = load_covariates(corpus_dir);
    auto vectors = tfidf(corpus);
    auto groups = form_groups(theta, G, vectors, cov, ac, seed);
    fs::create_directories(out);
    save_groups_jsonl(groups, corpus, fs::path(out) / "groups.jsonl");
    auto forums = forum_analysis(corpus, groups, vectors);
    save_forum_report(forums, fs::path(out) / "forum_report.csv");
    std::cout << "formed " << groups.groups.size() << " groups\n";
    return 0;
}

int cmd_sample(const std::string& groups_file, const std::string& corpus_dir, int k,
               uint64_t seed) {
    Corpus corpus = load_corpus(corpus_dir);
    auto set = load_groups_jsonl(corpus, groups_file);
    for (const auto& grp : set.groups) {
        auto sampled = stratified_sample(grp.members, corpus.profiles, k, seed);
        std::cout << grp.group_id << ":";
        for (int u : sampled) std::cout << ' ' << corpus.users[u];
        std::cout << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cohort: covariate-aware topic models and support-group formation"};
    app.require_subcommand(1);

    // ingest
    auto* ingest_cmd = app.add_subcommand("ingest", "Build a corpus from posts and profiles");
    std::string posts_file, profiles_file, out_dir;
    int min_df = 5;
    double max_df_frac = 0.5;
    ingest_cmd->add_option("--posts", posts_file)->required();
    ingest_cmd->add_option("--profiles", profiles_file)->required();
    ingest_cmd->add_option("--out", out_dir)->required();
    ingest_cmd->add_option("--min-df", min_df);
    ingest_cmd->add_option("--max-df-frac", max_df_frac);

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic corpus");
    std::string synth_model = "gdmr", synth_out;
    int s_users = 100, s_vocab = 50, s_groups = 4;
    uint64_t s_seed = 0;
    synth_cmd->add_option("--model", synth_model)->required();
    synth_cmd->add_option("--users", s_users);
    synth_cmd->add_option("--vocab", s_vocab);
    synth_cmd->add_option("--groups", s_groups);
    synth_cmd->add_option("--seed", s_seed);
    synth_cmd->add_option("--out", synth_out)->required();

    // embed
    auto* embed_cmd = app.add_subcommand("embed", "Node2Vec embeddings + covariate matrix");
    std::string embed_corpus, embed_out;
    Node2VecConfig nc;
    embed_cmd->add_option("--corpus", embed_corpus)->required();
    embed_cmd->add_option("--dims", nc.dims);
    embed_cmd->add_option("--walks", nc.walks_per_node);
    embed_cmd->add_option("--walk-len", nc.walk_len);
    embed_cmd->add_option("--window", nc.window);
    embed_cmd->add_option("--p", nc.p);
    embed_cmd->add_option("--q", nc.q);
    embed_cmd->add_option("--seed", nc.seed);
    embed_cmd->add_option("--out", embed_out)->required();

    // fit-gdmr
    auto* gdmr_cmd = app.add_subcommand("fit-gdmr", "Fit the regression topic model");
    std::string gdmr_corpus, gdmr_cov, gdmr_out;
    GdmrHyper gh;
    bool no_embeddings = false;
    gdmr_cmd->add_option("--corpus", gdmr_corpus)->required();
    gdmr_cmd->add_option("--covariates", gdmr_cov)->required();
    gdmr_cmd->add_option("--groups", gh.groups);
    gdmr_cmd->add_option("--beta", gh.beta);
    gdmr_cmd->add_option("--sigma", gh.sigma);
    gdmr_cmd->add_option("--iters", gh.iters_total);
    gdmr_cmd->add_option("--warm", gh.iters_warm);
    gdmr_cmd->add_option("--opt-period", gh.opt_period);
    gdmr_cmd->add_option("--seed", gh.seed);
    gdmr_cmd->add_flag("--no-embeddings", no_embeddings);
    gdmr_cmd->add_flag("--freeze-lambda", gh.freeze_lambda);
    gdmr_cmd->add_flag("--freeze-gamma", gh.freeze_gamma);
    gdmr_cmd->add_option("--out", gdmr_out)->required();

    // fit-gstm
    auto* gstm_cmd = app.add_subcommand("fit-gstm", "Fit the sparse logistic-normal topic model");
    std::string gstm_corpus, gstm_cov, gstm_out, gstm_init = "spectral";
    GstmHyper sh;
    int gstm_threads = 1;
    gstm_cmd->add_option("--corpus", gstm_corpus)->required();
    gstm_cmd->add_option("--covariates", gstm_cov)->required();
    gstm_cmd->add_option("--groups", sh.groups);
    gstm_cmd->add_option("--max-iters", sh.max_em_iters);
    gstm_cmd->add_option("--init", gstm_init);
    gstm_cmd->add_option("--seed", sh.seed);
    gstm_cmd->add_flag("--freeze-prevalence", sh.freeze_prevalence);
    gstm_cmd->add_option("--threads", gstm_threads);
    gstm_cmd->add_option("--out", gstm_out)->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Held-out likelihood, coherence, similarity");
    std::string eval_model, eval_corpus, eval_heldout, eval_cov, eval_out;
    int ais_temps = 1000, ais_runs = 10, eval_threads = 1;
    uint64_t eval_seed = 0;
    eval_cmd->add_option("--model", eval_model)->required();
    eval_cmd->add_option("--corpus", eval_corpus)->required();
    eval_cmd->add_option("--heldout", eval_heldout)->required();
    eval_cmd->add_option("--covariates", eval_cov);
    eval_cmd->add_option("--ais-temps", ais_temps);
    eval_cmd->add_option("--ais-runs", ais_runs);
    eval_cmd->add_option("--seed", eval_seed);
    eval_cmd->add_option("--threads", eval_threads);
    eval_cmd->add_option("--out", eval_out)->required();

    // form-groups
    auto* groups_cmd = app.add_subcommand("form-groups", "Support-group formation");
    std::string grp_model, grp_corpus, grp_out;
    AssignConfig ac;
    uint64_t grp_seed = 0;
    groups_cmd->add_option("--model", grp_model)->required();
    groups_cmd->add_option("--corpus", grp_corpus)->required();
    groups_cmd->add_option("--w-text", ac.w_text);
    groups_cmd->add_option("--w-feat", ac.w_feat);
    groups_cmd->add_option("--min", ac.min_size);
    groups_cmd->add_option("--max", ac.max_size);
    groups_cmd->add_flag("--exact-transport", ac.exact_transport);
    groups_cmd->add_option("--seed", grp_seed);
    groups_cmd->add_option("--out", grp_out)->required();

    // sample
    auto* sample_cmd = app.add_subcommand("sample", "Stratified sample from formed groups");
    std::string sample_groups, sample_corpus;
    int sample_k = 20;
    uint64_t sample_seed = 0;
    sample_cmd->add_option("--groups", sample_groups)->required();
    sample_cmd->add_option("--corpus", sample_corpus)->required();
    sample_cmd->add_option("--k", sample_k);
    sample_cmd->add_option("--seed", sample_seed);

    // run
    auto* run_cmd = app.add_subcommand("run", "Execute the full pipeline from a config file");
    std::string run_config;
    int run_threads = 0;
    bool run_deterministic = false;
    run_cmd->add_option("--config", run_config)->required();
    run_cmd->add_option("--threads", run_threads);
    run_cmd->add_flag("--deterministic", run_deterministic);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest_cmd)
            return cmd_ingest(posts_file, profiles_file, out_dir, min_df, max_df_frac);
        if (*synth_cmd)
            return cmd_synth(synth_model, s_users, s_vocab, s_groups, s_seed, synth_out);
        if (*embed_cmd) return cmd_embed(embed_corpus, nc, embed_out);
        if (*gdmr_cmd) {
            Corpus corpus = load_corpus(gdmr_corpus);
            auto cov = load_covariates(gdmr_cov);
            if (no_embeddings) cov = cov.without_embedding_columns();
            auto [state, report] = gdmr_fit(corpus, cov, gh);
            fs::create_directories(gdmr_out);
            save_gdmr(state, gh, report, vocabulary_hash(corpus), gdmr_out);
            std::cout << "fit gdmr: G=" << state.G << " W=" << state.W << " U=" << state.U << "\n";
            return 0;
        }
        if (*gstm_cmd) {
            Corpus corpus = load_corpus(gstm_corpus);
            auto cov = load_covariates(gstm_cov);
            if (gstm_init == "spectral") sh.init = GstmInit::Spectral;
            else if (gstm_init == "lda") sh.init = GstmInit::Lda;
            else if (gstm_init == "random") sh.init = GstmInit::Random;
            else {
                std::cerr << "error: unknown init '" << gstm_init << "'\n";
                return 2;
            }
            auto [state, report] = gstm_fit(corpus, cov, sh, gstm_threads);
            fs::create_directories(gstm_out);
            save_gstm(state, sh, report, vocabulary_hash(corpus), gstm_out);
            std::cout << "fit gstm: G=" << state.G << " converged=" << report.converged << "\n";
            return 0;
        }
        if (*eval_cmd)
            return cmd_eval(eval_model, eval_corpus, eval_heldout, eval_cov, ais_temps, ais_runs,
                            eval_seed, eval_threads, eval_out);
        if (*groups_cmd) return cmd_form_groups(grp_model, grp_corpus, ac, grp_seed, grp_out);
        if (*sample_cmd) return cmd_sample(sample_groups, sample_corpus, sample_k, sample_seed);
        if (*run_cmd) {
            RunConfig cfg;
            try {
                cfg = parse_run_config(run_config);
                if (run_threads > 0) cfg.threads = run_threads;
                if (run_deterministic) cfg.deterministic = true;
                cfg.validate();
            } catch (const ConfigError& e) {
                std::cerr << "config error: " << e.what() << "\n";
                return 2;
            }
            try {
                auto result = run_pipeline(cfg);
                std::cout << "run complete: " << result.dir.string() << "\n";
                for (const auto& row : result.table)
                    std::cout << "  " << row.model << ": held-out " << row.heldout_metric << " "
                              << row.heldout_per_token_ll << " per token, coherence "
                              << row.coherence << "\n";
                return 0;
            } catch (const ConfigError& e) {
                std::cerr << "config error: " << e.what() << "\n";
                return 2;
            } catch (const std::exception& e) {
                std::cerr << "stage error: " << e.what() << "\n";
                return 3;
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
