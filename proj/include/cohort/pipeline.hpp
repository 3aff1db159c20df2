#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cohort/common.hpp"
#include "cohort/types.hpp"

namespace cohort {

// Thrown for invalid configuration; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Thrown when a pipeline stage fails; the CLI maps it to exit code 3.
struct StageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Declarative key=value run configuration. Unknown keys are rejected.
// Environment variables COHORT_<UPPERCASE_KEY> override file values.
struct RunConfig {
    // data stage: "synth_community", "synth_gdmr", "synth_gstm", or "ingest"
    std::string data = "synth_community";
    std::string posts_file;     // ingest mode
    std::string profiles_file;  // ingest mode
    int min_df = 5;
    double max_df_frac = 0.5;

    // synthetic corpus shape
    int synth_users = 200;
    int synth_vocab = 120;
    int synth_groups = 4;
    int synth_communities = 4;

    uint64_t seed = 0;
    double split_frac = 0.8;
    std::string out_dir = "run";

    // embedding stage (skipped when no interaction data exists)
    int emb_dims = 16;
    int emb_walks = 20;
    int emb_walk_len = 15;
    int emb_window = 5;
    double emb_p = 1.0;
    double emb_q = 1.0;

    // model fitting
    int groups = 8;
    double beta = 0.01;
    double sigma = 1.0;
    int gdmr_iters = 300;
    int gdmr_warm = 200;
    int gdmr_opt_period = 10;
    int gstm_max_iters = 40;
    std::string gstm_init = "spectral";

    // evaluation
    int ais_temps = 200;
    int ais_runs = 5;

    // group formation
    double w_text = 0.7;
    double w_feat = 0.3;
    int min_size = 10;
    int max_size = 30;

    int threads = 1;
    bool deterministic = true;

    void validate() const;  // throws ConfigError
    uint64_t config_hash() const;
    std::string canonical() const;  // sorted key=value lines (hashed fingerprint input)
};

RunConfig parse_run_config(const std::filesystem::path& file);  // throws ConfigError
RunConfig parse_run_config_text(const std::string& text);

// User-level split; held-out users are entirely unseen during training.
std::pair<Corpus, Corpus> split(const Corpus& corpus, double frac, uint64_t seed);

struct ComparisonRow {
    std::string model;
    double heldout_total_ll = 0.0;
    double heldout_per_token_ll = 0.0;
    double coherence = 0.0;
    std::string heldout_metric;  // "ais" or "elbo"
};

struct RunResult {
    std::filesystem::path dir;
    std::vector<ComparisonRow> table;
};

// Executes the DAG: data -> split -> embed -> fit (6 model rows) -> eval ->
// form-groups; emits artifacts under cfg.out_dir. Throws StageError on stage
// failure.
RunResult run_pipeline(const RunConfig& cfg);

void save_comparison_csv(const std::vector<ComparisonRow>& table,
                         const std::filesystem::path& file);

// manifest.json written into every artifact directory.
void write_manifest(const std::filesystem::path& dir, const RunConfig& cfg,
                    const std::string& stage, uint64_t vocab_hash);

}  // namespace cohort
