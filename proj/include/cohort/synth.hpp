#pragma once

#include <cstdint>
#include <vector>

#include "cohort/covariates.hpp"
#include "cohort/types.hpp"

namespace cohort {

struct GroundTruth {
    std::vector<double> phi;      // G x W topic-word distributions (gdmr) / beta rows (gstm)
    std::vector<double> lambda;   // G x D planted regression coefficients
    std::vector<double> gamma;    // G
    std::vector<double> theta;    // U x G
    std::vector<std::vector<int>> z;
    // gstm extras
    std::vector<double> m;        // W baseline log-frequencies
    std::vector<double> kappa;    // G x W
    // community synth
    std::vector<int> community;   // per-user community label
};

struct SynthDims {
    int users = 100;
    int vocab = 50;
    int groups = 4;
    int emb_dims = 8;  // synthetic embedding-block width in the covariates
};

struct SynthGdmrConfig {
    SynthDims dims;
    double beta = 0.05;          // word-prior concentration for planted phi
    double lambda_scale = 1.0;   // std of planted lambda (covariate signal strength)
    double doc_len_mean = 50.0;  // Poisson document lengths
    bool demographics = true;    // include one-hot demographic block in x_u
    uint64_t seed = 0;
};

struct SynthGstmConfig {
    SynthDims dims;
    double kappa_scale = 1.0;    // 0 disables deviations (all groups share softmax(m))
    double lambda_scale = 1.0;
    double sigma_theta = 1.0;    // prevalence covariance scale (Sigma = s^2 I); 0 = deterministic softmax
    double doc_len_mean = 50.0;
    bool demographics = true;
    uint64_t seed = 0;
};

struct SynthOutput {
    Corpus corpus;
    CovariateMatrix covariates;
    GroundTruth truth;
};

SynthOutput synth_gdmr(const SynthGdmrConfig& cfg);
SynthOutput synth_gstm(const SynthGstmConfig& cfg);

// Community-structured interaction corpus: users are split into `communities`
// reply-dense blocks; topic prevalence depends on community membership only.
// The demographic covariates carry no signal, so only network embeddings can
// explain prevalence.
struct SynthCommunityConfig {
    int users = 200;
    int vocab = 100;
    int groups = 4;
    int communities = 4;
    double within_reply_prob = 0.9;  // replies land inside the community
    int posts_per_user = 6;
    double topic_sharpness = 8.0;    // Dirichlet pull toward the community's topic
    double doc_len_mean = 40.0;
    uint64_t seed = 0;
};

struct SynthCommunityOutput {
    std::vector<Post> posts;
    std::vector<UserProfile> profiles;
    Corpus corpus;
    GroundTruth truth;
};

SynthCommunityOutput synth_community(const SynthCommunityConfig& cfg);

}  // namespace cohort
