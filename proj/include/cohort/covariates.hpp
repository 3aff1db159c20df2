#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cohort/types.hpp"

namespace cohort {

struct EmbeddingMatrix {
    int dims = 0;
    std::vector<float> data;  // row-major, U x dims
    int rows() const { return dims ? static_cast<int>(data.size()) / dims : 0; }
    const float* row(int u) const { return data.data() + static_cast<size_t>(u) * dims; }
    float* row(int u) { return data.data() + static_cast<size_t>(u) * dims; }
};

struct CovariateMatrix {
    int dims = 0;  // D = demographic one-hots + embedding dims
    std::vector<double> data;  // row-major, U x dims
    std::vector<std::string> column_names;
    int rows() const { return dims ? static_cast<int>(data.size()) / dims : 0; }
    const double* row(int u) const { return data.data() + static_cast<size_t>(u) * dims; }
    double* row(int u) { return data.data() + static_cast<size_t>(u) * dims; }

    // Drop columns whose names start with "emb_" (the no-embeddings ablation).
    CovariateMatrix without_embedding_columns() const;
    // Keep only the rows in `keep`, in order.
    CovariateMatrix subset(const std::vector<int>& keep) const;
};

struct EncodingConfig {
    int top_countries = 30;      // most frequent countries kept, rest bucketed as "other"
    double variance_floor = 1e-12;
};

// One-hot demographics ++ standardized embedding columns.
CovariateMatrix covariates(const std::vector<UserProfile>& profiles,
                           const EmbeddingMatrix& emb, const EncodingConfig& enc = {});

void save_embedding(const EmbeddingMatrix& emb, const std::filesystem::path& file);
EmbeddingMatrix load_embedding(const std::filesystem::path& file);

void save_covariates(const CovariateMatrix& cov, const std::filesystem::path& dir);
CovariateMatrix load_covariates(const std::filesystem::path& dir);

}  // namespace cohort
