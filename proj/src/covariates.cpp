#include "cohort/covariates.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace cohort {

using nlohmann::json;

CovariateMatrix CovariateMatrix::without_embedding_columns() const {
    std::vector<int> keep;
    for (int d = 0; d < dims; ++d)
        if (column_names[d].rfind("emb_", 0) != 0) keep.push_back(d);
    CovariateMatrix out;
    out.dims = static_cast<int>(keep.size());
    for (int d : keep) out.column_names.push_back(column_names[d]);
    int U = rows();
    out.data.resize(static_cast<size_t>(U) * out.dims);
    for (int u = 0; u < U; ++u)
        for (size_t k = 0; k < keep.size(); ++k)
            out.row(u)[k] = row(u)[keep[k]];
    return out;
}

CovariateMatrix CovariateMatrix::subset(const std::vector<int>& keep) const {
    CovariateMatrix out;
    out.dims = dims;
    out.column_names = column_names;
    out.data.resize(keep.size() * static_cast<size_t>(dims));
    for (size_t i = 0; i < keep.size(); ++i)
        std::memcpy(out.row(static_cast<int>(i)), row(keep[i]), sizeof(double) * dims);
    return out;
}

CovariateMatrix covariates(const std::vector<UserProfile>& profiles,
                           const EmbeddingMatrix& emb, const EncodingConfig& enc) {
    const int U = static_cast<int>(profiles.size());
    if (emb.rows() != 0 && emb.rows() != U)
        throw std::runtime_error("covariates: embedding rows do not match profile count");

    // Country vocabulary: top-K by frequency, ties broken alphabetically.
    std::map<std::string, int> country_counts;
    for (const auto& p : profiles)
        if (!p.country.empty()) country_counts[p.country]++;
    std::vector<std::pair<std::string, int>> by_freq(country_counts.begin(), country_counts.end());
    std::stable_sort(by_freq.begin(), by_freq.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> countries;
    for (const auto& [c, n] : by_freq) {
        if (static_cast<int>(countries.size()) >= enc.top_countries) break;
        countries.push_back(c);
    }
    std::sort(countries.begin(), countries.end());
    bool has_other = static_cast<int>(by_freq.size()) > enc.top_countries;

    CovariateMatrix out;
    for (const char* g : {"female", "male", "unspecified"})
        out.column_names.push_back(std::string("gender_") + g);
    for (int a = 0; a <= static_cast<int>(AgeBucket::Unspecified); ++a)
        out.column_names.push_back(std::string("age_") + to_string(static_cast<AgeBucket>(a)));
    for (const auto& c : countries) out.column_names.push_back("country_" + c);
    if (has_other) out.column_names.push_back("country_other");
    out.column_names.push_back("country_unspecified");
    const int demo_dims = static_cast<int>(out.column_names.size());
    for (int d = 0; d < emb.dims; ++d) out.column_names.push_back("emb_" + std::to_string(d));

    out.dims = demo_dims + emb.dims;
    out.data.assign(static_cast<size_t>(U) * out.dims, 0.0);

    for (int u = 0; u < U; ++u) {
        double* x = out.row(u);
        const auto& p = profiles[u];
        x[static_cast<int>(p.gender)] = 1.0;
        x[3 + static_cast<int>(p.age_bucket)] = 1.0;
        int cbase = 3 + static_cast<int>(AgeBucket::Unspecified) + 1;
        if (p.country.empty()) {
            x[demo_dims - 1] = 1.0;
        } else {
            auto it = std::lower_bound(countries.begin(), countries.end(), p.country);
            if (it != countries.end() && *it == p.country) {
                x[cbase + (it - countries.begin())] = 1.0;
            } else if (has_other) {
                x[cbase + static_cast<int>(countries.size())] = 1.0;
            } else {
                x[demo_dims - 1] = 1.0;
            }
        }
        for (int d = 0; d < emb.dims; ++d) x[demo_dims + d] = emb.row(u)[d];
    }

    // Standardize embedding columns to mean 0, variance 1 (variance floor for constants).
    for (int d = demo_dims; d < out.dims; ++d) {
        double mean = 0.0;
        for (int u = 0; u < U; ++u) mean += out.row(u)[d];
        mean /= U;
        double var = 0.0;
        for (int u = 0; u < U; ++u) {
            double c = out.row(u)[d] - mean;
            var += c * c;
        }
        var /= U;
        if (var < enc.variance_floor) {
            for (int u = 0; u < U; ++u) out.row(u)[d] = 0.0;
        } else {
            double sd = std::sqrt(var);
            for (int u = 0; u < U; ++u) out.row(u)[d] = (out.row(u)[d] - mean) / sd;
        }
    }
    return out;
}

void save_embedding(const EmbeddingMatrix& emb, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    out.write("EMBF", 4);
    uint32_t U = emb.rows(), d = emb.dims, reserved = 0;
    out.write(reinterpret_cast<const char*>(&U), 4);
    out.write(reinterpret_cast<const char*>(&d), 4);
    out.write(reinterpret_cast<const char*>(&reserved), 4);
    out.write(reinterpret_cast<const char*>(emb.data.data()),
              static_cast<std::streamsize>(emb.data.size() * sizeof(float)));
}

EmbeddingMatrix load_embedding(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("missing " + file.string());
    char magic[4];
    in.read(magic, 4);
    if (std::string(magic, 4) != "EMBF") throw std::runtime_error("emb.f32: bad magic");
    uint32_t U = 0, d = 0, reserved = 0;
    in.read(reinterpret_cast<char*>(&U), 4);
    in.read(reinterpret_cast<char*>(&d), 4);
    in.read(reinterpret_cast<char*>(&reserved), 4);
    EmbeddingMatrix emb;
    emb.dims = static_cast<int>(d);
    emb.data.resize(static_cast<size_t>(U) * d);
    in.read(reinterpret_cast<char*>(emb.data.data()),
            static_cast<std::streamsize>(emb.data.size() * sizeof(float)));
    if (!in) throw std::runtime_error("emb.f32: truncated");
    return emb;
}

void save_covariates(const CovariateMatrix& cov, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "covariates.f64", std::ios::binary);
        out.write(reinterpret_cast<const char*>(cov.data.data()),
                  static_cast<std::streamsize>(cov.data.size() * sizeof(double)));
    }
    json j;
    j["rows"] = cov.rows();
    j["dims"] = cov.dims;
    j["columns"] = cov.column_names;
    std::ofstream meta(dir / "covariates.json");
    meta << j.dump(2) << '\n';
}

CovariateMatrix load_covariates(const std::filesystem::path& dir) {
    std::ifstream meta(dir / "covariates.json");
    if (!meta) throw std::runtime_error("missing " + (dir / "covariates.json").string());
    json j = json::parse(meta);
    CovariateMatrix cov;
    cov.dims = j.at("dims").get<int>();
    cov.column_names = j.at("columns").get<std::vector<std::string>>();
    int rows = j.at("rows").get<int>();
    cov.data.resize(static_cast<size_t>(rows) * cov.dims);
    std::ifstream in(dir / "covariates.f64", std::ios::binary);
    in.read(reinterpret_cast<char*>(cov.data.data()),
            static_cast<std::streamsize>(cov.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("covariates.f64: truncated");
    return cov;
}

}  // namespace cohort
