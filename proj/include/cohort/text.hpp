#pragma once

#include <filesystem>
#include <iosfwd>
#include <set>
#include <string>
#include <vector>

#include "cohort/types.hpp"

namespace cohort {

struct PreprocessConfig {
    bool lowercase = true;
    std::set<std::string> stopwords;          // defaults filled by default_stopwords()
    int min_df = 5;                           // min user-documents containing the token
    double max_df_frac = 0.5;                 // drop tokens in more than this fraction of users
    bool use_default_stopwords = true;
};

const std::set<std::string>& default_stopwords();

// Lowercased word tokens; ASCII alnum/apostrophe runs, non-ASCII bytes kept as word chars.
std::vector<std::string> tokenize(const std::string& body, bool lowercase);

struct IngestReport {
    size_t posts_read = 0;
    size_t posts_rejected = 0;
    size_t profiles_read = 0;
    size_t profiles_rejected = 0;
    size_t empty_users = 0;
    std::vector<std::string> errors;  // "line N: reason"
};

Corpus ingest(const std::vector<Post>& posts, const std::vector<UserProfile>& profiles,
              const PreprocessConfig& prep, IngestReport* report = nullptr);

// JSON-Lines readers; malformed records are skipped and counted.
std::vector<Post> read_posts_jsonl(std::istream& in, IngestReport& report);
std::vector<UserProfile> read_profiles_jsonl(std::istream& in, IngestReport& report);

// tf-idf with smoothed idf log((1+U)/(1+df)) + 1 and L2 normalization.
// Empty users get a zero vector.
std::vector<TfidfVector> tfidf(const Corpus& corpus);

double cosine(const TfidfVector& a, const TfidfVector& b);

// Corpus archive: vocab.txt, tokens.bin, profiles.jsonl (see docs/formats.md).
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

uint64_t vocabulary_hash(const Corpus& corpus);

}  // namespace cohort
