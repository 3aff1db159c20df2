#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace cohort {

struct Post {
    std::string post_id;
    std::string author_id;
    std::optional<std::string> reply_to_author_id;
    std::string body;
    std::optional<std::string> timestamp;
    std::optional<std::string> forum;  // optional metadata, used by forum-level reports
};

enum class Gender { Female, Male, Unspecified };

// Closed decade enumeration 0-9 .. 80-89 plus unspecified.
enum class AgeBucket {
    A0_9, A10_19, A20_29, A30_39, A40_49, A50_59, A60_69, A70_79, A80_89,
    Unspecified
};

struct UserProfile {
    std::string user_id;
    Gender gender = Gender::Unspecified;
    AgeBucket age_bucket = AgeBucket::Unspecified;
    std::string country;  // empty = unspecified
    std::optional<int> membership_year;
};

const char* to_string(Gender g);
const char* to_string(AgeBucket a);
Gender gender_from_string(const std::string& s);
AgeBucket age_bucket_from_string(const std::string& s);

struct Corpus {
    std::vector<std::string> vocabulary;            // index = token id
    std::vector<std::string> users;                 // index = user id
    std::vector<std::vector<int>> tokens;           // per user, vocabulary indices
    std::vector<UserProfile> profiles;              // aligned with users
    std::vector<std::string> forums;                // per-user forum label, may be empty
    std::unordered_map<std::string, int> user_index;

    int vocab_size() const { return static_cast<int>(vocabulary.size()); }
    int num_users() const { return static_cast<int>(users.size()); }
    int doc_len(int u) const { return static_cast<int>(tokens[u].size()); }
    size_t total_tokens() const {
        size_t n = 0;
        for (const auto& t : tokens) n += t.size();
        return n;
    }
    bool user_empty(int u) const { return tokens[u].empty(); }

    void rebuild_user_index() {
        user_index.clear();
        for (int u = 0; u < num_users(); ++u) user_index[users[u]] = u;
    }
};

struct TfidfVector {
    std::vector<std::pair<int, double>> entries;  // sorted by token index
    double norm = 0.0;
};

}  // namespace cohort
