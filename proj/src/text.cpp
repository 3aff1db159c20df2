#include "cohort/text.hpp"

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "cohort/common.hpp"

namespace cohort {

using nlohmann::json;

const char* to_string(Gender g) {
    switch (g) {
        case Gender::Female: return "female";
        case Gender::Male: return "male";
        default: return "unspecified";
    }
}

const char* to_string(AgeBucket a) {
    switch (a) {
        case AgeBucket::A0_9: return "0-9";
        case AgeBucket::A10_19: return "10-19";
        case AgeBucket::A20_29: return "20-29";
        case AgeBucket::A30_39: return "30-39";
        case AgeBucket::A40_49: return "40-49";
        case AgeBucket::A50_59: return "50-59";
        case AgeBucket::A60_69: return "60-69";
        case AgeBucket::A70_79: return "70-79";
        case AgeBucket::A80_89: return "80-89";
        default: return "unspecified";
    }
}

Gender gender_from_string(const std::string& s) {
    if (s == "female") return Gender::Female;
    if (s == "male") return Gender::Male;
    return Gender::Unspecified;
}

AgeBucket age_bucket_from_string(const std::string& s) {
    static const std::map<std::string, AgeBucket> m = {
        {"0-9", AgeBucket::A0_9},   {"10-19", AgeBucket::A10_19},
        {"20-29", AgeBucket::A20_29}, {"30-39", AgeBucket::A30_39},
        {"40-49", AgeBucket::A40_49}, {"50-59", AgeBucket::A50_59},
        {"60-69", AgeBucket::A60_69}, {"70-79", AgeBucket::A70_79},
        {"80-89", AgeBucket::A80_89}};
    auto it = m.find(s);
    return it == m.end() ? AgeBucket::Unspecified : it->second;
}

const std::set<std::string>& default_stopwords() {
    static const std::set<std::string> words = {
        "a", "about", "above", "after", "again", "against", "all", "am", "an", "and",
        "any", "are", "as", "at", "be", "because", "been", "before", "being", "below",
        "between", "both", "but", "by", "can", "did", "do", "does", "doing", "down",
        "during", "each", "few", "for", "from", "further", "had", "has", "have",
        "having", "he", "her", "here", "hers", "herself", "him", "himself", "his",
        "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just", "me",
        "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on",
        "once", "only", "or", "other", "our", "ours", "ourselves", "out", "over",
        "own", "s", "same", "she", "should", "so", "some", "such", "t", "than",
        "that", "the", "their", "theirs", "them", "themselves", "then", "there",
        "these", "they", "this", "those", "through", "to", "too", "under", "until",
        "up", "very", "was", "we", "were", "what", "when", "where", "which", "while",
        "who", "whom", "why", "will", "with", "you", "your", "yours", "yourself",
        "yourselves"};
    return words;
}

std::vector<std::string> tokenize(const std::string& body, bool lowercase) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (unsigned char c : body) {
        bool word_char = std::isalnum(c) || c == '\'' || c >= 0x80;
        if (word_char) {
            cur.push_back(lowercase && c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
        } else {
            flush();
        }
    }
    flush();
    return out;
}

Corpus ingest(const std::vector<Post>& posts, const std::vector<UserProfile>& profiles,
              const PreprocessConfig& prep, IngestReport* report) {
    IngestReport local;
    IngestReport& rep = report ? *report : local;

    const std::set<std::string>& stop =
        prep.use_default_stopwords && prep.stopwords.empty() ? default_stopwords() : prep.stopwords;

    Corpus corpus;
    std::unordered_map<std::string, int> uidx;
    auto user_of = [&](const std::string& id) {
        auto it = uidx.find(id);
        if (it != uidx.end()) return it->second;
        int u = static_cast<int>(corpus.users.size());
        uidx[id] = u;
        corpus.users.push_back(id);
        return u;
    };

    // Per-user raw token streams and per-user forum counts.
    std::vector<std::vector<std::string>> raw;
    std::vector<std::map<std::string, int>> forum_counts;
    for (const auto& p : posts) {
        int u = user_of(p.author_id);
        if (static_cast<int>(raw.size()) <= u) {
            raw.resize(u + 1);
            forum_counts.resize(u + 1);
        }
        for (auto& tok : tokenize(p.body, prep.lowercase)) {
            if (!stop.count(tok)) raw[u].push_back(std::move(tok));
        }
        if (p.forum) forum_counts[u][*p.forum]++;
    }
    // Users that only appear in profiles still get a (possibly empty) document.
    for (const auto& pr : profiles) user_of(pr.user_id);
    raw.resize(corpus.users.size());
    forum_counts.resize(corpus.users.size());

    // Document frequency over users.
    std::unordered_map<std::string, int> df;
    for (const auto& doc : raw) {
        std::set<std::string> seen(doc.begin(), doc.end());
        for (const auto& t : seen) df[t]++;
    }

    const int U = corpus.num_users();
    const double max_df = prep.max_df_frac * U;
    std::map<std::string, int> vocab;  // ordered for deterministic indices
    for (const auto& [tok, d] : df) {
        if (d >= prep.min_df && d <= max_df) vocab[tok] = 0;
    }
    int next = 0;
    for (auto& [tok, idx] : vocab) idx = next++;
    if (vocab.empty() && U > 0)
        throw std::runtime_error("ingest: vocabulary empty after frequency filtering");

    corpus.vocabulary.resize(vocab.size());
    for (const auto& [tok, idx] : vocab) corpus.vocabulary[idx] = tok;

    corpus.tokens.resize(U);
    for (int u = 0; u < U; ++u) {
        for (const auto& t : raw[u]) {
            auto it = vocab.find(t);
            if (it != vocab.end()) corpus.tokens[u].push_back(it->second);
        }
        if (corpus.tokens[u].empty()) rep.empty_users++;
    }

    // Profiles: match by user id, default-construct missing ones.
    std::unordered_map<std::string, const UserProfile*> by_id;
    for (const auto& pr : profiles) by_id[pr.user_id] = &pr;
    corpus.profiles.resize(U);
    for (int u = 0; u < U; ++u) {
        auto it = by_id.find(corpus.users[u]);
        if (it != by_id.end()) {
            corpus.profiles[u] = *it->second;
        } else {
            corpus.profiles[u].user_id = corpus.users[u];
        }
    }

    corpus.forums.resize(U);
    for (int u = 0; u < U; ++u) {
        int best = 0;
        for (const auto& [f, c] : forum_counts[u]) {
            if (c > best) {
                best = c;
                corpus.forums[u] = f;
            }
        }
    }

    corpus.user_index = std::move(uidx);
    return corpus;
}

std::vector<Post> read_posts_jsonl(std::istream& in, IngestReport& report) {
    std::vector<Post> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        report.posts_read++;
        try {
            json j = json::parse(line);
            Post p;
            p.post_id = j.at("post_id").get<std::string>();
            p.author_id = j.at("author_id").get<std::string>();
            if (p.post_id.empty() || p.author_id.empty())
                throw std::runtime_error("empty post_id or author_id");
            if (j.contains("reply_to_author_id") && !j["reply_to_author_id"].is_null())
                p.reply_to_author_id = j["reply_to_author_id"].get<std::string>();
            p.body = j.value("body", std::string());
            if (j.contains("timestamp") && !j["timestamp"].is_null())
                p.timestamp = j["timestamp"].get<std::string>();
            if (j.contains("forum") && !j["forum"].is_null())
                p.forum = j["forum"].get<std::string>();
            out.push_back(std::move(p));
        } catch (const std::exception& e) {
            report.posts_rejected++;
            report.errors.push_back("posts line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<UserProfile> read_profiles_jsonl(std::istream& in, IngestReport& report) {
    std::vector<UserProfile> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        report.profiles_read++;
        try {
            json j = json::parse(line);
            UserProfile p;
            p.user_id = j.at("user_id").get<std::string>();
            if (p.user_id.empty()) throw std::runtime_error("empty user_id");
            p.gender = gender_from_string(j.value("gender", "unspecified"));
            p.age_bucket = age_bucket_from_string(j.value("age_bucket", "unspecified"));
            p.country = j.value("country", std::string());
            if (p.country == "unspecified") p.country.clear();
            if (j.contains("membership_year") && !j["membership_year"].is_null())
                p.membership_year = j["membership_year"].get<int>();
            out.push_back(std::move(p));
        } catch (const std::exception& e) {
            report.profiles_rejected++;
            report.errors.push_back("profiles line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<TfidfVector> tfidf(const Corpus& corpus) {
    const int U = corpus.num_users();
    const int W = corpus.vocab_size();
    std::vector<int> df(W, 0);
    for (int u = 0; u < U; ++u) {
        std::set<int> seen(corpus.tokens[u].begin(), corpus.tokens[u].end());
        for (int w : seen) df[w]++;
    }
    std::vector<double> idf(W);
    for (int w = 0; w < W; ++w)
        idf[w] = std::log((1.0 + U) / (1.0 + df[w])) + 1.0;

    std::vector<TfidfVector> out(U);
    for (int u = 0; u < U; ++u) {
        std::map<int, int> tf;
        for (int w : corpus.tokens[u]) tf[w]++;
        double sq = 0.0;
        for (const auto& [w, c] : tf) {
            double v = c * idf[w];
            out[u].entries.emplace_back(w, v);
            sq += v * v;
        }
        double norm = std::sqrt(sq);
        if (norm > 0.0) {
            for (auto& [w, v] : out[u].entries) v /= norm;
            out[u].norm = 1.0;
        }
    }
    return out;
}

double cosine(const TfidfVector& a, const TfidfVector& b) {
    if (a.norm == 0.0 || b.norm == 0.0) return 0.0;
    double dot = 0.0;
    size_t i = 0, j = 0;
    while (i < a.entries.size() && j < b.entries.size()) {
        int wa = a.entries[i].first, wb = b.entries[j].first;
        if (wa == wb) {
            dot += a.entries[i].second * b.entries[j].second;
            ++i;
            ++j;
        } else if (wa < wb) {
            ++i;
        } else {
            ++j;
        }
    }
    return dot / (a.norm * b.norm);
}

namespace {

void write_varint(std::ostream& out, uint32_t v) {
    while (v >= 0x80) {
        out.put(static_cast<char>((v & 0x7f) | 0x80));
        v >>= 7;
    }
    out.put(static_cast<char>(v));
}

uint32_t read_varint(std::istream& in) {
    uint32_t v = 0;
    int shift = 0;
    while (true) {
        int c = in.get();
        if (c == EOF) throw std::runtime_error("tokens.bin: truncated varint");
        v |= static_cast<uint32_t>(c & 0x7f) << shift;
        if (!(c & 0x80)) break;
        shift += 7;
    }
    return v;
}

uint32_t zigzag(int32_t v) { return (static_cast<uint32_t>(v) << 1) ^ static_cast<uint32_t>(v >> 31); }
int32_t unzigzag(uint32_t v) { return static_cast<int32_t>(v >> 1) ^ -static_cast<int32_t>(v & 1); }

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream v(dir / "vocab.txt");
        for (const auto& t : corpus.vocabulary) v << t << '\n';
    }
    {
        std::ofstream t(dir / "tokens.bin", std::ios::binary);
        t.write("CTK1", 4);
        uint32_t U = corpus.num_users();
        t.write(reinterpret_cast<const char*>(&U), 4);
        for (const auto& doc : corpus.tokens) {
            write_varint(t, static_cast<uint32_t>(doc.size()));
            int prev = 0;
            for (int w : doc) {
                write_varint(t, zigzag(w - prev));
                prev = w;
            }
        }
    }
    {
        std::ofstream p(dir / "profiles.jsonl");
        for (int u = 0; u < corpus.num_users(); ++u) {
            const auto& pr = corpus.profiles[u];
            json j;
            j["user_id"] = pr.user_id;
            j["gender"] = to_string(pr.gender);
            j["age_bucket"] = to_string(pr.age_bucket);
            j["country"] = pr.country.empty() ? "unspecified" : pr.country;
            if (pr.membership_year) j["membership_year"] = *pr.membership_year;
            if (!corpus.forums[u].empty()) j["forum"] = corpus.forums[u];
            p << j.dump() << '\n';
        }
    }
}

Corpus load_corpus(const std::filesystem::path& dir) {
    Corpus corpus;
    {
        std::ifstream v(dir / "vocab.txt");
        if (!v) throw std::runtime_error("missing " + (dir / "vocab.txt").string());
        std::string line;
        while (std::getline(v, line)) corpus.vocabulary.push_back(line);
    }
    {
        std::ifstream t(dir / "tokens.bin", std::ios::binary);
        if (!t) throw std::runtime_error("missing " + (dir / "tokens.bin").string());
        char magic[4];
        t.read(magic, 4);
        if (std::string(magic, 4) != "CTK1") throw std::runtime_error("tokens.bin: bad magic");
        uint32_t U = 0;
        t.read(reinterpret_cast<char*>(&U), 4);
        corpus.tokens.resize(U);
        for (uint32_t u = 0; u < U; ++u) {
            uint32_t n = read_varint(t);
            corpus.tokens[u].reserve(n);
            int prev = 0;
            for (uint32_t i = 0; i < n; ++i) {
                prev += unzigzag(read_varint(t));
                if (prev < 0 || prev >= corpus.vocab_size())
                    throw std::runtime_error("tokens.bin: token index out of range");
                corpus.tokens[u].push_back(prev);
            }
        }
    }
    {
        std::ifstream p(dir / "profiles.jsonl");
        if (!p) throw std::runtime_error("missing " + (dir / "profiles.jsonl").string());
        std::string line;
        while (std::getline(p, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            UserProfile pr;
            pr.user_id = j.at("user_id").get<std::string>();
            pr.gender = gender_from_string(j.value("gender", "unspecified"));
            pr.age_bucket = age_bucket_from_string(j.value("age_bucket", "unspecified"));
            pr.country = j.value("country", std::string());
            if (pr.country == "unspecified") pr.country.clear();
            if (j.contains("membership_year") && !j["membership_year"].is_null())
                pr.membership_year = j["membership_year"].get<int>();
            corpus.users.push_back(pr.user_id);
            corpus.profiles.push_back(std::move(pr));
            corpus.forums.push_back(j.value("forum", std::string()));
        }
    }
    if (corpus.users.size() != corpus.tokens.size())
        throw std::runtime_error("corpus archive: profiles.jsonl and tokens.bin disagree on user count");
    corpus.rebuild_user_index();
    return corpus;
}

uint64_t vocabulary_hash(const Corpus& corpus) {
    uint64_t h = 14695981039346656037ull;
    for (const auto& t : corpus.vocabulary) {
        h = fnv1a(t, h);
        h = fnv1a(std::string(1, '\n'), h);
    }
    return h;
}

}  // namespace cohort
