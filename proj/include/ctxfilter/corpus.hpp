#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxfilter/conversation.hpp"
#include "ctxfilter/errors.hpp"
#include "ctxfilter/random.hpp"

namespace ctxfilter {

struct RawTurn {
    Role role = Role::user;
    std::string text;
};

struct RawConversation {
    std::string source_id;
    std::vector<RawTurn> turns;
    std::optional<std::string> language_tag;
    std::optional<std::string> model_tag;
};

/// Turns must be nonempty and strictly alternate starting with a user turn.
inline void validate_raw_conversation(const RawConversation& conv) {
    if (conv.turns.empty())
        throw StructuralError(conv.source_id + ": conversation has no turns");
    for (std::size_t i = 0; i < conv.turns.size(); ++i) {
        Role expected = i % 2 == 0 ? Role::user : Role::assistant;
        if (conv.turns[i].role != expected)
            throw StructuralError(conv.source_id + ": turn " + std::to_string(i + 1) +
                                  " breaks user/assistant alternation");
    }
}

/// A round is one user-assistant exchange; a trailing unanswered user turn
/// still opens a round.
inline int round_count(const RawConversation& conv) {
    return static_cast<int>((conv.turns.size() + 1) / 2);
}

struct FilterConfig {
    int min_rounds = 5;
    int max_rounds = 10;
    std::map<std::string, std::vector<std::string>> keyword_lists; // lowercase entries
    double toxicity_threshold = 0.7;
    std::optional<std::set<std::string>> language_allowlist;
    int sample_size = 150;
    std::uint64_t seed = 0;
};

inline void validate(const FilterConfig& cfg) {
    if (cfg.min_rounds < 1 || cfg.min_rounds > cfg.max_rounds)
        throw ConfigError("need 1 <= min_rounds <= max_rounds");
    if (cfg.toxicity_threshold < 0 || cfg.toxicity_threshold > 1)
        throw ConfigError("toxicity_threshold must lie in [0, 1]");
}

/// Stock technical-keyword lists used to keep math and coding conversations.
inline FilterConfig default_filter_config() {
    FilterConfig cfg;
    cfg.keyword_lists["math"] = {
        "equation",   "algebra",      "calculus",     "derivative",   "matrix",
        "probability", "statistics",  "geometry",     "trigonometry", "polynomial",
        "function",   "calculate",    "theorem",      "proof",        "lemma",
        "corollary",  "formula",      "differential", "linear algebra", "graph theory",
        "optimization", "mathematics", "mathematical"};
    cfg.keyword_lists["coding"] = {
        "code",      "python",    "javascript",     "java",          "c++",
        "programming", "class",   "method",         "algorithm",     "debug",
        "error",     "compile",   "variable",       "array",         "loop",
        "recursion", "data structure", "api",       "library",       "framework",
        "script",    "implementation", "runtime",   "bug",           "software",
        "developer", "coding",    "program"};
    return cfg;
}

enum class RejectReason { round_count, language, keywords, toxicity };

inline std::string_view to_string(RejectReason reason) {
    switch (reason) {
        case RejectReason::round_count: return "round_count";
        case RejectReason::language: return "language";
        case RejectReason::keywords: return "keywords";
        case RejectReason::toxicity: return "toxicity";
    }
    throw BoundsError("unknown reject reason");
}

struct FilterDecision {
    bool keep = false;
    std::optional<RejectReason> reason;
};

namespace detail {

inline std::string ascii_lower(std::string_view text) {
    std::string out(text);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

} // namespace detail

/// Applies the retention rules in fixed order (round count, language,
/// keywords, toxicity) so the reject reason is deterministic. Keyword
/// matching is case-insensitive substring search over the concatenation of
/// all turns. Missing language metadata passes the language rule.
inline FilterDecision filter_conversation(const RawConversation& conv, const FilterConfig& cfg,
                                          double toxicity) {
    validate_raw_conversation(conv);
    validate(cfg);

    int rounds = round_count(conv);
    if (rounds < cfg.min_rounds || rounds > cfg.max_rounds)
        return {false, RejectReason::round_count};

    if (cfg.language_allowlist && conv.language_tag &&
        !cfg.language_allowlist->contains(*conv.language_tag))
        return {false, RejectReason::language};

    std::string haystack;
    for (const RawTurn& turn : conv.turns) haystack += detail::ascii_lower(turn.text);
    bool keyword_found = false;
    for (const auto& [name, keywords] : cfg.keyword_lists) {
        for (const std::string& keyword : keywords) {
            if (haystack.find(keyword) != std::string::npos) {
                keyword_found = true;
                break;
            }
        }
        if (keyword_found) break;
    }
    if (!keyword_found) return {false, RejectReason::keywords};

    if (toxicity >= cfg.toxicity_threshold) return {false, RejectReason::toxicity};

    return {true, std::nullopt};
}

/// Uniform sample of n conversations without replacement. A partial
/// Fisher-Yates pass over the index array is driven by mt19937_64(seed);
/// the selected indices are then sorted, so input order is preserved among
/// the chosen items and a fixed seed always yields the same sample.
inline std::vector<RawConversation> sample_corpus(const std::vector<RawConversation>& convs,
                                                  std::size_t n, std::uint64_t seed) {
    if (n > convs.size())
        throw BoundsError("sample size " + std::to_string(n) + " exceeds population " +
                          std::to_string(convs.size()));
    std::vector<std::size_t> indices(convs.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;

    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t j = i + static_cast<std::size_t>(bounded_rand(rng, indices.size() - i));
        std::swap(indices[i], indices[j]);
    }
    indices.resize(n);
    std::sort(indices.begin(), indices.end());

    std::vector<RawConversation> out;
    out.reserve(n);
    for (std::size_t idx : indices) out.push_back(convs[idx]);
    return out;
}

/// Folds alternating turns into 1-based rounds.
inline Conversation normalize(const RawConversation& raw) {
    validate_raw_conversation(raw);
    Conversation conv;
    conv.id = raw.source_id;
    for (std::size_t i = 0; i < raw.turns.size(); i += 2) {
        Round round;
        round.index = static_cast<int>(i / 2) + 1;
        round.user_text = raw.turns[i].text;
        if (i + 1 < raw.turns.size()) round.assistant_text = raw.turns[i + 1].text;
        conv.rounds.push_back(std::move(round));
    }
    return conv;
}

// Raw dump schema: {id, turns: [{role, content}], language?, model?}.

inline RawConversation raw_conversation_from_json(const nlohmann::json& j) {
    RawConversation conv;
    conv.source_id = j.at("id").get<std::string>();
    for (const auto& turn : j.at("turns")) {
        conv.turns.push_back({role_from_string(turn.at("role").get<std::string>()),
                              turn.at("content").get<std::string>()});
    }
    if (j.contains("language") && !j["language"].is_null())
        conv.language_tag = j["language"].get<std::string>();
    if (j.contains("model") && !j["model"].is_null())
        conv.model_tag = j["model"].get<std::string>();
    return conv;
}

inline nlohmann::json raw_conversation_to_json(const RawConversation& conv) {
    nlohmann::json turns = nlohmann::json::array();
    for (const RawTurn& turn : conv.turns)
        turns.push_back({{"role", to_string(turn.role)}, {"content", turn.text}});
    nlohmann::json j{{"id", conv.source_id}, {"turns", std::move(turns)}};
    if (conv.language_tag) j["language"] = *conv.language_tag;
    if (conv.model_tag) j["model"] = *conv.model_tag;
    return j;
}

} // namespace ctxfilter
