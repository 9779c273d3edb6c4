#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxfilter/conversation.hpp"
#include "ctxfilter/errors.hpp"
#include "ctxfilter/gateway.hpp"
#include "ctxfilter/templates.hpp"

namespace ctxfilter {

enum class JudgeVariant { full_history, user_only };
enum class Winner { FC, AO, tie };
enum class Dimension { quality, ontopic };

inline std::string_view to_string(JudgeVariant v) {
    return v == JudgeVariant::full_history ? "full_history" : "user_only";
}

inline JudgeVariant judge_variant_from_string(std::string_view s) {
    if (s == "full_history") return JudgeVariant::full_history;
    if (s == "user_only") return JudgeVariant::user_only;
    throw ConfigError("unknown judge variant: " + std::string(s));
}

inline std::string_view to_string(Winner w) {
    switch (w) {
        case Winner::FC: return "FC";
        case Winner::AO: return "AO";
        case Winner::tie: return "tie";
    }
    throw BoundsError("unknown winner");
}

inline Winner winner_from_string(std::string_view s) {
    if (s == "FC") return Winner::FC;
    if (s == "AO") return Winner::AO;
    if (s == "tie") return Winner::tie;
    throw ConfigError("unknown winner: " + std::string(s));
}

/// Winners are stored de-mapped: FC/AO labels, independent of the randomized
/// A/B presentation order recorded in order_flipped.
struct PairwiseJudgment {
    int round_index = 0;
    Winner quality_winner = Winner::tie;
    Winner ontopic_winner = Winner::tie;
    std::string quality_justification;
    std::string ontopic_justification;
    double confidence = 0.0; // [0, 1]
    bool order_flipped = false;
    JudgeVariant judge_variant = JudgeVariant::full_history;
};

struct NumericJudgment {
    int round_index = 0;
    ContextKind config = ContextKind::full;
    int quality_score = 0; // 1..10
    int ontopic_score = 0; // 1..10
    std::string quality_justification;
    std::string ontopic_justification;
};

/// Alphabetical label order; this fixes the one-hot column layout downstream.
enum class PromptCategoryLabel { feedback, new_ask, no_feedback };

inline std::string_view to_string(PromptCategoryLabel label) {
    switch (label) {
        case PromptCategoryLabel::feedback: return "feedback";
        case PromptCategoryLabel::new_ask: return "new_ask";
        case PromptCategoryLabel::no_feedback: return "no_feedback";
    }
    throw BoundsError("unknown category");
}

inline PromptCategoryLabel category_from_string(std::string_view s) {
    if (s == "feedback") return PromptCategoryLabel::feedback;
    if (s == "new_ask") return PromptCategoryLabel::new_ask;
    if (s == "no_feedback") return PromptCategoryLabel::no_feedback;
    throw JudgmentParseError("category outside the closed set: " + std::string(s),
                             std::string(s));
}

struct PromptCategory {
    PromptCategoryLabel label = PromptCategoryLabel::new_ask;
    std::vector<std::string> context_dependent_elements;
    int confidence = 0; // 1..10
};

// ---------------------------------------------------------------------------
// Template rendering
// ---------------------------------------------------------------------------

/// Fills the pairwise template for the chosen variant. The user_only variant
/// has a single context slot; it receives context_a and ignores context_b.
inline std::string render_pairwise_prompt(const std::string& context_a, const std::string& resp_a,
                                          const std::string& context_b, const std::string& resp_b,
                                          int round_index, int total_rounds,
                                          JudgeVariant variant) {
    std::map<std::string, std::string> slots{{"round_num", std::to_string(round_index)},
                                             {"total_rounds", std::to_string(total_rounds)},
                                             {"first_resp", resp_a},
                                             {"second_resp", resp_b}};
    if (variant == JudgeVariant::full_history) {
        slots["context_for_a"] = context_a;
        slots["context_for_b"] = context_b;
        return render_template(kPairwiseJudgeFullHistoryTemplate, slots);
    }
    slots["context_prompt"] = context_a;
    return render_template(kPairwiseJudgeUserOnlyTemplate, slots);
}

inline std::string render_numeric_prompt(const std::string& context, const std::string& prompt,
                                         const std::string& response, int round_index,
                                         int total_rounds) {
    return render_template(kNumericJudgeTemplate,
                           {{"round_num", std::to_string(round_index)},
                            {"total_rounds", std::to_string(total_rounds)},
                            {"context_prompt", context},
                            {"current_round_prompt", prompt},
                            {"response", response}});
}

inline std::string render_classification_prompt(const std::string& context,
                                                const std::string& prompt) {
    return render_template(kPromptClassificationTemplate,
                           {{"conversation_context", context},
                            {"current_round_prompt", prompt}});
}

// ---------------------------------------------------------------------------
// A/B order de-randomization
// ---------------------------------------------------------------------------

/// Maps a raw "A"/"B"/"tie" verdict back to FC/AO given the presentation
/// order. order_flipped=false means A carried the FC response.
inline Winner demap_winner(std::string_view raw, bool order_flipped) {
    if (raw == "tie") return Winner::tie;
    if (raw == "A") return order_flipped ? Winner::AO : Winner::FC;
    if (raw == "B") return order_flipped ? Winner::FC : Winner::AO;
    throw JudgmentParseError("winner must be A, B, or tie; got: " + std::string(raw),
                             std::string(raw));
}

/// Inverse of demap_winner; demap(remap(w)) == w for both orders.
inline std::string remap_winner(Winner w, bool order_flipped) {
    if (w == Winner::tie) return "tie";
    bool is_fc = w == Winner::FC;
    return (is_fc != order_flipped) ? "A" : "B";
}

// ---------------------------------------------------------------------------
// Verdict parsing
// ---------------------------------------------------------------------------

namespace detail {

/// Judges are told to answer with JSON only, but models wrap it in fences or
/// prose often enough that we extract the outermost object.
inline nlohmann::json extract_json_object(const std::string& text) {
    std::size_t start = text.find('{');
    std::size_t end = text.rfind('}');
    if (start == std::string::npos || end == std::string::npos || end < start)
        throw JudgmentParseError("no JSON object in judge output", text);
    try {
        return nlohmann::json::parse(text.substr(start, end - start + 1));
    } catch (const nlohmann::json::exception& e) {
        throw JudgmentParseError(std::string("judge output is not valid JSON: ") + e.what(),
                                 text);
    }
}

} // namespace detail

inline PairwiseJudgment parse_pairwise_verdict(const std::string& raw, int round_index,
                                               bool order_flipped, JudgeVariant variant) {
    nlohmann::json j = detail::extract_json_object(raw);
    PairwiseJudgment out;
    out.round_index = round_index;
    out.order_flipped = order_flipped;
    out.judge_variant = variant;
    try {
        out.quality_winner = demap_winner(j.at("quality_winner").get<std::string>(), order_flipped);
        out.ontopic_winner = demap_winner(j.at("ontopic_winner").get<std::string>(), order_flipped);
        out.quality_justification = j.value("quality_justification", std::string{});
        out.ontopic_justification = j.value("ontopic_justification", std::string{});
        out.confidence = j.value("confidence", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw JudgmentParseError(std::string("pairwise verdict missing fields: ") + e.what(), raw);
    }
    if (out.confidence < 0.0 || out.confidence > 1.0)
        throw JudgmentParseError("confidence outside [0, 1]", raw);
    return out;
}

inline NumericJudgment parse_numeric_verdict(const std::string& raw, int round_index,
                                             ContextKind config) {
    nlohmann::json j = detail::extract_json_object(raw);
    NumericJudgment out;
    out.round_index = round_index;
    out.config = config;
    try {
        out.quality_score = j.at("quality_score").get<int>();
        out.ontopic_score = j.at("ontopic_score").get<int>();
        out.quality_justification = j.value("quality_justification", std::string{});
        out.ontopic_justification = j.value("ontopic_justification", std::string{});
    } catch (const nlohmann::json::exception& e) {
        throw JudgmentParseError(std::string("numeric verdict missing fields: ") + e.what(), raw);
    }
    if (out.quality_score < 1 || out.quality_score > 10 || out.ontopic_score < 1 ||
        out.ontopic_score > 10)
        throw JudgmentParseError("score outside 1-10", raw);
    return out;
}

inline PromptCategory parse_category_verdict(const std::string& raw) {
    nlohmann::json j = detail::extract_json_object(raw);
    PromptCategory out;
    try {
        out.label = category_from_string(j.at("category").get<std::string>());
        if (j.contains("context_dependent_elements"))
            out.context_dependent_elements =
                j["context_dependent_elements"].get<std::vector<std::string>>();
        out.confidence = j.value("confidence", 0);
    } catch (const nlohmann::json::exception& e) {
        throw JudgmentParseError(std::string("classification missing fields: ") + e.what(), raw);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Judge execution
// ---------------------------------------------------------------------------

struct JudgingOptions {
    /// Main-text protocol shows the judge reasoning traces alongside final
    /// answers; switch off for final-answer-only evaluation.
    bool include_reasoning = true;
};

/// What the judge sees for one candidate response.
inline std::string judged_text(const GeneratedResponse& response, const JudgingOptions& opts) {
    if (opts.include_reasoning && response.reasoning)
        return *response.reasoning + "\n\n" + response.text;
    return response.text;
}

namespace detail {

/// One re-ask on a parse failure (salted cache key, so the retry is a fresh
/// sample rather than a replay of the bad output), then the error propagates
/// and the caller excludes the round with an audit entry.
template <typename ParseFn>
auto chat_and_parse(Gateway& judge, const GenerationParams& params, const std::string& prompt,
                    ParseFn&& parse) {
    CompletionRecord first = judge.chat({{Role::user, prompt}}, params, 0);
    try {
        return parse(first.final_text);
    } catch (const JudgmentParseError&) {
        CompletionRecord second = judge.chat({{Role::user, prompt}}, params, 1);
        return parse(second.final_text);
    }
}

} // namespace detail

/// Runs the pairwise judge on one round's FC and AO responses. A/B order is
/// drawn from `rng`; winners come back de-mapped to FC/AO. Judging starts at
/// round 2, where the two histories begin to diverge.
inline PairwiseJudgment judge_pair(Gateway& judge, const GenerationParams& params,
                                   const Conversation& conv, int round_index,
                                   const std::string& fc_response, const std::string& ao_response,
                                   JudgeVariant variant, std::mt19937_64& rng) {
    if (round_index < 2)
        throw BoundsError("pairwise judging starts at round 2; FC and AO histories are "
                          "identical at round 1");
    if (fc_response.empty() || ao_response.empty())
        throw BoundsError(conv.id + ": both responses must be present for judging");

    const bool order_flipped = (rng() & 1ull) != 0;
    const std::string& first = order_flipped ? ao_response : fc_response;
    const std::string& second = order_flipped ? fc_response : ao_response;

    std::string context = variant == JudgeVariant::full_history
                              ? render_full_history(conv, round_index)
                              : render_user_history(conv, round_index);
    std::string prompt =
        render_pairwise_prompt(context, first, context, second, round_index,
                               static_cast<int>(conv.rounds.size()), variant);

    return detail::chat_and_parse(judge, params, prompt, [&](const std::string& raw) {
        return parse_pairwise_verdict(raw, round_index, order_flipped, variant);
    });
}

/// Scores one response on the 1-10 quality and on-topic scales against the
/// canonical full conversation context.
inline NumericJudgment score_response(Gateway& judge, const GenerationParams& params,
                                      const Conversation& conv, int round_index,
                                      const std::string& response_text, ContextKind config) {
    if (response_text.empty()) throw BoundsError(conv.id + ": response must be present");
    const Round& round = detail::round_at(conv, round_index);
    std::string prompt =
        render_numeric_prompt(render_prior_turns(conv, round_index), round.user_text,
                              response_text, round_index, static_cast<int>(conv.rounds.size()));
    return detail::chat_and_parse(judge, params, prompt, [&](const std::string& raw) {
        return parse_numeric_verdict(raw, round_index, config);
    });
}

/// Classifies the round's user prompt into new_ask / feedback / no_feedback.
inline PromptCategory classify_prompt(Gateway& judge, const GenerationParams& params,
                                      const Conversation& conv, int round_index) {
    const Round& round = detail::round_at(conv, round_index);
    std::string prompt = render_classification_prompt(render_prior_turns(conv, round_index),
                                                      round.user_text);
    return detail::chat_and_parse(judge, params, prompt, [&](const std::string& raw) {
        return parse_category_verdict(raw);
    });
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const PairwiseJudgment& p) {
    j = nlohmann::json{{"round", p.round_index},
                       {"quality_winner", to_string(p.quality_winner)},
                       {"ontopic_winner", to_string(p.ontopic_winner)},
                       {"quality_justification", p.quality_justification},
                       {"ontopic_justification", p.ontopic_justification},
                       {"confidence", p.confidence},
                       {"order_flipped", p.order_flipped},
                       {"judge_variant", to_string(p.judge_variant)}};
}

inline void from_json(const nlohmann::json& j, PairwiseJudgment& p) {
    p.round_index = j.at("round").get<int>();
    p.quality_winner = winner_from_string(j.at("quality_winner").get<std::string>());
    p.ontopic_winner = winner_from_string(j.at("ontopic_winner").get<std::string>());
    p.quality_justification = j.value("quality_justification", std::string{});
    p.ontopic_justification = j.value("ontopic_justification", std::string{});
    p.confidence = j.value("confidence", 0.0);
    p.order_flipped = j.value("order_flipped", false);
    p.judge_variant = judge_variant_from_string(
        j.value("judge_variant", std::string("full_history")));
}

inline void to_json(nlohmann::json& j, const NumericJudgment& n) {
    j = nlohmann::json{{"round", n.round_index},
                       {"config", to_string(n.config)},
                       {"quality_score", n.quality_score},
                       {"ontopic_score", n.ontopic_score},
                       {"quality_justification", n.quality_justification},
                       {"ontopic_justification", n.ontopic_justification}};
}

inline void from_json(const nlohmann::json& j, NumericJudgment& n) {
    n.round_index = j.at("round").get<int>();
    n.config = context_kind_from_string(j.at("config").get<std::string>());
    n.quality_score = j.at("quality_score").get<int>();
    n.ontopic_score = j.at("ontopic_score").get<int>();
    n.quality_justification = j.value("quality_justification", std::string{});
    n.ontopic_justification = j.value("ontopic_justification", std::string{});
}

inline void to_json(nlohmann::json& j, const PromptCategory& c) {
    j = nlohmann::json{{"category", to_string(c.label)},
                       {"context_dependent_elements", c.context_dependent_elements},
                       {"confidence", c.confidence}};
}

inline void from_json(const nlohmann::json& j, PromptCategory& c) {
    c.label = category_from_string(j.at("category").get<std::string>());
    if (j.contains("context_dependent_elements"))
        c.context_dependent_elements =
            j["context_dependent_elements"].get<std::vector<std::string>>();
    c.confidence = j.value("confidence", 0);
}

} // namespace ctxfilter
