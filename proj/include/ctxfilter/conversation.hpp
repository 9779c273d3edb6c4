#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxfilter/errors.hpp"
#include "ctxfilter/gateway.hpp"
#include "ctxfilter/message.hpp"
#include "ctxfilter/templates.hpp"

namespace ctxfilter {

enum class ContextKind { full, assistant_omitted, summarized };

inline std::string_view to_string(ContextKind kind) {
    switch (kind) {
        case ContextKind::full: return "full";
        case ContextKind::assistant_omitted: return "assistant_omitted";
        case ContextKind::summarized: return "summarized";
    }
    throw BoundsError("unknown context kind");
}

inline ContextKind context_kind_from_string(std::string_view s) {
    if (s == "full") return ContextKind::full;
    if (s == "assistant_omitted") return ContextKind::assistant_omitted;
    if (s == "summarized") return ContextKind::summarized;
    throw ConfigError("unknown context kind: " + std::string(s));
}

/// A response generated under one context configuration. The reasoning trace
/// is kept for judging but is never placed back into downstream context.
struct GeneratedResponse {
    std::string text;
    std::optional<std::string> reasoning;
    std::int64_t prompt_units = 0;
    std::int64_t completion_units = 0;
};

struct Round {
    int index = 0; // 1-based
    std::string user_text;
    std::optional<std::string> assistant_text;
    std::optional<std::string> assistant_summary;
    std::map<std::string, GeneratedResponse> response_variants; // keyed by ContextKind name
};

struct Conversation {
    std::string id;
    std::vector<Round> rounds;
};

/// Selects the transform applied to history before generation. The fixed
/// strings default to the library constants; tests pin them byte-for-byte.
struct ContextConfig {
    ContextKind kind = ContextKind::full;
    std::string placeholder_text{kResponsePlaceholder};
    std::string ao_system_message{kAssistantOmittedSystemMessage};
    std::string summary_prompt_template{kSummaryPromptTemplate};
};

enum class Side { user, assistant, both };

inline void validate_conversation(const Conversation& conv) {
    if (conv.rounds.empty()) throw StructuralError(conv.id + ": conversation has no rounds");
    for (std::size_t i = 0; i < conv.rounds.size(); ++i) {
        const Round& r = conv.rounds[i];
        if (r.index != static_cast<int>(i) + 1)
            throw StructuralError(conv.id + ": round indices must be 1-based and contiguous");
        if (r.assistant_summary && !r.assistant_text)
            throw StructuralError(conv.id + ": summary present without assistant text");
    }
}

namespace detail {

inline const Round& round_at(const Conversation& conv, int round_index) {
    if (round_index < 1 || round_index > static_cast<int>(conv.rounds.size()))
        throw BoundsError(conv.id + ": round " + std::to_string(round_index) + " out of range");
    return conv.rounds[static_cast<std::size_t>(round_index) - 1];
}

} // namespace detail

/// Builds the message list for generating round `round_index` under `cfg`.
///
/// full: prior user and assistant texts verbatim.
/// assistant_omitted: leading system notice, prior assistant texts each
///   replaced by the exact placeholder.
/// summarized: prior assistant texts replaced by their stored one-sentence
///   summaries (no system message).
///
/// The final message is always round `round_index`'s user text.
inline MessageList build_context(const Conversation& conv, int round_index,
                                 const ContextConfig& cfg) {
    detail::round_at(conv, round_index); // bounds check
    MessageList out;
    if (cfg.kind == ContextKind::assistant_omitted)
        out.push_back({Role::system, cfg.ao_system_message});
    for (int i = 1; i < round_index; ++i) {
        const Round& r = conv.rounds[static_cast<std::size_t>(i) - 1];
        out.push_back({Role::user, r.user_text});
        switch (cfg.kind) {
            case ContextKind::full:
                if (!r.assistant_text)
                    throw IncompleteRoundError(conv.id + ": round " + std::to_string(i) +
                                               " lacks assistant text");
                out.push_back({Role::assistant, *r.assistant_text});
                break;
            case ContextKind::assistant_omitted:
                out.push_back({Role::assistant, cfg.placeholder_text});
                break;
            case ContextKind::summarized:
                if (!r.assistant_summary)
                    throw IncompleteRoundError(conv.id + ": round " + std::to_string(i) +
                                               " lacks assistant summary");
                out.push_back({Role::assistant, *r.assistant_summary});
                break;
        }
    }
    out.push_back({Role::user, detail::round_at(conv, round_index).user_text});
    return out;
}

/// Characters contributed by the selected side(s) of build_context(conv,
/// upto_round, cfg). The system message is excluded: the measure tracks
/// conversational content growth, not protocol overhead.
inline std::int64_t context_length(const Conversation& conv, int upto_round, Side side,
                                   const ContextConfig& cfg) {
    MessageList messages = build_context(conv, upto_round, cfg);
    std::int64_t total = 0;
    for (const Message& m : messages) {
        if (m.role == Role::system) continue;
        bool counted = side == Side::both || (side == Side::user && m.role == Role::user) ||
                       (side == Side::assistant && m.role == Role::assistant);
        if (counted) total += static_cast<std::int64_t>(m.content.size());
    }
    return total;
}

inline std::string render_summary_prompt(const ContextConfig& cfg,
                                         const std::string& assistant_text) {
    return render_template(cfg.summary_prompt_template, {{"response", assistant_text}});
}

/// Completes the summary prompt for one assistant response. The caller
/// persists the result into the round's assistant_summary; summaries are
/// computed once and reused, never regenerated per build.
inline std::string summarize_response(const std::string& assistant_text, Gateway& llm,
                                      const GenerationParams& params,
                                      const ContextConfig& cfg = {}) {
    if (assistant_text.empty()) throw BoundsError("assistant text is empty");
    CompletionRecord rec = llm.chat({{Role::user, render_summary_prompt(cfg, assistant_text)}},
                                    params);
    if (rec.final_text.empty()) throw EmptySummaryError("summary completion was empty");
    return rec.final_text;
}

// ---------------------------------------------------------------------------
// Canonical plain-text renderings of history, used as judge context slots and
// embedding input. One fixed format everywhere keeps replay hashes stable.
// ---------------------------------------------------------------------------

inline std::string render_turn(Role role, const std::string& text) {
    std::string out(role == Role::user ? "User: " : "Assistant: ");
    out += text;
    return out;
}

/// u1, a1, ..., u_{r-1}, a_{r-1}, u_r — all past turns plus the current
/// user prompt, blank-line separated.
inline std::string render_full_history(const Conversation& conv, int round_index) {
    detail::round_at(conv, round_index);
    std::string out;
    for (int i = 1; i < round_index; ++i) {
        const Round& r = conv.rounds[static_cast<std::size_t>(i) - 1];
        if (!out.empty()) out += "\n\n";
        out += render_turn(Role::user, r.user_text);
        if (r.assistant_text) {
            out += "\n\n";
            out += render_turn(Role::assistant, *r.assistant_text);
        }
    }
    if (!out.empty()) out += "\n\n";
    out += render_turn(Role::user, detail::round_at(conv, round_index).user_text);
    return out;
}

/// u1, ..., u_r — user prompts only, including the current one.
inline std::string render_user_history(const Conversation& conv, int round_index) {
    detail::round_at(conv, round_index);
    std::string out;
    for (int i = 1; i <= round_index; ++i) {
        if (!out.empty()) out += "\n\n";
        out += render_turn(Role::user, conv.rounds[static_cast<std::size_t>(i) - 1].user_text);
    }
    return out;
}

/// u1, a1, ..., u_{r-1}, a_{r-1} — prior completed turns only (the current
/// prompt goes into its own template slot). Empty string at round 1.
inline std::string render_prior_turns(const Conversation& conv, int round_index) {
    detail::round_at(conv, round_index);
    std::string out;
    for (int i = 1; i < round_index; ++i) {
        const Round& r = conv.rounds[static_cast<std::size_t>(i) - 1];
        if (!out.empty()) out += "\n\n";
        out += render_turn(Role::user, r.user_text);
        if (r.assistant_text) {
            out += "\n\n";
            out += render_turn(Role::assistant, *r.assistant_text);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence (one JSON object per conversation, NDJSON at the file level)
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const GeneratedResponse& r) {
    j = nlohmann::json{{"text", r.text},
                       {"prompt_units", r.prompt_units},
                       {"completion_units", r.completion_units}};
    if (r.reasoning) j["reasoning"] = *r.reasoning;
}

inline void from_json(const nlohmann::json& j, GeneratedResponse& r) {
    r.text = j.at("text").get<std::string>();
    r.prompt_units = j.value("prompt_units", std::int64_t{0});
    r.completion_units = j.value("completion_units", std::int64_t{0});
    if (j.contains("reasoning") && !j["reasoning"].is_null())
        r.reasoning = j["reasoning"].get<std::string>();
}

inline void to_json(nlohmann::json& j, const Round& r) {
    j = nlohmann::json{{"index", r.index}, {"user", r.user_text}};
    if (r.assistant_text) j["assistant"] = *r.assistant_text;
    if (r.assistant_summary) j["assistant_summary"] = *r.assistant_summary;
    if (!r.response_variants.empty()) j["response_variants"] = r.response_variants;
}

inline void from_json(const nlohmann::json& j, Round& r) {
    r.index = j.at("index").get<int>();
    r.user_text = j.at("user").get<std::string>();
    if (j.contains("assistant") && !j["assistant"].is_null())
        r.assistant_text = j["assistant"].get<std::string>();
    if (j.contains("assistant_summary") && !j["assistant_summary"].is_null())
        r.assistant_summary = j["assistant_summary"].get<std::string>();
    if (j.contains("response_variants"))
        r.response_variants = j["response_variants"].get<std::map<std::string, GeneratedResponse>>();
}

inline void to_json(nlohmann::json& j, const Conversation& c) {
    j = nlohmann::json{{"id", c.id}, {"rounds", c.rounds}};
}

inline void from_json(const nlohmann::json& j, Conversation& c) {
    c.id = j.at("id").get<std::string>();
    c.rounds = j.at("rounds").get<std::vector<Round>>();
}

} // namespace ctxfilter
