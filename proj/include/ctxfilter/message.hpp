#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ctxfilter/errors.hpp"

namespace ctxfilter {

enum class Role { system, user, assistant };

inline std::string_view to_string(Role role) {
    switch (role) {
        case Role::system: return "system";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
    }
    throw BoundsError("unknown role");
}

inline Role role_from_string(std::string_view s) {
    if (s == "system") return Role::system;
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    throw StructuralError("unknown role: " + std::string(s));
}

struct Message {
    Role role = Role::user;
    std::string content;

    bool operator==(const Message&) const = default;
};

/// The exact sequence sent to a chat endpoint.
using MessageList = std::vector<Message>;

/// Enforces the wire-shape invariants: at most one system message and only in
/// front, user/assistant strictly alternating after it, ending on a user turn.
inline void validate_message_list(const MessageList& messages) {
    if (messages.empty()) throw StructuralError("message list is empty");
    std::size_t start = 0;
    if (messages[0].role == Role::system) start = 1;
    Role expected = Role::user;
    for (std::size_t i = start; i < messages.size(); ++i) {
        if (messages[i].role == Role::system)
            throw StructuralError("system message allowed only in front");
        if (messages[i].role != expected)
            throw StructuralError("roles must alternate user/assistant");
        expected = expected == Role::user ? Role::assistant : Role::user;
    }
    if (messages.back().role != Role::user)
        throw StructuralError("message list must end with a user message");
}

/// Estimated token count when no tokenizer is available: ceil(chars / 4).
/// Only used for conservative fit checks before remote calls.
inline std::int64_t estimate_tokens(std::string_view text) {
    return static_cast<std::int64_t>((text.size() + 3) / 4);
}

inline void to_json(nlohmann::json& j, const Message& m) {
    j = nlohmann::json{{"role", to_string(m.role)}, {"content", m.content}};
}

inline void from_json(const nlohmann::json& j, Message& m) {
    m.role = role_from_string(j.at("role").get<std::string>());
    m.content = j.at("content").get<std::string>();
}

} // namespace ctxfilter
