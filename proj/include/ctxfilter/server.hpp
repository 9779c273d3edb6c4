#pragma once

#include <atomic>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include <httplib.h>
// httplib pulls in <resolv.h>, whose _res macro breaks Eigen's headers.
#ifdef _res
#undef _res
#endif
#include <json.hpp>

#include "ctxfilter/conversation.hpp"
#include "ctxfilter/featurizer.hpp"
#include "ctxfilter/gateway.hpp"
#include "ctxfilter/judging.hpp"
#include "ctxfilter/orchestrator.hpp"
#include "ctxfilter/policy.hpp"

namespace ctxfilter {

/// A live request: an existing conversation (by id or inline) plus the next
/// user prompt to route.
struct PolicyRequest {
    std::optional<std::string> conversation_id;
    std::optional<Conversation> conversation;
    std::string user_prompt;
};

inline void from_json(const nlohmann::json& j, PolicyRequest& r) {
    if (j.contains("conversation_id") && !j["conversation_id"].is_null())
        r.conversation_id = j["conversation_id"].get<std::string>();
    if (j.contains("conversation") && !j["conversation"].is_null())
        r.conversation = j["conversation"].get<Conversation>();
    r.user_prompt = j.at("user_prompt").get<std::string>();
}

struct PolicyDecisionRecord {
    MessageList messages;
    std::optional<double> p_fc; // absent when the feature pipeline fell back
    ContextKind decision = ContextKind::full;
    std::optional<PromptCategoryLabel> category;
    std::optional<std::string> fallback_reason;
};

inline void to_json(nlohmann::json& j, const PolicyDecisionRecord& r) {
    j = nlohmann::json{{"messages", r.messages}, {"decision", to_string(r.decision)}};
    j["p_fc"] = r.p_fc ? nlohmann::json(*r.p_fc) : nlohmann::json(nullptr);
    j["category"] = r.category ? nlohmann::json(to_string(*r.category)) : nlohmann::json(nullptr);
    if (r.fallback_reason) j["fallback_reason"] = *r.fallback_reason;
}

/// Classifies the prompt, featurizes it, predicts P(FC beats AO), applies the
/// threshold, and returns exactly the message list build_context would
/// produce for the chosen configuration. Any feature-pipeline failure falls
/// back to cfg.fallback with the reason recorded.
inline PolicyDecisionRecord apply_policy(const Conversation& base, const std::string& user_prompt,
                                         const AdaptiveModel& model, const PolicyConfig& cfg,
                                         Gateway& judge_gateway,
                                         const GenerationParams& judge_params,
                                         Gateway& embed_gateway,
                                         const std::string& embed_model) {
    validate(cfg);
    validate_conversation(base);
    if (user_prompt.empty()) throw BoundsError("user prompt is empty");

    Conversation extended = base;
    Round next;
    next.index = static_cast<int>(base.rounds.size()) + 1;
    next.user_text = user_prompt;
    extended.rounds.push_back(std::move(next));
    const int round_index = static_cast<int>(extended.rounds.size());

    PolicyDecisionRecord record;
    try {
        PromptCategory category =
            classify_prompt(judge_gateway, judge_params, extended, round_index);
        record.category = category.label;

        ContextConfig full_cfg;
        BaseFeatures base_features;
        base_features.round_num = round_index;
        base_features.total_rounds = round_index;
        base_features.context_length_user =
            context_length(extended, round_index, Side::user, full_cfg);
        base_features.context_length_asst =
            context_length(extended, round_index, Side::assistant, full_cfg);
        base_features.category = category.label;

        const std::size_t max_chars =
            static_cast<std::size_t>(model.embed_token_window) * 4;
        std::string prompt_text = user_prompt.size() > max_chars
                                      ? user_prompt.substr(0, max_chars)
                                      : user_prompt;
        std::vector<double> prompt_embedding = embed_gateway.embed(prompt_text, embed_model);

        HistoryWindow window =
            select_history_window(extended, round_index, model.history_token_budget);
        if (window.text.empty())
            throw BoundsError("no history to embed"); // round 1 has no features
        std::vector<double> history_embedding = embed_gateway.embed(window.text, embed_model);

        FeatureVector features =
            assemble_feature_vector(base_features, prompt_embedding, history_embedding,
                                    model.pca_prompt, model.pca_history, model.norm,
                                    model.layout);
        record.p_fc = predict_proba(model.logreg, features.values);
        record.decision = decide_context(*record.p_fc, cfg);
    } catch (const Error& e) {
        record.decision = cfg.fallback;
        record.fallback_reason = e.what();
    }

    ContextConfig chosen;
    chosen.kind = record.decision;
    record.messages = build_context(extended, round_index, chosen);
    validate_message_list(record.messages);
    return record;
}

/// One-route HTTP service: POST /v1/policy with a PolicyRequest, get back
/// {messages, p_fc, decision, category}. The loaded model is immutable, so
/// concurrent requests are safe.
class PolicyServer {
public:
    PolicyServer(AdaptiveModel model, PolicyConfig cfg,
                 std::map<std::string, Conversation> corpus,
                 std::shared_ptr<Gateway> judge_gateway, GenerationParams judge_params,
                 std::shared_ptr<Gateway> embed_gateway, std::string embed_model)
        : model_(std::move(model)),
          cfg_(std::move(cfg)),
          corpus_(std::move(corpus)),
          judge_gateway_(std::move(judge_gateway)),
          judge_params_(std::move(judge_params)),
          embed_gateway_(std::move(embed_gateway)),
          embed_model_(std::move(embed_model)) {
        server_.Post("/v1/policy", [this](const httplib::Request& req, httplib::Response& res) {
            handle(req, res);
        });
    }

    /// Binds an ephemeral port and serves on a background thread; returns the
    /// port. Useful for tests and local runs.
    int start_async(const std::string& host = "127.0.0.1") {
        int port = server_.bind_to_any_port(host);
        if (port <= 0) throw Error("could not bind policy server");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port;
    }

    /// Blocking serve on a fixed port.
    void listen(const std::string& host, int port) {
        if (!server_.listen(host, port))
            throw Error("could not listen on " + host + ":" + std::to_string(port));
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    ~PolicyServer() { stop(); }

private:
    void handle(const httplib::Request& req, httplib::Response& res) {
        try {
            PolicyRequest request = nlohmann::json::parse(req.body).get<PolicyRequest>();
            const Conversation* base = nullptr;
            if (request.conversation) {
                base = &*request.conversation;
            } else if (request.conversation_id) {
                auto it = corpus_.find(*request.conversation_id);
                if (it == corpus_.end()) {
                    res.status = 404;
                    res.set_content(
                        nlohmann::json{{"error", "unknown conversation id"}}.dump(),
                        "application/json");
                    return;
                }
                base = &it->second;
            } else {
                res.status = 400;
                res.set_content(
                    nlohmann::json{{"error", "conversation or conversation_id required"}}.dump(),
                    "application/json");
                return;
            }
            PolicyDecisionRecord decision =
                apply_policy(*base, request.user_prompt, model_, cfg_, *judge_gateway_,
                             judge_params_, *embed_gateway_, embed_model_);
            res.status = 200;
            res.set_content(nlohmann::json(decision).dump(), "application/json");
        } catch (const std::exception& e) {
            res.status = 400;
            res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
        }
    }

    AdaptiveModel model_;
    PolicyConfig cfg_;
    std::map<std::string, Conversation> corpus_;
    std::shared_ptr<Gateway> judge_gateway_;
    GenerationParams judge_params_;
    std::shared_ptr<Gateway> embed_gateway_;
    std::string embed_model_;
    httplib::Server server_;
    std::thread thread_;
};

} // namespace ctxfilter
