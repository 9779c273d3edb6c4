#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ctxfilter/digest.hpp"
#include "ctxfilter/errors.hpp"
#include "ctxfilter/message.hpp"
#include "ctxfilter/ndjson.hpp"

namespace ctxfilter {

struct GenerationParams {
    std::string model_name;
    double temperature = 1.0;
    double top_p = 1.0;
    std::optional<int> top_k;
    int max_tokens = 1024;
    std::optional<std::string> reasoning_effort;
};

inline void validate(const GenerationParams& p) {
    if (p.temperature < 0) throw ConfigError("temperature must be >= 0");
    if (!(p.top_p > 0 && p.top_p <= 1)) throw ConfigError("top_p must be in (0, 1]");
}

inline void to_json(nlohmann::json& j, const GenerationParams& p) {
    j = nlohmann::json{{"model_name", p.model_name},
                       {"temperature", p.temperature},
                       {"top_p", p.top_p},
                       {"max_tokens", p.max_tokens}};
    if (p.top_k) j["top_k"] = *p.top_k;
    if (p.reasoning_effort) j["reasoning_effort"] = *p.reasoning_effort;
}

inline void from_json(const nlohmann::json& j, GenerationParams& p) {
    p.model_name = j.value("model_name", std::string{});
    p.temperature = j.value("temperature", 1.0);
    p.top_p = j.value("top_p", 1.0);
    p.max_tokens = j.value("max_tokens", 1024);
    if (j.contains("top_k") && !j["top_k"].is_null()) p.top_k = j["top_k"].get<int>();
    if (j.contains("reasoning_effort") && !j["reasoning_effort"].is_null())
        p.reasoning_effort = j["reasoning_effort"].get<std::string>();
}

struct CompletionRecord {
    std::string request_hash;
    std::string final_text;
    std::optional<std::string> reasoning_trace;
    std::int64_t prompt_units = 0;
    std::int64_t completion_units = 0;
};

struct HttpResponse {
    int status = 0;
    std::string body;
};

/// Connection-level failure (refused, timeout). Retryable, unlike an HTTP 4xx.
class TransportError : public Error {
    using Error::Error;
};

/// Minimal POST-JSON interface so tests can swap the network for scripted or
/// aborting fakes.
class Transport {
public:
    virtual ~Transport() = default;
    virtual HttpResponse post(const std::string& path, const std::string& body,
                              const std::map<std::string, std::string>& headers) = 0;
};

/// Fails hard on any use. Injected wherever a code path must be provably
/// offline (replay mode, the whole test suite).
class AbortTransport : public Transport {
public:
    HttpResponse post(const std::string&, const std::string&,
                      const std::map<std::string, std::string>&) override {
        throw Error("network use is forbidden in this mode");
    }
};

/// Hard cap on remote calls per run, shared across every gateway of the run.
class CallBudget {
public:
    explicit CallBudget(std::int64_t max_calls) : max_calls_(max_calls) {}

    void charge() {
        std::lock_guard lock(mutex_);
        if (used_ >= max_calls_)
            throw BudgetExceededError("remote call budget of " + std::to_string(max_calls_) +
                                      " exhausted");
        ++used_;
    }

    std::int64_t used() const {
        std::lock_guard lock(mutex_);
        return used_;
    }

private:
    mutable std::mutex mutex_;
    std::int64_t max_calls_;
    std::int64_t used_ = 0;
};

/// Content-addressed store of remote responses: one JSON file per request
/// hash. Concurrent readers are fine; writes go through a temp file + rename.
class ResponseCache {
public:
    explicit ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    std::optional<nlohmann::json> lookup(const std::string& hash) const {
        std::shared_lock lock(mutex_);
        auto path = entry_path(hash);
        if (!std::filesystem::exists(path)) return std::nullopt;
        return nlohmann::json::parse(read_file(path));
    }

    void store(const std::string& hash, const nlohmann::json& record) {
        std::unique_lock lock(mutex_);
        auto path = entry_path(hash);
        auto tmp = path;
        tmp += ".tmp";
        write_file(tmp, record.dump() + "\n");
        std::filesystem::rename(tmp, path);
    }

    const std::filesystem::path& dir() const { return dir_; }

private:
    std::filesystem::path entry_path(const std::string& hash) const {
        return dir_ / (hash + ".json");
    }

    std::filesystem::path dir_;
    mutable std::shared_mutex mutex_;
};

enum class GatewayMode { record, replay };

inline GatewayMode gateway_mode_from_string(std::string_view s) {
    if (s == "record") return GatewayMode::record;
    if (s == "replay") return GatewayMode::replay;
    throw ConfigError("unknown mode: " + std::string(s));
}

struct RetryPolicy {
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{250};
    double multiplier = 2.0;
};

struct GatewayOptions {
    GatewayMode mode = GatewayMode::replay;
    std::string api_key;
    std::string chat_path = "/v1/chat/completions";
    std::string embed_path = "/v1/embeddings";
    int embedding_dim = 3072;
    std::int64_t embed_token_window = 8191;
    RetryPolicy retry{};
    int max_in_flight = 4;
};

/// Uniform client for chat-completion and embedding endpoints with a
/// record-replay cache. In replay mode no transport call is ever made; a
/// missing record raises CacheMissError rather than falling back to the
/// network. In record mode the cache is consulted first, so re-running a
/// recorded stage is free and stable.
class Gateway {
public:
    struct Usage {
        std::int64_t calls = 0;        // records returned (cache or remote)
        std::int64_t remote_calls = 0; // actual transport round-trips (first try only)
        std::int64_t prompt_units = 0;
        std::int64_t completion_units = 0;
    };

    Gateway(GatewayOptions opts, std::shared_ptr<Transport> transport,
            std::shared_ptr<ResponseCache> cache, std::shared_ptr<CallBudget> budget = nullptr)
        : opts_(std::move(opts)),
          transport_(std::move(transport)),
          cache_(std::move(cache)),
          budget_(std::move(budget)),
          in_flight_slots_(opts_.max_in_flight > 0 ? opts_.max_in_flight : 1) {}

    static std::string chat_request_hash(const MessageList& messages,
                                         const GenerationParams& params, int attempt = 0) {
        nlohmann::json key{{"endpoint", "chat"},
                           {"model", params.model_name},
                           {"messages", messages},
                           {"params", params},
                           {"attempt", attempt}};
        return sha256_hex(key.dump());
    }

    static std::string embed_request_hash(const std::string& model_name,
                                          const std::string& text) {
        nlohmann::json key{{"endpoint", "embed"}, {"model", model_name}, {"text", text}};
        return sha256_hex(key.dump());
    }

    /// `attempt` only salts the cache key; it lets a caller re-ask after an
    /// unparseable verdict without aliasing the first sample.
    CompletionRecord chat(const MessageList& messages, const GenerationParams& params,
                          int attempt = 0) {
        validate_message_list(messages);
        validate(params);
        const std::string hash = chat_request_hash(messages, params, attempt);

        if (auto cached = cache_->lookup(hash)) {
            return record_from_cache(hash, *cached);
        }
        if (opts_.mode == GatewayMode::replay)
            throw CacheMissError("replay miss for chat request " + hash);

        nlohmann::json body{{"model", params.model_name},
                            {"messages", messages},
                            {"temperature", params.temperature},
                            {"top_p", params.top_p},
                            {"max_tokens", params.max_tokens}};
        if (params.top_k) body["top_k"] = *params.top_k;
        if (params.reasoning_effort) body["reasoning_effort"] = *params.reasoning_effort;

        HttpResponse resp = post_with_retries(opts_.chat_path, body.dump());
        CompletionRecord rec = parse_chat_response(hash, resp.body);

        nlohmann::json stored{{"kind", "chat"},
                              {"request_hash", rec.request_hash},
                              {"final_text", rec.final_text},
                              {"prompt_units", rec.prompt_units},
                              {"completion_units", rec.completion_units}};
        if (rec.reasoning_trace) stored["reasoning_trace"] = *rec.reasoning_trace;
        cache_->store(hash, stored);

        account(rec.prompt_units, rec.completion_units);
        return rec;
    }

    std::vector<double> embed(const std::string& text, const std::string& model_name) {
        if (text.empty()) throw BoundsError("embedding input is empty");
        if (estimate_tokens(text) > opts_.embed_token_window)
            throw WindowExceededError("embedding input exceeds the " +
                                      std::to_string(opts_.embed_token_window) +
                                      "-token window; truncate first");
        const std::string hash = embed_request_hash(model_name, text);

        if (auto cached = cache_->lookup(hash)) {
            account(cached->value("prompt_units", std::int64_t{0}), 0);
            return cached->at("vector").get<std::vector<double>>();
        }
        if (opts_.mode == GatewayMode::replay)
            throw CacheMissError("replay miss for embedding request " + hash);

        nlohmann::json body{{"model", model_name}, {"input", text}};
        HttpResponse resp = post_with_retries(opts_.embed_path, body.dump());

        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(resp.body);
        } catch (const nlohmann::json::exception& e) {
            throw GatewayError(std::string("malformed embedding response: ") + e.what());
        }
        if (!parsed.contains("data") || parsed["data"].empty())
            throw GatewayError("embedding response has no data");
        auto vector = parsed["data"][0].at("embedding").get<std::vector<double>>();
        if (static_cast<int>(vector.size()) != opts_.embedding_dim)
            throw GatewayError("embedding has dimension " + std::to_string(vector.size()) +
                               ", expected " + std::to_string(opts_.embedding_dim));
        std::int64_t prompt_units = 0;
        if (parsed.contains("usage"))
            prompt_units = parsed["usage"].value("prompt_tokens", std::int64_t{0});

        cache_->store(hash, nlohmann::json{{"kind", "embed"},
                                           {"request_hash", hash},
                                           {"vector", vector},
                                           {"prompt_units", prompt_units}});
        account(prompt_units, 0);
        return vector;
    }

    Usage usage() const {
        std::lock_guard lock(usage_mutex_);
        return usage_;
    }

    const GatewayOptions& options() const { return opts_; }
    ResponseCache& cache() { return *cache_; }

private:
    CompletionRecord record_from_cache(const std::string& hash, const nlohmann::json& cached) {
        CompletionRecord rec;
        rec.request_hash = hash;
        rec.final_text = cached.at("final_text").get<std::string>();
        if (cached.contains("reasoning_trace") && !cached["reasoning_trace"].is_null())
            rec.reasoning_trace = cached["reasoning_trace"].get<std::string>();
        rec.prompt_units = cached.value("prompt_units", std::int64_t{0});
        rec.completion_units = cached.value("completion_units", std::int64_t{0});
        account(rec.prompt_units, rec.completion_units);
        return rec;
    }

    CompletionRecord parse_chat_response(const std::string& hash, const std::string& body) {
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception& e) {
            throw GatewayError(std::string("malformed completion response: ") + e.what());
        }
        if (!parsed.contains("choices") || parsed["choices"].empty())
            throw GatewayError("completion response has no choices");
        const auto& message = parsed["choices"][0].at("message");
        CompletionRecord rec;
        rec.request_hash = hash;
        rec.final_text = message.value("content", std::string{});
        if (message.contains("reasoning_content") && !message["reasoning_content"].is_null())
            rec.reasoning_trace = message["reasoning_content"].get<std::string>();
        if (parsed.contains("usage")) {
            rec.prompt_units = parsed["usage"].value("prompt_tokens", std::int64_t{0});
            rec.completion_units = parsed["usage"].value("completion_tokens", std::int64_t{0});
        }
        if (rec.prompt_units < 0 || rec.completion_units < 0)
            throw GatewayError("negative usage counters in completion response");
        return rec;
    }

    HttpResponse post_with_retries(const std::string& path, const std::string& body) {
        std::map<std::string, std::string> headers{{"Content-Type", "application/json"}};
        if (!opts_.api_key.empty()) headers["Authorization"] = "Bearer " + opts_.api_key;

        InFlightSlot slot(*this);
        auto backoff = opts_.retry.initial_backoff;
        for (int try_index = 0; try_index <= opts_.retry.max_retries; ++try_index) {
            if (try_index > 0) {
                std::this_thread::sleep_for(backoff);
                backoff = std::chrono::milliseconds(static_cast<std::int64_t>(
                    static_cast<double>(backoff.count()) * opts_.retry.multiplier));
            }
            if (budget_) budget_->charge();
            {
                std::lock_guard lock(usage_mutex_);
                ++usage_.remote_calls;
            }
            try {
                HttpResponse resp = transport_->post(path, body, headers);
                if (resp.status >= 200 && resp.status < 300) return resp;
                bool retryable = resp.status >= 500 || resp.status == 429;
                if (!retryable)
                    throw GatewayError("endpoint returned status " + std::to_string(resp.status) +
                                           ": " + resp.body,
                                       resp.status);
                if (try_index == opts_.retry.max_retries)
                    throw GatewayError("retries exhausted, last status " +
                                           std::to_string(resp.status),
                                       resp.status);
            } catch (const TransportError& e) {
                if (try_index == opts_.retry.max_retries)
                    throw GatewayError(std::string("retries exhausted: ") + e.what());
            }
        }
        throw GatewayError("unreachable retry state");
    }

    void account(std::int64_t prompt_units, std::int64_t completion_units) {
        std::lock_guard lock(usage_mutex_);
        ++usage_.calls;
        usage_.prompt_units += prompt_units;
        usage_.completion_units += completion_units;
    }

    // Bounded in-flight remote requests. A tiny mutex/condvar semaphore keeps
    // the limit runtime-configurable.
    class InFlightSlot {
    public:
        explicit InFlightSlot(Gateway& gw) : gw_(gw) {
            std::unique_lock lock(gw_.in_flight_mutex_);
            gw_.in_flight_cv_.wait(lock, [&] { return gw_.in_flight_ < gw_.in_flight_slots_; });
            ++gw_.in_flight_;
        }
        ~InFlightSlot() {
            {
                std::lock_guard lock(gw_.in_flight_mutex_);
                --gw_.in_flight_;
            }
            gw_.in_flight_cv_.notify_one();
        }

    private:
        Gateway& gw_;
    };

    GatewayOptions opts_;
    std::shared_ptr<Transport> transport_;
    std::shared_ptr<ResponseCache> cache_;
    std::shared_ptr<CallBudget> budget_;

    mutable std::mutex usage_mutex_;
    Usage usage_;

    std::mutex in_flight_mutex_;
    std::condition_variable in_flight_cv_;
    int in_flight_ = 0;
    int in_flight_slots_;
};

} // namespace ctxfilter
