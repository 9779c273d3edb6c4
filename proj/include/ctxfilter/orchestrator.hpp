#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ctxfilter/corpus.hpp"
#include "ctxfilter/digest.hpp"
#include "ctxfilter/errors.hpp"
#include "ctxfilter/featurizer.hpp"
#include "ctxfilter/gateway.hpp"
#include "ctxfilter/judging.hpp"
#include "ctxfilter/learner.hpp"
#include "ctxfilter/ndjson.hpp"
#include "ctxfilter/policy.hpp"
#include "ctxfilter/random.hpp"

namespace ctxfilter {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& canonical_stage_order() {
    static const std::vector<std::string> order{"ingest",   "generate", "judge", "classify",
                                                "featurize", "train",    "sweep", "report"};
    return order;
}

struct EndpointSettings {
    std::string base_url_env;
    std::string api_key_env;
    GenerationParams params; // params.model_name names the served model
};

struct RunConfig {
    std::vector<std::string> stages = canonical_stage_order();
    std::string corpus_path;
    GatewayMode mode = GatewayMode::replay;
    std::uint64_t seed = 0;

    std::vector<ContextKind> context_configs{ContextKind::full, ContextKind::assistant_omitted};
    std::vector<JudgeVariant> judge_variants{JudgeVariant::full_history};
    bool numeric_judging = true;
    JudgingOptions judging{};
    JudgeVariant label_variant = JudgeVariant::full_history;

    FilterConfig filter = default_filter_config();

    EndpointSettings responder{"CTX_RESPONDER_BASE_URL", "CTX_RESPONDER_API_KEY", {}};
    EndpointSettings judge{"CTX_JUDGE_BASE_URL", "CTX_JUDGE_API_KEY", {}};
    EndpointSettings embedder{"CTX_EMBEDDER_BASE_URL", "CTX_EMBEDDER_API_KEY", {}};

    int embedding_dim = 3072;
    std::int64_t embed_token_window = 8191;
    std::int64_t history_token_budget = 8191;
    FeatureLayout layout{};

    int cv_folds = 5;
    int lambda_grid_points = 20;
    double lambda_grid_min_ratio = 1e-4;
    std::optional<int> lambda_subsample; // randomized search over the grid

    PolicyConfig policy{};
    std::vector<double> sweep_taus; // default filled by validate(): 0, 0.05, ..., 1

    std::int64_t max_remote_calls = 100000;
    RetryPolicy retry{};
    int max_in_flight = 4;
    int workers = 1;
};

inline void validate(RunConfig& cfg) {
    const auto& order = canonical_stage_order();
    if (cfg.stages.size() > order.size()) throw ConfigError("too many stages");
    for (std::size_t i = 0; i < cfg.stages.size(); ++i)
        if (cfg.stages[i] != order[i])
            throw ConfigError("stages must form a prefix of the canonical order; got '" +
                              cfg.stages[i] + "' at position " + std::to_string(i));
    if (cfg.corpus_path.empty()) throw ConfigError("corpus_path is required");
    validate(cfg.filter);
    validate(cfg.policy);
    bool has_full = false, has_ao = false;
    for (ContextKind kind : cfg.context_configs) {
        has_full |= kind == ContextKind::full;
        has_ao |= kind == ContextKind::assistant_omitted;
    }
    if (!has_full || !has_ao)
        throw ConfigError("context_configs must include full and assistant_omitted");
    if (cfg.sweep_taus.empty())
        for (int i = 0; i <= 20; ++i) cfg.sweep_taus.push_back(static_cast<double>(i) / 20.0);
}

inline void to_json(nlohmann::json& j, const EndpointSettings& e) {
    j = nlohmann::json{{"base_url_env", e.base_url_env},
                       {"api_key_env", e.api_key_env},
                       {"params", e.params}};
}

inline void from_json(const nlohmann::json& j, EndpointSettings& e) {
    e.base_url_env = j.value("base_url_env", e.base_url_env);
    e.api_key_env = j.value("api_key_env", e.api_key_env);
    if (j.contains("params")) e.params = j["params"].get<GenerationParams>();
}

inline void to_json(nlohmann::json& j, const FilterConfig& f) {
    j = nlohmann::json{{"min_rounds", f.min_rounds},
                       {"max_rounds", f.max_rounds},
                       {"keyword_lists", f.keyword_lists},
                       {"toxicity_threshold", f.toxicity_threshold},
                       {"sample_size", f.sample_size},
                       {"seed", f.seed}};
    if (f.language_allowlist) j["language_allowlist"] = *f.language_allowlist;
}

inline void from_json(const nlohmann::json& j, FilterConfig& f) {
    f.min_rounds = j.value("min_rounds", f.min_rounds);
    f.max_rounds = j.value("max_rounds", f.max_rounds);
    // absent keyword lists mean the stock technical lists, not "match nothing"
    f.keyword_lists = j.contains("keyword_lists")
                          ? j["keyword_lists"].get<std::map<std::string, std::vector<std::string>>>()
                          : default_filter_config().keyword_lists;
    f.toxicity_threshold = j.value("toxicity_threshold", f.toxicity_threshold);
    f.sample_size = j.value("sample_size", f.sample_size);
    f.seed = j.value("seed", f.seed);
    if (j.contains("language_allowlist") && !j["language_allowlist"].is_null())
        f.language_allowlist = j["language_allowlist"].get<std::set<std::string>>();
}

inline void to_json(nlohmann::json& j, const PolicyConfig& p) {
    j = nlohmann::json{{"tau", p.tau}, {"fallback", to_string(p.fallback)}};
}

inline void from_json(const nlohmann::json& j, PolicyConfig& p) {
    p.tau = j.value("tau", 0.5);
    p.fallback = context_kind_from_string(j.value("fallback", std::string("full")));
}

inline void to_json(nlohmann::json& j, const RunConfig& cfg) {
    std::vector<std::string> kinds, variants;
    for (ContextKind k : cfg.context_configs) kinds.emplace_back(to_string(k));
    for (JudgeVariant v : cfg.judge_variants) variants.emplace_back(to_string(v));
    j = nlohmann::json{{"stages", cfg.stages},
                       {"corpus_path", cfg.corpus_path},
                       {"mode", cfg.mode == GatewayMode::record ? "record" : "replay"},
                       {"seed", cfg.seed},
                       {"context_configs", kinds},
                       {"judge_variants", variants},
                       {"numeric_judging", cfg.numeric_judging},
                       {"include_reasoning", cfg.judging.include_reasoning},
                       {"label_variant", to_string(cfg.label_variant)},
                       {"filter", cfg.filter},
                       {"responder", cfg.responder},
                       {"judge", cfg.judge},
                       {"embedder", cfg.embedder},
                       {"embedding_dim", cfg.embedding_dim},
                       {"embed_token_window", cfg.embed_token_window},
                       {"history_token_budget", cfg.history_token_budget},
                       {"prompt_components", cfg.layout.prompt_components},
                       {"history_components", cfg.layout.history_components},
                       {"cv_folds", cfg.cv_folds},
                       {"lambda_grid_points", cfg.lambda_grid_points},
                       {"lambda_grid_min_ratio", cfg.lambda_grid_min_ratio},
                       {"policy", cfg.policy},
                       {"sweep_taus", cfg.sweep_taus},
                       {"max_remote_calls", cfg.max_remote_calls},
                       {"max_retries", cfg.retry.max_retries},
                       {"initial_backoff_ms", cfg.retry.initial_backoff.count()},
                       {"max_in_flight", cfg.max_in_flight},
                       {"workers", cfg.workers}};
    if (cfg.lambda_subsample) j["lambda_subsample"] = *cfg.lambda_subsample;
}

inline void from_json(const nlohmann::json& j, RunConfig& cfg) {
    if (j.contains("stages")) cfg.stages = j["stages"].get<std::vector<std::string>>();
    cfg.corpus_path = j.value("corpus_path", cfg.corpus_path);
    cfg.mode = gateway_mode_from_string(j.value("mode", std::string("replay")));
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("context_configs")) {
        cfg.context_configs.clear();
        for (const auto& kind : j["context_configs"])
            cfg.context_configs.push_back(context_kind_from_string(kind.get<std::string>()));
    }
    if (j.contains("judge_variants")) {
        cfg.judge_variants.clear();
        for (const auto& variant : j["judge_variants"])
            cfg.judge_variants.push_back(judge_variant_from_string(variant.get<std::string>()));
    }
    cfg.numeric_judging = j.value("numeric_judging", cfg.numeric_judging);
    cfg.judging.include_reasoning = j.value("include_reasoning", cfg.judging.include_reasoning);
    cfg.label_variant =
        judge_variant_from_string(j.value("label_variant", std::string("full_history")));
    // get_to keeps the struct's defaults for fields the JSON leaves out
    if (j.contains("filter")) j["filter"].get_to(cfg.filter);
    if (j.contains("responder")) j["responder"].get_to(cfg.responder);
    if (j.contains("judge")) j["judge"].get_to(cfg.judge);
    if (j.contains("embedder")) j["embedder"].get_to(cfg.embedder);
    cfg.embedding_dim = j.value("embedding_dim", cfg.embedding_dim);
    cfg.embed_token_window = j.value("embed_token_window", cfg.embed_token_window);
    cfg.history_token_budget = j.value("history_token_budget", cfg.history_token_budget);
    cfg.layout.prompt_components = j.value("prompt_components", cfg.layout.prompt_components);
    cfg.layout.history_components = j.value("history_components", cfg.layout.history_components);
    cfg.cv_folds = j.value("cv_folds", cfg.cv_folds);
    cfg.lambda_grid_points = j.value("lambda_grid_points", cfg.lambda_grid_points);
    cfg.lambda_grid_min_ratio = j.value("lambda_grid_min_ratio", cfg.lambda_grid_min_ratio);
    if (j.contains("lambda_subsample") && !j["lambda_subsample"].is_null())
        cfg.lambda_subsample = j["lambda_subsample"].get<int>();
    if (j.contains("policy")) cfg.policy = j["policy"].get<PolicyConfig>();
    if (j.contains("sweep_taus")) cfg.sweep_taus = j["sweep_taus"].get<std::vector<double>>();
    cfg.max_remote_calls = j.value("max_remote_calls", cfg.max_remote_calls);
    cfg.retry.max_retries = j.value("max_retries", cfg.retry.max_retries);
    cfg.retry.initial_backoff =
        std::chrono::milliseconds(j.value("initial_backoff_ms", cfg.retry.initial_backoff.count()));
    cfg.max_in_flight = j.value("max_in_flight", cfg.max_in_flight);
    cfg.workers = j.value("workers", cfg.workers);
}

inline std::string config_digest(const RunConfig& cfg) {
    nlohmann::json j = cfg;
    return sha256_hex(j.dump());
}

// ---------------------------------------------------------------------------
// Run directory: the unit of reproducibility (config + cache + artifacts)
// ---------------------------------------------------------------------------

namespace artifact {
inline constexpr std::string_view kConfig = "config.json";
inline constexpr std::string_view kDecisions = "decisions.ndjson";
inline constexpr std::string_view kCorpus = "corpus.ndjson";
inline constexpr std::string_view kGenerated = "generated.ndjson";
inline constexpr std::string_view kJudgments = "judgments.ndjson";
inline constexpr std::string_view kScores = "scores.ndjson";
inline constexpr std::string_view kClassifications = "classifications.ndjson";
inline constexpr std::string_view kFeatures = "features.ndjson";
inline constexpr std::string_view kPcaPrompt = "pca_prompt.json";
inline constexpr std::string_view kPcaHistory = "pca_history.json";
inline constexpr std::string_view kMetadataNorm = "metadata_norm.json";
inline constexpr std::string_view kModel = "model.json";
inline constexpr std::string_view kSweep = "sweep.json";
inline constexpr std::string_view kSweepCsv = "sweep.csv";
inline constexpr std::string_view kReport = "report.json";
inline constexpr std::string_view kReportTxt = "report.txt";
} // namespace artifact

/// Owner of one run's files. Every JSON artifact carries the digest of the
/// config that produced it; readers refuse digest mismatches instead of
/// silently mixing runs. Writes compare content first, so re-running a
/// completed stage with identical inputs changes nothing.
class RunDir {
public:
    RunDir(std::filesystem::path root, const RunConfig& cfg)
        : root_(std::move(root)), digest_(config_digest(cfg)) {
        std::filesystem::create_directories(root_);
        std::filesystem::create_directories(root_ / "cache");
        std::filesystem::create_directories(root_ / "reports");
    }

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path cache_dir() const { return root_ / "cache"; }
    const std::string& digest() const { return digest_; }

    std::filesystem::path path_of(std::string_view artifact_name) const {
        return root_ / artifact_name;
    }

    bool exists(std::string_view artifact_name) const {
        return std::filesystem::exists(path_of(artifact_name));
    }

    /// Returns true when the file was created or its content changed.
    bool write_text(std::string_view artifact_name, const std::string& content) {
        auto path = path_of(artifact_name);
        if (std::filesystem::exists(path) && read_file(path) == content) return false;
        write_file(path, content);
        return true;
    }

    bool write_ndjson_artifact(std::string_view artifact_name, const std::string& stage,
                               const std::vector<nlohmann::json>& records) {
        std::string content =
            nlohmann::json{{"meta", {{"stage", stage}, {"config_digest", digest_}}}}.dump();
        content += '\n';
        for (const auto& rec : records) {
            content += rec.dump();
            content += '\n';
        }
        return write_text(artifact_name, content);
    }

    /// Validates the meta line before handing records back; a missing file is
    /// a dependency error naming the stage to run first.
    std::vector<nlohmann::json> read_ndjson_artifact(std::string_view artifact_name,
                                                     const std::string& producing_stage) const {
        auto path = path_of(artifact_name);
        if (!std::filesystem::exists(path))
            throw DependencyError("artifact " + std::string(artifact_name) +
                                      " missing; run stage '" + producing_stage + "' first",
                                  producing_stage);
        auto records = read_ndjson(path);
        if (records.empty() || !records.front().contains("meta"))
            throw ConfigError(std::string(artifact_name) + " lacks the meta line");
        check_meta(records.front()["meta"], artifact_name);
        records.erase(records.begin());
        return records;
    }

    bool write_json_artifact(std::string_view artifact_name, const std::string& stage,
                             nlohmann::json object) {
        object["meta"] = {{"stage", stage}, {"config_digest", digest_}};
        return write_text(artifact_name, object.dump(2) + "\n");
    }

    nlohmann::json read_json_artifact(std::string_view artifact_name,
                                      const std::string& producing_stage) const {
        auto path = path_of(artifact_name);
        if (!std::filesystem::exists(path))
            throw DependencyError("artifact " + std::string(artifact_name) +
                                      " missing; run stage '" + producing_stage + "' first",
                                  producing_stage);
        nlohmann::json object = nlohmann::json::parse(read_file(path));
        if (!object.contains("meta"))
            throw ConfigError(std::string(artifact_name) + " lacks meta");
        check_meta(object["meta"], artifact_name);
        return object;
    }

    std::string artifact_digest(std::string_view artifact_name) const {
        return sha256_hex(read_file(path_of(artifact_name)));
    }

private:
    void check_meta(const nlohmann::json& meta, std::string_view artifact_name) const {
        const std::string found = meta.value("config_digest", std::string{});
        if (found != digest_)
            throw ConfigError(std::string(artifact_name) + " was produced by config digest " +
                              found + ", current config is " + digest_);
    }

    std::filesystem::path root_;
    std::string digest_;
};

// ---------------------------------------------------------------------------
// Stage execution
// ---------------------------------------------------------------------------

struct StageReport {
    std::string stage;
    std::string config_digest;
    std::map<std::string, std::int64_t> counts;
    std::vector<std::string> failures; // audit entries for excluded items
    std::vector<std::pair<std::string, std::string>> artifacts; // (name, digest)
    // Not persisted: a warm-cache rerun must leave the directory untouched,
    // and these two legitimately differ between cold and warm runs.
    int new_artifacts = 0;
    std::int64_t remote_calls = 0;
};

inline void to_json(nlohmann::json& j, const StageReport& r) {
    nlohmann::json artifacts = nlohmann::json::array();
    for (const auto& [name, digest] : r.artifacts)
        artifacts.push_back({{"name", name}, {"digest", digest}});
    j = nlohmann::json{{"stage", r.stage},
                       {"config_digest", r.config_digest},
                       {"counts", r.counts},
                       {"failures", r.failures},
                       {"artifacts", artifacts}};
}

struct TransportSet {
    std::shared_ptr<Transport> responder;
    std::shared_ptr<Transport> judge;
    std::shared_ptr<Transport> embedder;

    static TransportSet aborting() {
        auto abort = std::make_shared<AbortTransport>();
        return {abort, abort, abort};
    }
};

/// Everything a stage needs. The budget is shared across stages of one
/// invocation so the remote-call cap is per run, not per stage.
struct StageContext {
    RunConfig cfg;
    std::shared_ptr<RunDir> dir;
    TransportSet transports;
    std::shared_ptr<CallBudget> budget;

    StageContext(RunConfig config, const std::filesystem::path& run_root, TransportSet set)
        : cfg(std::move(config)), transports(std::move(set)) {
        validate(cfg);
        dir = std::make_shared<RunDir>(run_root, cfg);
        budget = std::make_shared<CallBudget>(cfg.max_remote_calls);
        cache = std::make_shared<ResponseCache>(dir->cache_dir());
        nlohmann::json j = cfg;
        dir->write_text(artifact::kConfig, j.dump(2) + "\n");
    }

    std::shared_ptr<Gateway> make_gateway(const EndpointSettings& endpoint,
                                          std::shared_ptr<Transport> transport) const {
        GatewayOptions opts;
        opts.mode = cfg.mode;
        if (cfg.mode == GatewayMode::record) {
            const char* key = endpoint.api_key_env.empty()
                                  ? nullptr
                                  : std::getenv(endpoint.api_key_env.c_str());
            if (key) opts.api_key = key;
        }
        opts.embedding_dim = cfg.embedding_dim;
        opts.embed_token_window = cfg.embed_token_window;
        opts.retry = cfg.retry;
        opts.max_in_flight = cfg.max_in_flight;
        return std::make_shared<Gateway>(opts, std::move(transport), cache, budget);
    }

    std::shared_ptr<ResponseCache> cache;
};

namespace detail {

/// Deterministic fan-out: items land in per-index slots, so results are
/// ordered no matter how many workers ran.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&] {
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    for (int w = 0; w < std::min<int>(workers, static_cast<int>(n)); ++w)
        pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

inline std::vector<Conversation> load_conversations(const RunDir& dir,
                                                    std::string_view artifact_name,
                                                    const std::string& producing_stage) {
    std::vector<Conversation> out;
    for (const auto& rec : dir.read_ndjson_artifact(artifact_name, producing_stage))
        out.push_back(rec.get<Conversation>());
    return out;
}

/// Context size in tokens for the sweep: provider-reported prompt usage when
/// present, else characters / 4 over the whole message list.
inline double context_tokens(const Conversation& conv, int round_index, ContextKind kind) {
    const Round& round = conv.rounds[static_cast<std::size_t>(round_index) - 1];
    auto it = round.response_variants.find(std::string(to_string(kind)));
    if (it != round.response_variants.end() && it->second.prompt_units > 0)
        return static_cast<double>(it->second.prompt_units);
    ContextConfig cfg;
    cfg.kind = kind;
    std::int64_t chars = 0;
    for (const Message& m : build_context(conv, round_index, cfg))
        chars += static_cast<std::int64_t>(m.content.size());
    return static_cast<double>(chars) / 4.0;
}

inline std::string truncate_to_window(const std::string& text, std::int64_t token_window) {
    const std::size_t max_chars = static_cast<std::size_t>(token_window) * 4;
    if (text.size() <= max_chars) return text;
    return text.substr(0, max_chars);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// ingest: filter + sample the raw dump into the normalized fixture corpus.
/// Raw records may carry a "toxicity" field from an external scorer; absent
/// means 0 (not toxic).
inline StageReport stage_ingest(StageContext& ctx,
                                const std::optional<std::filesystem::path>& in_override = {},
                                const std::optional<std::filesystem::path>& out_override = {}) {
    StageReport report{.stage = "ingest", .config_digest = ctx.dir->digest()};
    const std::filesystem::path in_path =
        in_override.value_or(std::filesystem::path(ctx.cfg.corpus_path));

    std::vector<nlohmann::json> decisions;
    std::vector<RawConversation> kept;
    for (const auto& rec : read_ndjson(in_path)) {
        nlohmann::json annotated = rec;
        try {
            RawConversation conv = raw_conversation_from_json(rec);
            const double toxicity = rec.value("toxicity", 0.0);
            FilterDecision decision = filter_conversation(conv, ctx.cfg.filter, toxicity);
            annotated["filter_decision"] = decision.keep ? "keep" : "reject";
            if (!decision.keep) annotated["reject_reason"] = to_string(*decision.reason);
            if (decision.keep) kept.push_back(std::move(conv));
        } catch (const StructuralError& e) {
            annotated["filter_decision"] = "error";
            report.failures.emplace_back(e.what());
        }
        decisions.push_back(std::move(annotated));
    }

    const std::size_t sample_n =
        std::min<std::size_t>(kept.size(), static_cast<std::size_t>(ctx.cfg.filter.sample_size));
    std::vector<RawConversation> sampled = sample_corpus(kept, sample_n, ctx.cfg.seed);

    std::vector<nlohmann::json> corpus;
    for (const auto& raw : sampled) {
        Conversation conv = normalize(raw);
        validate_conversation(conv);
        corpus.push_back(conv);
    }

    report.counts["records"] = static_cast<std::int64_t>(decisions.size());
    report.counts["kept"] = static_cast<std::int64_t>(kept.size());
    report.counts["sampled"] = static_cast<std::int64_t>(sampled.size());

    report.new_artifacts +=
        ctx.dir->write_ndjson_artifact(artifact::kDecisions, "ingest", decisions) ? 1 : 0;
    report.new_artifacts +=
        ctx.dir->write_ndjson_artifact(artifact::kCorpus, "ingest", corpus) ? 1 : 0;
    if (out_override) {
        std::vector<nlohmann::json> plain = decisions;
        write_ndjson(*out_override, plain);
    }
    report.artifacts.emplace_back(artifact::kDecisions,
                                  ctx.dir->artifact_digest(artifact::kDecisions));
    report.artifacts.emplace_back(artifact::kCorpus, ctx.dir->artifact_digest(artifact::kCorpus));
    return report;
}

/// generate: produce responses for every round under every configured
/// context. For the summarized configuration, one-sentence summaries are
/// produced first and persisted on the rounds.
inline StageReport stage_generate(StageContext& ctx) {
    StageReport report{.stage = "generate", .config_digest = ctx.dir->digest()};
    std::vector<Conversation> corpus =
        detail::load_conversations(*ctx.dir, artifact::kCorpus, "ingest");
    auto responder = ctx.make_gateway(ctx.cfg.responder, ctx.transports.responder);

    const bool wants_summarized =
        std::find(ctx.cfg.context_configs.begin(), ctx.cfg.context_configs.end(),
                  ContextKind::summarized) != ctx.cfg.context_configs.end();

    std::atomic<std::int64_t> responses{0}, summaries{0};
    std::vector<std::vector<std::string>> failures(corpus.size());

    detail::parallel_for(corpus.size(), ctx.cfg.workers, [&](std::size_t idx) {
        Conversation& conv = corpus[idx];
        if (wants_summarized) {
            for (Round& round : conv.rounds) {
                if (!round.assistant_text) continue;
                try {
                    round.assistant_summary =
                        summarize_response(*round.assistant_text, *responder,
                                           ctx.cfg.responder.params);
                    ++summaries;
                } catch (const BudgetExceededError&) {
                    throw; // the cap is a hard stop, not an audit entry
                } catch (const Error& e) {
                    failures[idx].push_back(conv.id + "#" + std::to_string(round.index) +
                                            " summary: " + e.what());
                }
            }
        }
        for (Round& round : conv.rounds) {
            for (ContextKind kind : ctx.cfg.context_configs) {
                ContextConfig context_cfg;
                context_cfg.kind = kind;
                try {
                    MessageList messages = build_context(conv, round.index, context_cfg);
                    CompletionRecord rec = responder->chat(messages, ctx.cfg.responder.params);
                    GeneratedResponse response;
                    response.text = rec.final_text;
                    response.reasoning = rec.reasoning_trace;
                    response.prompt_units = rec.prompt_units;
                    response.completion_units = rec.completion_units;
                    round.response_variants[std::string(to_string(kind))] = std::move(response);
                    ++responses;
                } catch (const IncompleteRoundError& e) {
                    failures[idx].push_back(e.what());
                } catch (const CacheMissError& e) {
                    failures[idx].push_back(e.what());
                } catch (const GatewayError& e) {
                    failures[idx].push_back(conv.id + "#" + std::to_string(round.index) + " " +
                                            std::string(to_string(kind)) + ": " + e.what());
                }
            }
        }
    });

    for (auto& per_conv : failures)
        report.failures.insert(report.failures.end(), per_conv.begin(), per_conv.end());

    std::vector<nlohmann::json> records;
    for (const Conversation& conv : corpus) records.push_back(conv);
    report.counts["conversations"] = static_cast<std::int64_t>(corpus.size());
    report.counts["responses"] = responses.load();
    report.counts["summaries"] = summaries.load();
    report.counts["calls"] = responder->usage().calls;
    report.remote_calls = responder->usage().remote_calls;
    report.new_artifacts +=
        ctx.dir->write_ndjson_artifact(artifact::kGenerated, "generate", records) ? 1 : 0;
    report.artifacts.emplace_back(artifact::kGenerated,
                                  ctx.dir->artifact_digest(artifact::kGenerated));
    return report;
}

/// judge: pairwise FC-vs-AO verdicts per round (from round 2) for each
/// configured judge variant, plus 1-10 numeric scores per configuration when
/// numeric judging is on. Unparseable verdicts are excluded with an audit
/// entry after one re-ask.
inline StageReport stage_judge(StageContext& ctx) {
    StageReport report{.stage = "judge", .config_digest = ctx.dir->digest()};
    std::vector<Conversation> corpus =
        detail::load_conversations(*ctx.dir, artifact::kGenerated, "generate");
    auto judge = ctx.make_gateway(ctx.cfg.judge, ctx.transports.judge);

    std::vector<std::vector<nlohmann::json>> judgment_rows(corpus.size());
    std::vector<std::vector<nlohmann::json>> score_rows(corpus.size());
    std::vector<std::vector<std::string>> failures(corpus.size());

    detail::parallel_for(corpus.size(), ctx.cfg.workers, [&](std::size_t idx) {
        const Conversation& conv = corpus[idx];
        for (const Round& round : conv.rounds) {
            if (round.index < 2) continue;
            auto fc_it = round.response_variants.find("full");
            auto ao_it = round.response_variants.find("assistant_omitted");
            if (fc_it == round.response_variants.end() ||
                ao_it == round.response_variants.end()) {
                failures[idx].push_back(conv.id + "#" + std::to_string(round.index) +
                                        ": missing generated responses");
                continue;
            }
            const std::string fc_text = judged_text(fc_it->second, ctx.cfg.judging);
            const std::string ao_text = judged_text(ao_it->second, ctx.cfg.judging);

            for (JudgeVariant variant : ctx.cfg.judge_variants) {
                std::mt19937_64 rng(derive_seed(
                    ctx.cfg.seed, conv.id + "#" + std::to_string(round.index) + "#" +
                                      std::string(to_string(variant))));
                try {
                    PairwiseJudgment judgment =
                        judge_pair(*judge, ctx.cfg.judge.params, conv, round.index, fc_text,
                                   ao_text, variant, rng);
                    nlohmann::json row = judgment;
                    row["conv_id"] = conv.id;
                    row["config_pair"] = "full_vs_assistant_omitted";
                    judgment_rows[idx].push_back(std::move(row));
                } catch (const JudgmentParseError& e) {
                    failures[idx].push_back(conv.id + "#" + std::to_string(round.index) + " " +
                                            std::string(to_string(variant)) +
                                            ": excluded, unparseable verdict: " + e.what());
                } catch (const BudgetExceededError&) {
                    throw; // the cap is a hard stop, not an audit entry
                } catch (const Error& e) {
                    failures[idx].push_back(conv.id + "#" + std::to_string(round.index) + " " +
                                            std::string(to_string(variant)) + ": " + e.what());
                }
            }

            if (ctx.cfg.numeric_judging) {
                for (ContextKind kind :
                     {ContextKind::full, ContextKind::assistant_omitted}) {
                    auto it = round.response_variants.find(std::string(to_string(kind)));
                    if (it == round.response_variants.end()) continue;
                    try {
                        NumericJudgment score = score_response(
                            *judge, ctx.cfg.judge.params, conv, round.index,
                            judged_text(it->second, ctx.cfg.judging), kind);
                        nlohmann::json row = score;
                        row["conv_id"] = conv.id;
                        score_rows[idx].push_back(std::move(row));
                    } catch (const JudgmentParseError& e) {
                        failures[idx].push_back(conv.id + "#" + std::to_string(round.index) +
                                                " " + std::string(to_string(kind)) +
                                                ": excluded, unparseable score: " + e.what());
                    } catch (const BudgetExceededError&) {
                        throw; // the cap is a hard stop, not an audit entry
                    } catch (const Error& e) {
                        failures[idx].push_back(conv.id + "#" + std::to_string(round.index) +
                                                " " + std::string(to_string(kind)) + ": " +
                                                e.what());
                    }
                }
            }
        }
    });

    std::vector<nlohmann::json> judgments, scores;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        judgments.insert(judgments.end(), judgment_rows[i].begin(), judgment_rows[i].end());
        scores.insert(scores.end(), score_rows[i].begin(), score_rows[i].end());
        report.failures.insert(report.failures.end(), failures[i].begin(), failures[i].end());
    }
    report.counts["judgments"] = static_cast<std::int64_t>(judgments.size());
    report.counts["scores"] = static_cast<std::int64_t>(scores.size());
    report.counts["excluded"] = static_cast<std::int64_t>(report.failures.size());
    report.counts["calls"] = judge->usage().calls;
    report.remote_calls = judge->usage().remote_calls;

    report.new_artifacts +=
        ctx.dir->write_ndjson_artifact(artifact::kJudgments, "judge", judgments) ? 1 : 0;
    report.new_artifacts +=
        ctx.dir->write_ndjson_artifact(artifact::kScores, "judge", scores) ? 1 : 0;
    report.artifacts.emplace_back(artifact::kJudgments,
                                  ctx.dir->artifact_digest(artifact::kJudgments));
    report.artifacts.emplace_back(artifact::kScores, ctx.dir->artifact_digest(artifact::kScores));
    return report;
}

/// classify: prompt category for every non-initial round.
inline StageReport stage_classify(StageContext& ctx) {
    StageReport report{.stage = "classify", .config_digest = ctx.dir->digest()};
    std::vector<Conversation> corpus =
        detail::load_conversations(*ctx.dir, artifact::kGenerated, "generate");
    auto judge = ctx.make_gateway(ctx.cfg.judge, ctx.transports.judge);

    std::vector<std::vector<nlohmann::json>> rows(corpus.size());
    std::vector<std::vector<std::string>> failures(corpus.size());

    detail::parallel_for(corpus.size(), ctx.cfg.workers, [&](std::size_t idx) {
        const Conversation& conv = corpus[idx];
        for (const Round& round : conv.rounds) {
            if (round.index < 2) continue;
            try {
                PromptCategory category =
                    classify_prompt(*judge, ctx.cfg.judge.params, conv, round.index);
                nlohmann::json row = category;
                row["conv_id"] = conv.id;
                row["round"] = round.index;
                rows[idx].push_back(std::move(row));
            } catch (const JudgmentParseError& e) {
                failures[idx].push_back(conv.id + "#" + std::to_string(round.index) +
                                        ": excluded, unparseable classification: " + e.what());
            } catch (const BudgetExceededError&) {
                throw; // the cap is a hard stop, not an audit entry
            } catch (const Error& e) {
                failures[idx].push_back(conv.id + "#" + std::to_string(round.index) + ": " +
                                        e.what());
            }
        }
    });

    std::vector<nlohmann::json> classifications;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        classifications.insert(classifications.end(), rows[i].begin(), rows[i].end());
        report.failures.insert(report.failures.end(), failures[i].begin(), failures[i].end());
    }
    report.counts["classified"] = static_cast<std::int64_t>(classifications.size());
    report.counts["calls"] = judge->usage().calls;
    report.remote_calls = judge->usage().remote_calls;
    report.new_artifacts +=
        ctx.dir->write_ndjson_artifact(artifact::kClassifications, "classify", classifications)
            ? 1
            : 0;
    report.artifacts.emplace_back(artifact::kClassifications,
                                  ctx.dir->artifact_digest(artifact::kClassifications));
    return report;
}

/// featurize: embeddings, PCA fits, metadata normalization, and the final
/// labeled feature rows for every judged round.
inline StageReport stage_featurize(StageContext& ctx) {
    StageReport report{.stage = "featurize", .config_digest = ctx.dir->digest()};
    std::vector<Conversation> corpus =
        detail::load_conversations(*ctx.dir, artifact::kGenerated, "generate");
    auto embedder = ctx.make_gateway(ctx.cfg.embedder, ctx.transports.embedder);

    // Labels from the configured judge variant, quality dimension.
    std::map<std::pair<std::string, int>, int> labels;
    for (const auto& row : ctx.dir->read_ndjson_artifact(artifact::kJudgments, "judge")) {
        PairwiseJudgment judgment = row.get<PairwiseJudgment>();
        if (judgment.judge_variant != ctx.cfg.label_variant) continue;
        labels[{row.at("conv_id").get<std::string>(), judgment.round_index}] =
            label_outcome(judgment, Dimension::quality);
    }
    std::map<std::pair<std::string, int>, PromptCategoryLabel> categories;
    for (const auto& row :
         ctx.dir->read_ndjson_artifact(artifact::kClassifications, "classify")) {
        categories[{row.at("conv_id").get<std::string>(), row.at("round").get<int>()}] =
            row.get<PromptCategory>().label;
    }

    struct PendingRow {
        std::string conv_id;
        int round = 0;
        int label = 0;
        BaseFeatures base;
        std::vector<double> prompt_embedding;
        std::vector<double> history_embedding;
    };

    std::vector<std::vector<PendingRow>> pending(corpus.size());
    std::vector<std::vector<std::string>> failures(corpus.size());

    ContextConfig full_cfg; // cumulative lengths are measured on full context

    detail::parallel_for(corpus.size(), ctx.cfg.workers, [&](std::size_t idx) {
        const Conversation& conv = corpus[idx];
        for (const Round& round : conv.rounds) {
            if (round.index < 2) continue;
            auto label_it = labels.find({conv.id, round.index});
            if (label_it == labels.end()) {
                failures[idx].push_back(conv.id + "#" + std::to_string(round.index) +
                                        ": no label (judgment missing or excluded)");
                continue;
            }
            auto category_it = categories.find({conv.id, round.index});
            if (category_it == categories.end()) {
                failures[idx].push_back(conv.id + "#" + std::to_string(round.index) +
                                        ": no category");
                continue;
            }
            try {
                PendingRow row;
                row.conv_id = conv.id;
                row.round = round.index;
                row.label = label_it->second;
                row.base.round_num = round.index;
                row.base.total_rounds = static_cast<int>(conv.rounds.size());
                row.base.context_length_user =
                    context_length(conv, round.index, Side::user, full_cfg);
                row.base.context_length_asst =
                    context_length(conv, round.index, Side::assistant, full_cfg);
                row.base.category = category_it->second;

                const std::string prompt_text =
                    detail::truncate_to_window(round.user_text, ctx.cfg.embed_token_window);
                row.prompt_embedding =
                    embedder->embed(prompt_text, ctx.cfg.embedder.params.model_name);

                HistoryWindow window =
                    select_history_window(conv, round.index, ctx.cfg.history_token_budget);
                row.history_embedding =
                    embedder->embed(window.text, ctx.cfg.embedder.params.model_name);
                if (window.truncated)
                    failures[idx].push_back(conv.id + "#" + std::to_string(round.index) +
                                            ": history window truncated tail-first");
                pending[idx].push_back(std::move(row));
            } catch (const BudgetExceededError&) {
                throw; // the cap is a hard stop, not an audit entry
            } catch (const Error& e) {
                failures[idx].push_back(conv.id + "#" + std::to_string(round.index) + ": " +
                                        e.what());
            }
        }
    });

    std::vector<PendingRow> rows;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        rows.insert(rows.end(), pending[i].begin(), pending[i].end());
        report.failures.insert(report.failures.end(), failures[i].begin(), failures[i].end());
    }
    if (rows.size() < 2)
        throw ConfigError("featurize needs at least two labeled rounds, got " +
                          std::to_string(rows.size()));

    std::vector<std::vector<double>> prompt_matrix, history_matrix;
    std::vector<BaseFeatures> bases;
    for (const auto& row : rows) {
        prompt_matrix.push_back(row.prompt_embedding);
        history_matrix.push_back(row.history_embedding);
        bases.push_back(row.base);
    }
    PCAModel pca_prompt = fit_pca(prompt_matrix, ctx.cfg.layout.prompt_components);
    PCAModel pca_history = fit_pca(history_matrix, ctx.cfg.layout.history_components);
    MetadataNormalization norm = fit_metadata_normalization(bases);

    std::vector<nlohmann::json> feature_rows;
    for (const auto& row : rows) {
        FeatureVector features =
            assemble_feature_vector(row.base, row.prompt_embedding, row.history_embedding,
                                    pca_prompt, pca_history, norm, ctx.cfg.layout);
        feature_rows.push_back(nlohmann::json{{"conv_id", row.conv_id},
                                              {"round", row.round},
                                              {"label", row.label},
                                              {"values", features.values}});
    }

    report.counts["rows"] = static_cast<std::int64_t>(feature_rows.size());
    report.counts["feature_dims"] = ctx.cfg.layout.total();
    report.counts["calls"] = embedder->usage().calls;
    report.remote_calls = embedder->usage().remote_calls;

    report.new_artifacts +=
        ctx.dir->write_ndjson_artifact(artifact::kFeatures, "featurize", feature_rows) ? 1 : 0;
    report.new_artifacts +=
        ctx.dir->write_json_artifact(artifact::kPcaPrompt, "featurize", pca_prompt) ? 1 : 0;
    report.new_artifacts +=
        ctx.dir->write_json_artifact(artifact::kPcaHistory, "featurize", pca_history) ? 1 : 0;
    report.new_artifacts +=
        ctx.dir->write_json_artifact(artifact::kMetadataNorm, "featurize", norm) ? 1 : 0;
    for (auto name : {artifact::kFeatures, artifact::kPcaPrompt, artifact::kPcaHistory,
                      artifact::kMetadataNorm})
        report.artifacts.emplace_back(name, ctx.dir->artifact_digest(name));
    return report;
}

/// train: cross-validated lambda search, then a final fit on all rows. The
/// persisted bundle carries everything apply_policy needs.
inline StageReport stage_train(StageContext& ctx) {
    StageReport report{.stage = "train", .config_digest = ctx.dir->digest()};

    std::vector<TrainingExample> examples;
    for (const auto& row : ctx.dir->read_ndjson_artifact(artifact::kFeatures, "featurize")) {
        TrainingExample ex;
        ex.features = row.at("values").get<std::vector<double>>();
        ex.y = row.at("label").get<int>();
        examples.push_back(std::move(ex));
    }

    std::vector<int> all_labels;
    for (const auto& ex : examples) all_labels.push_back(ex.y);
    const auto cw = balanced_class_weights(all_labels);
    const double lmax = lambda_max(examples, cw);
    std::vector<double> grid =
        default_lambda_grid(lmax > 0 ? lmax : 1.0, ctx.cfg.lambda_grid_points,
                            ctx.cfg.lambda_grid_min_ratio);
    if (ctx.cfg.lambda_subsample)
        grid = subsample_grid(grid, *ctx.cfg.lambda_subsample, ctx.cfg.seed);

    CVReport cv = cross_validate(examples, ctx.cfg.cv_folds, grid, ctx.cfg.seed);
    LogRegModel model = train(examples, cv.chosen_lambda);

    nlohmann::json norm = ctx.dir->read_json_artifact(artifact::kMetadataNorm, "featurize");
    norm.erase("meta");
    nlohmann::json bundle{{"logreg", model},
                          {"cv", cv},
                          {"lambda_max", lmax},
                          {"layout", ctx.cfg.layout},
                          {"tau", ctx.cfg.policy.tau},
                          {"pca_prompt_path", std::string(artifact::kPcaPrompt)},
                          {"pca_history_path", std::string(artifact::kPcaHistory)},
                          {"metadata_norm", norm},
                          {"history_token_budget", ctx.cfg.history_token_budget},
                          {"embed_token_window", ctx.cfg.embed_token_window},
                          {"training_digest", ctx.dir->artifact_digest(artifact::kFeatures)}};

    int zero_weights = 0;
    for (double w : model.weights)
        if (w == 0.0) ++zero_weights;
    report.counts["examples"] = static_cast<std::int64_t>(examples.size());
    report.counts["zero_weights"] = zero_weights;
    report.counts["iterations"] = model.iterations;

    report.new_artifacts +=
        ctx.dir->write_json_artifact(artifact::kModel, "train", bundle) ? 1 : 0;
    report.artifacts.emplace_back(artifact::kModel, ctx.dir->artifact_digest(artifact::kModel));
    return report;
}

/// Frozen bundle needed to apply the policy to new rounds.
struct AdaptiveModel {
    LogRegModel logreg;
    PCAModel pca_prompt;
    PCAModel pca_history;
    MetadataNormalization norm;
    FeatureLayout layout;
    double tau = 0.5;
    std::int64_t history_token_budget = 8191;
    std::int64_t embed_token_window = 8191;
};

inline AdaptiveModel load_adaptive_model(const RunDir& dir) {
    nlohmann::json bundle = dir.read_json_artifact(artifact::kModel, "train");
    AdaptiveModel model;
    model.logreg = bundle.at("logreg").get<LogRegModel>();
    model.layout = bundle.at("layout").get<FeatureLayout>();
    model.tau = bundle.at("tau").get<double>();
    model.pca_prompt = dir.read_json_artifact(bundle.at("pca_prompt_path").get<std::string>(),
                                              "featurize")
                           .get<PCAModel>();
    model.pca_history = dir.read_json_artifact(bundle.at("pca_history_path").get<std::string>(),
                                               "featurize")
                            .get<PCAModel>();
    model.norm = bundle.at("metadata_norm").get<MetadataNormalization>();
    model.history_token_budget = bundle.value("history_token_budget", model.history_token_budget);
    model.embed_token_window = bundle.value("embed_token_window", model.embed_token_window);
    return model;
}

namespace detail {

inline std::vector<RoundEval> assemble_round_evals(StageContext& ctx) {
    std::vector<Conversation> corpus =
        load_conversations(*ctx.dir, artifact::kGenerated, "generate");
    AdaptiveModel model = load_adaptive_model(*ctx.dir);

    std::map<std::pair<std::string, int>, double> predictions;
    for (const auto& row : ctx.dir->read_ndjson_artifact(artifact::kFeatures, "featurize")) {
        predictions[{row.at("conv_id").get<std::string>(), row.at("round").get<int>()}] =
            predict_proba(model.logreg, row.at("values").get<std::vector<double>>());
    }
    std::map<std::pair<std::string, int>, Winner> winners;
    for (const auto& row : ctx.dir->read_ndjson_artifact(artifact::kJudgments, "judge")) {
        PairwiseJudgment judgment = row.get<PairwiseJudgment>();
        if (judgment.judge_variant != ctx.cfg.label_variant) continue;
        winners[{row.at("conv_id").get<std::string>(), judgment.round_index}] =
            judgment.quality_winner;
    }
    std::map<std::pair<std::string, int>, PromptCategoryLabel> categories;
    for (const auto& row :
         ctx.dir->read_ndjson_artifact(artifact::kClassifications, "classify")) {
        categories[{row.at("conv_id").get<std::string>(), row.at("round").get<int>()}] =
            row.get<PromptCategory>().label;
    }

    std::vector<RoundEval> evals;
    for (const Conversation& conv : corpus) {
        for (const Round& round : conv.rounds) {
            auto p_it = predictions.find({conv.id, round.index});
            if (p_it == predictions.end()) continue; // unlabeled rounds stay out of the sweep
            RoundEval eval;
            eval.conv_id = conv.id;
            eval.round = round.index;
            eval.p_fc = p_it->second;
            auto w_it = winners.find({conv.id, round.index});
            if (w_it != winners.end()) eval.quality_winner = w_it->second;
            auto c_it = categories.find({conv.id, round.index});
            if (c_it != categories.end()) eval.category = c_it->second;
            eval.fc_context_tokens = context_tokens(conv, round.index, ContextKind::full);
            eval.ao_context_tokens =
                context_tokens(conv, round.index, ContextKind::assistant_omitted);
            evals.push_back(std::move(eval));
        }
    }
    return evals;
}

} // namespace detail

/// sweep: trace the quality/cost frontier over the configured thresholds and
/// evaluate the omit-on-new-ask heuristic on the same rounds.
inline StageReport stage_sweep(StageContext& ctx) {
    StageReport report{.stage = "sweep", .config_digest = ctx.dir->digest()};
    std::vector<RoundEval> evals = detail::assemble_round_evals(ctx);
    if (evals.empty()) throw ConfigError("sweep has no evaluable rounds");

    std::vector<SweepPoint> points = sweep_thresholds(evals, ctx.cfg.sweep_taus);
    SweepPoint baseline = baseline_omit_on_new_ask(evals);

    nlohmann::json sweep{{"points", points},
                         {"baseline_omit_on_new_ask", baseline},
                         {"rounds", evals.size()}};
    report.counts["rounds"] = static_cast<std::int64_t>(evals.size());
    report.counts["points"] = static_cast<std::int64_t>(points.size());
    report.new_artifacts +=
        ctx.dir->write_json_artifact(artifact::kSweep, "sweep", sweep) ? 1 : 0;

    // CSV for external plotting: tau, ratio, mean_tokens, fc_rate.
    std::string csv = "# config_digest=" + ctx.dir->digest() + "\n";
    csv += "tau,win_or_tie_ratio_vs_fc,mean_context_tokens,fc_selection_rate\n";
    char line[160];
    for (const SweepPoint& p : points) {
        std::snprintf(line, sizeof(line), "%.6f,%.6f,%.6f,%.6f\n", p.tau,
                      p.win_or_tie_ratio_vs_fc, p.mean_context_tokens, p.fc_selection_rate);
        csv += line;
    }
    std::snprintf(line, sizeof(line), "baseline_omit_on_new_ask,%.6f,%.6f,%.6f\n",
                  baseline.win_or_tie_ratio_vs_fc, baseline.mean_context_tokens,
                  baseline.fc_selection_rate);
    csv += line;
    report.new_artifacts += ctx.dir->write_text(artifact::kSweepCsv, csv) ? 1 : 0;

    report.artifacts.emplace_back(artifact::kSweep, ctx.dir->artifact_digest(artifact::kSweep));
    report.artifacts.emplace_back(artifact::kSweepCsv,
                                  ctx.dir->artifact_digest(artifact::kSweepCsv));
    return report;
}

inline std::string render_text_report(const nlohmann::json& report, const std::string& digest);

/// report: win rates with confidence intervals, category split, pollution
/// ranking, context-length growth, and the sweep summary, as JSON plus a
/// plain-text rendering.
inline StageReport stage_report(StageContext& ctx) {
    StageReport report{.stage = "report", .config_digest = ctx.dir->digest()};
    std::vector<Conversation> corpus =
        detail::load_conversations(*ctx.dir, artifact::kGenerated, "generate");

    // Win rates per judge variant and dimension.
    std::map<std::string, std::vector<PairwiseJudgment>> by_variant;
    for (const auto& row : ctx.dir->read_ndjson_artifact(artifact::kJudgments, "judge")) {
        PairwiseJudgment judgment = row.get<PairwiseJudgment>();
        by_variant[std::string(to_string(judgment.judge_variant))].push_back(judgment);
    }
    nlohmann::json win_rates = nlohmann::json::object();
    for (const auto& [variant, judgments] : by_variant) {
        win_rates[variant] = {
            {"quality", aggregate_win_rate(judgments, Dimension::quality)},
            {"ontopic", aggregate_win_rate(judgments, Dimension::ontopic)}};
    }

    // Prompt-category split.
    std::map<std::string, std::int64_t> category_counts{{"feedback", 0},
                                                        {"new_ask", 0},
                                                        {"no_feedback", 0}};
    std::int64_t classified = 0;
    for (const auto& row :
         ctx.dir->read_ndjson_artifact(artifact::kClassifications, "classify")) {
        ++category_counts[row.at("category").get<std::string>()];
        ++classified;
    }
    nlohmann::json category_split = nlohmann::json::object();
    for (const auto& [label, count] : category_counts) {
        category_split[label] = {
            {"count", count},
            {"share", classified > 0
                          ? static_cast<double>(count) / static_cast<double>(classified)
                          : 0.0}};
    }

    // Pollution candidates from the numeric scores.
    std::vector<ScoredResponse> scored;
    for (const auto& row : ctx.dir->read_ndjson_artifact(artifact::kScores, "judge"))
        scored.push_back({row.at("conv_id").get<std::string>(), row.get<NumericJudgment>()});
    std::vector<PollutionCandidate> pollution =
        scored.empty() ? std::vector<PollutionCandidate>{} : rank_pollution_candidates(scored);

    // Cumulative context length by round, full vs assistant-omitted.
    ContextConfig full_cfg;
    ContextConfig ao_cfg;
    ao_cfg.kind = ContextKind::assistant_omitted;
    nlohmann::json length_curve = nlohmann::json::array();
    std::size_t max_rounds = 0;
    for (const auto& conv : corpus) max_rounds = std::max(max_rounds, conv.rounds.size());
    for (std::size_t r = 1; r <= max_rounds; ++r) {
        double fc_sum = 0, ao_sum = 0;
        std::int64_t n = 0;
        for (const auto& conv : corpus) {
            if (conv.rounds.size() < r) continue;
            fc_sum += static_cast<double>(
                context_length(conv, static_cast<int>(r), Side::both, full_cfg));
            ao_sum += static_cast<double>(
                context_length(conv, static_cast<int>(r), Side::both, ao_cfg));
            ++n;
        }
        length_curve.push_back({{"round", r},
                                {"conversations", n},
                                {"mean_chars_full", fc_sum / static_cast<double>(n)},
                                {"mean_chars_assistant_omitted",
                                 ao_sum / static_cast<double>(n)}});
    }

    nlohmann::json sweep = ctx.dir->read_json_artifact(artifact::kSweep, "sweep");
    sweep.erase("meta");

    nlohmann::json full_report{{"win_rates", win_rates},
                               {"category_split", category_split},
                               {"pollution_candidates", pollution},
                               {"context_length_curve", length_curve},
                               {"sweep", sweep},
                               {"conversations", corpus.size()}};

    report.counts["conversations"] = static_cast<std::int64_t>(corpus.size());
    report.counts["pollution_candidates"] = static_cast<std::int64_t>(pollution.size());
    report.new_artifacts +=
        ctx.dir->write_json_artifact(artifact::kReport, "report", full_report) ? 1 : 0;
    report.new_artifacts +=
        ctx.dir->write_text(artifact::kReportTxt, render_text_report(full_report, ctx.dir->digest()))
            ? 1
            : 0;
    report.artifacts.emplace_back(artifact::kReport, ctx.dir->artifact_digest(artifact::kReport));
    report.artifacts.emplace_back(artifact::kReportTxt,
                                  ctx.dir->artifact_digest(artifact::kReportTxt));
    return report;
}

inline std::string render_text_report(const nlohmann::json& report, const std::string& digest) {
    std::string out;
    char line[256];
    auto add = [&](const char* fmt, auto... args) {
        std::snprintf(line, sizeof(line), fmt, args...);
        out += line;
    };
    out += "context policy report\n";
    out += "config_digest: " + digest + "\n\n";

    out += "win rates (FC vs AO)\n";
    out += "variant        dimension  wins  ties  losses  rate    95% CI\n";
    for (const auto& [variant, dims] : report.at("win_rates").items()) {
        for (const auto& [dim, wr] : dims.items()) {
            add("%-14s %-10s %-5lld %-5lld %-7lld %.4f  [%.4f, %.4f]\n", variant.c_str(),
                dim.c_str(), static_cast<long long>(wr.at("wins").get<std::int64_t>()),
                static_cast<long long>(wr.at("ties").get<std::int64_t>()),
                static_cast<long long>(wr.at("losses").get<std::int64_t>()),
                wr.at("rate").get<double>(), wr.at("ci_low").get<double>(),
                wr.at("ci_high").get<double>());
        }
    }

    out += "\nprompt categories\n";
    for (const auto& [label, entry] : report.at("category_split").items())
        add("%-12s %5lld  (%.1f%%)\n", label.c_str(),
            static_cast<long long>(entry.at("count").get<std::int64_t>()),
            entry.at("share").get<double>() * 100.0);

    out += "\ntop pollution candidates (AO - FC quality gap)\n";
    int shown = 0;
    for (const auto& candidate : report.at("pollution_candidates")) {
        if (++shown > 10) break;
        add("%-24s round %-3d gap %+d  (FC=%d, AO=%d)\n",
            candidate.at("conv_id").get<std::string>().c_str(), candidate.at("round").get<int>(),
            candidate.at("gap").get<int>(), candidate.at("fc_quality").get<int>(),
            candidate.at("ao_quality").get<int>());
    }

    out += "\ncumulative context length (mean chars per round)\n";
    out += "round  full        assistant_omitted\n";
    for (const auto& entry : report.at("context_length_curve"))
        add("%-6lld %-11.1f %-11.1f\n",
            static_cast<long long>(entry.at("round").get<std::int64_t>()),
            entry.at("mean_chars_full").get<double>(),
            entry.at("mean_chars_assistant_omitted").get<double>());

    out += "\nthreshold sweep\n";
    out += "tau     win_or_tie_ratio  mean_tokens  fc_rate\n";
    for (const auto& point : report.at("sweep").at("points"))
        add("%.3f   %-17.4f %-12.1f %.3f\n", point.at("tau").get<double>(),
            point.at("win_or_tie_ratio_vs_fc").get<double>(),
            point.at("mean_context_tokens").get<double>(),
            point.at("fc_selection_rate").get<double>());
    const auto& baseline = report.at("sweep").at("baseline_omit_on_new_ask");
    add("omit-on-new-ask: ratio %.4f, mean_tokens %.1f, fc_rate %.3f\n",
        baseline.at("win_or_tie_ratio_vs_fc").get<double>(),
        baseline.at("mean_context_tokens").get<double>(),
        baseline.at("fc_selection_rate").get<double>());
    return out;
}

/// Runs one named stage; the report is also persisted under reports/.
inline StageReport run_stage(StageContext& ctx, const std::string& name) {
    StageReport report;
    if (name == "ingest") report = stage_ingest(ctx);
    else if (name == "generate") report = stage_generate(ctx);
    else if (name == "judge") report = stage_judge(ctx);
    else if (name == "classify") report = stage_classify(ctx);
    else if (name == "featurize") report = stage_featurize(ctx);
    else if (name == "train") report = stage_train(ctx);
    else if (name == "sweep") report = stage_sweep(ctx);
    else if (name == "report") report = stage_report(ctx);
    else throw ConfigError("unknown stage: " + name);

    nlohmann::json j = report;
    ctx.dir->write_text("reports/" + name + ".report.json", j.dump(2) + "\n");
    return report;
}

/// Runs the configured stage prefix in canonical order.
inline std::vector<StageReport> run_pipeline(StageContext& ctx) {
    std::vector<StageReport> reports;
    for (const std::string& stage : ctx.cfg.stages) reports.push_back(run_stage(ctx, stage));
    return reports;
}

} // namespace ctxfilter
