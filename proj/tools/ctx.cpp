// ctx: run the conversation-context pipeline against a run directory, or
// serve a trained policy over HTTP.
//
// Stages run in the canonical order ingest -> generate -> judge -> classify
// -> featurize -> train -> sweep -> report. Each subcommand runs one stage;
// `ctx run` executes the prefix listed in the config.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ctxfilter/ctxfilter.hpp"
#include "ctxfilter/server.hpp"
#include "ctxfilter/transport_http.hpp"

namespace {

struct CommonOptions {
    std::string run_dir;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;
};

ctxfilter::RunConfig load_config(const CommonOptions& opts) {
    namespace fs = std::filesystem;
    ctxfilter::RunConfig cfg;
    fs::path path;
    if (!opts.config_path.empty()) {
        path = opts.config_path;
    } else if (fs::exists(fs::path(opts.run_dir) / "config.json")) {
        path = fs::path(opts.run_dir) / "config.json";
    } else {
        throw ctxfilter::ConfigError("no config: pass --config or place config.json in the run dir");
    }
    nlohmann::json j = nlohmann::json::parse(ctxfilter::read_file(path));
    j.erase("meta");
    cfg = j.get<ctxfilter::RunConfig>();
    if (opts.seed) cfg.seed = *opts.seed;
    if (opts.mode) cfg.mode = ctxfilter::gateway_mode_from_string(*opts.mode);
    return cfg;
}

std::shared_ptr<ctxfilter::Transport> make_transport(const ctxfilter::RunConfig& cfg,
                                                     const ctxfilter::EndpointSettings& endpoint) {
    if (cfg.mode == ctxfilter::GatewayMode::replay)
        return std::make_shared<ctxfilter::AbortTransport>();
    const char* base_url = std::getenv(endpoint.base_url_env.c_str());
    if (!base_url || !*base_url)
        throw ctxfilter::ConfigError("record mode needs " + endpoint.base_url_env + " set");
    return std::make_shared<ctxfilter::HttplibTransport>(base_url);
}

ctxfilter::StageContext make_context(const CommonOptions& opts) {
    ctxfilter::RunConfig cfg = load_config(opts);
    ctxfilter::TransportSet transports{make_transport(cfg, cfg.responder),
                                       make_transport(cfg, cfg.judge),
                                       make_transport(cfg, cfg.embedder)};
    return ctxfilter::StageContext(std::move(cfg), opts.run_dir, std::move(transports));
}

void print_report(const ctxfilter::StageReport& report) {
    std::cout << "[" << report.stage << "] ";
    bool first = true;
    for (const auto& [key, value] : report.counts) {
        std::cout << (first ? "" : ", ") << key << "=" << value;
        first = false;
    }
    std::cout << ", new_artifacts=" << report.new_artifacts << "\n";
    for (const auto& failure : report.failures)
        std::cout << "  audit: " << failure << "\n";
}

void run_one_stage(const CommonOptions& opts, const std::string& stage,
                   const std::optional<std::string>& in_override,
                   const std::optional<std::string>& out_override) {
    ctxfilter::StageContext ctx = make_context(opts);
    ctxfilter::StageReport report;
    if (stage == "ingest") {
        std::optional<std::filesystem::path> in, out;
        if (in_override) in = *in_override;
        if (out_override) out = *out_override;
        report = ctxfilter::stage_ingest(ctx, in, out);
        nlohmann::json j = report;
        ctx.dir->write_text("reports/ingest.report.json", j.dump(2) + "\n");
    } else {
        report = ctxfilter::run_stage(ctx, stage);
    }
    print_report(report);
}

int serve(const CommonOptions& opts, const std::string& host, int port) {
    ctxfilter::StageContext ctx = make_context(opts);
    ctxfilter::AdaptiveModel model = ctxfilter::load_adaptive_model(*ctx.dir);

    std::map<std::string, ctxfilter::Conversation> corpus;
    for (const auto& rec :
         ctx.dir->read_ndjson_artifact(ctxfilter::artifact::kCorpus, "ingest")) {
        auto conv = rec.get<ctxfilter::Conversation>();
        corpus.emplace(conv.id, std::move(conv));
    }

    auto judge_gateway = ctx.make_gateway(ctx.cfg.judge, ctx.transports.judge);
    auto embed_gateway = ctx.make_gateway(ctx.cfg.embedder, ctx.transports.embedder);

    ctxfilter::PolicyConfig policy = ctx.cfg.policy;
    policy.tau = model.tau;

    ctxfilter::PolicyServer server(std::move(model), policy, std::move(corpus), judge_gateway,
                                   ctx.cfg.judge.params, embed_gateway,
                                   ctx.cfg.embedder.params.model_name);
    std::cout << "serving POST /v1/policy on " << host << ":" << port << "\n";
    server.listen(host, port);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptive context-omission pipeline"};
    app.require_subcommand(1);

    CommonOptions opts;
    std::optional<std::string> ingest_in, ingest_out;
    std::string host = "127.0.0.1";
    int port = 8787;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--run-dir", opts.run_dir, "run directory")->required();
        cmd->add_option("--config", opts.config_path, "config JSON (default: run-dir/config.json)");
        cmd->add_option("--seed", opts.seed, "seed override");
        cmd->add_option("--mode", opts.mode, "record or replay")
            ->check(CLI::IsMember({"record", "replay"}));
    };

    for (const std::string& stage : ctxfilter::canonical_stage_order()) {
        CLI::App* cmd = app.add_subcommand(stage, "run the " + stage + " stage");
        add_common(cmd);
        if (stage == "ingest") {
            cmd->add_option("--in", ingest_in, "raw NDJSON path (default: config corpus_path)");
            cmd->add_option("--out", ingest_out, "write annotated filter decisions here too");
        }
    }
    CLI::App* run_cmd = app.add_subcommand("run", "run every configured stage in order");
    add_common(run_cmd);
    CLI::App* serve_cmd = app.add_subcommand("serve", "serve the trained policy over HTTP");
    add_common(serve_cmd);
    serve_cmd->add_option("--host", host, "bind host");
    serve_cmd->add_option("--port", port, "bind port");

    CLI11_PARSE(app, argc, argv);

    try {
        CLI::App* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();
        if (name == "serve") return serve(opts, host, port);
        if (name == "run") {
            ctxfilter::StageContext ctx = make_context(opts);
            for (const auto& report : ctxfilter::run_pipeline(ctx)) print_report(report);
            return 0;
        }
        run_one_stage(opts, name, ingest_in, ingest_out);
        return 0;
    } catch (const ctxfilter::DependencyError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
