#include <doctest.h>

#include <filesystem>

#include "ctxfilter/orchestrator.hpp"
#include "support/pipeline_fixture.hpp"

using namespace ctxfilter;
using namespace ctxtest;

namespace fs = std::filesystem;

TEST_SUITE("orchestrator") {

TEST_CASE("stage list must be a prefix of the canonical order") {
    auto cfg = fixture_config(GatewayMode::replay);
    cfg.stages = {"ingest", "judge"};
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg.stages = {"generate"};
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg.stages = {"ingest", "generate", "judge"};
    CHECK_NOTHROW(validate(cfg));
}

TEST_CASE("run config JSON round-trips through its digest") {
    auto cfg = fixture_config(GatewayMode::replay);
    validate(cfg);
    nlohmann::json j = cfg;
    auto back = j.get<RunConfig>();
    CHECK(config_digest(back) == config_digest(cfg));
    back.seed = 99;
    CHECK(config_digest(back) != config_digest(cfg));
}

TEST_CASE("ingest filters, annotates, and samples the fixture dump") {
    StageContext ctx(fixture_config(GatewayMode::record), fresh_run_dir("ingest"),
                     scripted_transports());
    auto report = stage_ingest(ctx);
    CHECK(report.counts["records"] == 9);
    CHECK(report.counts["kept"] == 6);
    CHECK(report.counts["sampled"] == 6);
    CHECK(report.failures.empty());

    auto decisions = ctx.dir->read_ndjson_artifact(artifact::kDecisions, "ingest");
    std::map<std::string, std::string> reasons;
    for (const auto& rec : decisions)
        if (rec["filter_decision"] == "reject")
            reasons[rec["id"]] = rec["reject_reason"];
    CHECK(reasons.size() == 3);
    CHECK(reasons["rj-short"] == "round_count");
    CHECK(reasons["rj-toxic"] == "toxicity");
    CHECK(reasons["rj-offtopic"] == "keywords");

    auto corpus = ctx.dir->read_ndjson_artifact(artifact::kCorpus, "ingest");
    CHECK(corpus.size() == 6);
}

TEST_CASE("running a stage before its dependencies names the missing stage") {
    StageContext ctx(fixture_config(GatewayMode::record), fresh_run_dir("deps"),
                     scripted_transports());
    stage_ingest(ctx);
    try {
        run_stage(ctx, "judge");
        FAIL("expected DependencyError");
    } catch (const DependencyError& e) {
        CHECK(e.stage == "generate");
    }
}

TEST_CASE("full pipeline on the fixture corpus, then idempotent reruns") {
    StageContext ctx(fixture_config(GatewayMode::record), fresh_run_dir("full"),
                     scripted_transports());
    auto reports = run_pipeline(ctx);
    REQUIRE(reports.size() == 8);

    std::map<std::string, StageReport> by_stage;
    for (const auto& r : reports) {
        by_stage[r.stage] = r;
        CHECK(r.failures.empty());
    }
    CHECK(by_stage["ingest"].counts["sampled"] == 6);
    CHECK(by_stage["generate"].counts["responses"] == 37 * 3);
    CHECK(by_stage["generate"].counts["summaries"] == 37);
    CHECK(by_stage["judge"].counts["judgments"] == 31 * 2); // two judge variants
    CHECK(by_stage["judge"].counts["scores"] == 31 * 2);    // FC and AO scored
    CHECK(by_stage["classify"].counts["classified"] == 31);
    CHECK(by_stage["featurize"].counts["rows"] == 31);
    CHECK(by_stage["featurize"].counts["feature_dims"] == 15);
    CHECK(by_stage["train"].counts["examples"] == 31);
    CHECK(by_stage["sweep"].counts["points"] == 21);

    const auto fingerprint_before = run_dir_fingerprint(ctx.dir->root());
    auto second = run_pipeline(ctx);
    for (const auto& r : second) CHECK(r.new_artifacts == 0);
    CHECK(run_dir_fingerprint(ctx.dir->root()) == fingerprint_before);
}

TEST_CASE("two replay runs from the same cache are byte-identical") {
    // Record once to build the cache.
    StageContext record_ctx(fixture_config(GatewayMode::record), fresh_run_dir("rec"),
                            scripted_transports());
    run_pipeline(record_ctx);

    auto replay_into = [&](const std::string& name) {
        auto dir = fresh_run_dir(name);
        fs::create_directories(dir);
        fs::copy(record_ctx.dir->cache_dir(), dir / "cache", fs::copy_options::recursive);
        StageContext ctx(fixture_config(GatewayMode::replay), dir, TransportSet::aborting());
        auto reports = run_pipeline(ctx);
        for (const auto& r : reports) CHECK(r.failures.empty());
        return dir;
    };
    auto b = replay_into("replay_b");
    auto c = replay_into("replay_c");
    CHECK(run_dir_fingerprint(b) == run_dir_fingerprint(c));

    // Replay touched no network: the aborting transports would have thrown.
    auto report = nlohmann::json::parse(read_file(b / "report.json"));
    CHECK(report["conversations"] == 6);
}

TEST_CASE("the planted pollution conversation ranks first by score gap") {
    StageContext ctx(fixture_config(GatewayMode::record), fresh_run_dir("pollution"),
                     scripted_transports());
    run_pipeline(ctx);
    auto report = ctx.dir->read_json_artifact(artifact::kReport, "report");
    const auto& top = report["pollution_candidates"][0];
    CHECK(top["conv_id"] == "wc-ts-0042");
    CHECK(top["round"] == 5);
    CHECK(top["gap"] == 5);
    CHECK(top["fc_quality"] == 3);
    CHECK(top["ao_quality"] == 8);
    // justifications ride along for manual review
    CHECK(!top["fc_justification"].get<std::string>().empty());
}

TEST_CASE("artifacts from a different config digest are refused") {
    auto dir = fresh_run_dir("digest");
    StageContext first(fixture_config(GatewayMode::record, 7), dir, scripted_transports());
    stage_ingest(first);
    StageContext other_seed(fixture_config(GatewayMode::record, 8), dir, scripted_transports());
    CHECK_THROWS_AS(stage_generate(other_seed), ConfigError);
}

TEST_CASE("reasoning traces are stored but never reach downstream context") {
    StageContext ctx(fixture_config(GatewayMode::record), fresh_run_dir("traces"),
                     scripted_transports());
    stage_ingest(ctx);
    stage_generate(ctx);
    auto generated = ctx.dir->read_ndjson_artifact(artifact::kGenerated, "generate");
    bool any_reasoning = false;
    for (const auto& rec : generated) {
        auto conv = rec.get<Conversation>();
        for (const auto& round : conv.rounds) {
            for (const auto& [kind, response] : round.response_variants)
                any_reasoning |= response.reasoning.has_value();
            // canonical context (any kind) must never contain a trace
            for (auto kind : {ContextKind::full, ContextKind::assistant_omitted}) {
                ContextConfig cc;
                cc.kind = kind;
                for (const auto& m : build_context(conv, round.index, cc))
                    CHECK(m.content.find("Reasoning[") == std::string::npos);
            }
        }
    }
    CHECK(any_reasoning);
}

TEST_CASE("sweep artifacts include the CSV rendering and the baseline point") {
    StageContext ctx(fixture_config(GatewayMode::record), fresh_run_dir("sweepcsv"),
                     scripted_transports());
    run_pipeline(ctx);
    auto csv = read_file(ctx.dir->path_of(artifact::kSweepCsv));
    CHECK(csv.rfind("# config_digest=" + ctx.dir->digest() + "\n", 0) == 0);
    CHECK(csv.find("\ntau,win_or_tie_ratio_vs_fc,mean_context_tokens,fc_selection_rate\n") !=
          std::string::npos);
    CHECK(csv.find("baseline_omit_on_new_ask,") != std::string::npos);

    auto sweep = ctx.dir->read_json_artifact(artifact::kSweep, "sweep");
    const auto& points = sweep["points"];
    REQUIRE(points.size() == 21);
    CHECK(points[0]["tau"] == 0.0);
    CHECK(points[0]["win_or_tie_ratio_vs_fc"] == 1.0);
    CHECK(points[0]["fc_selection_rate"] == 1.0);
    for (std::size_t i = 1; i < points.size(); ++i) {
        CHECK(points[i]["fc_selection_rate"].get<double>() <=
              points[i - 1]["fc_selection_rate"].get<double>() + 1e-12);
        CHECK(points[i]["mean_context_tokens"].get<double>() <=
              points[i - 1]["mean_context_tokens"].get<double>() + 1e-9);
    }
}

TEST_CASE("win-rate aggregation in the report partitions every judged round") {
    StageContext ctx(fixture_config(GatewayMode::record), fresh_run_dir("winrep"),
                     scripted_transports());
    run_pipeline(ctx);
    auto report = ctx.dir->read_json_artifact(artifact::kReport, "report");
    for (const auto& [variant, dims] : report["win_rates"].items()) {
        for (const auto& dim : {"quality", "ontopic"}) {
            const auto& wr = dims[dim];
            auto total = wr["wins"].get<std::int64_t>() + wr["ties"].get<std::int64_t>() +
                         wr["losses"].get<std::int64_t>();
            CHECK(total == 31);
            CHECK(wr["ci_low"].get<double>() <= wr["rate"].get<double>());
            CHECK(wr["rate"].get<double>() <= wr["ci_high"].get<double>());
        }
    }
    // category split shares sum to 1
    double share = 0;
    for (const auto& [label, entry] : report["category_split"].items())
        share += entry["share"].get<double>();
    CHECK(share == doctest::Approx(1.0));
}

TEST_CASE("budget exhaustion aborts a recording run") {
    auto cfg = fixture_config(GatewayMode::record);
    cfg.max_remote_calls = 10;
    StageContext ctx(cfg, fresh_run_dir("budget"), scripted_transports());
    stage_ingest(ctx);
    CHECK_THROWS_AS(stage_generate(ctx), BudgetExceededError);
}

TEST_CASE("unknown stage names are rejected") {
    StageContext ctx(fixture_config(GatewayMode::record), fresh_run_dir("unknown"),
                     scripted_transports());
    CHECK_THROWS_AS(run_stage(ctx, "deploy"), ConfigError);
}

TEST_CASE("fixture embeddings come back unit-norm and dimensioned") {
    StageContext ctx(fixture_config(GatewayMode::record), fresh_run_dir("embnorm"),
                     scripted_transports());
    auto embedder = ctx.make_gateway(ctx.cfg.embedder, ctx.transports.embedder);
    auto vec = embedder->embed("abc", "fixture-embedder");
    REQUIRE(vec.size() == 32);
    double norm = 0;
    for (double v : vec) norm += v * v;
    norm = std::sqrt(norm);
    CHECK(std::abs(norm - 1.0) < 1e-9);
    // the stored record replays with the same norm
    auto again = embedder->embed("abc", "fixture-embedder");
    double norm_again = 0;
    for (double v : again) norm_again += v * v;
    CHECK(std::abs(std::sqrt(norm_again) - norm) < 1e-9);
}

TEST_CASE("classification artifacts carry the canonical taxonomy examples") {
    StageContext ctx(fixture_config(GatewayMode::record), fresh_run_dir("taxonomy"),
                     scripted_transports());
    stage_ingest(ctx);
    stage_generate(ctx);
    stage_classify(ctx);
    std::map<std::pair<std::string, int>, std::string> categories;
    for (const auto& row :
         ctx.dir->read_ndjson_artifact(artifact::kClassifications, "classify"))
        categories[{row.at("conv_id"), row.at("round")}] = row.at("category");
    CHECK(categories[{"wc-0104", 2}] == "new_ask");    // standalone creative prompt
    CHECK(categories[{"wc-0007", 2}] == "feedback");   // concrete revision request
    CHECK(categories[{"wc-0007", 4}] == "no_feedback"); // "Reflect on your response"
}

TEST_CASE("standalone ingest --out writes the annotated schema") {
    StageContext ctx(fixture_config(GatewayMode::record), fresh_run_dir("ingest_out"),
                     scripted_transports());
    auto out_path = fresh_run_dir("ingest_out_file") / "decisions.ndjson";
    fs::create_directories(out_path.parent_path());
    stage_ingest(ctx, std::nullopt, out_path);
    auto records = read_ndjson(out_path);
    CHECK(records.size() == 9); // no meta line in the standalone export
    for (const auto& rec : records) {
        CHECK(rec.contains("id"));
        CHECK(rec.contains("turns"));
        CHECK(rec.contains("filter_decision"));
    }
}

} // TEST_SUITE
