#include <doctest.h>

#include <random>

#include "ctxfilter/corpus.hpp"
#include "support/oracles.hpp"

using namespace ctxfilter;

namespace {

RawConversation make_conv(const std::string& id, int rounds, const std::string& body,
                          std::optional<std::string> language = "English") {
    RawConversation conv;
    conv.source_id = id;
    conv.language_tag = std::move(language);
    for (int r = 1; r <= rounds; ++r) {
        conv.turns.push_back({Role::user, "question " + std::to_string(r) + " " + body});
        conv.turns.push_back({Role::assistant, "answer " + std::to_string(r)});
    }
    return conv;
}

} // namespace

TEST_SUITE("corpus") {

TEST_CASE("keeps a six-round technical conversation with low toxicity") {
    auto cfg = default_filter_config();
    auto conv = make_conv("c1", 6, "please explain the algorithm");
    auto decision = filter_conversation(conv, cfg, 0.1);
    CHECK(decision.keep);
    CHECK(!decision.reason);
}

TEST_CASE("rejects on round count outside [5, 10]") {
    auto cfg = default_filter_config();
    auto decision = filter_conversation(make_conv("c2", 3, "algorithm"), cfg, 0.0);
    CHECK(!decision.keep);
    CHECK(*decision.reason == RejectReason::round_count);
    decision = filter_conversation(make_conv("c2b", 11, "algorithm"), cfg, 0.0);
    CHECK(*decision.reason == RejectReason::round_count);
}

TEST_CASE("rejects on toxicity at or above the threshold") {
    auto cfg = default_filter_config();
    auto decision = filter_conversation(make_conv("c3", 7, "algorithm"), cfg, 0.85);
    CHECK(!decision.keep);
    CHECK(*decision.reason == RejectReason::toxicity);
    // boundary: exactly at the threshold is a reject (keep iff toxicity < threshold)
    decision = filter_conversation(make_conv("c3b", 7, "algorithm"), cfg, 0.7);
    CHECK(*decision.reason == RejectReason::toxicity);
}

TEST_CASE("rejects when no keyword from any list appears") {
    auto cfg = default_filter_config();
    auto decision = filter_conversation(make_conv("c4", 6, "sourdough starter advice"), cfg, 0.0);
    CHECK(!decision.keep);
    CHECK(*decision.reason == RejectReason::keywords);
}

TEST_CASE("keyword match is case-insensitive substring") {
    auto cfg = default_filter_config();
    CHECK(filter_conversation(make_conv("c5", 6, "my JavaScript widget"), cfg, 0.0).keep);
    CHECK(filter_conversation(make_conv("c6", 6, "LINEAR ALGEBRA homework"), cfg, 0.0).keep);
}

TEST_CASE("language rule applies only when an allowlist and metadata exist") {
    auto cfg = default_filter_config();
    cfg.language_allowlist = std::set<std::string>{"English"};
    auto decision = filter_conversation(make_conv("c7", 6, "algorithm", "Spanish"), cfg, 0.0);
    CHECK(*decision.reason == RejectReason::language);
    // missing metadata passes
    CHECK(filter_conversation(make_conv("c8", 6, "algorithm", std::nullopt), cfg, 0.0).keep);
}

TEST_CASE("rule order is fixed: round count beats toxicity") {
    auto cfg = default_filter_config();
    auto decision = filter_conversation(make_conv("c9", 2, "no technical words here"), cfg, 0.99);
    CHECK(*decision.reason == RejectReason::round_count);
}

TEST_CASE("malformed role alternation is a structural error, not a reject") {
    RawConversation conv;
    conv.source_id = "bad";
    conv.turns.push_back({Role::assistant, "hello"});
    CHECK_THROWS_AS(filter_conversation(conv, default_filter_config(), 0.0), StructuralError);
    RawConversation empty;
    empty.source_id = "empty";
    CHECK_THROWS_AS(filter_conversation(empty, default_filter_config(), 0.0), StructuralError);
}

TEST_CASE("filter is pure and monotone in the toxicity threshold") {
    auto cfg = default_filter_config();
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        int rounds = 1 + static_cast<int>(bounded_rand(rng, 12));
        bool technical = bounded_rand(rng, 2) == 0;
        double toxicity = static_cast<double>(bounded_rand(rng, 1000)) / 1000.0;
        auto conv = make_conv("t", rounds, technical ? "debug the code" : "greenhouse plants");

        auto first = filter_conversation(conv, cfg, toxicity);
        auto second = filter_conversation(conv, cfg, toxicity);
        CHECK(first.keep == second.keep); // repeated calls agree

        // raising toxicity_threshold never converts a keep into a reject
        double lo = static_cast<double>(bounded_rand(rng, 1000)) / 1000.0;
        double hi = lo + (1.0 - lo) * static_cast<double>(bounded_rand(rng, 1000)) / 1000.0;
        auto lenient = cfg;
        lenient.toxicity_threshold = hi;
        auto strict = cfg;
        strict.toxicity_threshold = lo;
        if (filter_conversation(conv, strict, toxicity).keep)
            CHECK(filter_conversation(conv, lenient, toxicity).keep);
    }
}

TEST_CASE("sample of the whole population returns the same items") {
    std::vector<RawConversation> convs;
    for (int i = 0; i < 5; ++i) convs.push_back(make_conv("s" + std::to_string(i), 5, "code"));
    auto sampled = sample_corpus(convs, 5, 999);
    REQUIRE(sampled.size() == 5);
    for (int i = 0; i < 5; ++i) CHECK(sampled[i].source_id == convs[i].source_id);
}

TEST_CASE("sampling is deterministic per seed and order-preserving") {
    std::vector<RawConversation> convs;
    for (int i = 0; i < 100; ++i) convs.push_back(make_conv("s" + std::to_string(i), 5, "code"));

    auto first = sample_corpus(convs, 10, 7);
    auto second = sample_corpus(convs, 10, 7);
    REQUIRE(first.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(first[i].source_id == second[i].source_id);

    // matches the reference Fisher-Yates selection driven by the same generator
    auto expected = ctxtest::reference_sample_indices(100, 10, 7);
    for (std::size_t i = 0; i < 10; ++i)
        CHECK(first[i].source_id == convs[expected[i]].source_id);

    auto other_seed = sample_corpus(convs, 10, 8);
    bool any_difference = false;
    for (std::size_t i = 0; i < 10; ++i)
        any_difference |= first[i].source_id != other_seed[i].source_id;
    CHECK(any_difference);
}

TEST_CASE("sample size above the population is a bounds error") {
    std::vector<RawConversation> convs{make_conv("only", 5, "code")};
    CHECK_THROWS_AS(sample_corpus(convs, 2, 1), BoundsError);
}

TEST_CASE("normalize folds turns into 1-based rounds") {
    auto conv = make_conv("n1", 3, "code");
    conv.turns.push_back({Role::user, "trailing question"}); // unanswered final round
    Conversation normalized = normalize(conv);
    REQUIRE(normalized.rounds.size() == 4);
    CHECK(normalized.rounds[0].index == 1);
    CHECK(normalized.rounds[2].assistant_text.has_value());
    CHECK(!normalized.rounds[3].assistant_text.has_value());
    CHECK(round_count(conv) == 4);
}

TEST_CASE("raw conversation JSON round-trips") {
    auto conv = make_conv("rt", 5, "python");
    conv.model_tag = "gpt-4";
    auto j = raw_conversation_to_json(conv);
    auto back = raw_conversation_from_json(j);
    CHECK(back.source_id == conv.source_id);
    CHECK(back.turns.size() == conv.turns.size());
    CHECK(back.model_tag == conv.model_tag);
    CHECK(back.language_tag == conv.language_tag);
}

} // TEST_SUITE
