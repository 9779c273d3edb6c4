#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <json.hpp>

#include "ctxfilter/conversation.hpp"
#include "ctxfilter/errors.hpp"
#include "ctxfilter/judging.hpp"

namespace ctxfilter {

struct PolicyConfig {
    double tau = 0.5;
    ContextKind fallback = ContextKind::full; // used when features are unavailable
};

inline void validate(const PolicyConfig& cfg) {
    if (cfg.tau < 0 || cfg.tau > 1) throw ConfigError("tau must lie in [0, 1]");
}

/// Full context iff the predicted probability that the judge prefers FC
/// meets the threshold.
inline ContextKind decide_context(double p_fc, const PolicyConfig& cfg) {
    validate(cfg);
    if (p_fc < 0 || p_fc > 1) throw BoundsError("p_fc must lie in [0, 1]");
    return p_fc >= cfg.tau ? ContextKind::full : ContextKind::assistant_omitted;
}

/// y = 1 iff the judge picked FC on the chosen dimension; AO wins and ties
/// both map to 0.
inline int label_outcome(const PairwiseJudgment& j, Dimension dimension) {
    Winner w = dimension == Dimension::quality ? j.quality_winner : j.ontopic_winner;
    return w == Winner::FC ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Win rates with binomial confidence intervals
// ---------------------------------------------------------------------------

struct WinRateReport {
    std::int64_t wins = 0;
    std::int64_t ties = 0;
    std::int64_t losses = 0;
    double rate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
};

enum class CiMethod { normal_approximation, wilson };

namespace detail {

inline double normal_quantile(double p) {
    return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

} // namespace detail

/// Binomial proportion interval for wins out of n. Default is the normal
/// approximation p +- z * sqrt(p(1-p)/n), clipped to [0, 1]; Wilson is
/// available behind the flag.
inline WinRateReport win_rate_ci(std::int64_t wins, std::int64_t n, double alpha = 0.05,
                                 CiMethod method = CiMethod::normal_approximation) {
    if (n < 1) throw BoundsError("win rate needs n >= 1");
    if (wins < 0 || wins > n) throw BoundsError("wins must lie in [0, n]");
    const double p = static_cast<double>(wins) / static_cast<double>(n);
    const double z = detail::normal_quantile(1.0 - alpha / 2.0);

    WinRateReport report;
    report.wins = wins;
    report.rate = p;
    if (method == CiMethod::normal_approximation) {
        const double half = z * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
        report.ci_low = std::max(0.0, p - half);
        report.ci_high = std::min(1.0, p + half);
    } else {
        const double nn = static_cast<double>(n);
        const double denom = 1.0 + z * z / nn;
        const double center = (p + z * z / (2.0 * nn)) / denom;
        const double half =
            z * std::sqrt(p * (1.0 - p) / nn + z * z / (4.0 * nn * nn)) / denom;
        report.ci_low = std::max(0.0, center - half);
        report.ci_high = std::min(1.0, center + half);
    }
    return report;
}

/// Aggregates a judged set for one dimension. wins/ties/losses always
/// partition the judgments; the interval is on the win proportion.
inline WinRateReport aggregate_win_rate(const std::vector<PairwiseJudgment>& judgments,
                                        Dimension dimension, double alpha = 0.05,
                                        CiMethod method = CiMethod::normal_approximation) {
    if (judgments.empty()) throw BoundsError("no judgments to aggregate");
    WinRateReport report;
    for (const auto& j : judgments) {
        Winner w = dimension == Dimension::quality ? j.quality_winner : j.ontopic_winner;
        if (w == Winner::FC) ++report.wins;
        else if (w == Winner::AO) ++report.losses;
        else ++report.ties;
    }
    const std::int64_t n = report.wins + report.ties + report.losses;
    WinRateReport ci = win_rate_ci(report.wins, n, alpha, method);
    report.rate = ci.rate;
    report.ci_low = ci.ci_low;
    report.ci_high = ci.ci_high;
    return report;
}

// ---------------------------------------------------------------------------
// Threshold sweep and the heuristic baseline
// ---------------------------------------------------------------------------

/// Everything the sweep needs about one judged round. The token counts are
/// the context sizes of the two candidate configurations; the winner is the
/// recorded FC-vs-AO quality judgment. No new judge calls happen here: the
/// adaptive response at each round is one of the two already-judged ones.
struct RoundEval {
    std::string conv_id;
    int round = 0;
    double p_fc = 0.0;
    std::optional<Winner> quality_winner;
    double fc_context_tokens = 0.0;
    double ao_context_tokens = 0.0;
    std::optional<PromptCategoryLabel> category;
};

struct SweepPoint {
    double tau = 0.0; // NaN for the heuristic baseline point
    double win_or_tie_ratio_vs_fc = 0.0;
    double mean_context_tokens = 0.0;
    double fc_selection_rate = 0.0;
};

namespace detail {

/// Shared aggregation: `select` returns the configuration chosen per round.
template <typename SelectFn>
SweepPoint aggregate_policy(const std::vector<RoundEval>& rounds, SelectFn&& select) {
    if (rounds.empty()) throw BoundsError("empty evaluation set");
    std::int64_t win_or_tie = 0;
    std::int64_t fc_selected = 0;
    double token_sum = 0;
    std::string missing;
    for (const auto& r : rounds) {
        const ContextKind chosen = select(r);
        if (chosen == ContextKind::full) {
            // Identical to the FC-only reference response: a tie, which
            // counts as a win.
            ++fc_selected;
            ++win_or_tie;
            token_sum += r.fc_context_tokens;
        } else {
            if (!r.quality_winner) {
                missing += missing.empty() ? "" : ", ";
                missing += r.conv_id + "#" + std::to_string(r.round);
                continue;
            }
            if (*r.quality_winner != Winner::FC) ++win_or_tie; // AO won or tied
            token_sum += r.ao_context_tokens;
        }
    }
    if (!missing.empty())
        throw CoverageError("rounds missing judgments for the selected config: " + missing);
    SweepPoint point;
    const double n = static_cast<double>(rounds.size());
    point.win_or_tie_ratio_vs_fc = static_cast<double>(win_or_tie) / n;
    point.mean_context_tokens = token_sum / n;
    point.fc_selection_rate = static_cast<double>(fc_selected) / n;
    return point;
}

} // namespace detail

/// One SweepPoint per threshold. At tau = 0 the policy is exactly FC-only:
/// ratio 1.0 and the FC mean token count.
inline std::vector<SweepPoint> sweep_thresholds(const std::vector<RoundEval>& rounds,
                                                const std::vector<double>& taus) {
    std::vector<SweepPoint> points;
    points.reserve(taus.size());
    for (double tau : taus) {
        PolicyConfig cfg;
        cfg.tau = tau;
        SweepPoint point = detail::aggregate_policy(
            rounds, [&](const RoundEval& r) { return decide_context(r.p_fc, cfg); });
        point.tau = tau;
        points.push_back(point);
    }
    return points;
}

/// Heuristic reference: omit assistant history exactly on new-ask turns.
inline SweepPoint baseline_omit_on_new_ask(const std::vector<RoundEval>& rounds) {
    std::string missing;
    for (const auto& r : rounds) {
        if (!r.category) {
            missing += missing.empty() ? "" : ", ";
            missing += r.conv_id + "#" + std::to_string(r.round);
        }
    }
    if (!missing.empty()) throw CoverageError("rounds missing categories: " + missing);
    SweepPoint point = detail::aggregate_policy(rounds, [](const RoundEval& r) {
        return *r.category == PromptCategoryLabel::new_ask ? ContextKind::assistant_omitted
                                                           : ContextKind::full;
    });
    point.tau = std::numeric_limits<double>::quiet_NaN();
    return point;
}

// ---------------------------------------------------------------------------
// Context-pollution candidate surfacing
// ---------------------------------------------------------------------------

struct ScoredResponse {
    std::string conv_id;
    NumericJudgment judgment;
};

/// A round where assistant-omitted scored far above full context; the top of
/// the ranking is where to look for context pollution.
struct PollutionCandidate {
    std::string conv_id;
    int round = 0;
    int gap = 0; // AO quality - FC quality
    int fc_quality = 0;
    int ao_quality = 0;
    std::string fc_justification;
    std::string ao_justification;
};

/// Ranks (conversation, round) pairs by AO-minus-FC quality gap, descending.
/// Equal gaps order by conversation id then round so reruns are stable. Both
/// configs must be scored for every listed round.
inline std::vector<PollutionCandidate> rank_pollution_candidates(
    const std::vector<ScoredResponse>& scores) {
    std::map<std::pair<std::string, int>, PollutionCandidate> by_round;
    std::map<std::pair<std::string, int>, std::pair<bool, bool>> seen; // (fc, ao)
    for (const auto& s : scores) {
        auto key = std::make_pair(s.conv_id, s.judgment.round_index);
        auto& candidate = by_round[key];
        candidate.conv_id = s.conv_id;
        candidate.round = s.judgment.round_index;
        if (s.judgment.config == ContextKind::full) {
            candidate.fc_quality = s.judgment.quality_score;
            candidate.fc_justification = s.judgment.quality_justification;
            seen[key].first = true;
        } else if (s.judgment.config == ContextKind::assistant_omitted) {
            candidate.ao_quality = s.judgment.quality_score;
            candidate.ao_justification = s.judgment.quality_justification;
            seen[key].second = true;
        }
    }

    std::string missing;
    std::vector<PollutionCandidate> out;
    for (auto& [key, candidate] : by_round) {
        if (!seen[key].first || !seen[key].second) {
            missing += missing.empty() ? "" : ", ";
            missing += key.first + "#" + std::to_string(key.second);
            continue;
        }
        candidate.gap = candidate.ao_quality - candidate.fc_quality;
        out.push_back(std::move(candidate));
    }
    if (!missing.empty())
        throw CoverageError("rounds scored under only one config: " + missing);

    std::sort(out.begin(), out.end(), [](const PollutionCandidate& a, const PollutionCandidate& b) {
        if (a.gap != b.gap) return a.gap > b.gap;
        if (a.conv_id != b.conv_id) return a.conv_id < b.conv_id;
        return a.round < b.round;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const SweepPoint& p) {
    j = nlohmann::json{{"win_or_tie_ratio_vs_fc", p.win_or_tie_ratio_vs_fc},
                       {"mean_context_tokens", p.mean_context_tokens},
                       {"fc_selection_rate", p.fc_selection_rate}};
    if (std::isnan(p.tau))
        j["tau"] = nullptr;
    else
        j["tau"] = p.tau;
}

inline void from_json(const nlohmann::json& j, SweepPoint& p) {
    p.tau = j.at("tau").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                  : j.at("tau").get<double>();
    p.win_or_tie_ratio_vs_fc = j.at("win_or_tie_ratio_vs_fc").get<double>();
    p.mean_context_tokens = j.at("mean_context_tokens").get<double>();
    p.fc_selection_rate = j.at("fc_selection_rate").get<double>();
}

inline void to_json(nlohmann::json& j, const WinRateReport& r) {
    j = nlohmann::json{{"wins", r.wins},     {"ties", r.ties},       {"losses", r.losses},
                       {"rate", r.rate},     {"ci_low", r.ci_low},   {"ci_high", r.ci_high}};
}

inline void from_json(const nlohmann::json& j, WinRateReport& r) {
    r.wins = j.at("wins").get<std::int64_t>();
    r.ties = j.at("ties").get<std::int64_t>();
    r.losses = j.at("losses").get<std::int64_t>();
    r.rate = j.at("rate").get<double>();
    r.ci_low = j.at("ci_low").get<double>();
    r.ci_high = j.at("ci_high").get<double>();
}

inline void to_json(nlohmann::json& j, const PollutionCandidate& c) {
    j = nlohmann::json{{"conv_id", c.conv_id},
                       {"round", c.round},
                       {"gap", c.gap},
                       {"fc_quality", c.fc_quality},
                       {"ao_quality", c.ao_quality},
                       {"fc_justification", c.fc_justification},
                       {"ao_justification", c.ao_justification}};
}

inline void from_json(const nlohmann::json& j, PollutionCandidate& c) {
    c.conv_id = j.at("conv_id").get<std::string>();
    c.round = j.at("round").get<int>();
    c.gap = j.at("gap").get<int>();
    c.fc_quality = j.at("fc_quality").get<int>();
    c.ao_quality = j.at("ao_quality").get<int>();
    c.fc_justification = j.value("fc_justification", std::string{});
    c.ao_justification = j.value("ao_justification", std::string{});
}

} // namespace ctxfilter
