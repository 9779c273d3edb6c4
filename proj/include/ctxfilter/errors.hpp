#pragma once

#include <stdexcept>
#include <string>

namespace ctxfilter {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Input data violates a structural invariant (role alternation, empty turns, ...).
class StructuralError : public Error {
    using Error::Error;
};

/// Index, size, or dimension outside the documented range.
class BoundsError : public Error {
    using Error::Error;
};

/// Malformed configuration or artifact metadata (including digest mismatches).
class ConfigError : public Error {
    using Error::Error;
};

/// A required upstream stage artifact is missing.
class DependencyError : public Error {
public:
    DependencyError(const std::string& what, std::string stage_to_run)
        : Error(what), stage(std::move(stage_to_run)) {}
    std::string stage;
};

/// A context transform was asked for a round that lacks the required
/// assistant text or summary.
class IncompleteRoundError : public Error {
    using Error::Error;
};

/// Replay-mode lookup found no stored record for the request hash.
class CacheMissError : public Error {
    using Error::Error;
};

/// Remote endpoint failure that survived the retry policy, or a 4xx.
class GatewayError : public Error {
public:
    GatewayError(const std::string& what, int http_status = 0)
        : Error(what), status(http_status) {}
    int status;
};

/// The per-run cap on remote calls was reached.
class BudgetExceededError : public Error {
    using Error::Error;
};

/// Text is too long for the embedding model's context window.
class WindowExceededError : public Error {
    using Error::Error;
};

/// Empty completion where a summary was required.
class EmptySummaryError : public Error {
    using Error::Error;
};

/// Judge or classifier output could not be parsed after the re-ask.
/// Carries the raw model output for the audit trail.
class JudgmentParseError : public Error {
public:
    JudgmentParseError(const std::string& what, std::string raw_output)
        : Error(what), raw(std::move(raw_output)) {}
    std::string raw;
};

/// Training input contains a single class or non-finite values.
class DegenerateLabelsError : public Error {
    using Error::Error;
};

/// Non-finite feature values fed to the trainer.
class InputError : public Error {
    using Error::Error;
};

/// A cross-validation fold could not be stratified.
class FoldError : public Error {
    using Error::Error;
};

/// An aggregation is missing judgments or scores for listed rounds.
class CoverageError : public Error {
    using Error::Error;
};

} // namespace ctxfilter
