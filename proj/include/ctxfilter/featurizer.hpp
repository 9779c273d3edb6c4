#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ctxfilter/conversation.hpp"
#include "ctxfilter/errors.hpp"
#include "ctxfilter/judging.hpp"

namespace ctxfilter {

// ---------------------------------------------------------------------------
// Feature layout. Block offsets are defined here once; everything that reads
// or writes feature vectors goes through this struct.
// ---------------------------------------------------------------------------

struct FeatureLayout {
    static constexpr int kMetadataDims = 4; // round_num, total_rounds, user len, asst len
    static constexpr int kCategoryDims = 3; // one-hot, alphabetical label order

    int prompt_components = 20;
    int history_components = 20;

    int metadata_offset() const { return 0; }
    int category_offset() const { return kMetadataDims; }
    int prompt_offset() const { return kMetadataDims + kCategoryDims; }
    int history_offset() const { return prompt_offset() + prompt_components; }
    int total() const { return history_offset() + history_components; }
};

inline void to_json(nlohmann::json& j, const FeatureLayout& l) {
    j = nlohmann::json{{"metadata_dims", FeatureLayout::kMetadataDims},
                       {"category_dims", FeatureLayout::kCategoryDims},
                       {"prompt_components", l.prompt_components},
                       {"history_components", l.history_components},
                       {"total", l.total()}};
}

inline void from_json(const nlohmann::json& j, FeatureLayout& l) {
    l.prompt_components = j.at("prompt_components").get<int>();
    l.history_components = j.at("history_components").get<int>();
}

struct BaseFeatures {
    int round_num = 0;
    int total_rounds = 0;
    std::int64_t context_length_user = 0;
    std::int64_t context_length_asst = 0;
    PromptCategoryLabel category = PromptCategoryLabel::new_ask;
};

inline void validate(const BaseFeatures& base) {
    if (base.round_num > base.total_rounds)
        throw BoundsError("round_num must not exceed total_rounds");
    if (base.context_length_user < 0 || base.context_length_asst < 0)
        throw BoundsError("context lengths must be non-negative");
}

struct FeatureVector {
    std::vector<double> values;
};

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PCAModel {
    int d = 0;
    int k = 0;
    std::vector<double> mean;                     // d
    std::vector<std::vector<double>> components;  // k rows, each of length d
    std::vector<double> explained_variance_ratio; // k, non-increasing
    bool degenerate = false;                      // zero-variance training data
};

/// Principal directions of mean-centered `rows` via eigendecomposition of the
/// sample covariance. Components come out orthonormal, ordered by decreasing
/// explained variance, and sign-fixed so each component's largest-magnitude
/// coordinate is positive (the eigenvector sign is otherwise arbitrary, which
/// would make persisted models machine-dependent).
inline PCAModel fit_pca(const std::vector<std::vector<double>>& rows, int k) {
    const int n = static_cast<int>(rows.size());
    if (n < 2) throw BoundsError("PCA needs at least two rows");
    const int d = static_cast<int>(rows[0].size());
    if (k < 1 || k > std::min(n - 1, d))
        throw BoundsError("PCA component count k=" + std::to_string(k) +
                          " outside [1, min(n-1, d)]");
    for (const auto& row : rows)
        if (static_cast<int>(row.size()) != d) throw BoundsError("ragged PCA input");

    Eigen::MatrixXd data(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) data(i, j) = rows[static_cast<std::size_t>(i)][j];

    Eigen::RowVectorXd mean = data.colwise().mean();
    Eigen::MatrixXd centered = data.rowwise() - mean;
    Eigen::MatrixXd covariance =
        (centered.adjoint() * centered) / static_cast<double>(n - 1);

    PCAModel model;
    model.d = d;
    model.k = k;
    model.mean.assign(mean.data(), mean.data() + d);

    const double total_variance = covariance.trace();
    if (total_variance <= 0.0) {
        // No variance anywhere: ratios are all zero and the directions are
        // meaningless, so pin them to the canonical basis and flag it.
        model.degenerate = true;
        model.explained_variance_ratio.assign(static_cast<std::size_t>(k), 0.0);
        model.components.assign(static_cast<std::size_t>(k),
                                std::vector<double>(static_cast<std::size_t>(d), 0.0));
        for (int c = 0; c < k; ++c) model.components[static_cast<std::size_t>(c)][c] = 1.0;
        return model;
    }

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(covariance);
    if (solver.info() != Eigen::Success) throw Error("PCA eigendecomposition failed");

    // Eigen returns eigenvalues ascending; take the top k from the back.
    for (int c = 0; c < k; ++c) {
        int source = d - 1 - c;
        Eigen::VectorXd component = solver.eigenvectors().col(source);
        int argmax = 0;
        for (int j = 1; j < d; ++j)
            if (std::abs(component(j)) > std::abs(component(argmax))) argmax = j;
        if (component(argmax) < 0) component = -component;

        model.components.emplace_back(component.data(), component.data() + d);
        double eigenvalue = std::max(0.0, solver.eigenvalues()(source));
        model.explained_variance_ratio.push_back(eigenvalue / total_variance);
    }
    return model;
}

/// components * (v - mean).
inline std::vector<double> pca_transform(const PCAModel& model, const std::vector<double>& v) {
    if (static_cast<int>(v.size()) != model.d)
        throw BoundsError("PCA transform input has dimension " + std::to_string(v.size()) +
                          ", model expects " + std::to_string(model.d));
    std::vector<double> out(static_cast<std::size_t>(model.k), 0.0);
    for (int c = 0; c < model.k; ++c) {
        double dot = 0.0;
        const auto& component = model.components[static_cast<std::size_t>(c)];
        for (int j = 0; j < model.d; ++j)
            dot += component[static_cast<std::size_t>(j)] *
                   (v[static_cast<std::size_t>(j)] - model.mean[static_cast<std::size_t>(j)]);
        out[static_cast<std::size_t>(c)] = dot;
    }
    return out;
}

inline void to_json(nlohmann::json& j, const PCAModel& m) {
    j = nlohmann::json{{"d", m.d},
                       {"k", m.k},
                       {"mean", m.mean},
                       {"components", m.components},
                       {"ratios", m.explained_variance_ratio},
                       {"degenerate", m.degenerate}};
}

inline void from_json(const nlohmann::json& j, PCAModel& m) {
    m.d = j.at("d").get<int>();
    m.k = j.at("k").get<int>();
    m.mean = j.at("mean").get<std::vector<double>>();
    m.components = j.at("components").get<std::vector<std::vector<double>>>();
    m.explained_variance_ratio = j.at("ratios").get<std::vector<double>>();
    m.degenerate = j.value("degenerate", false);
}

// ---------------------------------------------------------------------------
// History window selection for embedding
// ---------------------------------------------------------------------------

struct HistoryWindow {
    std::string text;
    std::vector<int> kept_rounds; // 1-based indices of the kept (user, assistant) pairs
    bool truncated = false;       // a single over-budget pair was cut tail-first
};

namespace detail {

inline std::string render_pair(const Round& round) {
    std::string out = render_turn(Role::user, round.user_text);
    if (round.assistant_text) {
        out += "\n\n";
        out += render_turn(Role::assistant, *round.assistant_text);
    }
    return out;
}

} // namespace detail

/// Serialized history for embedding round `round_index`, fitted to
/// `token_budget` (estimate_tokens). If the whole prior history fits it is
/// returned verbatim. Otherwise the opening (user, assistant) pair is kept —
/// it usually carries the original problem statement — plus as many of the
/// most recent pairs as fit, all in chronological order. A single pair that
/// alone exceeds the budget is truncated tail-first and flagged.
inline HistoryWindow select_history_window(const Conversation& conv, int round_index,
                                           std::int64_t token_budget) {
    detail::round_at(conv, round_index);
    HistoryWindow window;
    if (round_index < 2) return window; // round 1 has no history

    const int pairs = round_index - 1;
    std::vector<std::string> rendered(static_cast<std::size_t>(pairs));
    for (int i = 0; i < pairs; ++i)
        rendered[static_cast<std::size_t>(i)] =
            detail::render_pair(conv.rounds[static_cast<std::size_t>(i)]);

    auto join = [](const std::vector<std::string>& parts) {
        std::string out;
        for (const auto& part : parts) {
            if (!out.empty()) out += "\n\n";
            out += part;
        }
        return out;
    };

    std::string whole;
    for (int i = 0; i < pairs; ++i) {
        if (!whole.empty()) whole += "\n\n";
        whole += rendered[static_cast<std::size_t>(i)];
    }
    if (estimate_tokens(whole) <= token_budget) {
        window.text = std::move(whole);
        for (int i = 1; i <= pairs; ++i) window.kept_rounds.push_back(i);
        return window;
    }

    const std::int64_t separator_tokens = estimate_tokens("\n\n");
    std::int64_t used = estimate_tokens(rendered[0]);
    std::vector<int> tail;
    for (int i = pairs; i >= 2; --i) {
        std::int64_t cost = estimate_tokens(rendered[static_cast<std::size_t>(i - 1)]) +
                            separator_tokens;
        if (used + cost > token_budget) break;
        used += cost;
        tail.push_back(i);
    }

    window.kept_rounds.push_back(1);
    for (auto it = tail.rbegin(); it != tail.rend(); ++it) window.kept_rounds.push_back(*it);

    std::vector<std::string> parts;
    for (int idx : window.kept_rounds)
        parts.push_back(rendered[static_cast<std::size_t>(idx - 1)]);
    window.text = join(parts);

    if (estimate_tokens(window.text) > token_budget) {
        // Even the opening pair alone is over budget.
        window.text.resize(static_cast<std::size_t>(token_budget * 4));
        window.truncated = true;
    }
    return window;
}

// ---------------------------------------------------------------------------
// Metadata standardization and final assembly
// ---------------------------------------------------------------------------

/// z-score constants for the 4 metadata columns, fitted on the training set
/// and persisted with the model. Raw character counts dwarf PC magnitudes
/// otherwise. A zero-variance column keeps scale 1.
struct MetadataNormalization {
    std::array<double, FeatureLayout::kMetadataDims> mean{0, 0, 0, 0};
    std::array<double, FeatureLayout::kMetadataDims> scale{1, 1, 1, 1};
};

inline std::array<double, FeatureLayout::kMetadataDims> metadata_columns(
    const BaseFeatures& base) {
    return {static_cast<double>(base.round_num), static_cast<double>(base.total_rounds),
            static_cast<double>(base.context_length_user),
            static_cast<double>(base.context_length_asst)};
}

inline MetadataNormalization fit_metadata_normalization(const std::vector<BaseFeatures>& rows) {
    if (rows.empty()) throw BoundsError("cannot fit normalization on an empty set");
    MetadataNormalization norm;
    const double n = static_cast<double>(rows.size());
    for (int c = 0; c < FeatureLayout::kMetadataDims; ++c) {
        double sum = 0;
        for (const auto& row : rows) sum += metadata_columns(row)[static_cast<std::size_t>(c)];
        const double mean = sum / n;
        double ss = 0;
        for (const auto& row : rows) {
            double dev = metadata_columns(row)[static_cast<std::size_t>(c)] - mean;
            ss += dev * dev;
        }
        const double sd = std::sqrt(ss / n);
        norm.mean[static_cast<std::size_t>(c)] = mean;
        norm.scale[static_cast<std::size_t>(c)] = sd > 1e-12 ? sd : 1.0;
    }
    return norm;
}

inline void to_json(nlohmann::json& j, const MetadataNormalization& n) {
    j = nlohmann::json{{"mean", n.mean}, {"scale", n.scale}};
}

inline void from_json(const nlohmann::json& j, MetadataNormalization& n) {
    n.mean = j.at("mean").get<std::array<double, FeatureLayout::kMetadataDims>>();
    n.scale = j.at("scale").get<std::array<double, FeatureLayout::kMetadataDims>>();
}

/// Concatenates [standardized metadata | category one-hot | prompt PCs |
/// history PCs] in the fixed layout order.
inline FeatureVector assemble_feature_vector(const BaseFeatures& base,
                                             const std::vector<double>& prompt_embedding,
                                             const std::vector<double>& history_embedding,
                                             const PCAModel& pca_prompt,
                                             const PCAModel& pca_history,
                                             const MetadataNormalization& norm,
                                             const FeatureLayout& layout = {}) {
    validate(base);
    if (pca_prompt.k != layout.prompt_components || pca_history.k != layout.history_components)
        throw BoundsError("PCA component counts do not match the feature layout");

    FeatureVector out;
    out.values.assign(static_cast<std::size_t>(layout.total()), 0.0);

    auto metadata = metadata_columns(base);
    for (int c = 0; c < FeatureLayout::kMetadataDims; ++c)
        out.values[static_cast<std::size_t>(layout.metadata_offset() + c)] =
            (metadata[static_cast<std::size_t>(c)] - norm.mean[static_cast<std::size_t>(c)]) /
            norm.scale[static_cast<std::size_t>(c)];

    out.values[static_cast<std::size_t>(layout.category_offset() +
                                        static_cast<int>(base.category))] = 1.0;

    auto prompt_pcs = pca_transform(pca_prompt, prompt_embedding);
    auto history_pcs = pca_transform(pca_history, history_embedding);
    for (int c = 0; c < layout.prompt_components; ++c)
        out.values[static_cast<std::size_t>(layout.prompt_offset() + c)] =
            prompt_pcs[static_cast<std::size_t>(c)];
    for (int c = 0; c < layout.history_components; ++c)
        out.values[static_cast<std::size_t>(layout.history_offset() + c)] =
            history_pcs[static_cast<std::size_t>(c)];
    return out;
}

} // namespace ctxfilter
