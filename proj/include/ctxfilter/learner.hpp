#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxfilter/errors.hpp"
#include "ctxfilter/random.hpp"

namespace ctxfilter {

/// One labeled round: y = 1 when the judge preferred the full-context
/// response, y = 0 when assistant-omitted won or the judge declared a tie.
struct TrainingExample {
    std::vector<double> features;
    int y = 0;
};

struct LogRegModel {
    std::vector<double> weights;
    double intercept = 0.0;
    double lambda = 0.0;
    std::array<double, 2> class_weights{1.0, 1.0}; // (w0, w1)
    double final_objective = 0.0;
    bool converged = false;
    int iterations = 0;
};

struct TrainOptions {
    int max_iters = 5000;
    double tol = 1e-10;        // stop when the objective decrease falls below this
    double initial_step = 1.0; // backtracking starts here each iteration
    double backtrack = 0.5;
    /// Observation hook: called with (iteration, objective) after each
    /// accepted step. Tests assert the monotone-descent invariant through it.
    std::function<void(int, double)> on_iteration;
};

/// Proximal operator of t*|x|: sign(x) * max(|x| - t, 0).
inline double soft_threshold(double x, double t) {
    if (t < 0) throw BoundsError("soft threshold requires t >= 0");
    if (x > t) return x - t;
    if (x < -t) return x + t;
    return 0.0;
}

/// w_c = n / (2 * n_c), so the per-class weights sum to n over the dataset.
inline std::array<double, 2> balanced_class_weights(const std::vector<int>& labels) {
    std::int64_t n1 = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw InputError("labels must be 0 or 1");
        n1 += y;
    }
    const std::int64_t n = static_cast<std::int64_t>(labels.size());
    const std::int64_t n0 = n - n1;
    if (n0 == 0 || n1 == 0)
        throw DegenerateLabelsError("balanced class weights need both classes present");
    return {static_cast<double>(n) / (2.0 * static_cast<double>(n0)),
            static_cast<double>(n) / (2.0 * static_cast<double>(n1))};
}

namespace detail {

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double log1pexp(double z) {
    if (z > 0) return z + std::log1p(std::exp(-z));
    return std::log1p(std::exp(z));
}

inline double weight_for(const std::array<double, 2>& cw, int y) {
    return y == 1 ? cw[1] : cw[0];
}

inline double total_weight(const std::vector<TrainingExample>& examples,
                           const std::array<double, 2>& cw) {
    double total = 0;
    for (const auto& ex : examples) total += weight_for(cw, ex.y);
    return total;
}

} // namespace detail

/// Weighted mean logistic loss: (1/W) * sum_i c_{y_i} * l(w.x_i + b, y_i)
/// with W = sum_i c_{y_i}. The L1 penalty is not included here.
inline double smooth_loss(const std::vector<TrainingExample>& examples,
                          const std::array<double, 2>& cw, const std::vector<double>& w,
                          double b) {
    double loss = 0;
    for (const auto& ex : examples) {
        double z = b;
        for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * ex.features[j];
        loss += detail::weight_for(cw, ex.y) * (detail::log1pexp(z) - static_cast<double>(ex.y) * z);
    }
    return loss / detail::total_weight(examples, cw);
}

/// Gradient of smooth_loss with respect to (w, b).
inline void smooth_gradient(const std::vector<TrainingExample>& examples,
                            const std::array<double, 2>& cw, const std::vector<double>& w,
                            double b, std::vector<double>& grad_w, double& grad_b) {
    grad_w.assign(w.size(), 0.0);
    grad_b = 0.0;
    for (const auto& ex : examples) {
        double z = b;
        for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * ex.features[j];
        const double residual = detail::weight_for(cw, ex.y) *
                                (detail::sigmoid(z) - static_cast<double>(ex.y));
        for (std::size_t j = 0; j < w.size(); ++j) grad_w[j] += residual * ex.features[j];
        grad_b += residual;
    }
    const double total = detail::total_weight(examples, cw);
    for (double& g : grad_w) g /= total;
    grad_b /= total;
}

/// Full training objective: smooth_loss + lambda * ||w||_1 (intercept
/// unpenalized).
inline double objective(const std::vector<TrainingExample>& examples,
                        const std::array<double, 2>& cw, const std::vector<double>& w, double b,
                        double lambda) {
    double l1 = 0;
    for (double wj : w) l1 += std::abs(wj);
    return smooth_loss(examples, cw, w, b) + lambda * l1;
}

/// Smallest L1 penalty that zeroes every non-intercept weight:
/// max_j |sum_i c_{y_i} x_{ij} (y_i - pbar)| / sum_i c_{y_i}, with pbar the
/// weighted intercept-only rate. Balanced class weights make pbar exactly
/// 1/2, i.e. the zero model is the intercept-only optimum, so this is the
/// max absolute smooth-gradient coordinate at zero. Computing it through the
/// same gradient routine keeps it bitwise consistent with the optimizer:
/// training at lambda >= lambda_max leaves every weight exactly 0.
inline double lambda_max(const std::vector<TrainingExample>& examples,
                         const std::array<double, 2>& cw) {
    if (examples.empty()) throw BoundsError("lambda_max needs examples");
    std::vector<double> grad(examples[0].features.size(), 0.0);
    std::vector<double> zero(examples[0].features.size(), 0.0);
    double grad_b = 0;
    smooth_gradient(examples, cw, zero, 0.0, grad, grad_b);
    double best = 0;
    for (double g : grad) best = std::max(best, std::abs(g));
    return best;
}

/// Proximal-gradient (ISTA) minimization of the weighted L1 objective with a
/// backtracking line search, started from zero. Deterministic; the objective
/// never increases across iterations. If max_iters is hit before the decrease
/// falls below tol, the model is returned with converged = false.
inline LogRegModel train(const std::vector<TrainingExample>& examples, double lambda,
                         TrainOptions opts = {}) {
    if (examples.size() < 2) throw BoundsError("training needs at least two examples");
    if (lambda < 0) throw BoundsError("lambda must be >= 0");
    const std::size_t dims = examples[0].features.size();
    std::vector<int> labels;
    labels.reserve(examples.size());
    for (const auto& ex : examples) {
        if (ex.features.size() != dims) throw BoundsError("ragged feature matrix");
        for (double v : ex.features)
            if (!std::isfinite(v)) throw InputError("non-finite feature value");
        labels.push_back(ex.y);
    }
    const auto cw = balanced_class_weights(labels);

    LogRegModel model;
    model.lambda = lambda;
    model.class_weights = cw;
    model.weights.assign(dims, 0.0);
    model.intercept = 0.0;

    std::vector<double> grad_w(dims, 0.0);
    double grad_b = 0;
    std::vector<double> next_w(dims, 0.0);

    double current = objective(examples, cw, model.weights, model.intercept, lambda);
    double step = opts.initial_step;

    for (int iter = 0; iter < opts.max_iters; ++iter) {
        smooth_gradient(examples, cw, model.weights, model.intercept, grad_w, grad_b);
        const double smooth_here = smooth_loss(examples, cw, model.weights, model.intercept);

        double next_b = 0;
        double alpha = step;
        while (true) {
            for (std::size_t j = 0; j < dims; ++j)
                next_w[j] = soft_threshold(model.weights[j] - alpha * grad_w[j], alpha * lambda);
            next_b = model.intercept - alpha * grad_b;

            // Sufficient-decrease test on the smooth part:
            // f(x+) <= f(x) + <grad, dx> + ||dx||^2 / (2 alpha)
            double linear = 0, quadratic = 0;
            for (std::size_t j = 0; j < dims; ++j) {
                const double dx = next_w[j] - model.weights[j];
                linear += grad_w[j] * dx;
                quadratic += dx * dx;
            }
            const double db = next_b - model.intercept;
            linear += grad_b * db;
            quadratic += db * db;

            const double smooth_next = smooth_loss(examples, cw, next_w, next_b);
            if (smooth_next <= smooth_here + linear + quadratic / (2.0 * alpha) + 1e-15) break;
            alpha *= opts.backtrack;
            if (alpha < 1e-18) break; // numerically stuck; accept and let tol stop us
        }

        double next_objective = objective(examples, cw, next_w, next_b, lambda);
        if (next_objective > current) {
            // Prox steps cannot increase the objective once the line search
            // holds; treat any numerical wobble as convergence.
            model.iterations = iter;
            model.converged = true;
            break;
        }
        model.weights = next_w;
        model.intercept = next_b;
        step = std::min(opts.initial_step, alpha / opts.backtrack); // let the step re-grow
        const double decrease = current - next_objective;
        current = next_objective;
        model.iterations = iter + 1;
        if (opts.on_iteration) opts.on_iteration(iter, current);
        if (decrease < opts.tol) {
            model.converged = true;
            break;
        }
    }
    model.final_objective = current;
    return model;
}

/// sigma(w.x + b).
inline double predict_proba(const LogRegModel& model, const std::vector<double>& features) {
    if (features.size() != model.weights.size())
        throw BoundsError("feature vector has dimension " + std::to_string(features.size()) +
                          ", model expects " + std::to_string(model.weights.size()));
    double z = model.intercept;
    for (std::size_t j = 0; j < features.size(); ++j) z += model.weights[j] * features[j];
    return detail::sigmoid(z);
}

// ---------------------------------------------------------------------------
// Cross-validated regularization search
// ---------------------------------------------------------------------------

/// F1 on the positive class (y = 1). Zero when precision + recall is zero.
inline double f1_score(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    if (y_true.size() != y_pred.size()) throw BoundsError("label vectors differ in length");
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        if (y_pred[i] == 1 && y_true[i] == 1) ++tp;
        if (y_pred[i] == 1 && y_true[i] == 0) ++fp;
        if (y_pred[i] == 0 && y_true[i] == 1) ++fn;
    }
    if (tp == 0) return 0.0;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    return 2.0 * precision * recall / (precision + recall);
}

struct CVReport {
    std::vector<double> fold_f1; // per fold, at the chosen lambda
    double mean_f1 = 0.0;
    double std_f1 = 0.0;
    std::vector<double> lambda_grid;
    double chosen_lambda = 0.0;
};

/// Log-uniform grid of `points` values spanning [min_ratio * lmax, lmax].
inline std::vector<double> default_lambda_grid(double lmax, int points = 20,
                                               double min_ratio = 1e-4) {
    if (points < 1 || lmax <= 0 || min_ratio <= 0 || min_ratio > 1)
        throw BoundsError("bad lambda grid parameters");
    std::vector<double> grid;
    grid.reserve(static_cast<std::size_t>(points));
    if (points == 1) {
        grid.push_back(lmax);
        return grid;
    }
    const double log_min = std::log(lmax * min_ratio);
    const double log_max = std::log(lmax);
    for (int i = 0; i < points; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(points - 1);
        grid.push_back(std::exp(log_min + t * (log_max - log_min)));
    }
    return grid;
}

/// Optional randomized subsampling of a grid, seedable for reproducibility.
/// Result stays in ascending order.
inline std::vector<double> subsample_grid(const std::vector<double>& grid, int count,
                                          std::uint64_t seed) {
    if (count <= 0 || count > static_cast<int>(grid.size()))
        throw BoundsError("subsample count outside [1, grid size]");
    std::vector<std::size_t> indices(grid.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < static_cast<std::size_t>(count); ++i) {
        std::size_t j = i + static_cast<std::size_t>(bounded_rand(rng, indices.size() - i));
        std::swap(indices[i], indices[j]);
    }
    indices.resize(static_cast<std::size_t>(count));
    std::sort(indices.begin(), indices.end());
    std::vector<double> out;
    for (std::size_t idx : indices) out.push_back(grid[idx]);
    return out;
}

namespace detail {

/// Stratified fold assignment: shuffle each class with the seeded generator,
/// then deal round-robin so every fold sees both classes whenever possible.
inline std::vector<int> stratified_folds(const std::vector<TrainingExample>& examples, int folds,
                                         std::uint64_t seed) {
    std::vector<std::size_t> positives, negatives;
    for (std::size_t i = 0; i < examples.size(); ++i)
        (examples[i].y == 1 ? positives : negatives).push_back(i);
    if (static_cast<int>(positives.size()) < folds || static_cast<int>(negatives.size()) < folds)
        throw FoldError("cannot stratify " + std::to_string(folds) + " folds: class counts " +
                        std::to_string(negatives.size()) + "/" + std::to_string(positives.size()));

    std::mt19937_64 rng(seed);
    auto shuffle = [&rng](std::vector<std::size_t>& v) {
        for (std::size_t i = 0; i + 1 < v.size(); ++i) {
            std::size_t j = i + static_cast<std::size_t>(bounded_rand(rng, v.size() - i));
            std::swap(v[i], v[j]);
        }
    };
    shuffle(positives);
    shuffle(negatives);

    std::vector<int> assignment(examples.size(), 0);
    for (std::size_t i = 0; i < positives.size(); ++i)
        assignment[positives[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
    for (std::size_t i = 0; i < negatives.size(); ++i)
        assignment[negatives[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
    return assignment;
}

} // namespace detail

/// K-fold search over lambda_candidates, scoring each fold with positive-class
/// F1 at the 0.5 probability cutoff. Picks the lambda with the best mean F1
/// (first in grid order on ties) and reports that lambda's fold scores.
inline CVReport cross_validate(const std::vector<TrainingExample>& examples, int folds,
                               const std::vector<double>& lambda_candidates, std::uint64_t seed,
                               TrainOptions opts = {}) {
    if (folds < 2) throw BoundsError("need at least 2 folds");
    if (lambda_candidates.empty()) throw BoundsError("empty lambda grid");
    const std::vector<int> assignment = detail::stratified_folds(examples, folds, seed);

    CVReport report;
    report.lambda_grid = lambda_candidates;
    double best_mean = -1.0;

    for (double lambda : lambda_candidates) {
        std::vector<double> fold_scores;
        for (int fold = 0; fold < folds; ++fold) {
            std::vector<TrainingExample> train_set;
            std::vector<int> test_true, test_pred;
            std::vector<const TrainingExample*> test_set;
            for (std::size_t i = 0; i < examples.size(); ++i) {
                if (assignment[i] == fold)
                    test_set.push_back(&examples[i]);
                else
                    train_set.push_back(examples[i]);
            }
            LogRegModel model = train(train_set, lambda, opts);
            for (const TrainingExample* ex : test_set) {
                test_true.push_back(ex->y);
                test_pred.push_back(predict_proba(model, ex->features) >= 0.5 ? 1 : 0);
            }
            fold_scores.push_back(f1_score(test_true, test_pred));
        }
        double mean = 0;
        for (double f : fold_scores) mean += f;
        mean /= static_cast<double>(folds);
        if (mean > best_mean) {
            best_mean = mean;
            report.chosen_lambda = lambda;
            report.fold_f1 = fold_scores;
        }
    }

    report.mean_f1 = best_mean;
    double variance = 0;
    for (double f : report.fold_f1) variance += (f - report.mean_f1) * (f - report.mean_f1);
    report.std_f1 = std::sqrt(variance / static_cast<double>(report.fold_f1.size()));
    return report;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const LogRegModel& m) {
    j = nlohmann::json{{"weights", m.weights},
                       {"intercept", m.intercept},
                       {"lambda", m.lambda},
                       {"class_weights", m.class_weights},
                       {"final_objective", m.final_objective},
                       {"converged", m.converged},
                       {"iterations", m.iterations}};
}

inline void from_json(const nlohmann::json& j, LogRegModel& m) {
    m.weights = j.at("weights").get<std::vector<double>>();
    m.intercept = j.at("intercept").get<double>();
    m.lambda = j.at("lambda").get<double>();
    m.class_weights = j.at("class_weights").get<std::array<double, 2>>();
    m.final_objective = j.value("final_objective", 0.0);
    m.converged = j.value("converged", false);
    m.iterations = j.value("iterations", 0);
}

inline void to_json(nlohmann::json& j, const CVReport& r) {
    j = nlohmann::json{{"fold_f1", r.fold_f1},
                       {"mean_f1", r.mean_f1},
                       {"std_f1", r.std_f1},
                       {"lambda_grid", r.lambda_grid},
                       {"chosen_lambda", r.chosen_lambda}};
}

inline void from_json(const nlohmann::json& j, CVReport& r) {
    r.fold_f1 = j.at("fold_f1").get<std::vector<double>>();
    r.mean_f1 = j.at("mean_f1").get<double>();
    r.std_f1 = j.at("std_f1").get<double>();
    r.lambda_grid = j.at("lambda_grid").get<std::vector<double>>();
    r.chosen_lambda = j.at("chosen_lambda").get<double>();
}

} // namespace ctxfilter
