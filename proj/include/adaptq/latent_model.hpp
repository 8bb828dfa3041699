#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "random.hpp"
#include "survey.hpp"

namespace adaptq {

/// Position in the two-dimensional ideology space.
struct LatentPoint {
    double x = 0.0;
    double y = 0.0;

    double operator[](std::size_t axis) const { return axis == 0 ? x : y; }
    friend bool operator==(const LatentPoint&, const LatentPoint&) = default;
};

/// Per-question logistic regression on latent coordinates.
struct QuestionModel {
    std::array<double, 2> weight{0.0, 0.0};
    double intercept = 0.0;

    double logit(const LatentPoint& z) const { return weight[0] * z.x + weight[1] * z.y + intercept; }
    friend bool operator==(const QuestionModel&, const QuestionModel&) = default;
};

enum class InitMode { fitted, random };

struct AxisRange {
    double lo = 0.0;
    double hi = 0.0;
    friend bool operator==(const AxisRange&, const AxisRange&) = default;
};

/// PCA basis plus one logistic regression per question. Immutable once fitted.
struct TrainedModel {
    std::vector<double> column_means;
    std::array<std::vector<double>, 2> basis;
    std::vector<QuestionModel> question_models;
    std::array<double, 2> train_spread{1.0, 1.0};
    std::optional<std::array<AxisRange, 2>> train_bounds;
    InitMode init_mode = InitMode::random;

    std::size_t num_questions() const noexcept { return question_models.size(); }

    /// Projects a complete answer row onto the basis.
    LatentPoint project(std::span<const double> row) const {
        double c[2] = {0.0, 0.0};
        for (std::size_t axis = 0; axis < 2; ++axis)
            for (std::size_t k = 0; k < row.size(); ++k) c[axis] += basis[axis][k] * (row[k] - column_means[k]);
        return {c[0], c[1]};
    }

    friend bool operator==(const TrainedModel&, const TrainedModel&) = default;
};

/// Log-density over a resolution x resolution lattice; index = ix * resolution + iy.
struct PosteriorGrid {
    std::array<AxisRange, 2> bounds;
    int resolution = 0;
    std::vector<double> log_density;

    double coord(std::size_t axis, int i) const {
        const auto& b = bounds[axis];
        return b.lo + (b.hi - b.lo) * static_cast<double>(i) / static_cast<double>(resolution - 1);
    }
    double cell_area() const {
        const double dx = (bounds[0].hi - bounds[0].lo) / static_cast<double>(resolution - 1);
        const double dy = (bounds[1].hi - bounds[1].lo) / static_cast<double>(resolution - 1);
        return dx * dy;
    }
};

inline constexpr int kDefaultResolution = 101;

// ---------------------------------------------------------------------------
// Numerics

inline double sigmoid(double s) {
    if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
    const double e = std::exp(s);
    return e / (1.0 + e);
}

/// log(sigmoid(s)) without overflow.
inline double log_sigmoid(double s) { return s >= 0 ? -std::log1p(std::exp(-s)) : s - std::log1p(std::exp(s)); }

/// Soft-Bernoulli log-likelihood y*log p + (1-y)*log(1-p) with p = sigmoid(s).
/// Uses log(1 - sigmoid(s)) = log(sigmoid(s)) - s.
inline double soft_bernoulli_loglik(double y, double s) { return log_sigmoid(s) - (1.0 - y) * s; }

// ---------------------------------------------------------------------------
// Logistic regression

struct LogisticOptions {
    double l2 = 1.0;
    int max_iterations = 500;
    double tolerance = 1e-8;
};

struct LogisticFit {
    QuestionModel model;
    int iterations = 0;
    bool converged = false;
};

/// L2-penalized logistic regression on (x, y, 1) features, solved by damped
/// Newton steps. The penalty covers the intercept too, which keeps one-class
/// label sets finite.
inline LogisticFit fit_logistic(std::span<const LatentPoint> features, std::span<const int> labels,
                                const LogisticOptions& opts = {}) {
    if (features.size() != labels.size()) throw InputError("fit_logistic: features and labels differ in length");
    Eigen::Vector3d theta = Eigen::Vector3d::Zero();

    auto objective = [&](const Eigen::Vector3d& t) {
        double f = 0.5 * opts.l2 * t.squaredNorm();
        for (std::size_t i = 0; i < features.size(); ++i) {
            const double s = t[0] * features[i].x + t[1] * features[i].y + t[2];
            f -= soft_bernoulli_loglik(labels[i], s);
        }
        return f;
    };

    LogisticFit fit;
    double f = objective(theta);
    for (int it = 0; it < opts.max_iterations; ++it) {
        Eigen::Vector3d grad = opts.l2 * theta;
        Eigen::Matrix3d hess = opts.l2 * Eigen::Matrix3d::Identity();
        for (std::size_t i = 0; i < features.size(); ++i) {
            const Eigen::Vector3d x(features[i].x, features[i].y, 1.0);
            const double p = sigmoid(theta.dot(x));
            grad += (p - labels[i]) * x;
            hess += (p * (1.0 - p)) * (x * x.transpose());
        }
        fit.iterations = it;
        if (grad.norm() < opts.tolerance) {
            fit.converged = true;
            break;
        }
        const Eigen::Vector3d step = hess.ldlt().solve(grad);
        double scale = 1.0;
        Eigen::Vector3d next = theta - step;
        double f_next = objective(next);
        while (f_next > f && scale > 1e-10) {
            scale *= 0.5;
            next = theta - scale * step;
            f_next = objective(next);
        }
        if (f_next > f) break;  // no descent possible at machine precision
        theta = next;
        f = f_next;
    }
    fit.model = {{theta[0], theta[1]}, theta[2]};
    return fit;
}

// ---------------------------------------------------------------------------
// Fitting

struct FitOptions {
    std::uint64_t seed = 0;
    /// Refit counter; part of the binarization seed so labels are redrawn per refit.
    std::uint64_t refit_index = 0;
    LogisticOptions logistic;
};

namespace detail {

inline constexpr double kMinAxisSpread = 1e-3;

inline TrainedModel random_model(std::size_t nq, const FitOptions& opts) {
    Rng rng = make_rng(derive_seed(opts.seed, "random-init", opts.refit_index), "model");
    std::normal_distribution<double> normal(0.0, 1.0);

    TrainedModel m;
    m.init_mode = InitMode::random;
    m.column_means.assign(nq, 0.5);
    for (auto& row : m.basis) {
        row.resize(nq);
        for (auto& v : row) v = normal(rng);
    }
    // Gram-Schmidt
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    auto normalize = [&](std::vector<double>& a) {
        const double n = std::sqrt(dot(a, a));
        for (auto& v : a) v = n > 0 ? v / n : 0.0;
    };
    normalize(m.basis[0]);
    const double proj = dot(m.basis[0], m.basis[1]);
    for (std::size_t i = 0; i < nq; ++i) m.basis[1][i] -= proj * m.basis[0][i];
    if (nq < 2) std::fill(m.basis[1].begin(), m.basis[1].end(), 0.0);
    normalize(m.basis[1]);

    m.question_models.resize(nq);
    for (auto& q : m.question_models) {
        q.weight = {normal(rng), normal(rng)};
        q.intercept = normal(rng);
    }
    return m;
}

inline std::size_t varying_columns(const ResponseMatrix& training) {
    std::size_t count = 0;
    for (std::size_t k = 0; k < training.cols(); ++k) {
        std::optional<double> first;
        for (const auto& row : training.answers) {
            if (!row[k]) continue;
            if (!first) {
                first = row[k];
            } else if (*row[k] != *first) {
                ++count;
                break;
            }
        }
    }
    return count;
}

}  // namespace detail

/// Fits the PCA + per-question logistic model. Empty or degenerate training
/// data (fewer than 3 rows or fewer than 2 varying columns) yields a random model.
inline TrainedModel fit_model(const ResponseMatrix& training, const Questionnaire& questionnaire,
                              const FitOptions& opts = {}) {
    const std::size_t nq = questionnaire.size();
    if (!training.empty() && training.cols() != nq)
        throw InputError("fit_model: training has " + std::to_string(training.cols()) + " columns, questionnaire " +
                         std::to_string(nq));
    if (training.rows() < 3 || detail::varying_columns(training) < 2) return detail::random_model(nq, opts);

    const std::size_t n = training.rows();
    const auto full = complete_by_column_mean(training);

    TrainedModel m;
    m.init_mode = InitMode::fitted;
    m.column_means.assign(nq, 0.0);
    for (const auto& row : full)
        for (std::size_t k = 0; k < nq; ++k) m.column_means[k] += row[k];
    for (auto& v : m.column_means) v /= static_cast<double>(n);

    Eigen::MatrixXd centered(n, nq);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < nq; ++k) centered(r, k) = full[r][k] - m.column_means[k];
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);

    for (std::size_t axis = 0; axis < 2; ++axis) {
        // eigenvalues ascend; the top component is the last column
        const Eigen::Index col = static_cast<Eigen::Index>(nq) - 1 - static_cast<Eigen::Index>(axis);
        Eigen::VectorXd v = eig.eigenvectors().col(col);
        Eigen::Index pivot = 0;
        v.cwiseAbs().maxCoeff(&pivot);
        if (v[pivot] < 0) v = -v;
        m.basis[axis].assign(v.data(), v.data() + v.size());
    }

    std::vector<LatentPoint> projected(n);
    for (std::size_t r = 0; r < n; ++r) projected[r] = m.project(full[r]);

    std::array<AxisRange, 2> bounds{};
    for (std::size_t axis = 0; axis < 2; ++axis) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0, ss = 0.0;
        for (const auto& z : projected) {
            lo = std::min(lo, z[axis]);
            hi = std::max(hi, z[axis]);
            sum += z[axis];
        }
        const double mean = sum / static_cast<double>(n);
        for (const auto& z : projected) ss += (z[axis] - mean) * (z[axis] - mean);
        m.train_spread[axis] = std::max(std::sqrt(ss / static_cast<double>(n)), detail::kMinAxisSpread);
        if (hi - lo < 2 * detail::kMinAxisSpread) {
            const double mid = 0.5 * (lo + hi);
            lo = mid - detail::kMinAxisSpread;
            hi = mid + detail::kMinAxisSpread;
        }
        bounds[axis] = {lo, hi};
    }
    m.train_bounds = bounds;

    m.question_models.resize(nq);
    std::vector<LatentPoint> features;
    std::vector<int> labels;
    for (std::size_t k = 0; k < nq; ++k) {
        features.clear();
        labels.clear();
        for (std::size_t r = 0; r < n; ++r) {
            if (const auto& a = training.answers[r][k]) {
                features.push_back(projected[r]);
                labels.push_back(binarize_cell(*a, opts.seed, opts.refit_index, r, k));
            }
        }
        m.question_models[k] = fit_logistic(features, labels, opts.logistic).model;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Prediction and embedding

/// Ordered (question, value) pairs as answered.
using PartialAnswers = std::vector<std::pair<int, double>>;

inline PartialAnswers to_partial(const AnswerRow& row) {
    PartialAnswers out;
    for (std::size_t k = 0; k < row.size(); ++k)
        if (row[k]) out.emplace_back(static_cast<int>(k), *row[k]);
    return out;
}

inline constexpr double kProbabilityFloor = 1e-15;

inline std::vector<double> predict_all(const LatentPoint& point, const TrainedModel& model) {
    std::vector<double> p(model.num_questions());
    for (std::size_t k = 0; k < p.size(); ++k)
        p[k] = std::clamp(sigmoid(model.question_models[k].logit(point)), kProbabilityFloor, 1.0 - kProbabilityFloor);
    return p;
}

/// Log prior N(z; 0, diag(spread^2)).
inline double log_prior(const LatentPoint& z, const TrainedModel& model) {
    constexpr double kLog2Pi = 1.8378770664093453;
    double lp = 0.0;
    for (std::size_t axis = 0; axis < 2; ++axis) {
        const double s = model.train_spread[axis];
        lp += -0.5 * (z[axis] * z[axis]) / (s * s) - std::log(s) - 0.5 * kLog2Pi;
    }
    return lp;
}

inline double log_posterior(const LatentPoint& z, const PartialAnswers& answers, const TrainedModel& model) {
    double lp = log_prior(z, model);
    for (const auto& [k, y] : answers) lp += soft_bernoulli_loglik(y, model.question_models.at(k).logit(z));
    return lp;
}

inline std::array<double, 2> log_posterior_gradient(const LatentPoint& z, const PartialAnswers& answers,
                                                    const TrainedModel& model) {
    std::array<double, 2> g{};
    for (std::size_t axis = 0; axis < 2; ++axis) {
        const double s = model.train_spread[axis];
        g[axis] = -z[axis] / (s * s);
    }
    for (const auto& [k, y] : answers) {
        const auto& q = model.question_models.at(k);
        const double p = sigmoid(q.logit(z));
        g[0] += (y - p) * q.weight[0];
        g[1] += (y - p) * q.weight[1];
    }
    return g;
}

/// Grid posterior that absorbs answers one at a time. Adding answers in
/// order gives bit-identical results to embedding them all at once.
class PosteriorAccumulator {
public:
    PosteriorAccumulator(const TrainedModel& model, int resolution) : model_(&model) {
        if (resolution < 2) throw InputError("embedding resolution must be >= 2");
        grid_.resolution = resolution;
        if (model.train_bounds) {
            for (std::size_t axis = 0; axis < 2; ++axis) {
                const auto& b = (*model.train_bounds)[axis];
                const double pad = 0.2 * (b.hi - b.lo);
                grid_.bounds[axis] = {b.lo - pad, b.hi + pad};
            }
        } else {
            grid_.bounds = {AxisRange{-3.0, 3.0}, AxisRange{-3.0, 3.0}};
        }
        const auto r = static_cast<std::size_t>(resolution);
        xs_.resize(r);
        ys_.resize(r);
        for (int i = 0; i < resolution; ++i) {
            xs_[i] = grid_.coord(0, i);
            ys_[i] = grid_.coord(1, i);
        }
        grid_.log_density.resize(r * r);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < r; ++j) grid_.log_density[i * r + j] = log_prior({xs_[i], ys_[j]}, model);
    }

    void add(int question, double value) {
        if (question < 0 || static_cast<std::size_t>(question) >= model_->num_questions())
            throw InputError("embedding: question " + std::to_string(question) + " out of range");
        if (!(value >= 0.0 && value <= 1.0)) throw InputError("embedding: answer value outside [0,1]");
        const auto& q = model_->question_models[static_cast<std::size_t>(question)];
        const std::size_t r = xs_.size();
        for (std::size_t i = 0; i < r; ++i) {
            const double base = q.weight[0] * xs_[i] + q.intercept;
            for (std::size_t j = 0; j < r; ++j)
                grid_.log_density[i * r + j] += soft_bernoulli_loglik(value, base + q.weight[1] * ys_[j]);
        }
        ++answered_;
    }

    std::size_t answered() const noexcept { return answered_; }

    /// Posterior mean; the prior mean (origin) when nothing has been answered.
    LatentPoint mean() const {
        if (answered_ == 0) return {0.0, 0.0};
        const std::size_t r = xs_.size();
        const double peak = *std::max_element(grid_.log_density.begin(), grid_.log_density.end());
        double total = 0.0, mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < r; ++j) {
                const double w = std::exp(grid_.log_density[i * r + j] - peak);
                total += w;
                mx += w * xs_[i];
                my += w * ys_[j];
            }
        return {mx / total, my / total};
    }

    /// Grid normalized so that sum(exp(log_density)) * cell_area == 1.
    PosteriorGrid normalized_grid() const {
        PosteriorGrid g = grid_;
        const double peak = *std::max_element(g.log_density.begin(), g.log_density.end());
        double total = 0.0;
        for (double ld : g.log_density) total += std::exp(ld - peak);
        const double log_z = peak + std::log(total * g.cell_area());
        for (double& ld : g.log_density) ld -= log_z;
        return g;
    }

private:
    const TrainedModel* model_;
    PosteriorGrid grid_;
    std::vector<double> xs_, ys_;
    std::size_t answered_ = 0;
};

struct Embedding {
    LatentPoint point;
    PosteriorGrid grid;
};

inline Embedding embed_user(const PartialAnswers& answers, const TrainedModel& model,
                            int resolution = kDefaultResolution) {
    PosteriorAccumulator acc(model, resolution);
    for (const auto& [k, y] : answers) acc.add(k, y);
    return {acc.mean(), acc.normalized_grid()};
}

/// Keeps given answers verbatim and fills the rest with predictions at `point`.
inline std::vector<double> impute_at(const LatentPoint& point, const PartialAnswers& answers,
                                     const TrainedModel& model) {
    auto out = predict_all(point, model);
    for (const auto& [k, y] : answers) out.at(static_cast<std::size_t>(k)) = y;
    return out;
}

inline std::vector<double> impute(const PartialAnswers& answers, const TrainedModel& model,
                                  int resolution = kDefaultResolution) {
    PosteriorAccumulator acc(model, resolution);
    for (const auto& [k, y] : answers) acc.add(k, y);
    return impute_at(acc.mean(), answers, model);
}

// ---------------------------------------------------------------------------
// Snapshot serialization

inline constexpr int kModelSnapshotVersion = 1;

inline nlohmann::json to_json(const TrainedModel& m) {
    nlohmann::json qms = nlohmann::json::array();
    for (const auto& q : m.question_models) qms.push_back({{"weight", q.weight}, {"intercept", q.intercept}});
    nlohmann::json bounds = nullptr;
    if (m.train_bounds)
        bounds = {{(*m.train_bounds)[0].lo, (*m.train_bounds)[0].hi}, {(*m.train_bounds)[1].lo, (*m.train_bounds)[1].hi}};
    return {{"version", kModelSnapshotVersion},
            {"column_means", m.column_means},
            {"basis", m.basis},
            {"question_models", qms},
            {"train_spread", m.train_spread},
            {"train_bounds", bounds},
            {"init_mode", m.init_mode == InitMode::fitted ? "fitted" : "random"}};
}

inline TrainedModel model_from_json(const nlohmann::json& doc) {
    try {
        if (doc.at("version").get<int>() != kModelSnapshotVersion)
            throw LoadError("model snapshot: unsupported version " + doc.at("version").dump());
        TrainedModel m;
        m.column_means = doc.at("column_means").get<std::vector<double>>();
        m.basis = doc.at("basis").get<std::array<std::vector<double>, 2>>();
        for (const auto& q : doc.at("question_models"))
            m.question_models.push_back({q.at("weight").get<std::array<double, 2>>(), q.at("intercept").get<double>()});
        m.train_spread = doc.at("train_spread").get<std::array<double, 2>>();
        if (!doc.at("train_bounds").is_null()) {
            const auto& b = doc.at("train_bounds");
            m.train_bounds = std::array<AxisRange, 2>{AxisRange{b[0][0], b[0][1]}, AxisRange{b[1][0], b[1][1]}};
        }
        const auto mode = doc.at("init_mode").get<std::string>();
        if (mode != "fitted" && mode != "random") throw LoadError("model snapshot: bad init_mode '" + mode + "'");
        m.init_mode = mode == "fitted" ? InitMode::fitted : InitMode::random;
        const auto nq = m.question_models.size();
        if (m.column_means.size() != nq || m.basis[0].size() != nq || m.basis[1].size() != nq)
            throw LoadError("model snapshot: inconsistent question counts");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("model snapshot: ") + e.what());
    }
}

}  // namespace adaptq
