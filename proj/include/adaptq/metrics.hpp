#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "csv.hpp"
#include "errors.hpp"
#include "interaction.hpp"
#include "latent_model.hpp"
#include "survey.hpp"

namespace adaptq {

inline constexpr std::size_t kDefaultRecommendations = 36;

// ---------------------------------------------------------------------------
// Imputation error

/// RMSE over positions that were not answered and whose truth is known.
/// nullopt when there is no such position.
inline std::optional<double> rmse_imputation(std::span<const double> imputed, const AnswerRow& truth,
                                             const std::vector<bool>& answered) {
    if (imputed.size() != truth.size() || answered.size() != truth.size())
        throw InputError("rmse_imputation: length mismatch");
    double ss = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        if (answered[k] || !truth[k]) continue;
        const double d = imputed[k] - *truth[k];
        ss += d * d;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return std::sqrt(ss / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Candidate recommendation

struct RecommendationSet {
    /// Candidate row indices, ascending by distance (ties by index).
    std::vector<std::size_t> ids;
    std::vector<double> distances;
    std::string metric = "manhattan";
    /// Set when fewer candidates than requested were available.
    bool truncated = false;
};

inline double manhattan(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) d += std::abs(a[k] - b[k]);
    return d;
}

/// k nearest candidates under Manhattan distance. `candidates` must be complete rows.
inline RecommendationSet recommend_candidates(std::span<const double> answers,
                                              const std::vector<std::vector<double>>& candidates, std::size_t k) {
    if (k < 1) throw InputError("recommend_candidates: k must be >= 1");
    std::vector<std::pair<double, std::size_t>> scored(candidates.size());
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        if (candidates[c].size() != answers.size()) throw InputError("recommend_candidates: row length mismatch");
        scored[c] = {manhattan(answers, candidates[c]), c};
    }
    RecommendationSet out;
    out.truncated = k > candidates.size();
    const std::size_t take = std::min(k, candidates.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end());
    for (std::size_t i = 0; i < take; ++i) {
        out.ids.push_back(scored[i].second);
        out.distances.push_back(scored[i].first);
    }
    return out;
}

inline RecommendationSet recommend_candidates(std::span<const double> answers, const ResponseMatrix& candidates,
                                              std::size_t k) {
    return recommend_candidates(answers, complete_by_column_mean(candidates), k);
}

/// Fraction of the true recommendation set that the predicted set recovers.
inline double cra(const RecommendationSet& true_set, const RecommendationSet& predicted_set) {
    if (true_set.ids.size() != predicted_set.ids.size())
        throw InputError("cra: recommendation sets have different sizes");
    if (true_set.ids.empty()) throw InputError("cra: empty recommendation sets");
    const std::set<std::size_t> truth(true_set.ids.begin(), true_set.ids.end());
    std::size_t shared = 0;
    for (auto id : predicted_set.ids) shared += truth.count(id);
    return static_cast<double>(shared) / static_cast<double>(true_set.ids.size());
}

// ---------------------------------------------------------------------------
// Break-even detection

enum class MetricDirection { lower_is_better, higher_is_better };

struct BreakEvenReport {
    std::string metric;
    /// 1-based user index; nullopt means no crossing within the horizon.
    std::optional<std::size_t> n;
    std::size_t window = 50;
    std::size_t persistence = 20;
};

/// Trailing moving average; NaN entries are skipped inside each window.
inline std::vector<double> trailing_mean(const std::vector<double>& curve, std::size_t window) {
    std::vector<double> out(curve.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < curve.size(); ++i) {
        const std::size_t from = i + 1 >= window ? i + 1 - window : 0;
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t j = from; j <= i; ++j)
            if (!std::isnan(curve[j])) {
                sum += curve[j];
                ++n;
            }
        if (n) out[i] = sum / static_cast<double>(n);
    }
    return out;
}

/// First user index N at which the smoothed cold-start curve matches or beats
/// the pre-trained one and keeps doing so for `persistence` users.
inline BreakEvenReport break_even(const std::vector<double>& coldstart, const std::vector<double>& pretrained,
                                  std::size_t window = 50, std::size_t persistence = 20,
                                  MetricDirection direction = MetricDirection::lower_is_better,
                                  std::string metric = "rmse") {
    if (coldstart.size() != pretrained.size()) throw InputError("break_even: curves differ in length");
    if (window < 1 || persistence < 1) throw InputError("break_even: window and persistence must be >= 1");
    BreakEvenReport report{std::move(metric), std::nullopt, window, persistence};
    const auto a = trailing_mean(coldstart, window);
    const auto b = trailing_mean(pretrained, window);
    auto holds = [&](std::size_t i) {
        if (std::isnan(a[i]) || std::isnan(b[i])) return false;
        return direction == MetricDirection::lower_is_better ? a[i] <= b[i] : a[i] >= b[i];
    };
    std::size_t run = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        run = holds(i) ? run + 1 : 0;
        if (run == persistence) {
            report.n = i + 2 - persistence;
            break;
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Extremity

inline double extremity(const LatentPoint& point) { return std::hypot(point.x, point.y); }

/// Extremity of each candidate at its projection in a reference model fit on
/// the full candidate matrix.
inline std::vector<double> candidate_extremities(const std::vector<std::vector<double>>& candidates,
                                                 const TrainedModel& reference) {
    std::vector<double> out;
    out.reserve(candidates.size());
    for (const auto& row : candidates) out.push_back(extremity(reference.project(row)));
    return out;
}

inline double mean_extremity(const RecommendationSet& set, const std::vector<double>& extremities) {
    if (set.ids.empty()) return 0.0;
    double sum = 0.0;
    for (auto id : set.ids) sum += extremities.at(id);
    return sum / static_cast<double>(set.ids.size());
}

/// Mean over users of (extremity of full-information recommendations minus
/// extremity of K-answer recommendations). Positive means the adaptive
/// recommendations are more moderate.
inline double extremity_bias(const std::vector<RecommendationSet>& full_information,
                             const std::vector<RecommendationSet>& after_k, const std::vector<double>& extremities) {
    if (full_information.size() != after_k.size()) throw InputError("extremity_bias: user counts differ");
    if (full_information.empty()) return 0.0;
    double sum = 0.0;
    for (std::size_t u = 0; u < after_k.size(); ++u)
        sum += mean_extremity(full_information[u], extremities) - mean_extremity(after_k[u], extremities);
    return sum / static_cast<double>(after_k.size());
}

// ---------------------------------------------------------------------------
// Query overlap

/// Share of (user, question) pairs in `a` that also appear in `b`.
inline double query_overlap(const std::vector<InteractionRecord>& a, const std::vector<InteractionRecord>& b) {
    if (a.size() != b.size()) throw InputError("query_overlap: logs differ in size");
    if (a.empty()) return 1.0;
    std::set<std::pair<std::size_t, int>> pairs_b;
    for (const auto& r : b) pairs_b.emplace(r.user_index, r.question_id);
    std::set<std::pair<std::size_t, int>> pairs_a;
    for (const auto& r : a) pairs_a.emplace(r.user_index, r.question_id);
    std::size_t shared = 0;
    for (const auto& p : pairs_a) shared += pairs_b.count(p);
    return static_cast<double>(shared) / static_cast<double>(pairs_a.size());
}

// ---------------------------------------------------------------------------
// Distances to party means

/// sqrt(mean over questions of squared difference).
inline double distance_to_party_mean(std::span<const double> sample, std::span<const double> mean) {
    if (sample.size() != mean.size() || sample.empty()) throw InputError("distance_to_party_mean: length mismatch");
    double ss = 0.0;
    for (std::size_t k = 0; k < sample.size(); ++k) ss += (sample[k] - mean[k]) * (sample[k] - mean[k]);
    return std::sqrt(ss / static_cast<double>(sample.size()));
}

/// Same normalization restricted to questions present in both vectors.
inline std::optional<double> distance_over_present(const AnswerRow& sample, const AnswerRow& mean) {
    if (sample.size() != mean.size()) throw InputError("distance_over_present: length mismatch");
    double ss = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < sample.size(); ++k)
        if (sample[k] && mean[k]) {
            ss += (*sample[k] - *mean[k]) * (*sample[k] - *mean[k]);
            ++n;
        }
    if (n == 0) return std::nullopt;
    return std::sqrt(ss / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Welch's t-test

struct WelchResult {
    double t = 0.0;
    double degrees_of_freedom = 0.0;
    /// P(T <= t): small when mean A lies below mean B.
    double p_one_sided = 0.5;
};

inline WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw InputError("welch_t_test: each sample needs at least two values");
    auto moments = [](std::span<const double> x) {
        const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
        double ss = 0.0;
        for (double v : x) ss += (v - mean) * (v - mean);
        return std::pair{mean, ss / static_cast<double>(x.size() - 1)};
    };
    const auto [mean_a, var_a] = moments(a);
    const auto [mean_b, var_b] = moments(b);
    const double se_a = var_a / static_cast<double>(a.size());
    const double se_b = var_b / static_cast<double>(b.size());
    if (se_a + se_b <= 0.0) throw InputError("welch_t_test: both samples have zero variance");

    WelchResult r;
    r.t = (mean_a - mean_b) / std::sqrt(se_a + se_b);
    r.degrees_of_freedom = (se_a + se_b) * (se_a + se_b) /
                           (se_a * se_a / static_cast<double>(a.size() - 1) +
                            se_b * se_b / static_cast<double>(b.size() - 1));
    boost::math::students_t dist(r.degrees_of_freedom);
    r.p_one_sided = boost::math::cdf(dist, r.t);
    return r;
}

// ---------------------------------------------------------------------------
// Per-question coverage and nearest-party analysis

/// Fraction of questions where |estimate - party mean| <= party std.
/// Questions missing in any input are skipped.
inline double one_sigma_coverage(const AnswerRow& estimate, const PartyMean& party) {
    if (estimate.size() != party.mean.size()) throw InputError("one_sigma_coverage: length mismatch");
    std::size_t inside = 0, n = 0;
    for (std::size_t k = 0; k < estimate.size(); ++k) {
        if (!estimate[k] || !party.mean[k] || !party.per_question_std[k]) continue;
        ++n;
        inside += std::abs(*estimate[k] - *party.mean[k]) <= *party.per_question_std[k];
    }
    return n ? static_cast<double>(inside) / static_cast<double>(n) : 0.0;
}

struct ConfusionMatrix {
    std::vector<std::string> parties;
    /// fractions[p][r]: share of party-p rows nearest to party r's mean.
    std::vector<std::vector<double>> fractions;
    std::vector<std::size_t> row_counts;
};

inline ConfusionMatrix nearest_party_confusion(const ResponseMatrix& rows, const std::vector<PartyMean>& reference) {
    ConfusionMatrix cm;
    std::map<std::string, std::size_t> index;
    for (const auto& pm : reference) {
        index.emplace(pm.party, cm.parties.size());
        cm.parties.push_back(pm.party);
    }
    const std::size_t np = cm.parties.size();
    std::vector<std::vector<std::size_t>> counts(np, std::vector<std::size_t>(np, 0));
    cm.row_counts.assign(np, 0);
    for (std::size_t n = 0; n < rows.rows(); ++n) {
        const auto& party = rows.respondents[n].party;
        if (!party) throw InputError("nearest_party_confusion: row '" + rows.respondents[n].id + "' has no party");
        auto it = index.find(*party);
        if (it == index.end()) throw InputError("nearest_party_confusion: no reference mean for party " + *party);
        std::optional<std::size_t> best;
        double best_d = 0.0;
        for (std::size_t r = 0; r < np; ++r) {
            auto d = distance_over_present(rows.answers[n], reference[r].mean);
            if (d && (!best || *d < best_d)) {
                best = r;
                best_d = *d;
            }
        }
        if (!best) continue;
        ++counts[it->second][*best];
        ++cm.row_counts[it->second];
    }
    cm.fractions.assign(np, std::vector<double>(np, 0.0));
    for (std::size_t p = 0; p < np; ++p)
        for (std::size_t r = 0; r < np; ++r)
            if (cm.row_counts[p])
                cm.fractions[p][r] = static_cast<double>(counts[p][r]) / static_cast<double>(cm.row_counts[p]);
    return cm;
}

inline void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm) {
    out << "party";
    for (const auto& p : cm.parties) out << ',' << csv::quote(p);
    out << '\n';
    for (std::size_t p = 0; p < cm.parties.size(); ++p) {
        out << csv::quote(cm.parties[p]);
        for (double f : cm.fractions[p]) out << ',' << csv::format_double(f);
        out << '\n';
    }
}

}  // namespace adaptq
