#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "latent_model.hpp"

namespace adaptq {

/// Gini impurity 2p(1-p) of a binary prediction.
constexpr double gini(double p) noexcept { return 2.0 * p * (1.0 - p); }

/// Scores are compared on a 1e-12 grid, so that mirror-image predictions
/// such as 0.3 and 0.7 tie even though their doubles differ in the last bit.
inline double score_key(double s) { return std::round(s * 1e12); }

struct UserSessionState {
    PartialAnswers answered;
    /// remaining[k] is true while question k has not been answered.
    std::vector<bool> remaining;
    LatentPoint current_point;
    /// Set when the loop stopped before K answers because no remaining
    /// question had a known answer.
    bool stopped_early = false;

    static UserSessionState fresh(std::size_t num_questions) {
        return {{}, std::vector<bool>(num_questions, true), {}, false};
    }

    std::size_t remaining_count() const {
        std::size_t n = 0;
        for (bool r : remaining) n += r;
        return n;
    }

    void record(int question, double value, const LatentPoint& point) {
        if (!remaining.at(static_cast<std::size_t>(question)))
            throw StateError("question " + std::to_string(question) + " was already answered");
        answered.emplace_back(question, value);
        remaining[static_cast<std::size_t>(question)] = false;
        current_point = point;
    }
};

/// Remaining question ids ordered by descending score; ties by ascending id.
template <typename Score = double (*)(double)>
std::vector<int> rank_questions(const std::vector<double>& predictions, const std::vector<bool>& remaining,
                                Score score = gini) {
    std::vector<int> ids;
    std::vector<double> scores(predictions.size());
    for (std::size_t k = 0; k < predictions.size(); ++k)
        if (remaining[k]) {
            ids.push_back(static_cast<int>(k));
            scores[k] = score_key(score(predictions[k]));
        }
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return scores[a] > scores[b]; });
    return ids;
}

/// argmax of score(prediction) over remaining questions; lowest id wins ties.
template <typename Score = double (*)(double)>
int select_question(const std::vector<double>& predictions, const std::vector<bool>& remaining, Score score = gini) {
    std::optional<int> best;
    double best_score = 0.0;
    for (std::size_t k = 0; k < predictions.size(); ++k) {
        if (!remaining[k]) continue;
        const double s = score_key(score(predictions[k]));
        if (!best || s > best_score) {
            best = static_cast<int>(k);
            best_score = s;
        }
    }
    if (!best) throw StateError("next_question: no remaining questions");
    return *best;
}

template <typename Score = double (*)(double)>
int next_question(const UserSessionState& state, const TrainedModel& model, Score score = gini) {
    return select_question(predict_all(state.current_point, model), state.remaining, score);
}

/// Mean Gini over the still-unanswered questions at the current point.
inline double mean_remaining_gini(const UserSessionState& state, const TrainedModel& model) {
    const auto p = predict_all(state.current_point, model);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < p.size(); ++k)
        if (state.remaining[k]) {
            sum += gini(p[k]);
            ++n;
        }
    return n ? sum / static_cast<double>(n) : 0.0;
}

/// Simulated adaptive session: ask K questions, reading answers from
/// `user_truth`, re-embedding after each. If the top-ranked question has no
/// recorded answer the next-ranked answerable one is asked instead; when none
/// is left the loop stops and sets stopped_early. The model is not refit.
template <typename Score = double (*)(double)>
UserSessionState answer_k_questions(const AnswerRow& user_truth, std::size_t k_answers, const TrainedModel& model,
                                    int resolution = kDefaultResolution, Score score = gini,
                                    std::vector<double>* gini_trace = nullptr) {
    const std::size_t nq = model.num_questions();
    if (user_truth.size() != nq) throw InputError("answer_k_questions: truth length differs from question count");
    if (k_answers < 1 || k_answers > nq) throw InputError("answer_k_questions: K must be in [1, Q]");

    auto state = UserSessionState::fresh(nq);
    PosteriorAccumulator posterior(model, resolution);
    if (gini_trace) gini_trace->push_back(mean_remaining_gini(state, model));
    for (std::size_t step = 0; step < k_answers; ++step) {
        const auto predictions = predict_all(state.current_point, model);
        std::optional<int> pick;
        const int top = select_question(predictions, state.remaining, score);
        if (user_truth[static_cast<std::size_t>(top)]) {
            pick = top;
        } else {
            for (int q : rank_questions(predictions, state.remaining, score))
                if (user_truth[static_cast<std::size_t>(q)]) {
                    pick = q;
                    break;
                }
        }
        if (!pick) {
            state.stopped_early = true;
            break;
        }
        const double value = *user_truth[static_cast<std::size_t>(*pick)];
        posterior.add(*pick, value);
        state.record(*pick, value, posterior.mean());
        if (gini_trace) gini_trace->push_back(mean_remaining_gini(state, model));
    }
    return state;
}

}  // namespace adaptq
