#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "latent_model.hpp"
#include "random.hpp"
#include "survey.hpp"

namespace adaptq {

/// Ground-truth two-dimensional world: parties clustered in the latent plane,
/// logistic questions, and Likert answers obtained by rounding the true
/// agreement probability onto each question's scale.
struct PlantedConfig {
    std::size_t questions = 20;
    std::size_t parties = 4;
    std::size_t candidates_per_party = 25;
    std::size_t voters = 600;
    double party_radius = 1.5;
    double candidate_noise = 0.35;
    double voter_spread = 1.0;
    double weight_scale = 2.5;
    double intercept_scale = 0.5;
    std::uint64_t seed = 1;
};

struct PlantedWorld {
    Questionnaire questionnaire;
    std::vector<QuestionModel> truth;
    std::vector<std::string> parties;
    std::vector<LatentPoint> party_centers;
    std::vector<PartyShare> vote_shares;
    ResponseMatrix candidates;
    ResponseMatrix voters;
    std::vector<LatentPoint> candidate_points;
    std::vector<LatentPoint> voter_points;

    std::vector<double> probabilities(const LatentPoint& z) const {
        std::vector<double> p(truth.size());
        for (std::size_t k = 0; k < p.size(); ++k) p[k] = sigmoid(truth[k].logit(z));
        return p;
    }

    AnswerRow likert_answers(const LatentPoint& z) const {
        const auto p = probabilities(z);
        AnswerRow row(p.size());
        for (std::size_t k = 0; k < p.size(); ++k) {
            const int levels = questionnaire[k].levels;
            row[k] = normalize_likert(likert_index(p[k], levels), levels);
        }
        return row;
    }
};

inline PlantedWorld make_planted_world(const PlantedConfig& cfg) {
    Rng rng = make_rng(cfg.seed, "planted-world");
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);

    PlantedWorld w;
    std::vector<Question> qs;
    for (std::size_t k = 0; k < cfg.questions; ++k) {
        const int levels = kMinLevels + static_cast<int>(k % (kMaxLevels - kMinLevels + 1));
        qs.push_back({static_cast<int>(k), "Planted statement " + std::to_string(k), levels});
        const double a = angle(rng);
        w.truth.push_back({{cfg.weight_scale * std::cos(a), cfg.weight_scale * std::sin(a)},
                           cfg.intercept_scale * normal(rng)});
    }
    w.questionnaire = Questionnaire(std::move(qs));

    const double offset = angle(rng);
    double share_total = 0.0;
    std::vector<double> raw_shares;
    for (std::size_t p = 0; p < cfg.parties; ++p) {
        const double a = offset + 2.0 * std::numbers::pi * static_cast<double>(p) / static_cast<double>(cfg.parties);
        w.parties.push_back("P" + std::to_string(p));
        w.party_centers.push_back({cfg.party_radius * std::cos(a), cfg.party_radius * std::sin(a)});
        raw_shares.push_back(0.5 + uniform01(rng));
        share_total += raw_shares.back();
    }
    for (std::size_t p = 0; p < cfg.parties; ++p) w.vote_shares.push_back({w.parties[p], raw_shares[p] / share_total});

    w.candidates = ResponseMatrix(cfg.questions);
    for (std::size_t p = 0; p < cfg.parties; ++p)
        for (std::size_t c = 0; c < cfg.candidates_per_party; ++c) {
            const LatentPoint z{w.party_centers[p].x + cfg.candidate_noise * normal(rng),
                                w.party_centers[p].y + cfg.candidate_noise * normal(rng)};
            w.candidate_points.push_back(z);
            w.candidates.add_row({"c" + std::to_string(w.candidates.rows()), RespondentKind::candidate, w.parties[p]},
                                 w.likert_answers(z));
        }

    w.voters = ResponseMatrix(cfg.questions);
    for (std::size_t v = 0; v < cfg.voters; ++v) {
        const LatentPoint z{cfg.voter_spread * normal(rng), cfg.voter_spread * normal(rng)};
        w.voter_points.push_back(z);
        w.voters.add_row({"v" + std::to_string(v), RespondentKind::voter, std::nullopt}, w.likert_answers(z));
    }
    return w;
}

}  // namespace adaptq
