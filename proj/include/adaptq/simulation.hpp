#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "csv.hpp"
#include "errors.hpp"
#include "interaction.hpp"
#include "latent_model.hpp"
#include "metrics.hpp"
#include "random.hpp"
#include "selection.hpp"
#include "survey.hpp"

namespace adaptq {

enum class InitCondition { Coldstart, GPT, GPTmeans, GPTvoters, Candidates };

inline const std::vector<InitCondition> kAllConditions{InitCondition::Coldstart, InitCondition::GPT,
                                                       InitCondition::GPTmeans, InitCondition::GPTvoters,
                                                       InitCondition::Candidates};

inline std::string to_string(InitCondition c) {
    switch (c) {
        case InitCondition::Coldstart: return "Coldstart";
        case InitCondition::GPT: return "GPT";
        case InitCondition::GPTmeans: return "GPTmeans";
        case InitCondition::GPTvoters: return "GPTvoters";
        case InitCondition::Candidates: return "Candidates";
    }
    return "?";
}

inline InitCondition parse_condition(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    for (auto c : kAllConditions) {
        auto name = to_string(c);
        std::transform(name.begin(), name.end(), name.begin(),
                       [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
        if (name == s) return c;
    }
    throw ConfigError("unknown init condition '" + s + "'");
}

struct SimulationConfig {
    std::size_t K = 30;
    std::size_t U = 5;
    double gamma = 0.0;
    std::size_t n_users = 1000;
    std::size_t repetitions = 10;
    std::uint64_t seed = 0;
    InitCondition init_condition = InitCondition::Coldstart;
    int grid_resolution = kDefaultResolution;
    std::size_t recommendations = kDefaultRecommendations;
    /// Keep per-user recommendation sets (needed for extremity analysis).
    bool keep_recommendations = false;
};

inline nlohmann::json to_json(const SimulationConfig& c) {
    return {{"K", c.K},
            {"U", c.U},
            {"gamma", c.gamma},
            {"n_users", c.n_users},
            {"repetitions", c.repetitions},
            {"seed", c.seed},
            {"init_condition", to_string(c.init_condition)},
            {"grid_resolution", c.grid_resolution},
            {"recommendations", c.recommendations}};
}

/// Training rows tagged by origin, with the batched replacement rule: each
/// refit removes floor(gamma * U) synthetic rows (fractional parts carried
/// over between refits), chosen uniformly at random, then appends the batch.
class TrainingPool {
public:
    TrainingPool(const ResponseMatrix& init, std::size_t num_questions, double gamma, std::size_t users_per_refit,
                 std::uint64_t removal_seed)
        : matrix_(num_questions), gamma_(gamma), users_per_refit_(users_per_refit), rng_(removal_seed) {
        if (gamma < 0) throw ConfigError("gamma must be >= 0");
        for (std::size_t n = 0; n < init.rows(); ++n) {
            matrix_.add_row(init.respondents[n], init.answers[n]);
            origins_.push_back(Origin::synthetic);
        }
        synthetic_ = init.rows();
    }

    const ResponseMatrix& matrix() const noexcept { return matrix_; }
    std::size_t synthetic_rows() const noexcept { return synthetic_; }
    std::size_t real_rows() const noexcept { return matrix_.rows() - synthetic_; }
    std::size_t refits() const noexcept { return refits_; }

    /// Number of synthetic rows the next refit removes.
    std::size_t next_removal() const {
        const double due = carry_ + gamma_ * static_cast<double>(users_per_refit_);
        return std::min(static_cast<std::size_t>(std::floor(due + 1e-9)), synthetic_);
    }

    void refit_batch(const std::vector<std::pair<Respondent, AnswerRow>>& batch) {
        const double due = carry_ + gamma_ * static_cast<double>(users_per_refit_);
        const auto whole = static_cast<std::size_t>(std::floor(due + 1e-9));
        carry_ = std::max(0.0, due - static_cast<double>(whole));
        const std::size_t remove = std::min(whole, synthetic_);
        for (std::size_t i = 0; i < remove; ++i) {
            auto target = std::min(static_cast<std::size_t>(uniform01(rng_) * static_cast<double>(synthetic_)),
                                   synthetic_ - 1);
            for (std::size_t r = 0; r < origins_.size(); ++r) {
                if (origins_[r] != Origin::synthetic) continue;
                if (target-- == 0) {
                    erase_row(r);
                    break;
                }
            }
            --synthetic_;
        }
        for (const auto& [who, row] : batch) {
            matrix_.add_row(who, row);
            origins_.push_back(Origin::real);
        }
        ++refits_;
    }

private:
    void erase_row(std::size_t r) {
        const auto off = static_cast<std::ptrdiff_t>(r);
        matrix_.answers.erase(matrix_.answers.begin() + off);
        matrix_.respondents.erase(matrix_.respondents.begin() + off);
        origins_.erase(origins_.begin() + off);
    }

    ResponseMatrix matrix_;
    std::vector<Origin> origins_;
    std::size_t synthetic_ = 0;
    double gamma_;
    std::size_t users_per_refit_;
    double carry_ = 0.0;
    std::size_t refits_ = 0;
    Rng rng_;
};

/// Users after which the synthetic pool is exhausted under the batched rule;
/// nullopt when gamma is zero.
inline std::optional<std::size_t> users_until_full_replacement(std::size_t init_rows, double gamma,
                                                               std::size_t users_per_refit) {
    if (init_rows == 0) return 0;
    if (gamma <= 0) return std::nullopt;
    ResponseMatrix init(1);
    for (std::size_t i = 0; i < init_rows; ++i) init.add_row({}, AnswerRow(1));
    TrainingPool pool(init, 1, gamma, users_per_refit, 0);
    while (pool.synthetic_rows() > 0) pool.refit_batch({});
    return pool.refits() * users_per_refit;
}

struct SimulationResult {
    std::vector<double> per_user_rmse;  // NaN where undefined
    std::vector<double> per_user_cra;
    std::vector<InteractionRecord> interaction_log;
    std::size_t refit_count = 0;
    SimulationConfig config;
    std::size_t repetition = 0;
    /// Voter row served as user u.
    std::vector<std::size_t> user_rows;
    /// Synthetic row count after each refit.
    std::vector<std::size_t> synthetic_after_refit;
    /// Users served when the synthetic pool first hit zero.
    std::optional<std::size_t> full_replacement_user;
    std::size_t stopped_early_users = 0;
    std::vector<RecommendationSet> full_information_recommendations;
    std::vector<RecommendationSet> adaptive_recommendations;
};

namespace detail {

inline std::vector<std::size_t> user_order(std::size_t pool, std::size_t n_users, std::uint64_t seed,
                                           std::size_t repetition) {
    std::vector<std::size_t> idx(pool);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng{derive_seed(seed, "users", repetition)};
    // Fisher-Yates with our own index draw so the order is library-independent
    for (std::size_t i = pool; i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
        std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
    }
    idx.resize(n_users);
    return idx;
}

}  // namespace detail

/// One simulation run: sequential simulated users answer K adaptively chosen
/// questions; the model is refit every U users with gamma-replacement.
inline SimulationResult run_simulation(const SimulationConfig& config, const Questionnaire& questionnaire,
                                       const ResponseMatrix& voters, const std::vector<std::vector<double>>& candidates,
                                       const ResponseMatrix& init_data, std::size_t repetition = 0) {
    const std::size_t nq = questionnaire.size();
    if (config.K < 1 || config.K > nq) throw ConfigError("K must be in [1, " + std::to_string(nq) + "]");
    if (config.U < 1) throw ConfigError("U must be >= 1");
    if (config.n_users < 1) throw ConfigError("n_users must be >= 1");
    if (config.n_users > voters.rows())
        throw InputError("cannot sample " + std::to_string(config.n_users) + " users from " +
                         std::to_string(voters.rows()) + " voters");
    if (voters.cols() != nq) throw InputError("voters do not match the questionnaire");
    if (!init_data.empty() && init_data.cols() != nq) throw InputError("init data does not match the questionnaire");
    if (candidates.empty()) throw InputError("candidate pool is empty");

    SimulationResult result;
    result.config = config;
    result.repetition = repetition;
    result.user_rows = detail::user_order(voters.rows(), config.n_users, config.seed, repetition);

    const std::uint64_t fit_seed = derive_seed(config.seed, "fit", repetition);
    TrainingPool pool(init_data, nq, config.gamma, config.U, derive_seed(config.seed, "removal", repetition));
    auto model = fit_model(pool.matrix(), questionnaire, {fit_seed, 0, {}});

    std::vector<std::pair<Respondent, AnswerRow>> batch;
    for (std::size_t u = 0; u < config.n_users; ++u) {
        const auto& truth = voters.answers[result.user_rows[u]];
        const auto state = answer_k_questions(truth, config.K, model, config.grid_resolution);
        result.stopped_early_users += state.stopped_early;

        AnswerRow given(nq);
        for (const auto& [q, v] : state.answered) {
            result.interaction_log.push_back({u, q, v, Origin::real});
            given[static_cast<std::size_t>(q)] = v;
        }
        const auto imputed = impute_at(state.current_point, state.answered, model);
        std::vector<bool> answered(nq, false);
        for (const auto& [q, v] : state.answered) answered[static_cast<std::size_t>(q)] = true;
        result.per_user_rmse.push_back(
            rmse_imputation(imputed, truth, answered).value_or(std::numeric_limits<double>::quiet_NaN()));

        std::vector<double> full_profile(nq);
        for (std::size_t k = 0; k < nq; ++k) full_profile[k] = truth[k].value_or(imputed[k]);
        auto true_set = recommend_candidates(full_profile, candidates, config.recommendations);
        auto predicted_set = recommend_candidates(imputed, candidates, config.recommendations);
        result.per_user_cra.push_back(cra(true_set, predicted_set));
        if (config.keep_recommendations) {
            result.full_information_recommendations.push_back(std::move(true_set));
            result.adaptive_recommendations.push_back(std::move(predicted_set));
        }

        batch.emplace_back(Respondent{voters.respondents[result.user_rows[u]].id, RespondentKind::voter, std::nullopt},
                           std::move(given));
        if (batch.size() == config.U) {
            const bool had_synthetic = pool.synthetic_rows() > 0;
            pool.refit_batch(batch);
            batch.clear();
            result.synthetic_after_refit.push_back(pool.synthetic_rows());
            if (had_synthetic && pool.synthetic_rows() == 0) result.full_replacement_user = u + 1;
            model = fit_model(pool.matrix(), questionnaire, {fit_seed, pool.refits(), {}});
        }
    }
    result.refit_count = pool.refits();
    return result;
}

inline SimulationResult run_simulation(const SimulationConfig& config, const Questionnaire& questionnaire,
                                       const ResponseMatrix& voters, const ResponseMatrix& candidates,
                                       const ResponseMatrix& init_data, std::size_t repetition = 0) {
    return run_simulation(config, questionnaire, voters, complete_by_column_mean(candidates), init_data, repetition);
}

// ---------------------------------------------------------------------------
// Multi-run studies

/// Per-index mean ignoring NaN entries.
inline std::vector<double> mean_curve(const std::vector<const std::vector<double>*>& curves) {
    if (curves.empty()) return {};
    std::vector<double> out(curves.front()->size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto* c : curves)
            if (!std::isnan((*c)[i])) {
                sum += (*c)[i];
                ++n;
            }
        if (n) out[i] = sum / static_cast<double>(n);
    }
    return out;
}

struct ConditionResult {
    InitCondition condition = InitCondition::Coldstart;
    std::vector<SimulationResult> runs;
    std::vector<double> mean_rmse;
    std::vector<double> mean_cra;
};

inline ConditionResult summarize(InitCondition condition, std::vector<SimulationResult> runs) {
    ConditionResult out{condition, std::move(runs), {}, {}};
    std::vector<const std::vector<double>*> rmse, cra_curves;
    for (const auto& r : out.runs) {
        rmse.push_back(&r.per_user_rmse);
        cra_curves.push_back(&r.per_user_cra);
    }
    out.mean_rmse = mean_curve(rmse);
    out.mean_cra = mean_curve(cra_curves);
    return out;
}

/// Training data for each initialization condition.
struct SyntheticBundle {
    std::optional<ResponseMatrix> gpt;
    std::optional<ResponseMatrix> gpt_means;
    std::optional<ResponseMatrix> gpt_voters;
    std::optional<ResponseMatrix> candidates;

    ResponseMatrix init_for(InitCondition c, std::size_t num_questions) const {
        const std::optional<ResponseMatrix>* slot = nullptr;
        switch (c) {
            case InitCondition::Coldstart: return ResponseMatrix(num_questions);
            case InitCondition::GPT: slot = &gpt; break;
            case InitCondition::GPTmeans: slot = &gpt_means; break;
            case InitCondition::GPTvoters: slot = &gpt_voters; break;
            case InitCondition::Candidates: slot = &candidates; break;
        }
        if (!slot || !*slot) throw ConfigError("condition " + to_string(c) + " needs training data that was not supplied");
        return **slot;
    }
};

/// Runs `tasks` jobs on up to `jobs` threads; results land by task index.
template <typename Fn>
void run_parallel(std::size_t tasks, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, tasks));
    if (jobs == 1) {
        for (std::size_t i = 0; i < tasks; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < tasks;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

/// All requested conditions with shared per-repetition seeds, so user
/// orderings are paired across conditions.
inline std::vector<ConditionResult> compare_conditions(const SimulationConfig& base, const Questionnaire& questionnaire,
                                                       const ResponseMatrix& voters, const ResponseMatrix& candidates,
                                                       const SyntheticBundle& bundle,
                                                       const std::vector<InitCondition>& conditions = kAllConditions,
                                                       std::size_t jobs = 1) {
    const auto pool = complete_by_column_mean(candidates);
    std::vector<ResponseMatrix> inits;
    for (auto c : conditions) inits.push_back(bundle.init_for(c, questionnaire.size()));

    const std::size_t reps = std::max<std::size_t>(1, base.repetitions);
    std::vector<SimulationResult> runs(conditions.size() * reps);
    run_parallel(runs.size(), jobs, [&](std::size_t task) {
        const std::size_t ci = task / reps, rep = task % reps;
        auto cfg = base;
        cfg.init_condition = conditions[ci];
        runs[task] = run_simulation(cfg, questionnaire, voters, pool, inits[ci], rep);
    });

    std::vector<ConditionResult> out;
    for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
        std::vector<SimulationResult> mine(std::make_move_iterator(runs.begin() + static_cast<std::ptrdiff_t>(ci * reps)),
                                           std::make_move_iterator(runs.begin() + static_cast<std::ptrdiff_t>((ci + 1) * reps)));
        out.push_back(summarize(conditions[ci], std::move(mine)));
    }
    return out;
}

struct BreakEvenRow {
    std::size_t K = 0;
    BreakEvenReport rmse;
    BreakEvenReport cra;
    ConditionResult coldstart;
    ConditionResult pretrained;
};

/// Coldstart versus GPTvoters break-even points per K.
inline std::vector<BreakEvenRow> sweep_k(const SimulationConfig& base, const std::vector<std::size_t>& k_values,
                                         const Questionnaire& questionnaire, const ResponseMatrix& voters,
                                         const ResponseMatrix& candidates, const ResponseMatrix& gpt_voters,
                                         std::size_t window = 50, std::size_t persistence = 20, std::size_t jobs = 1) {
    SyntheticBundle bundle;
    bundle.gpt_voters = gpt_voters;
    std::vector<BreakEvenRow> rows;
    for (auto k : k_values) {
        if (k < 1 || k > questionnaire.size()) throw ConfigError("K value " + std::to_string(k) + " outside [1, Q]");
        auto cfg = base;
        cfg.K = k;
        auto results = compare_conditions(cfg, questionnaire, voters, candidates, bundle,
                                          {InitCondition::Coldstart, InitCondition::GPTvoters}, jobs);
        BreakEvenRow row;
        row.K = k;
        row.rmse = break_even(results[0].mean_rmse, results[1].mean_rmse, window, persistence,
                              MetricDirection::lower_is_better, "rmse");
        row.cra = break_even(results[0].mean_cra, results[1].mean_cra, window, persistence,
                             MetricDirection::higher_is_better, "cra");
        row.coldstart = std::move(results[0]);
        row.pretrained = std::move(results[1]);
        rows.push_back(std::move(row));
    }
    return rows;
}

struct ReplacementRow {
    double gamma = 0.0;
    ConditionResult result;
    /// Users after which the synthetic rows are gone (closed form); nullopt if never.
    std::optional<std::size_t> full_replacement_users;
    /// Mean query overlap with Coldstart over the users served after full
    /// replacement; nullopt when replacement never completes within the horizon.
    std::optional<double> overlap;
};

struct ReplacementStudy {
    ConditionResult coldstart;
    std::vector<ReplacementRow> rows;
};

inline std::vector<InteractionRecord> interactions_from(const std::vector<InteractionRecord>& log, std::size_t first_user) {
    std::vector<InteractionRecord> out;
    for (const auto& r : log)
        if (r.user_index >= first_user) out.push_back(r);
    return out;
}

inline ReplacementStudy replacement_study(const SimulationConfig& base, const std::vector<double>& gammas,
                                          const Questionnaire& questionnaire, const ResponseMatrix& voters,
                                          const ResponseMatrix& candidates, const ResponseMatrix& gpt,
                                          std::size_t jobs = 1) {
    SyntheticBundle bundle;
    bundle.gpt = gpt;
    ReplacementStudy study;
    study.coldstart = compare_conditions(base, questionnaire, voters, candidates, bundle, {InitCondition::Coldstart},
                                         jobs)
                          .front();
    for (double g : gammas) {
        if (g < 0) throw ConfigError("gamma values must be >= 0");
        auto cfg = base;
        cfg.gamma = g;
        ReplacementRow row;
        row.gamma = g;
        row.result = compare_conditions(cfg, questionnaire, voters, candidates, bundle, {InitCondition::GPT}, jobs).front();
        row.full_replacement_users = users_until_full_replacement(gpt.rows(), g, base.U);
        if (row.full_replacement_users && *row.full_replacement_users < base.n_users) {
            double sum = 0.0;
            for (std::size_t rep = 0; rep < row.result.runs.size(); ++rep)
                sum += query_overlap(interactions_from(row.result.runs[rep].interaction_log, *row.full_replacement_users),
                                     interactions_from(study.coldstart.runs[rep].interaction_log,
                                                       *row.full_replacement_users));
            row.overlap = sum / static_cast<double>(row.result.runs.size());
        }
        study.rows.push_back(std::move(row));
    }
    return study;
}

// ---------------------------------------------------------------------------
// Export

inline void write_curve_csv(std::ostream& out, const std::vector<double>& rmse, const std::vector<double>& cra_curve) {
    out << "user_index,rmse,cra\n";
    for (std::size_t i = 0; i < rmse.size(); ++i) {
        out << (i + 1) << ',';
        if (!std::isnan(rmse[i])) out << csv::format_double(rmse[i]);
        out << ',';
        if (!std::isnan(cra_curve[i])) out << csv::format_double(cra_curve[i]);
        out << '\n';
    }
}

inline nlohmann::json to_json(const BreakEvenReport& r) {
    return {{"metric", r.metric},
            {"N", r.n ? nlohmann::json(*r.n) : nlohmann::json("none within horizon")},
            {"window", r.window},
            {"persistence", r.persistence}};
}

inline void write_interactions_jsonl(std::ostream& out, const std::vector<InteractionRecord>& log) {
    for (const auto& r : log)
        out << nlohmann::json{{"user_index", r.user_index},
                              {"question_id", r.question_id},
                              {"value", r.value},
                              {"origin", to_string(r.origin)}}
                   .dump()
            << '\n';
}

}  // namespace adaptq
