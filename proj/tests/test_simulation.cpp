#include <cmath>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include <adaptq/planted.hpp>
#include <adaptq/simulation.hpp>

using namespace adaptq;

namespace {

const PlantedWorld& small_world() {
    static const PlantedWorld w = [] {
        PlantedConfig cfg;
        cfg.questions = 12;
        cfg.candidates_per_party = 10;
        cfg.voters = 120;
        cfg.seed = 5;
        return make_planted_world(cfg);
    }();
    return w;
}

ResponseMatrix synthetic_rows(std::size_t n, std::size_t nq) {
    ResponseMatrix m(nq);
    for (std::size_t i = 0; i < n; ++i)
        m.add_row({"s" + std::to_string(i), RespondentKind::synthetic, "P0"}, AnswerRow(nq, 0.5));
    return m;
}

std::vector<std::pair<Respondent, AnswerRow>> real_batch(std::size_t u, std::size_t nq) {
    std::vector<std::pair<Respondent, AnswerRow>> b;
    for (std::size_t i = 0; i < u; ++i) b.emplace_back(Respondent{"r", RespondentKind::voter, {}}, AnswerRow(nq, 1.0));
    return b;
}

SimulationConfig small_config() {
    SimulationConfig cfg;
    cfg.K = 5;
    cfg.U = 5;
    cfg.n_users = 40;
    cfg.repetitions = 2;
    cfg.seed = 9;
    cfg.grid_resolution = 31;
    cfg.recommendations = 12;
    return cfg;
}

std::string curve_text(const SimulationResult& r) {
    std::ostringstream out;
    write_curve_csv(out, r.per_user_rmse, r.per_user_cra);
    write_interactions_jsonl(out, r.interaction_log);
    return out.str();
}

}  // namespace

TEST(TrainingPool, IntegerBatchBookkeeping) {
    for (double gamma : {0.0, 0.4, 1.2, 2.0}) {
        TrainingPool pool(synthetic_rows(40, 3), 3, gamma, 5, 1);
        const auto per_refit = static_cast<std::size_t>(std::floor(gamma * 5 + 1e-9));
        for (std::size_t r = 1; r <= 12; ++r) {
            pool.refit_batch(real_batch(5, 3));
            const std::size_t removed = r * per_refit;
            EXPECT_EQ(pool.synthetic_rows(), removed >= 40 ? 0 : 40 - removed) << "gamma " << gamma << " refit " << r;
            EXPECT_EQ(pool.real_rows(), r * 5);
            EXPECT_EQ(pool.matrix().rows(), pool.synthetic_rows() + pool.real_rows());
        }
    }
}

TEST(TrainingPool, FractionalRemovalCarriesOver) {
    // gamma * U = 2.5: removals alternate 2, 3, 2, 3, ...
    TrainingPool pool(synthetic_rows(100, 2), 2, 0.5, 5, 3);
    std::vector<std::size_t> removed;
    std::size_t before = 100;
    for (int r = 0; r < 4; ++r) {
        pool.refit_batch(real_batch(5, 2));
        removed.push_back(before - pool.synthetic_rows());
        before = pool.synthetic_rows();
    }
    EXPECT_EQ(removed, (std::vector<std::size_t>{2, 3, 2, 3}));
}

TEST(TrainingPool, RemovesOnlySyntheticRows) {
    TrainingPool pool(synthetic_rows(12, 2), 2, 2.0, 5, 7);
    pool.refit_batch(real_batch(5, 2));
    pool.refit_batch(real_batch(5, 2));
    EXPECT_EQ(pool.synthetic_rows(), 0u);
    EXPECT_EQ(pool.real_rows(), 10u);
    for (const auto& who : pool.matrix().respondents) EXPECT_EQ(who.kind, RespondentKind::voter);
    EXPECT_THROW(TrainingPool(synthetic_rows(1, 2), 2, -0.1, 5, 0), ConfigError);
}

TEST(Replacement, UsersUntilSyntheticPoolIsGone) {
    const std::vector<std::pair<double, std::size_t>> expected{{0.4, 1000}, {0.8, 500}, {1.2, 335},
                                                               {2.0, 200},  {4.0, 100}, {8.0, 50}};
    for (const auto& [gamma, users] : expected) EXPECT_EQ(users_until_full_replacement(400, gamma, 5), users) << gamma;
    EXPECT_FALSE(users_until_full_replacement(400, 0.0, 5));
    EXPECT_EQ(users_until_full_replacement(0, 1.0, 5), 0u);
}

TEST(Simulation, ByteIdenticalAcrossRuns) {
    const auto& w = small_world();
    auto cfg = small_config();
    cfg.init_condition = InitCondition::Candidates;
    cfg.gamma = 1.0;
    const auto a = run_simulation(cfg, w.questionnaire, w.voters, w.candidates, w.candidates, 1);
    const auto b = run_simulation(cfg, w.questionnaire, w.voters, w.candidates, w.candidates, 1);
    EXPECT_EQ(curve_text(a), curve_text(b));
    EXPECT_EQ(a.user_rows, b.user_rows);
    const auto c = run_simulation(cfg, w.questionnaire, w.voters, w.candidates, w.candidates, 2);
    EXPECT_NE(a.user_rows, c.user_rows);
}

TEST(Simulation, ShapeOfResult) {
    const auto& w = small_world();
    const auto cfg = small_config();
    const auto r = run_simulation(cfg, w.questionnaire, w.voters, w.candidates, ResponseMatrix(12));
    EXPECT_EQ(r.per_user_rmse.size(), cfg.n_users);
    EXPECT_EQ(r.per_user_cra.size(), cfg.n_users);
    EXPECT_EQ(r.interaction_log.size(), cfg.n_users * cfg.K);
    EXPECT_EQ(r.refit_count, cfg.n_users / cfg.U);
    EXPECT_EQ(r.stopped_early_users, 0u);
    std::set<std::size_t> distinct(r.user_rows.begin(), r.user_rows.end());
    EXPECT_EQ(distinct.size(), cfg.n_users);
    for (double v : r.per_user_cra) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
    for (double v : r.per_user_rmse) EXPECT_TRUE(std::isnan(v) || (v >= 0.0 && v <= 1.0));
}

TEST(Simulation, ZeroGammaKeepsSyntheticRows) {
    const auto& w = small_world();
    auto cfg = small_config();
    cfg.init_condition = InitCondition::Candidates;
    const auto r = run_simulation(cfg, w.questionnaire, w.voters, w.candidates, w.candidates);
    for (auto n : r.synthetic_after_refit) EXPECT_EQ(n, w.candidates.rows());
    EXPECT_FALSE(r.full_replacement_user);

    cfg.gamma = 4.0;
    const auto fast = run_simulation(cfg, w.questionnaire, w.voters, w.candidates, w.candidates);
    ASSERT_TRUE(fast.full_replacement_user);
    EXPECT_EQ(*fast.full_replacement_user, *users_until_full_replacement(w.candidates.rows(), 4.0, 5));
}

TEST(Simulation, UserOrderIsPairedAcrossConditions) {
    const auto& w = small_world();
    SyntheticBundle bundle;
    bundle.candidates = w.candidates;
    const auto results = compare_conditions(small_config(), w.questionnaire, w.voters, w.candidates, bundle,
                                            {InitCondition::Coldstart, InitCondition::Candidates}, 2);
    ASSERT_EQ(results.size(), 2u);
    for (std::size_t rep = 0; rep < 2; ++rep)
        EXPECT_EQ(results[0].runs[rep].user_rows, results[1].runs[rep].user_rows);
    EXPECT_NE(results[0].runs[0].user_rows, results[0].runs[1].user_rows);
    EXPECT_EQ(results[0].mean_rmse.size(), 40u);
}

TEST(Simulation, ParallelMatchesSerial) {
    const auto& w = small_world();
    SyntheticBundle bundle;
    const auto serial = compare_conditions(small_config(), w.questionnaire, w.voters, w.candidates, bundle,
                                           {InitCondition::Coldstart}, 1);
    const auto parallel = compare_conditions(small_config(), w.questionnaire, w.voters, w.candidates, bundle,
                                             {InitCondition::Coldstart}, 3);
    for (std::size_t rep = 0; rep < 2; ++rep)
        EXPECT_EQ(curve_text(serial[0].runs[rep]), curve_text(parallel[0].runs[rep]));
}

TEST(Simulation, RejectsBadConfiguration) {
    const auto& w = small_world();
    auto cfg = small_config();
    cfg.K = 13;
    EXPECT_THROW(run_simulation(cfg, w.questionnaire, w.voters, w.candidates, ResponseMatrix(12)), ConfigError);
    cfg = small_config();
    cfg.n_users = 121;
    EXPECT_THROW(run_simulation(cfg, w.questionnaire, w.voters, w.candidates, ResponseMatrix(12)), InputError);
    cfg = small_config();
    cfg.U = 0;
    EXPECT_THROW(run_simulation(cfg, w.questionnaire, w.voters, w.candidates, ResponseMatrix(12)), ConfigError);
    EXPECT_THROW(SyntheticBundle{}.init_for(InitCondition::GPT, 12), ConfigError);
}

TEST(Simulation, ParseCondition) {
    EXPECT_EQ(parse_condition("coldstart"), InitCondition::Coldstart);
    EXPECT_EQ(parse_condition("GPTvoters"), InitCondition::GPTvoters);
    EXPECT_EQ(parse_condition("gptmeans"), InitCondition::GPTmeans);
    for (auto c : kAllConditions) EXPECT_EQ(parse_condition(to_string(c)), c);
    EXPECT_THROW(parse_condition("warmstart"), ConfigError);
}

TEST(Studies, SweepAndReplacementRows) {
    const auto& w = small_world();
    auto cfg = small_config();
    cfg.repetitions = 1;
    cfg.n_users = 20;
    const auto sweep = sweep_k(cfg, {3, 6}, w.questionnaire, w.voters, w.candidates, w.candidates, 5, 2);
    ASSERT_EQ(sweep.size(), 2u);
    EXPECT_EQ(sweep[1].K, 6u);
    EXPECT_EQ(sweep[0].coldstart.condition, InitCondition::Coldstart);
    EXPECT_EQ(sweep[0].pretrained.condition, InitCondition::GPTvoters);
    EXPECT_THROW(sweep_k(cfg, {13}, w.questionnaire, w.voters, w.candidates, w.candidates), ConfigError);

    const auto study = replacement_study(cfg, {0.0, 4.0}, w.questionnaire, w.voters, w.candidates, w.candidates);
    ASSERT_EQ(study.rows.size(), 2u);
    EXPECT_FALSE(study.rows[0].overlap);
    ASSERT_TRUE(study.rows[1].full_replacement_users);
    EXPECT_EQ(*study.rows[1].full_replacement_users, 10u);
    ASSERT_TRUE(study.rows[1].overlap);
    EXPECT_GE(*study.rows[1].overlap, 0.0);
    EXPECT_LE(*study.rows[1].overlap, 1.0);
}
