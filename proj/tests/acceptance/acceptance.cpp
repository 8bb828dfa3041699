// Acceptance runner: one PASS/FAIL/SKIP line per criterion.
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <adaptq/adaptq.hpp>

#include "../oracles.hpp"

using namespace adaptq;

namespace {

struct Outcome {
    enum Kind { pass, fail, skip } kind;
    std::string detail;
};

Outcome check(bool ok, std::string detail) { return {ok ? Outcome::pass : Outcome::fail, std::move(detail)}; }

std::string sci(double v) {
    std::ostringstream s;
    s << std::scientific << std::setprecision(2) << v;
    return s.str();
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(precision) << v;
    return s.str();
}

double window_mean(const std::vector<double>& curve, std::size_t from, std::size_t to) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = from; i < to && i < curve.size(); ++i)
        if (!std::isnan(curve[i])) sum += curve[i], ++n;
    return n ? sum / static_cast<double>(n) : std::nan("");
}

// -- criteria ----------------------------------------------------------------

Outcome gini_values() {
    const bool ok = gini(0.5) == 0.5 && gini(0.0) == 0.0 && gini(0.25) == 0.375 && gini(1.0) == 0.0;
    return check(ok, "gini(0.5)=" + fmt(gini(0.5)) + " gini(0)=" + fmt(gini(0.0)) + " gini(0.25)=" + fmt(gini(0.25)));
}

Outcome vertex_oracle() {
    Rng rng(2024);
    std::size_t mismatches = 0;
    for (int instance = 0; instance < 100; ++instance) {
        const std::size_t parties = 2 + instance % 4, nq = 1 + instance % 12;
        std::vector<PartyMean> means(parties);
        for (std::size_t p = 0; p < parties; ++p) {
            means[p].party = "P" + std::to_string(p);
            for (std::size_t k = 0; k < nq; ++k) means[p].mean.push_back(uniform01(rng));
        }
        const auto got = party_vertices(means);
        for (std::size_t p = 0; p < parties; ++p) mismatches += got[p].vertex != oracle::vertex(means, p);
    }
    return check(mismatches == 0, std::to_string(mismatches) + " mismatching vertices over 100 instances");
}

Outcome dirichlet_moments() {
    const std::vector<double> alpha{0.28, 0.19, 0.15, 0.14, 0.1, 0.08, 0.04, 0.02};
    const double total = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    Rng rng = make_rng(5, "acceptance-dirichlet");
    std::vector<double> mean(alpha.size(), 0.0);
    double worst_sum = 0.0;
    const int draws = 50000;
    for (int i = 0; i < draws; ++i) {
        const auto w = sample_dirichlet(alpha, rng);
        worst_sum = std::max(worst_sum, std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0));
        for (std::size_t p = 0; p < w.size(); ++p) mean[p] += w[p] / draws;
    }
    double worst_mean = 0.0;
    for (std::size_t p = 0; p < alpha.size(); ++p) worst_mean = std::max(worst_mean, std::abs(mean[p] - alpha[p] / total));
    return check(worst_mean <= 0.01 && worst_sum <= 1e-9,
                 "max mean error " + fmt(worst_mean) + ", max |sum-1| " + sci(worst_sum));
}

Outcome gpt_voters_validity() {
    const auto w = make_planted_world({});
    const auto vertices = party_vertices(party_means(w.candidates));
    std::vector<double> alpha;
    for (const auto& s : w.vote_shares) alpha.push_back(s.fraction);
    const auto voters = sample_gpt_voters(vertices, {alpha, 1200, 3, 1.0});
    bool in_box = true;
    for (const auto& row : voters.answers)
        for (const auto& v : row) in_box = in_box && v && *v >= 0.0 && *v <= 1.0;
    bool one_hot = true;
    for (std::size_t p = 0; p < vertices.size(); ++p) {
        std::vector<double> weights(vertices.size(), 0.0);
        weights[p] = 1.0;
        one_hot = one_hot && synthesize_voter(weights, vertices) == vertices[p].vertex;
    }
    return check(in_box && one_hot, std::string("entries in [0,1]: ") + (in_box ? "yes" : "no") +
                                        ", one-hot equals vertex: " + (one_hot ? "yes" : "no"));
}

Outcome model_recovery() {
    PlantedConfig cfg;
    cfg.voters = 200;
    const auto w = make_planted_world(cfg);
    const auto m = fit_model(w.voters, w.questionnaire, {7, 0, {}});
    const auto full = complete_by_column_mean(w.voters);
    double err = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < full.size(); ++r) {
        const auto predicted = predict_all(m.project(full[r]), m);
        const auto truth = w.probabilities(w.voter_points[r]);
        for (std::size_t k = 0; k < truth.size(); ++k, ++n) err += std::abs(predicted[k] - truth[k]);
    }
    const double mae = err / static_cast<double>(n);

    Rng rng(99);
    std::normal_distribution<double> normal(0.0, 1.0);
    double worst = 0.0;
    for (int point = 0; point < 10; ++point) {
        PartialAnswers answers;
        for (int k = 0; k < 10; ++k) answers.emplace_back(k * 2, uniform01(rng));
        const LatentPoint z{normal(rng), normal(rng)};
        const auto g = log_posterior_gradient(z, answers, m);
        const double h = 1e-5;
        const double fd[2] = {
            (log_posterior({z.x + h, z.y}, answers, m) - log_posterior({z.x - h, z.y}, answers, m)) / (2 * h),
            (log_posterior({z.x, z.y + h}, answers, m) - log_posterior({z.x, z.y - h}, answers, m)) / (2 * h)};
        for (int a = 0; a < 2; ++a) worst = std::max(worst, std::abs(g[a] - fd[a]) / std::max(1.0, std::abs(fd[a])));
    }
    return check(mae < 0.1 && worst <= 1e-4, "probability MAE " + fmt(mae) + ", worst gradient rel error " + sci(worst));
}

Outcome imputation_contracts() {
    const auto w = make_planted_world({});
    const auto m = fit_model(w.voters, w.questionnaire, {1, 0, {}});
    bool kept = true;
    for (std::size_t r = 0; r < 20; ++r) {
        PartialAnswers answers;
        for (std::size_t k = r % 3; k < 20; k += 3) answers.emplace_back(static_cast<int>(k), *w.voters.answers[r][k]);
        const auto out = impute(answers, m, 41);
        for (const auto& [k, y] : answers) kept = kept && out[static_cast<std::size_t>(k)] == y;
    }
    const auto& truth = w.voters.answers[0];
    std::vector<double> same;
    for (const auto& v : truth) same.push_back(*v);
    const bool rmse_zero = rmse_imputation(same, truth, std::vector<bool>(truth.size(), false)) == 0.0;

    const auto pool = complete_by_column_mean(w.candidates);
    const auto set = recommend_candidates(same, pool, 36);
    const bool cra_one = cra(set, set) == 1.0;

    Rng rng(8);
    bool knn_ok = true;
    for (std::size_t n : {10, 100, 500, 1000}) {
        std::vector<std::vector<double>> cands(n, std::vector<double>(12));
        for (auto& row : cands)
            for (auto& v : row) v = std::floor(uniform01(rng) * 5) / 4;
        std::vector<double> q(12);
        for (auto& v : q) v = std::floor(uniform01(rng) * 5) / 4;
        knn_ok = knn_ok && recommend_candidates(q, cands, 36).ids == oracle::knn(q, cands, 36);
    }
    return check(kept && rmse_zero && cra_one && knn_ok,
                 std::string("answers kept ") + (kept ? "yes" : "no") + ", rmse(truth,truth)=0 " +
                     (rmse_zero ? "yes" : "no") + ", cra(identical)=1 " + (cra_one ? "yes" : "no") +
                     ", kNN matches oracle " + (knn_ok ? "yes" : "no"));
}

SimulationConfig desk_config() {
    SimulationConfig cfg;
    cfg.K = 10;
    cfg.U = 5;
    cfg.repetitions = 5;
    cfg.grid_resolution = 31;
    return cfg;
}

Outcome coldstart_learning() {
    const auto w = make_planted_world({});
    auto cfg = desk_config();
    cfg.n_users = 500;
    cfg.seed = 11;
    const auto r = compare_conditions(cfg, w.questionnaire, w.voters, w.candidates, SyntheticBundle{},
                                      {InitCondition::Coldstart}, 1)
                       .front();
    const double early = window_mean(r.mean_rmse, 0, 100), late = window_mean(r.mean_rmse, 400, 500);
    return check(late <= 0.9 * early, "mean RMSE users 1-100 " + fmt(early) + ", users 401-500 " + fmt(late) + " (" +
                                          fmt(100.0 * (1.0 - late / early), 1) + "% lower)");
}

Outcome pretraining_benefit() {
    const auto w = make_planted_world({});
    const auto vertices = party_vertices(party_means(w.candidates));
    std::vector<double> alpha;
    for (const auto& s : w.vote_shares) alpha.push_back(s.fraction);
    SyntheticBundle bundle;
    bundle.gpt_voters = sample_gpt_voters(vertices, {alpha, 1200, 17, 1.0});
    auto cfg = desk_config();
    cfg.n_users = 20;
    cfg.repetitions = 10;
    cfg.seed = 23;
    const auto results = compare_conditions(cfg, w.questionnaire, w.voters, w.candidates, bundle,
                                            {InitCondition::Coldstart, InitCondition::GPTvoters}, 1);
    int wins = 0;
    for (std::size_t rep = 0; rep < 10; ++rep)
        wins += window_mean(results[1].runs[rep].per_user_rmse, 0, 20) <
                window_mean(results[0].runs[rep].per_user_rmse, 0, 20);
    return check(wins >= 9, "GPTvoters better in " + std::to_string(wins) + "/10 paired seeds (Coldstart " +
                                fmt(window_mean(results[0].mean_rmse, 0, 20)) + ", GPTvoters " +
                                fmt(window_mean(results[1].mean_rmse, 0, 20)) + ")");
}

Outcome replacement_accounting() {
    const std::vector<std::pair<double, std::size_t>> expected{{0.4, 1000}, {2.0, 200}, {8.0, 50}};
    std::string detail;
    bool ok = true;
    for (const auto& [gamma, users] : expected) {
        ResponseMatrix init(1);
        for (int i = 0; i < 400; ++i) init.add_row({}, AnswerRow(1, 0.5));
        TrainingPool pool(init, 1, gamma, 5, 0);
        std::size_t served = 0;
        while (pool.synthetic_rows() > 0) {
            pool.refit_batch(std::vector<std::pair<Respondent, AnswerRow>>(5, {Respondent{}, AnswerRow(1, 1.0)}));
            served += 5;
        }
        ok = ok && served == users && users_until_full_replacement(400, gamma, 5) == users;
        detail += "gamma " + fmt(gamma, 1) + " -> " + std::to_string(served) + "; ";
    }
    return check(ok, detail);
}

std::string simulation_bytes(const PlantedWorld& w) {
    auto cfg = desk_config();
    cfg.n_users = 60;
    cfg.repetitions = 2;
    cfg.gamma = 1.0;
    cfg.seed = 31;
    SyntheticBundle bundle;
    bundle.candidates = w.candidates;
    std::ostringstream out;
    for (const auto& r : compare_conditions(cfg, w.questionnaire, w.voters, w.candidates, bundle,
                                            {InitCondition::Coldstart, InitCondition::Candidates}, 2)) {
        write_curve_csv(out, r.mean_rmse, r.mean_cra);
        for (const auto& run : r.runs) write_interactions_jsonl(out, run.interaction_log);
    }
    return out.str();
}

Outcome determinism() {
    const auto w = make_planted_world({});
    const auto a = simulation_bytes(w), b = simulation_bytes(w);
    return check(a == b && !a.empty(), std::to_string(a.size()) + " bytes, identical: " + (a == b ? "yes" : "no"));
}

Outcome welch_vs_permutation() {
    Rng rng(77);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        std::normal_distribution<double> da(0.0, 0.5 + uniform01(rng)), db(0.6 * (uniform01(rng) - 0.5), 0.5 + uniform01(rng));
        std::vector<double> a(15 + trial % 10), b(20 + trial % 7);
        for (auto& v : a) v = da(rng);
        for (auto& v : b) v = db(rng);
        const double p = welch_t_test(a, b).p_one_sided;
        worst = std::max(worst, std::abs(p - oracle::permutation_p(a, b, 10000, static_cast<std::uint64_t>(trial))));
    }
    return check(worst <= 0.02, "max |p - permutation p| " + fmt(worst));
}

Outcome dataset_reproduction() {
    const char* dir_env = std::getenv("ADAPTQ_SMARTVOTE_DIR");
    if (!dir_env || !*dir_env) return {Outcome::skip, "set ADAPTQ_SMARTVOTE_DIR to run against the survey files"};
    const std::filesystem::path dir(dir_env);
    for (const char* f : {"questions.json", "voters.csv", "candidates.csv", "gpt_voters.csv"})
        if (!std::filesystem::exists(dir / f)) return {Outcome::skip, std::string("missing ") + f + " in " + dir.string()};
    const auto q = load_questionnaire((dir / "questions.json").string());
    const auto voters = load_responses((dir / "voters.csv").string(), q, RespondentKind::voter);
    const auto candidates = load_responses((dir / "candidates.csv").string(), q, RespondentKind::candidate);
    const auto gpt_voters = load_synthetic((dir / "gpt_voters.csv").string());

    SimulationConfig cfg;
    cfg.n_users = 1000;
    cfg.repetitions = 3;
    cfg.seed = 1;
    std::vector<std::size_t> ks;
    for (std::size_t k = 10; k <= 45 && k <= q.size(); k += 5) ks.push_back(k);
    const auto rows = sweep_k(cfg, ks, q, voters, candidates, gpt_voters, 50, 20, std::max(1u, std::thread::hardware_concurrency()));
    bool ok = true;
    std::string detail;
    for (const auto& r : rows) {
        if (r.K == 30) {
            const double rmse0 = window_mean(r.coldstart.mean_rmse, 0, 1), rmse_end = r.coldstart.mean_rmse.back();
            const double cra0 = window_mean(r.coldstart.mean_cra, 0, 1), cra_end = r.coldstart.mean_cra.back();
            ok = ok && std::abs(rmse0 - 0.42) <= 0.03 && std::abs(rmse_end - 0.297) <= 0.02 &&
                 std::abs(cra0 - 0.248) <= 0.03 && std::abs(cra_end - 0.433) <= 0.03;
            ok = ok && r.rmse.n && std::abs(static_cast<double>(*r.rmse.n) - 175) <= 50 && r.cra.n &&
                 std::abs(static_cast<double>(*r.cra.n) - 485) <= 100;
            detail += "K=30 rmse " + fmt(rmse0, 3) + "->" + fmt(rmse_end, 3) + ", cra " + fmt(cra0, 3) + "->" +
                      fmt(cra_end, 3) + ", N_rmse " + (r.rmse.n ? std::to_string(*r.rmse.n) : "none") + ", N_cra " +
                      (r.cra.n ? std::to_string(*r.cra.n) : "none") + "; ";
        }
        const bool nk_ok = r.rmse.n && std::abs(static_cast<double>(*r.rmse.n * r.K) - 4500.0) <= 0.3 * 4500.0;
        ok = ok && nk_ok;
        detail += "N*K(" + std::to_string(r.K) + ")=" + (r.rmse.n ? std::to_string(*r.rmse.n * r.K) : "none") + " ";
    }
    return check(ok, detail);
}

Outcome llm_fixtures() {
    const std::vector<std::pair<std::string, Answer>> cases{
        {"75", 0.75}, {"0", 0.0}, {"100", 1.0}, {"42.5", 0.425}, {"  60\n", 0.6}, {"\t7 ", 0.07},
        {"I cannot answer that.", std::nullopt}, {"75, because it helps families", std::nullopt},
        {"Answer: 75", std::nullopt}, {"", std::nullopt}, {"101", std::nullopt}, {"-3", std::nullopt}};
    std::size_t parse_failures = 0;
    for (const auto& [text, want] : cases) {
        const auto got = parse_llm_reply(text);
        parse_failures += !(got.has_value() == want.has_value() && (!got || std::abs(*got - *want) < 1e-12));
    }

    std::vector<Question> qs;
    for (int k = 0; k < 6; ++k) qs.push_back({k, "Statement " + std::to_string(k), 4 + k % 4});
    const Questionnaire questionnaire(std::move(qs));
    std::vector<PartyMean> profiles;
    for (std::string party : {"SP", "FDP", "SVP"}) {
        PartyMean pm{party, {}, {}, 1};
        for (int k = 0; k < 6; ++k) pm.mean.push_back(0.1 + 0.15 * k);
        profiles.push_back(pm);
    }
    profiles[2].mean[4].reset();
    MockTransport mock(profiles, 0.2, 9);
    LLMConfig cfg;
    cfg.concurrency = 3;
    std::vector<FixtureRecord> log;
    const auto original = generate_dataset(cfg, {"SP", "FDP", "SVP"}, questionnaire, 4, kDefaultTemperatures, mock, &log);
    std::stringstream fixtures;
    write_fixtures(fixtures, log);
    ReplayTransport replay(read_fixtures(fixtures));
    const auto again = generate_dataset(cfg, {"SP", "FDP", "SVP"}, questionnaire, 4, kDefaultTemperatures, replay);
    std::ostringstream a, b;
    write_responses(a, samples_to_matrix(original, 6), nullptr);
    write_responses(b, samples_to_matrix(again, 6), nullptr);
    const bool identical = a.str() == b.str() && !a.str().empty();
    return check(parse_failures == 0 && identical, std::to_string(parse_failures) + " parse mismatches of " +
                                                       std::to_string(cases.size()) + ", replay byte-identical: " +
                                                       (identical ? "yes" : "no"));
}

}  // namespace

int main() {
    const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
        {1, gini_values},           {2, vertex_oracle},       {3, dirichlet_moments},
        {4, gpt_voters_validity},   {5, model_recovery},      {6, imputation_contracts},
        {7, coldstart_learning},    {8, pretraining_benefit}, {9, replacement_accounting},
        {10, determinism},          {11, welch_vs_permutation}, {12, dataset_reproduction},
        {13, llm_fixtures}};
    int failures = 0;
    for (const auto& [id, run] : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {Outcome::fail, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const char* tag = o.kind == Outcome::pass ? "PASS" : o.kind == Outcome::fail ? "FAIL" : "SKIP";
        failures += o.kind == Outcome::fail;
        std::cout << tag << " criterion " << id << ": " << o.detail << " [" << fmt(secs, 2) << "s]" << std::endl;
    }
    return failures ? 1 : 0;
}
