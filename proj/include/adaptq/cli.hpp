#pragma once

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "adaptq.hpp"
#include "service.hpp"

// after the local headers: resolv.h defines a _res macro that breaks Eigen
#include <httplib.h>

namespace adaptq {

/// Host problem the user cannot fix by changing flags (port taken, disk full).
class EnvironmentError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int usage = 1;
inline constexpr int transport = 2;
inline constexpr int environment = 3;
}  // namespace exit_code

namespace cli {

namespace fs = std::filesystem;

inline std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot read '" + path + "' for hashing");
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw EnvironmentError("sha256 unavailable");
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return hex.str();
}

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream s;
    s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return s.str();
}

/// Run manifest: config snapshot, seeds, input and output digests.
class Manifest {
public:
    Manifest(std::string command, const CLI::App& sub, std::uint64_t seed)
        : command_(std::move(command)), started_(utc_now()) {
        config_ = nlohmann::json::object();
        for (const auto* opt : sub.get_options()) {
            const auto name = opt->get_single_name();
            if (name.empty() || name == "help" || name == "config") continue;
            if (opt->count() > 0) {
                const auto& r = opt->results();
                config_[name] = r.size() == 1 ? nlohmann::json(r.front()) : nlohmann::json(r);
            } else if (!opt->get_default_str().empty()) {
                config_[name] = opt->get_default_str();
            }
        }
        seeds_ = {{"seed", seed}};
    }

    void seed(const std::string& name, std::uint64_t value) { seeds_[name] = value; }

    void input(const std::string& path) {
        if (!path.empty()) inputs_.push_back({{"path", path}, {"sha256", sha256_file(path)}});
    }

    void output(const fs::path& path) {
        outputs_.push_back({{"path", path.string()}, {"sha256", sha256_file(path.string())}});
    }

    void write(const fs::path& dir) const {
        const nlohmann::json doc{{"command", command_},
                                 {"version", kServiceVersion},
                                 {"config", config_},
                                 {"seeds", seeds_},
                                 {"inputs", inputs_},
                                 {"outputs", outputs_},
                                 {"started", started_},
                                 {"finished", utc_now()}};
        std::ofstream out(dir / "manifest.json");
        out << doc.dump(2) << '\n';
        if (!out) throw EnvironmentError("cannot write manifest in " + dir.string());
    }

private:
    std::string command_;
    std::string started_;
    nlohmann::json config_;
    nlohmann::json seeds_;
    nlohmann::json inputs_ = nlohmann::json::array();
    nlohmann::json outputs_ = nlohmann::json::array();
};

inline fs::path prepare_out(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw EnvironmentError("cannot create output directory '" + dir + "': " + ec.message());
    return dir;
}

inline std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw EnvironmentError("cannot write '" + path.string() + "'");
    return out;
}

/// Splits "a,b,c". A "..." element continues the arithmetic progression of
/// the two preceding values up to the value after it: "5,10,...,25".
inline std::vector<double> parse_number_list(const std::string& text, const std::string& what) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : text + ",") {
        if (c == ',') {
            tokens.push_back(std::string(csv::trim(cur)));
            cur.clear();
        } else {
            cur += c;
        }
    }
    std::vector<double> out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == "...") {
            if (out.size() < 2 || i + 1 >= tokens.size())
                throw ConfigError(what + ": '...' needs two values before and one after");
            const double step = out.back() - out[out.size() - 2];
            const auto end = csv::parse_double(tokens[i + 1]);
            if (!end || !(step > 0)) throw ConfigError(what + ": '...' needs an increasing progression");
            for (double v = out.back() + step; v < *end - 1e-9 * step; v += step) out.push_back(v);
            continue;
        }
        const auto v = csv::parse_double(tokens[i]);
        if (!v) throw ConfigError(what + ": '" + tokens[i] + "' is not a number");
        out.push_back(*v);
    }
    if (out.empty()) throw ConfigError(what + ": empty list");
    return out;
}

inline std::vector<std::size_t> parse_count_list(const std::string& text, const std::string& what) {
    std::vector<std::size_t> out;
    for (double v : parse_number_list(text, what)) {
        if (v < 1 || v != std::floor(v)) throw ConfigError(what + ": '" + csv::format_double(v) + "' is not a positive integer");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

/// A party list is either a comma list or a file with one party per line.
inline std::vector<std::string> parse_parties(const std::string& value) {
    std::vector<std::string> out;
    if (fs::is_regular_file(value)) {
        std::ifstream in(value);
        std::string line;
        while (csv::read_line(in, line))
            if (auto t = csv::trim(line); !t.empty()) out.emplace_back(t);
    } else {
        for (const auto& f : csv::split_record(value))
            if (auto t = csv::trim(f); !t.empty()) out.emplace_back(t);
    }
    if (out.empty()) throw ConfigError("no parties given");
    return out;
}

inline std::string condition_slug(InitCondition c) {
    auto s = to_string(c);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    return s;
}

inline std::size_t default_jobs(std::size_t tasks) {
    const std::size_t cores = std::max(1u, std::thread::hardware_concurrency());
    return std::max<std::size_t>(1, std::min(tasks, cores));
}

inline std::string number_or_blank(const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : ""; }

inline void write_curve(const fs::path& path, const ConditionResult& r, Manifest& m) {
    auto out = open_out(path);
    write_curve_csv(out, r.mean_rmse, r.mean_cra);
    out.close();
    m.output(path);
}

// ---------------------------------------------------------------------------
// Option bundles

struct SimulationInputs {
    std::string questions;
    std::string voters;
    std::string candidates;
    std::string out;
    std::size_t k = 30;
    std::size_t u = 5;
    double gamma = 0.0;
    std::size_t users = 1000;
    std::size_t reps = 10;
    std::uint64_t seed = 0;
    int resolution = kDefaultResolution;
    std::size_t jobs = 0;

    void bind(CLI::App* app) {
        app->add_option("--questions", questions, "Questionnaire JSON")->required()->check(CLI::ExistingFile);
        app->add_option("--voters", voters, "Voter responses CSV (raw Likert indices)")->required();
        app->add_option("--candidates", candidates, "Candidate responses CSV")->required();
        app->add_option("--out", out, "Output directory")->required();
        app->add_option("--k", k, "Questions answered per user")->capture_default_str();
        app->add_option("--u", u, "Users per refit")->capture_default_str();
        app->add_option("--gamma", gamma, "Synthetic rows removed per real user")->capture_default_str();
        app->add_option("--users", users, "Simulated users per run")->capture_default_str();
        app->add_option("--reps", reps, "Repetitions")->capture_default_str();
        app->add_option("--seed", seed, "Master seed")->capture_default_str();
        app->add_option("--resolution", resolution, "Posterior grid points per axis")->capture_default_str();
        app->add_option("--jobs", jobs, "Worker threads (0: conditions x reps capped at cores)");
    }

    SimulationConfig config() const {
        SimulationConfig c;
        c.K = k;
        c.U = u;
        c.gamma = gamma;
        c.n_users = users;
        c.repetitions = reps;
        c.seed = seed;
        c.grid_resolution = resolution;
        return c;
    }

    std::size_t jobs_for(std::size_t tasks) const { return jobs ? jobs : default_jobs(tasks); }
};

struct Loaded {
    Questionnaire questionnaire;
    ResponseMatrix voters;
    ResponseMatrix candidates;
};

inline Loaded load_simulation_inputs(const SimulationInputs& in, Manifest& m) {
    Loaded l;
    l.questionnaire = load_questionnaire(in.questions);
    l.voters = load_responses(in.voters, l.questionnaire, RespondentKind::voter);
    l.candidates = load_responses(in.candidates, l.questionnaire, RespondentKind::candidate);
    m.input(in.questions);
    m.input(in.voters);
    m.input(in.candidates);
    return l;
}

inline ResponseMatrix load_init(const std::string& path, const Questionnaire& q, Manifest& m) {
    auto data = load_synthetic(path);
    if (data.cols() != q.size())
        throw LoadError("init data '" + path + "' has " + std::to_string(data.cols()) + " questions, questionnaire " +
                        std::to_string(q.size()));
    m.input(path);
    return data;
}

// ---------------------------------------------------------------------------
// Commands

struct GenerateOptions {
    std::string questions, parties, endpoint = LLMConfig{}.endpoint_url, model = LLMConfig{}.model_name,
                                    api_key_env = LLMConfig{}.api_key_env, temperatures = "1,1.25,1.5,1.75,2",
                                    transport = "mock", fixtures, profiles, out;
    int reps = kDefaultTrialsPerTemperature;
    std::uint64_t seed = 0;
    double noise = 0.1;
    std::size_t concurrency = 4;
};

inline int cmd_generate(const GenerateOptions& o, const CLI::App& sub, std::ostream& log) {
    Manifest m("generate", sub, o.seed);
    const auto questionnaire = load_questionnaire(o.questions);
    m.input(o.questions);
    const auto temps = parse_number_list(o.temperatures, "--temperatures");

    std::unique_ptr<LlmTransport> transport;
    std::vector<std::string> parties;
    if (!o.parties.empty()) parties = parse_parties(o.parties);
    if (fs::is_regular_file(o.parties)) m.input(o.parties);

    LLMConfig cfg;
    cfg.endpoint_url = o.endpoint;
    cfg.model_name = o.model;
    cfg.api_key_env = o.api_key_env;
    cfg.concurrency = std::max<std::size_t>(1, o.concurrency);

    if (o.transport == "live") {
        transport = std::make_unique<HttpTransport>(cfg);
    } else if (o.transport == "mock") {
        if (o.profiles.empty()) throw ConfigError("--transport mock needs --profiles <candidates csv>");
        auto profile_rows = load_responses(o.profiles, questionnaire, RespondentKind::candidate);
        m.input(o.profiles);
        auto means = party_means(profile_rows);
        if (parties.empty())
            for (const auto& pm : means) parties.push_back(pm.party);
        transport = std::make_unique<MockTransport>(std::move(means), o.noise, derive_seed(o.seed, "mock-llm"));
    } else if (o.transport == "replay") {
        if (o.fixtures.empty()) throw ConfigError("--transport replay needs --fixtures <jsonl>");
        std::ifstream in(o.fixtures);
        if (!in) throw LoadError("cannot open fixtures '" + o.fixtures + "'");
        transport = std::make_unique<ReplayTransport>(read_fixtures(in, o.fixtures));
        m.input(o.fixtures);
    } else {
        throw ConfigError("--transport must be live, mock or replay");
    }
    if (parties.empty()) throw ConfigError("--parties is required for " + o.transport + " transport");

    std::vector<FixtureRecord> fixtures;
    const auto samples = generate_dataset(cfg, parties, questionnaire, o.reps, temps, *transport, &fixtures);
    const auto dir = prepare_out(o.out);

    const auto data_path = dir / "gpt.csv";
    save_responses(data_path.string(), samples_to_matrix(samples, questionnaire.size()));
    m.output(data_path);
    if (o.transport != "replay") {
        const auto fix_path = dir / "fixtures.jsonl";
        auto out = open_out(fix_path);
        write_fixtures(out, fixtures);
        out.close();
        m.output(fix_path);
    }
    m.write(dir);

    std::size_t missing = 0;
    for (const auto& s : samples)
        for (const auto& a : s.answers) missing += !a;
    log << "generated " << samples.size() << " samples (" << missing << " missing cells of "
        << samples.size() * questionnaire.size() << ") in " << dir.string() << '\n';
    return exit_code::ok;
}

struct DeriveOptions {
    std::string in, what, alpha, out;
    std::size_t n = 1200;
    std::uint64_t seed = 0;
    double concentration = 1.0;
};

inline int cmd_derive(const DeriveOptions& o, const CLI::App& sub, std::ostream& log) {
    if (o.what != "means" && o.what != "vertices" && o.what != "voters")
        throw ConfigError("--what must be means, vertices or voters");
    if (o.what == "voters" && o.alpha.empty()) throw ConfigError("--what voters needs --alpha <party results csv>");
    Manifest m("derive", sub, o.seed);
    const auto gpt = load_synthetic(o.in);
    m.input(o.in);
    const auto dir = prepare_out(o.out);

    ResponseMatrix result;
    fs::path path;
    if (o.what == "means") {
        result = gpt_means(gpt);
        path = dir / "gpt_means.csv";
    } else {
        const auto vertices = party_vertices(party_means(gpt));
        if (o.what == "vertices") {
            result = vertices_to_matrix(vertices);
            path = dir / "vertices.csv";
        } else {
            VoterSynthesisConfig cfg;
            cfg.alpha = align_alpha(vertices, load_party_results(o.alpha));
            m.input(o.alpha);
            cfg.n_samples = o.n;
            cfg.seed = o.seed;
            cfg.concentration = o.concentration;
            result = sample_gpt_voters(vertices, cfg);
            path = dir / "gpt_voters.csv";
        }
    }
    save_responses(path.string(), result);
    m.output(path);
    m.write(dir);
    log << "wrote " << result.rows() << " rows to " << path.string() << '\n';
    return exit_code::ok;
}

inline int cmd_simulate(const SimulationInputs& o, const std::string& init, const std::string& init_data,
                        const CLI::App& sub, std::ostream& log) {
    const auto condition = parse_condition(init);
    if (condition != InitCondition::Coldstart && condition != InitCondition::Candidates && init_data.empty())
        throw ConfigError("--init " + to_string(condition) + " needs --init-data");
    Manifest m("simulate", sub, o.seed);
    const auto l = load_simulation_inputs(o, m);
    SyntheticBundle bundle;
    bundle.candidates = l.candidates;
    if (!init_data.empty()) {
        auto data = load_init(init_data, l.questionnaire, m);
        bundle.gpt = bundle.gpt_means = bundle.gpt_voters = data;
        if (condition == InitCondition::Candidates) bundle.candidates = data;
    }
    auto cfg = o.config();
    cfg.init_condition = condition;
    const auto results = compare_conditions(cfg, l.questionnaire, l.voters, l.candidates, bundle, {condition},
                                            o.jobs_for(std::max<std::size_t>(1, cfg.repetitions)));
    const auto& r = results.front();
    const auto dir = prepare_out(o.out);
    write_curve(dir / "curve.csv", r, m);

    nlohmann::json runs = nlohmann::json::array();
    for (const auto& run : r.runs) {
        const auto path = dir / ("interactions_rep" + std::to_string(run.repetition) + ".jsonl");
        auto out = open_out(path);
        write_interactions_jsonl(out, run.interaction_log);
        out.close();
        m.output(path);
        runs.push_back({{"repetition", run.repetition},
                        {"refit_count", run.refit_count},
                        {"full_replacement_user",
                         run.full_replacement_user ? nlohmann::json(*run.full_replacement_user) : nlohmann::json(nullptr)},
                        {"stopped_early_users", run.stopped_early_users}});
    }
    const auto summary_path = dir / "summary.json";
    {
        auto out = open_out(summary_path);
        out << nlohmann::json{{"config", to_json(cfg)}, {"runs", runs}}.dump(2) << '\n';
    }
    m.output(summary_path);
    m.write(dir);
    log << "simulated " << r.runs.size() << " run(s) of " << cfg.n_users << " users; results in " << dir.string()
        << '\n';
    return exit_code::ok;
}

struct CompareOptions {
    std::string conditions = "Coldstart,GPT,GPTmeans,GPTvoters,Candidates";
    std::string gpt, gpt_means, gpt_voters;
    std::size_t window = 50, persistence = 20;
};

inline int cmd_compare(const SimulationInputs& o, const CompareOptions& c, const CLI::App& sub, std::ostream& log) {
    std::vector<InitCondition> conditions;
    for (const auto& name : csv::split_record(c.conditions)) conditions.push_back(parse_condition(std::string(csv::trim(name))));
    Manifest m("compare", sub, o.seed);
    const auto l = load_simulation_inputs(o, m);
    SyntheticBundle bundle;
    bundle.candidates = l.candidates;
    if (!c.gpt.empty()) bundle.gpt = load_init(c.gpt, l.questionnaire, m);
    if (!c.gpt_means.empty()) bundle.gpt_means = load_init(c.gpt_means, l.questionnaire, m);
    if (!c.gpt_voters.empty()) bundle.gpt_voters = load_init(c.gpt_voters, l.questionnaire, m);
    for (auto cond : conditions) (void)bundle.init_for(cond, l.questionnaire.size());

    const auto cfg = o.config();
    const auto results = compare_conditions(cfg, l.questionnaire, l.voters, l.candidates, bundle, conditions,
                                            o.jobs_for(conditions.size() * std::max<std::size_t>(1, cfg.repetitions)));
    const auto dir = prepare_out(o.out);
    nlohmann::json report = nlohmann::json::array();
    const ConditionResult* cold = nullptr;
    for (const auto& r : results)
        if (r.condition == InitCondition::Coldstart) cold = &r;
    for (const auto& r : results) {
        write_curve(dir / ("curve_" + condition_slug(r.condition) + ".csv"), r, m);
        if (!cold || &r == cold) continue;
        report.push_back(
            {{"condition", to_string(r.condition)},
             {"rmse", to_json(break_even(cold->mean_rmse, r.mean_rmse, c.window, c.persistence,
                                         MetricDirection::lower_is_better, "rmse"))},
             {"cra", to_json(break_even(cold->mean_cra, r.mean_cra, c.window, c.persistence,
                                        MetricDirection::higher_is_better, "cra"))}});
    }
    const auto path = dir / "break_even.json";
    {
        auto out = open_out(path);
        out << report.dump(2) << '\n';
    }
    m.output(path);
    m.write(dir);
    log << "compared " << results.size() << " condition(s); results in " << dir.string() << '\n';
    return exit_code::ok;
}

inline int cmd_sweep(const SimulationInputs& o, const std::string& k_list, const std::string& init_data,
                     std::size_t window, std::size_t persistence, const CLI::App& sub, std::ostream& log) {
    const auto ks = parse_count_list(k_list, "--k-list");
    Manifest m("sweep", sub, o.seed);
    const auto l = load_simulation_inputs(o, m);
    const auto voters_init = load_init(init_data, l.questionnaire, m);
    const auto rows = sweep_k(o.config(), ks, l.questionnaire, l.voters, l.candidates, voters_init, window, persistence,
                              o.jobs_for(2 * std::max<std::size_t>(1, o.reps)));
    const auto dir = prepare_out(o.out);
    const auto table = dir / "break_even.csv";
    {
        auto out = open_out(table);
        out << "K,N_rmse,N_cra,N_rmse_times_K\n";
        for (const auto& r : rows)
            out << r.K << ',' << number_or_blank(r.rmse.n) << ',' << number_or_blank(r.cra.n) << ','
                << (r.rmse.n ? std::to_string(*r.rmse.n * r.K) : "") << '\n';
    }
    m.output(table);
    for (const auto& r : rows) {
        write_curve(dir / ("curve_k" + std::to_string(r.K) + "_coldstart.csv"), r.coldstart, m);
        write_curve(dir / ("curve_k" + std::to_string(r.K) + "_gptvoters.csv"), r.pretrained, m);
    }
    m.write(dir);
    log << "swept " << rows.size() << " K values; table in " << table.string() << '\n';
    return exit_code::ok;
}

inline int cmd_replacement(const SimulationInputs& o, const std::string& gamma_list, const std::string& init_data,
                           const CLI::App& sub, std::ostream& log) {
    const auto gammas = parse_number_list(gamma_list, "--gamma-list");
    Manifest m("replacement", sub, o.seed);
    const auto l = load_simulation_inputs(o, m);
    const auto gpt = load_init(init_data, l.questionnaire, m);
    const auto study = replacement_study(o.config(), gammas, l.questionnaire, l.voters, l.candidates, gpt,
                                         o.jobs_for(std::max<std::size_t>(1, o.reps)));
    const auto dir = prepare_out(o.out);
    write_curve(dir / "curve_coldstart.csv", study.coldstart, m);
    const auto table = dir / "overlap.csv";
    {
        auto out = open_out(table);
        out << "gamma,full_replacement_users,overlap_with_coldstart\n";
        for (const auto& r : study.rows)
            out << csv::format_double(r.gamma) << ',' << number_or_blank(r.full_replacement_users) << ','
                << (r.overlap ? csv::format_double(*r.overlap) : "") << '\n';
    }
    m.output(table);
    for (const auto& r : study.rows) write_curve(dir / ("curve_gamma" + csv::format_double(r.gamma) + ".csv"), r.result, m);
    m.write(dir);
    log << "ran " << study.rows.size() << " replacement settings; overlap report in " << table.string() << '\n';
    return exit_code::ok;
}

inline int cmd_analyze(const std::string& questions, const std::string& gpt_path, const std::string& candidates_path,
                       const std::string& out_dir, const CLI::App& sub, std::ostream& log) {
    Manifest m("analyze", sub, 0);
    const auto questionnaire = load_questionnaire(questions);
    const auto candidates = load_responses(candidates_path, questionnaire, RespondentKind::candidate);
    const auto gpt = load_synthetic(gpt_path);
    if (gpt.cols() != questionnaire.size()) throw LoadError("GPT data does not match the questionnaire");
    m.input(questions);
    m.input(candidates_path);
    m.input(gpt_path);
    const auto reference = party_means(candidates);
    const auto dir = prepare_out(out_dir);

    auto distances_to_own = [&](const ResponseMatrix& rows, const std::string& party) {
        std::vector<double> d;
        const auto it = std::find_if(reference.begin(), reference.end(), [&](const PartyMean& p) { return p.party == party; });
        if (it == reference.end()) return d;
        for (std::size_t n = 0; n < rows.rows(); ++n)
            if (rows.respondents[n].party == party)
                if (auto v = distance_over_present(rows.answers[n], it->mean)) d.push_back(*v);
        return d;
    };
    auto mean_of = [](const std::vector<double>& v) {
        return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };

    const auto means = gpt_means(gpt);
    const auto table = dir / "distances.csv";
    {
        auto out = open_out(table);
        out << "party,gpt_samples,gpt_distance,candidates,candidate_distance,t,df,p_one_sided,one_sigma_coverage\n";
        for (const auto& pm : reference) {
            const auto a = distances_to_own(gpt, pm.party);
            const auto b = distances_to_own(candidates, pm.party);
            out << csv::quote(pm.party) << ',' << a.size() << ',' << csv::format_double(mean_of(a)) << ',' << b.size()
                << ',' << csv::format_double(mean_of(b)) << ',';
            try {
                const auto w = welch_t_test(a, b);
                out << csv::format_double(w.t) << ',' << csv::format_double(w.degrees_of_freedom) << ','
                    << csv::format_double(w.p_one_sided);
            } catch (const InputError&) {
                out << ",,";
            }
            out << ',';
            for (std::size_t n = 0; n < means.rows(); ++n)
                if (means.respondents[n].party == pm.party) out << csv::format_double(one_sigma_coverage(means.answers[n], pm));
            out << '\n';
        }
    }
    m.output(table);

    const auto confusion = dir / "confusion_gpt.csv";
    {
        auto out = open_out(confusion);
        write_confusion_csv(out, nearest_party_confusion(gpt, reference));
    }
    m.output(confusion);

    const auto temps = dir / "temperature.csv";
    {
        auto out = open_out(temps);
        out << "temperature,samples,mean_distance,response_std,missing_fraction\n";
        for (const auto& t : temperature_report(matrix_to_samples(gpt), reference))
            out << csv::format_double(t.temperature) << ',' << t.samples << ',' << csv::format_double(t.mean_distance)
                << ',' << (t.spread_undefined ? "" : csv::format_double(t.response_std)) << ','
                << csv::format_double(t.missing_fraction) << '\n';
    }
    m.output(temps);
    m.write(dir);
    log << "analysis written to " << dir.string() << '\n';
    return exit_code::ok;
}

inline int cmd_demo(const PlantedConfig& cfg, const std::string& out_dir, const CLI::App& sub, std::ostream& log) {
    Manifest m("demo", sub, cfg.seed);
    const auto w = make_planted_world(cfg);
    const auto dir = prepare_out(out_dir);
    const auto qpath = dir / "questions.json";
    {
        auto out = open_out(qpath);
        out << to_json(w.questionnaire).dump(2) << '\n';
    }
    m.output(qpath);
    save_responses((dir / "candidates.csv").string(), w.candidates, &w.questionnaire);
    m.output(dir / "candidates.csv");
    save_responses((dir / "voters.csv").string(), w.voters, &w.questionnaire);
    m.output(dir / "voters.csv");
    const auto shares = dir / "party_results.csv";
    {
        auto out = open_out(shares);
        out << "party,fraction\n";
        for (const auto& s : w.vote_shares) out << s.party << ',' << csv::format_double(s.fraction) << '\n';
    }
    m.output(shares);
    m.write(dir);
    log << "planted demo data (" << w.questionnaire.size() << " questions, " << w.candidates.rows() << " candidates, "
        << w.voters.rows() << " voters) in " << dir.string() << '\n';
    return exit_code::ok;
}

struct ServeOptions {
    int port = 8080;
    std::string host = "127.0.0.1";
    std::string questions, candidates, init_data, state_dir;
    std::size_t u = 5;
    double gamma = 0.0;
    std::size_t k = 30;
    std::uint64_t seed = 0;
    double idle_minutes = 30;
    int resolution = kDefaultResolution;
};

inline std::atomic<bool>& stop_flag() {
    static std::atomic<bool> flag{false};
    return flag;
}

inline int cmd_serve(const ServeOptions& o, std::ostream& log) {
    ServiceConfig cfg;
    cfg.questionnaire = load_questionnaire(o.questions);
    cfg.candidates = load_responses(o.candidates, cfg.questionnaire, RespondentKind::candidate);
    cfg.init_data = ResponseMatrix(cfg.questionnaire.size());
    if (!o.init_data.empty()) {
        cfg.init_data = load_synthetic(o.init_data);
        if (cfg.init_data.cols() != cfg.questionnaire.size()) throw LoadError("init data does not match the questionnaire");
    }
    if (o.k < 5 || o.k > 75) throw ConfigError("--k must be in [5, 75]");
    cfg.users_per_refit = o.u;
    cfg.gamma = o.gamma;
    cfg.session_k = o.k;
    cfg.seed = o.seed;
    cfg.state_dir = o.state_dir;
    cfg.grid_resolution = o.resolution;
    cfg.idle_timeout = std::chrono::seconds(static_cast<long long>(o.idle_minutes * 60));

    httplib::Server server;
    if (!server.bind_to_port(o.host, o.port))
        throw EnvironmentError("cannot bind " + o.host + ":" + std::to_string(o.port) + " (port in use?)");
    LiveService service(std::move(cfg));
    service.mount(server);

    stop_flag() = false;
    auto on_signal = [](int) { stop_flag() = true; };
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::thread watcher([&] {
        while (!stop_flag()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        server.stop();
    });
    log << "serving on http://" << o.host << ':' << o.port << "/v1" << std::endl;
    server.listen_after_bind();
    stop_flag() = true;
    watcher.join();
    service.shutdown();
    log << "stopped; state saved" << (o.state_dir.empty() ? " (no state dir)" : " in " + o.state_dir) << '\n';
    return exit_code::ok;
}

}  // namespace cli

/// Entry point of the adaptq command-line tool; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using namespace cli;
    CLI::App app{"Adaptive questionnaire toolkit: synthetic data, simulation, evaluation and live service", "adaptq"};
    app.set_config("--config", "", "TOML config file; keys mirror flag names, flags override it");
    app.require_subcommand(1);

    GenerateOptions gen;
    auto* g = app.add_subcommand("generate", "Query an LLM for synthetic party answers");
    g->add_option("--questions", gen.questions, "Questionnaire JSON")->required()->check(CLI::ExistingFile);
    g->add_option("--parties", gen.parties, "Comma list or file with one party per line");
    g->add_option("--endpoint", gen.endpoint, "Chat-completions URL")->capture_default_str();
    g->add_option("--model", gen.model, "Model name")->capture_default_str();
    g->add_option("--api-key-env", gen.api_key_env, "Environment variable holding the API key")->capture_default_str();
    g->add_option("--reps", gen.reps, "Trials per temperature")->capture_default_str();
    g->add_option("--temperatures", gen.temperatures, "Comma list")->capture_default_str();
    g->add_option("--transport", gen.transport, "live, mock or replay")
        ->check(CLI::IsMember({"live", "mock", "replay"}))
        ->capture_default_str();
    g->add_option("--fixtures", gen.fixtures, "Fixture JSONL to replay");
    g->add_option("--profiles", gen.profiles, "Candidate CSV whose party means drive the mock transport");
    g->add_option("--noise", gen.noise, "Mock reply noise std at temperature 1")->capture_default_str();
    g->add_option("--concurrency", gen.concurrency, "Parallel requests")->capture_default_str();
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--seed", gen.seed, "Seed")->capture_default_str();

    DeriveOptions der;
    auto* d = app.add_subcommand("derive", "Derive GPTmeans, party vertices or GPTvoters from a GPT dataset");
    d->add_option("--in", der.in, "GPT dataset CSV")->required()->check(CLI::ExistingFile);
    d->add_option("--what", der.what, "means, vertices or voters")->required()->check(CLI::IsMember({"means", "vertices", "voters"}));
    d->add_option("--alpha", der.alpha, "Party results CSV (party,fraction)");
    d->add_option("--n", der.n, "Voters to sample")->capture_default_str();
    d->add_option("--concentration", der.concentration, "Multiplier applied to alpha")->capture_default_str();
    d->add_option("--seed", der.seed, "Seed")->capture_default_str();
    d->add_option("--out", der.out, "Output directory")->required();

    SimulationInputs sim_in;
    std::string sim_init = "coldstart", sim_init_data;
    auto* s = app.add_subcommand("simulate", "Simulate users under one initialization condition");
    sim_in.bind(s);
    s->add_option("--init", sim_init, "Coldstart, GPT, GPTmeans, GPTvoters or Candidates")->capture_default_str();
    s->add_option("--init-data", sim_init_data, "Synthetic training CSV for the condition");

    SimulationInputs cmp_in;
    CompareOptions cmp;
    auto* c = app.add_subcommand("compare", "Run several initialization conditions with paired seeds");
    cmp_in.bind(c);
    c->add_option("--conditions", cmp.conditions, "Comma list of conditions")->capture_default_str();
    c->add_option("--gpt", cmp.gpt, "GPT dataset CSV");
    c->add_option("--gpt-means", cmp.gpt_means, "GPTmeans CSV");
    c->add_option("--gpt-voters", cmp.gpt_voters, "GPTvoters CSV");
    c->add_option("--window", cmp.window, "Break-even smoothing window")->capture_default_str();
    c->add_option("--persistence", cmp.persistence, "Break-even persistence")->capture_default_str();

    SimulationInputs sw_in;
    std::string k_list = "5,10,...,45", sw_init_data;
    std::size_t sw_window = 50, sw_persistence = 20;
    auto* w = app.add_subcommand("sweep", "Break-even points of Coldstart vs GPTvoters across K");
    sw_in.bind(w);
    w->add_option("--k-list", k_list, "K values; '...' continues a progression")->capture_default_str();
    w->add_option("--init-data", sw_init_data, "GPTvoters CSV")->required();
    w->add_option("--window", sw_window, "Break-even smoothing window")->capture_default_str();
    w->add_option("--persistence", sw_persistence, "Break-even persistence")->capture_default_str();

    SimulationInputs rep_in;
    std::string gamma_list = "0.4,0.8,1.2,2,4,8", rep_init_data;
    auto* r = app.add_subcommand("replacement", "GPT initialization with gamma replacement vs Coldstart");
    rep_in.bind(r);
    r->add_option("--gamma-list", gamma_list, "Gamma values")->capture_default_str();
    r->add_option("--init-data", rep_init_data, "GPT dataset CSV")->required();

    std::string an_questions, an_gpt, an_candidates, an_out;
    auto* a = app.add_subcommand("analyze", "Distances, Welch tests, coverage and confusion of a GPT dataset");
    a->add_option("--questions", an_questions, "Questionnaire JSON")->required()->check(CLI::ExistingFile);
    a->add_option("--gpt", an_gpt, "GPT dataset CSV")->required();
    a->add_option("--candidates", an_candidates, "Candidate CSV")->required();
    a->add_option("--out", an_out, "Output directory")->required();

    ServeOptions srv;
    auto* v = app.add_subcommand("serve", "Run the live questionnaire service");
    v->add_option("--port", srv.port, "TCP port")->capture_default_str();
    v->add_option("--host", srv.host, "Bind address")->capture_default_str();
    v->add_option("--questions", srv.questions, "Questionnaire JSON")->required();
    v->add_option("--candidates", srv.candidates, "Candidate CSV")->required();
    v->add_option("--init-data", srv.init_data, "Synthetic training CSV");
    v->add_option("--u", srv.u, "Finished sessions per refit")->capture_default_str();
    v->add_option("--gamma", srv.gamma, "Synthetic rows removed per session")->capture_default_str();
    v->add_option("--k", srv.k, "Questions per session (5-75)")->capture_default_str();
    v->add_option("--state-dir", srv.state_dir, "Event log and snapshot directory");
    v->add_option("--seed", srv.seed, "Seed")->capture_default_str();
    v->add_option("--idle-minutes", srv.idle_minutes, "Idle time before a session is abandoned")->capture_default_str();
    v->add_option("--resolution", srv.resolution, "Posterior grid points per axis")->capture_default_str();

    PlantedConfig demo;
    std::string demo_out;
    auto* x = app.add_subcommand("demo", "Write a planted toy world (questions, candidates, voters, vote shares)");
    x->add_option("--out", demo_out, "Output directory")->required();
    x->add_option("--seed", demo.seed, "Seed")->capture_default_str();
    x->add_option("--questions", demo.questions, "Number of questions")->capture_default_str();
    x->add_option("--parties", demo.parties, "Number of parties")->capture_default_str();
    x->add_option("--candidates-per-party", demo.candidates_per_party)->capture_default_str();
    x->add_option("--voters", demo.voters, "Number of voters")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) {
            app.exit(e, out, err);
            return exit_code::ok;
        }
        err << "error: " << e.what() << "\n\n" << app.help();
        return exit_code::usage;
    }

    try {
        if (*g) return cmd_generate(gen, *g, out);
        if (*d) return cmd_derive(der, *d, out);
        if (*s) return cmd_simulate(sim_in, sim_init, sim_init_data, *s, out);
        if (*c) return cmd_compare(cmp_in, cmp, *c, out);
        if (*w) return cmd_sweep(sw_in, k_list, sw_init_data, sw_window, sw_persistence, *w, out);
        if (*r) return cmd_replacement(rep_in, gamma_list, rep_init_data, *r, out);
        if (*a) return cmd_analyze(an_questions, an_gpt, an_candidates, an_out, *a, out);
        if (*v) return cmd_serve(srv, out);
        if (*x) return cmd_demo(demo, demo_out, *x, out);
    } catch (const TransportError& e) {
        err << "error: " << e.what() << '\n';
        return exit_code::transport;
    } catch (const EnvironmentError& e) {
        err << "error: " << e.what() << '\n';
        return exit_code::environment;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code::environment;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_code::usage;
    }
    return exit_code::usage;
}

}  // namespace adaptq
