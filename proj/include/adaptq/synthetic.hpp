#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "csv.hpp"
#include "errors.hpp"
#include "metrics.hpp"
#include "random.hpp"
#include "survey.hpp"

// after the local headers: resolv.h defines a _res macro that breaks Eigen
#include <httplib.h>

namespace adaptq {

// ---------------------------------------------------------------------------
// Prompts and reply parsing

struct Prompts {
    std::string system;
    std::string user;
};

inline Prompts build_prompts(const std::string& party, const std::string& question_text) {
    if (party.empty()) throw InputError("build_prompts: empty party");
    if (question_text.empty()) throw InputError("build_prompts: empty question text");
    return {"You are a member of the Swiss party " + party +
                ". You have to answer statements based on beliefs of your party. You can only answer with a number "
                "between 0 and 100, where 0 means fully disagree and 100 means fully agree. Do not provide "
                "reasoning, just the number.",
            "Rate the following statement: '" + question_text + "'"};
}

/// Bare decimal number in [0,100] (surrounding whitespace allowed) divided by
/// 100; anything else is missing.
inline Answer parse_llm_reply(std::string_view text) noexcept {
    const auto s = csv::trim(text);
    if (s.empty()) return std::nullopt;
    std::size_t digits = 0, dots = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] >= '0' && s[i] <= '9') {
            ++digits;
        } else if (s[i] == '.' && dots == 0 && i > 0 && i + 1 < s.size()) {
            ++dots;
        } else {
            return std::nullopt;
        }
    }
    if (digits == 0) return std::nullopt;
    const auto v = csv::parse_double(s);
    if (!v || *v < 0.0 || *v > 100.0) return std::nullopt;
    return *v / 100.0;
}

// ---------------------------------------------------------------------------
// Transports

struct LLMConfig {
    std::string endpoint_url = "https://api.openai.com/v1/chat/completions";
    std::string model_name = "gpt-4";
    std::string api_key_env = "OPENAI_API_KEY";
    double temperature = 1.0;
    std::chrono::milliseconds timeout{60'000};
    int max_retries = 5;
    std::chrono::milliseconds initial_backoff{1'000};
    double backoff_factor = 2.0;
    std::size_t concurrency = 4;
};

/// One chat-completion request plus the cell it fills.
struct ChatRequest {
    std::string model;
    Prompts prompts;
    double temperature = 1.0;
    std::string party;
    int question_id = 0;
    int trial = 0;

    nlohmann::json body() const {
        return {{"model", model},
                {"messages",
                 {{{"role", "system"}, {"content", prompts.system}}, {{"role", "user"}, {"content", prompts.user}}}},
                {"temperature", temperature}};
    }
};

class LlmTransport {
public:
    virtual ~LlmTransport() = default;
    /// Returns the assistant message content. Throws TransportError (or
    /// AuthError) on failure.
    virtual std::string complete(const ChatRequest& request) = 0;
};

/// Test double: replies round(100 * clip(mean + eps, 0, 1)) with
/// eps ~ N(0, noise_std * temperature). Noise is keyed by the request cell,
/// so replies do not depend on call order.
class MockTransport final : public LlmTransport {
public:
    MockTransport(std::vector<PartyMean> profiles, double noise_std, std::uint64_t seed)
        : noise_std_(noise_std), seed_(seed) {
        for (auto& p : profiles) profiles_.emplace(p.party, std::move(p));
    }

    std::string complete(const ChatRequest& request) override {
        auto it = profiles_.find(request.party);
        if (it == profiles_.end()) throw TransportError("mock transport: unknown party '" + request.party + "'");
        const auto& mean = it->second.mean.at(static_cast<std::size_t>(request.question_id));
        if (!mean) return "I cannot answer that.";
        Rng rng{derive_seed(seed_, request.party, static_cast<std::uint64_t>(request.question_id),
                            std::bit_cast<std::uint64_t>(request.temperature),
                            static_cast<std::uint64_t>(request.trial))};
        double value = *mean;
        if (noise_std_ > 0) value += std::normal_distribution<double>(0.0, noise_std_ * request.temperature)(rng);
        return std::to_string(std::lround(100.0 * std::clamp(value, 0.0, 1.0)));
    }

private:
    std::map<std::string, PartyMean> profiles_;
    double noise_std_;
    std::uint64_t seed_;
};

/// One request/response pair as stored in the fixture JSONL log.
struct FixtureRecord {
    std::string party;
    int question_id = 0;
    double temperature = 1.0;
    int trial = 0;
    nlohmann::json request;
    std::optional<std::string> response;
    Answer parsed;
    std::optional<std::string> error;
};

inline nlohmann::json to_json(const FixtureRecord& r) {
    nlohmann::json j{{"party", r.party},
                     {"question_id", r.question_id},
                     {"temperature", r.temperature},
                     {"trial", r.trial},
                     {"request", r.request},
                     {"response", r.response ? nlohmann::json(*r.response) : nlohmann::json(nullptr)},
                     {"parsed", r.parsed ? nlohmann::json(*r.parsed) : nlohmann::json(nullptr)}};
    if (r.error) j["error"] = *r.error;
    return j;
}

inline FixtureRecord fixture_from_json(const nlohmann::json& j) {
    FixtureRecord r;
    r.party = j.at("party").get<std::string>();
    r.question_id = j.at("question_id").get<int>();
    r.temperature = j.at("temperature").get<double>();
    r.trial = j.at("trial").get<int>();
    r.request = j.value("request", nlohmann::json::object());
    if (!j.at("response").is_null()) r.response = j.at("response").get<std::string>();
    if (j.contains("parsed") && !j.at("parsed").is_null()) r.parsed = j.at("parsed").get<double>();
    if (j.contains("error")) r.error = j.at("error").get<std::string>();
    return r;
}

inline void write_fixtures(std::ostream& out, const std::vector<FixtureRecord>& records) {
    for (const auto& r : records) out << to_json(r).dump() << '\n';
}

inline std::vector<FixtureRecord> read_fixtures(std::istream& in, const std::string& ctx = "fixtures") {
    std::vector<FixtureRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (csv::read_line(in, line)) {
        ++line_no;
        if (csv::trim(line).empty()) continue;
        try {
            out.push_back(fixture_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw LoadError(ctx + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

/// Replays recorded responses keyed by (party, question, temperature, trial).
class ReplayTransport final : public LlmTransport {
public:
    explicit ReplayTransport(const std::vector<FixtureRecord>& records) {
        for (const auto& r : records) entries_[{r.party, r.question_id, r.temperature, r.trial}] = r;
    }

    std::string complete(const ChatRequest& request) override {
        auto it = entries_.find({request.party, request.question_id, request.temperature, request.trial});
        if (it == entries_.end())
            throw TransportError("replay: no fixture for party " + request.party + " question " +
                                 std::to_string(request.question_id) + " trial " + std::to_string(request.trial));
        if (!it->second.response) throw TransportError("replay: recorded failure: " + it->second.error.value_or("?"));
        return *it->second.response;
    }

private:
    std::map<std::tuple<std::string, int, double, int>, FixtureRecord> entries_;
};

/// OpenAI-compatible chat-completions client with exponential backoff.
/// 401/403 abort immediately; 429, 5xx and connection failures are retried.
class HttpTransport final : public LlmTransport {
public:
    using Sleeper = std::function<void(std::chrono::milliseconds)>;

    explicit HttpTransport(LLMConfig config, Sleeper sleeper = default_sleeper())
        : config_(std::move(config)), sleeper_(std::move(sleeper)) {
        const char* key = std::getenv(config_.api_key_env.c_str());
        if (!key || !*key) throw AuthError("environment variable " + config_.api_key_env + " is not set");
        api_key_ = key;
        const auto scheme = config_.endpoint_url.find("://");
        if (scheme == std::string::npos) throw ConfigError("endpoint URL lacks a scheme: " + config_.endpoint_url);
        const auto path = config_.endpoint_url.find('/', scheme + 3);
        origin_ = config_.endpoint_url.substr(0, path);
        path_ = path == std::string::npos ? "/v1/chat/completions" : config_.endpoint_url.substr(path);
    }

    static Sleeper default_sleeper() {
        return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    }

    std::string complete(const ChatRequest& request) override {
        httplib::Client client(origin_);
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
        client.set_connection_timeout(secs.count(), usecs.count());
        client.set_read_timeout(secs.count(), usecs.count());
        client.set_write_timeout(secs.count(), usecs.count());
        const httplib::Headers headers{{"Authorization", "Bearer " + api_key_}};
        const std::string body = request.body().dump();

        auto delay = config_.initial_backoff;
        std::string last_error;
        for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
            if (attempt > 0) {
                sleeper_(delay);
                delay = std::chrono::milliseconds(
                    static_cast<long long>(static_cast<double>(delay.count()) * config_.backoff_factor));
            }
            auto res = client.Post(path_, headers, body, "application/json");
            if (!res) {
                last_error = "connection failure: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status == 401 || res->status == 403)
                throw AuthError("endpoint rejected credentials (HTTP " + std::to_string(res->status) + ")");
            if (res->status == 429 || res->status >= 500) {
                last_error = "HTTP " + std::to_string(res->status);
                continue;
            }
            if (res->status != 200) throw TransportError("HTTP " + std::to_string(res->status) + ": " + res->body);
            try {
                const auto doc = nlohmann::json::parse(res->body);
                return doc.at("choices").at(0).at("message").at("content").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                throw TransportError(std::string("malformed completion payload: ") + e.what());
            }
        }
        throw TransportError("giving up after " + std::to_string(config_.max_retries) + " retries: " + last_error);
    }

private:
    LLMConfig config_;
    Sleeper sleeper_;
    std::string api_key_;
    std::string origin_;
    std::string path_;
};

// ---------------------------------------------------------------------------
// Dataset generation

struct SyntheticSample {
    std::string party;
    double temperature = 1.0;
    int trial_index = 0;
    AnswerRow answers;

    friend bool operator==(const SyntheticSample&, const SyntheticSample&) = default;
};

inline const std::vector<double> kDefaultTemperatures{1.0, 1.25, 1.5, 1.75, 2.0};
inline constexpr int kDefaultTrialsPerTemperature = 10;

/// One sample per (party, temperature, trial); one request per question.
/// Failed cells become missing and are logged; AuthError aborts the run.
/// The fixture log is ordered by cell, independent of request scheduling.
inline std::vector<SyntheticSample> generate_dataset(const LLMConfig& base, const std::vector<std::string>& parties,
                                                     const Questionnaire& questionnaire, int reps_per_temperature,
                                                     const std::vector<double>& temperatures,
                                                     LlmTransport& transport,
                                                     std::vector<FixtureRecord>* fixture_log = nullptr) {
    if (reps_per_temperature < 1) throw InputError("generate_dataset: reps per temperature must be >= 1");
    for (double t : temperatures)
        if (!(t > 0)) throw InputError("generate_dataset: temperatures must be positive");
    const std::size_t nq = questionnaire.size();

    std::vector<SyntheticSample> samples;
    for (const auto& party : parties)
        for (double t : temperatures)
            for (int trial = 0; trial < reps_per_temperature; ++trial)
                samples.push_back({party, t, trial, AnswerRow(nq)});

    const std::size_t cells = samples.size() * nq;
    std::vector<FixtureRecord> records(cells);
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr abort;

    auto worker = [&] {
        for (;;) {
            const std::size_t cell = next.fetch_add(1);
            if (cell >= cells) return;
            {
                std::lock_guard lock(error_mutex);
                if (abort) return;
            }
            auto& sample = samples[cell / nq];
            const auto k = cell % nq;
            ChatRequest req{base.model_name,
                            build_prompts(sample.party, questionnaire[k].text),
                            sample.temperature,
                            sample.party,
                            static_cast<int>(k),
                            sample.trial_index};
            auto& rec = records[cell];
            rec = {sample.party, static_cast<int>(k), sample.temperature, sample.trial_index, req.body(), {}, {}, {}};
            try {
                rec.response = transport.complete(req);
                rec.parsed = parse_llm_reply(*rec.response);
                sample.answers[k] = rec.parsed;
            } catch (const AuthError&) {
                std::lock_guard lock(error_mutex);
                if (!abort) abort = std::current_exception();
                return;
            } catch (const TransportError& e) {
                rec.error = e.what();
            }
        }
    };

    const std::size_t threads = std::max<std::size_t>(1, std::min(base.concurrency, cells));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (abort) std::rethrow_exception(abort);
    if (fixture_log) fixture_log->insert(fixture_log->end(), records.begin(), records.end());
    return samples;
}

/// Row id encoding temperature, trial and party: "T<temp>/r<trial>/<party>".
inline std::string sample_id(const SyntheticSample& s) {
    return "T" + csv::format_double(s.temperature) + "/r" + std::to_string(s.trial_index) + "/" + s.party;
}

inline ResponseMatrix samples_to_matrix(const std::vector<SyntheticSample>& samples, std::size_t num_questions) {
    ResponseMatrix m(num_questions);
    for (const auto& s : samples) m.add_row({sample_id(s), RespondentKind::synthetic, s.party}, s.answers);
    return m;
}

/// Inverse of samples_to_matrix. Rows whose id does not follow the sample_id
/// format get temperature 1 and their row index as trial.
inline std::vector<SyntheticSample> matrix_to_samples(const ResponseMatrix& m) {
    std::vector<SyntheticSample> out;
    for (std::size_t n = 0; n < m.rows(); ++n) {
        const auto& who = m.respondents[n];
        SyntheticSample s{who.party.value_or(""), 1.0, static_cast<int>(n), m.answers[n]};
        const auto& id = who.id;
        const auto a = id.find('/');
        const auto b = a == std::string::npos ? a : id.find('/', a + 1);
        if (id.size() > 1 && id[0] == 'T' && b != std::string::npos && id[a + 1] == 'r') {
            auto t = csv::parse_double(std::string_view(id).substr(1, a - 1));
            auto r = csv::parse_int(std::string_view(id).substr(a + 2, b - a - 2));
            if (t && r) {
                s.temperature = *t;
                s.trial_index = static_cast<int>(*r);
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Derived datasets

/// One row per party holding the mean over present answers.
inline ResponseMatrix gpt_means(const ResponseMatrix& samples) {
    ResponseMatrix out(samples.cols());
    for (const auto& pm : party_means(samples))
        out.add_row({"mean/" + pm.party, RespondentKind::synthetic, pm.party}, pm.mean);
    return out;
}

inline ResponseMatrix gpt_means(const std::vector<SyntheticSample>& samples) {
    if (samples.empty()) throw InputError("gpt_means: no samples");
    return gpt_means(samples_to_matrix(samples, samples.front().answers.size()));
}

struct PartyVertex {
    std::string party;
    std::vector<double> vertex;
};

/// Minimizes |v - own|^2 - sum_{q != p} |v - other_q|^2 over the unit box.
/// The objective separates per coordinate and is concave for three or more
/// parties, so each coordinate is the better endpoint; an exact tie takes the
/// endpoint nearer the party's own mean.
inline std::vector<PartyVertex> party_vertices(const std::vector<PartyMean>& means) {
    if (means.size() < 2) throw InputError("party_vertices: need at least two parties");
    const std::size_t nq = means.front().mean.size();
    for (const auto& pm : means) {
        if (pm.mean.size() != nq) throw InputError("party_vertices: mean vectors differ in length");
        for (const auto& v : pm.mean)
            if (!v) throw InputError("party_vertices: party " + pm.party + " has an incomplete mean vector");
    }
    std::vector<PartyVertex> out;
    for (std::size_t p = 0; p < means.size(); ++p) {
        PartyVertex pv{means[p].party, std::vector<double>(nq)};
        for (std::size_t k = 0; k < nq; ++k) {
            const double own = *means[p].mean[k];
            auto f = [&](double v) {
                double l = (v - own) * (v - own);
                for (std::size_t q = 0; q < means.size(); ++q)
                    if (q != p) l -= (v - *means[q].mean[k]) * (v - *means[q].mean[k]);
                return l;
            };
            const double f0 = f(0.0), f1 = f(1.0);
            pv.vertex[k] = f0 < f1 ? 0.0 : f1 < f0 ? 1.0 : std::round(own);
        }
        out.push_back(std::move(pv));
    }
    return out;
}

/// Dirichlet draw via normalized Gamma variates, computed in log space so that
/// small concentrations do not underflow to an all-zero vector.
inline std::vector<double> sample_dirichlet(std::span<const double> alpha, Rng& rng) {
    std::vector<double> logs(alpha.size());
    for (std::size_t p = 0; p < alpha.size(); ++p) {
        const double a = alpha[p];
        if (!(a > 0)) throw InputError("sample_dirichlet: alpha must be positive");
        if (a >= 1.0) {
            logs[p] = std::log(std::gamma_distribution<double>(a, 1.0)(rng));
        } else {
            // Gamma(a) = Gamma(a + 1) * U^(1/a)
            const double g = std::gamma_distribution<double>(a + 1.0, 1.0)(rng);
            double u = uniform01(rng);
            while (u <= 0.0) u = uniform01(rng);
            logs[p] = std::log(g) + std::log(u) / a;
        }
    }
    const double peak = *std::max_element(logs.begin(), logs.end());
    double total = 0.0;
    std::vector<double> w(alpha.size());
    for (std::size_t p = 0; p < w.size(); ++p) total += (w[p] = std::exp(logs[p] - peak));
    for (auto& v : w) v /= total;
    return w;
}

struct VoterSynthesisConfig {
    /// Positive weight per party, aligned with the vertex list.
    std::vector<double> alpha;
    std::size_t n_samples = 1200;
    std::uint64_t seed = 0;
    /// Multiplies alpha before sampling.
    double concentration = 1.0;
};

/// y_k = sum_p w_p * v_pk
inline std::vector<double> synthesize_voter(std::span<const double> weights, const std::vector<PartyVertex>& vertices) {
    if (weights.size() != vertices.size()) throw InputError("synthesize_voter: weight count differs from party count");
    std::vector<double> y(vertices.front().vertex.size(), 0.0);
    for (std::size_t p = 0; p < vertices.size(); ++p)
        for (std::size_t k = 0; k < y.size(); ++k) y[k] += weights[p] * vertices[p].vertex[k];
    for (auto& v : y) v = std::clamp(v, 0.0, 1.0);
    return y;
}

inline ResponseMatrix sample_gpt_voters(const std::vector<PartyVertex>& vertices, const VoterSynthesisConfig& config,
                                        std::vector<std::vector<double>>* weights_out = nullptr) {
    if (vertices.empty()) throw InputError("sample_gpt_voters: no vertices");
    if (config.alpha.size() != vertices.size())
        throw InputError("sample_gpt_voters: alpha has " + std::to_string(config.alpha.size()) + " entries for " +
                         std::to_string(vertices.size()) + " parties");
    if (config.n_samples < 1) throw InputError("sample_gpt_voters: n_samples must be >= 1");
    if (!(config.concentration > 0)) throw InputError("sample_gpt_voters: concentration must be positive");
    std::vector<double> alpha(config.alpha);
    for (auto& a : alpha) {
        if (!(a > 0)) throw InputError("sample_gpt_voters: alpha entries must be positive");
        a *= config.concentration;
    }
    Rng rng = make_rng(config.seed, "gpt-voters");
    ResponseMatrix out(vertices.front().vertex.size());
    for (std::size_t i = 0; i < config.n_samples; ++i) {
        const auto w = sample_dirichlet(alpha, rng);
        const auto y = synthesize_voter(w, vertices);
        out.add_row({"voter/" + std::to_string(i), RespondentKind::synthetic, std::nullopt}, AnswerRow(y.begin(), y.end()));
        if (weights_out) weights_out->push_back(w);
    }
    return out;
}

/// Alpha vector aligned with `vertices`, looked up by party name.
inline std::vector<double> align_alpha(const std::vector<PartyVertex>& vertices, const std::vector<PartyShare>& shares) {
    std::vector<double> alpha;
    for (const auto& v : vertices) {
        auto it = std::find_if(shares.begin(), shares.end(), [&](const PartyShare& s) { return s.party == v.party; });
        if (it == shares.end()) throw InputError("no vote share for party " + v.party);
        alpha.push_back(it->fraction);
    }
    return alpha;
}

inline ResponseMatrix vertices_to_matrix(const std::vector<PartyVertex>& vertices) {
    ResponseMatrix out(vertices.empty() ? 0 : vertices.front().vertex.size());
    for (const auto& v : vertices)
        out.add_row({"vertex/" + v.party, RespondentKind::synthetic, v.party}, AnswerRow(v.vertex.begin(), v.vertex.end()));
    return out;
}

// ---------------------------------------------------------------------------
// Temperature report

struct TemperatureStats {
    double temperature = 0.0;
    /// Average distance of each sample to its party mean.
    double mean_distance = 0.0;
    /// Average over (party, question) of the population std across trials.
    double response_std = 0.0;
    std::size_t missing_cells = 0;
    double missing_fraction = 0.0;
    std::size_t samples = 0;
    /// True when no (party, question) cell had two or more values.
    bool spread_undefined = false;
};

inline std::vector<TemperatureStats> temperature_report(const std::vector<SyntheticSample>& samples,
                                                        const std::vector<PartyMean>& means) {
    std::map<std::string, const PartyMean*> by_party;
    for (const auto& pm : means) by_party[pm.party] = &pm;
    std::map<double, std::vector<const SyntheticSample*>> groups;
    for (const auto& s : samples) groups[s.temperature].push_back(&s);

    std::vector<TemperatureStats> out;
    for (const auto& [t, group] : groups) {
        TemperatureStats st;
        st.temperature = t;
        st.samples = group.size();
        double dist_sum = 0.0;
        std::size_t dist_n = 0, cells = 0;
        std::map<std::string, std::vector<const SyntheticSample*>> per_party;
        for (const auto* s : group) {
            per_party[s->party].push_back(s);
            for (const auto& a : s->answers) {
                ++cells;
                st.missing_cells += !a;
            }
            auto it = by_party.find(s->party);
            if (it == by_party.end()) continue;
            if (auto d = distance_over_present(s->answers, it->second->mean)) {
                dist_sum += *d;
                ++dist_n;
            }
        }
        st.mean_distance = dist_n ? dist_sum / static_cast<double>(dist_n) : 0.0;
        st.missing_fraction = cells ? static_cast<double>(st.missing_cells) / static_cast<double>(cells) : 0.0;

        double std_sum = 0.0;
        std::size_t std_n = 0;
        for (const auto& [party, rows] : per_party) {
            const std::size_t nq = rows.front()->answers.size();
            for (std::size_t k = 0; k < nq; ++k) {
                double sum = 0.0, ss = 0.0;
                std::size_t n = 0;
                for (const auto* s : rows)
                    if (s->answers[k]) {
                        sum += *s->answers[k];
                        ++n;
                    }
                if (n < 2) continue;
                const double mean = sum / static_cast<double>(n);
                for (const auto* s : rows)
                    if (s->answers[k]) ss += (*s->answers[k] - mean) * (*s->answers[k] - mean);
                std_sum += std::sqrt(ss / static_cast<double>(n));
                ++std_n;
            }
        }
        st.spread_undefined = std_n == 0;
        st.response_std = std_n ? std_sum / static_cast<double>(std_n) : 0.0;
        out.push_back(st);
    }
    return out;
}

}  // namespace adaptq
