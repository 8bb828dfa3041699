#pragma once

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "latent_model.hpp"
#include "metrics.hpp"
#include "selection.hpp"
#include "simulation.hpp"
#include "survey.hpp"

// after the local headers: resolv.h defines a _res macro that breaks Eigen
#include <httplib.h>

namespace adaptq {

inline constexpr const char* kServiceVersion = "1.0.0";

struct ServiceConfig {
    Questionnaire questionnaire;
    ResponseMatrix candidates;
    ResponseMatrix init_data;
    std::size_t users_per_refit = 5;
    double gamma = 0.0;
    std::size_t session_k = 30;
    std::uint64_t seed = 0;
    /// Empty disables persistence.
    std::string state_dir;
    int grid_resolution = kDefaultResolution;
    std::size_t preview = 5;
    std::size_t recommendations = kDefaultRecommendations;
    std::chrono::seconds idle_timeout{30 * 60};
    std::chrono::seconds staleness_budget{60};
    std::string cors_origin = "*";
};

enum class SessionStatus { active, completed, abandoned };

inline std::string to_string(SessionStatus s) {
    switch (s) {
        case SessionStatus::active: return "active";
        case SessionStatus::completed: return "completed";
        case SessionStatus::abandoned: return "abandoned";
    }
    return "?";
}

struct Session {
    std::string id;
    UserSessionState state;
    std::optional<int> served;
    SessionStatus status = SessionStatus::active;
    std::chrono::system_clock::time_point created;
    std::chrono::steady_clock::time_point last_activity;
};

/// HTTP-independent reply: status code plus JSON body.
struct Reply {
    int status = 200;
    nlohmann::json body;
};

/// Adaptive questionnaire service. Sessions are embedded after every answer;
/// the model is refit on a background worker after every U finished sessions.
/// Every state change is appended to <state_dir>/events.jsonl before the reply
/// is sent, and replaying that log on startup rebuilds sessions, training set
/// and model.
class LiveService {
public:
    explicit LiveService(ServiceConfig config)
        : cfg_(std::move(config)),
          candidate_rows_(complete_by_column_mean(cfg_.candidates)),
          pool_(cfg_.init_data, cfg_.questionnaire.size(), cfg_.gamma, cfg_.users_per_refit,
                derive_seed(cfg_.seed, "service-removal")),
          id_rng_(std::random_device{}()) {
        if (cfg_.candidates.empty()) throw ConfigError("service needs a non-empty candidate pool");
        if (cfg_.candidates.cols() != cfg_.questionnaire.size())
            throw ConfigError("candidates do not match the questionnaire");
        if (cfg_.session_k < 1 || cfg_.session_k > cfg_.questionnaire.size())
            throw ConfigError("per-session K must be in [1, Q]");
        if (cfg_.users_per_refit < 1) throw ConfigError("U must be >= 1");
        model_ = std::make_shared<const TrainedModel>(fit_current());
        if (!cfg_.state_dir.empty()) {
            std::filesystem::create_directories(cfg_.state_dir);
            replay_events();
            events_.open(events_path(), std::ios::app);
            if (!events_) throw ConfigError("cannot open event log in " + cfg_.state_dir);
        }
        worker_ = std::thread([this] { worker_loop(); });
    }

    LiveService(const LiveService&) = delete;
    LiveService& operator=(const LiveService&) = delete;

    ~LiveService() { shutdown(); }

    /// Stops the worker and writes a model snapshot. Idempotent.
    void shutdown() {
        {
            std::lock_guard lock(mu_);
            if (stopping_) return;
            stopping_ = true;
        }
        cv_.notify_all();
        if (worker_.joinable()) worker_.join();
        if (!cfg_.state_dir.empty()) {
            std::ofstream snap(std::filesystem::path(cfg_.state_dir) / "model.json");
            snap << to_json(*current_model()).dump() << '\n';
        }
    }

    std::shared_ptr<const TrainedModel> current_model() const {
        std::lock_guard lock(model_mu_);
        return model_;
    }

    std::size_t refit_count() const {
        std::lock_guard lock(mu_);
        return refits_done_;
    }

    /// Blocks until every complete batch has been refit.
    void wait_for_refits() {
        std::unique_lock lock(mu_);
        idle_cv_.wait(lock, [&] { return pending_.size() < cfg_.users_per_refit && !refitting_; });
    }

    // -- endpoints -----------------------------------------------------------

    Reply create_session() {
        const auto model = current_model();
        std::lock_guard lock(mu_);
        if (stale_locked()) return error(503, "model refit is overdue; try again shortly");
        Session s;
        s.id = new_session_id();
        s.state = UserSessionState::fresh(cfg_.questionnaire.size());
        s.created = std::chrono::system_clock::now();
        s.last_activity = std::chrono::steady_clock::now();
        s.served = next_question(s.state, *model);
        log_event({{"event", "created"}, {"session", s.id}});
        log_event({{"event", "served"}, {"session", s.id}, {"question_id", *s.served}});
        auto body = nlohmann::json{{"session_id", s.id}, {"question", question_json(*s.served)}, {"k", cfg_.session_k}};
        sessions_.emplace(s.id, std::move(s));
        return {201, body};
    }

    Reply answer(const std::string& id, const nlohmann::json& body) {
        if (!body.is_object() || !body.contains("question_id") || !body.contains("raw_index") ||
            !body["question_id"].is_number_integer() || !body["raw_index"].is_number_integer())
            return error(422, "body must be {\"question_id\": int, \"raw_index\": int}");
        const int qid = body["question_id"].get<int>();
        const int raw = body["raw_index"].get<int>();
        const auto model = current_model();

        std::lock_guard lock(mu_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) return error(404, "unknown session");
        auto& s = it->second;
        if (s.status != SessionStatus::active) return error(409, "session is " + to_string(s.status));
        if (!s.served || *s.served != qid) return error(409, "question " + std::to_string(qid) + " was not served");
        const int levels = cfg_.questionnaire[static_cast<std::size_t>(qid)].levels;
        if (raw < 0 || raw >= levels)
            return error(422, "raw_index must be in [0," + std::to_string(levels - 1) + "]");

        const double value = normalize_likert(raw, levels);
        log_event({{"event", "answer"}, {"session", id}, {"question_id", qid}, {"raw_index", raw}, {"value", value}});
        apply_answer(s, qid, value, *model);
        s.last_activity = std::chrono::steady_clock::now();

        nlohmann::json out{{"session_id", id}, {"answered", s.state.answered.size()}};
        if (s.state.answered.size() >= cfg_.session_k || s.state.remaining_count() == 0) {
            finish_locked(s, SessionStatus::completed);
            out["done"] = true;
            out["next_question"] = nullptr;
        } else {
            s.served = next_question(s.state, *model);
            log_event({{"event", "served"}, {"session", id}, {"question_id", *s.served}});
            out["done"] = false;
            out["next_question"] = question_json(*s.served);
        }
        out["recommendations"] = recommendations_json(s, *model, cfg_.preview);
        return {200, out};
    }

    /// Client-initiated completion (early drop-out).
    Reply finish(const std::string& id) {
        std::lock_guard lock(mu_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) return error(404, "unknown session");
        auto& s = it->second;
        if (s.status != SessionStatus::active) return error(409, "session is " + to_string(s.status));
        if (s.state.answered.empty()) return error(409, "answer at least one question before finishing");
        finish_locked(s, SessionStatus::completed);
        return {200, {{"session_id", id}, {"status", "completed"}, {"answered", s.state.answered.size()}}};
    }

    Reply recommendations(const std::string& id) {
        const auto model = current_model();
        std::lock_guard lock(mu_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) return error(404, "unknown session");
        const auto& s = it->second;
        if (s.state.answered.empty()) return error(409, "no answers yet");
        const auto imputed = impute(s.state.answered, *model, cfg_.grid_resolution);
        const auto set = recommend_candidates(imputed, candidate_rows_, cfg_.recommendations);
        return {200,
                {{"session_id", id},
                 {"candidates", candidates_json(set, set.ids.size())},
                 {"truncated", set.truncated},
                 {"imputed_profile", imputed}}};
    }

    Reply questions() const { return {200, to_json(cfg_.questionnaire)}; }

    Reply health() const {
        std::lock_guard lock(mu_);
        return {200, {{"status", stale_locked() ? "degraded" : "ok"}, {"version", kServiceVersion}}};
    }

    Reply model_info() const {
        const auto model = current_model();
        std::lock_guard lock(mu_);
        return {200,
                {{"init_mode", model->init_mode == InitMode::fitted ? "fitted" : "random"},
                 {"refit_count", refits_done_},
                 {"training_rows", {{"synthetic", pool_.synthetic_rows()}, {"real", pool_.real_rows()}}},
                 {"finished_sessions", finished_count_},
                 {"pending_batch", pending_.size()}}};
    }

    /// Marks sessions idle since before now - idle_timeout as abandoned.
    std::size_t expire_idle(std::chrono::steady_clock::time_point now) {
        std::lock_guard lock(mu_);
        std::size_t n = 0;
        for (auto& [id, s] : sessions_)
            if (s.status == SessionStatus::active && now - s.last_activity >= cfg_.idle_timeout) {
                finish_locked(s, SessionStatus::abandoned);
                ++n;
            }
        return n;
    }

    std::optional<SessionStatus> session_status(const std::string& id) const {
        std::lock_guard lock(mu_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) return std::nullopt;
        return it->second.status;
    }

    /// Training set as currently held by the refit pool.
    ResponseMatrix training_set() const {
        std::lock_guard lock(mu_);
        return pool_.matrix();
    }

    void mount(httplib::Server& server) {
        server.set_default_headers({{"Access-Control-Allow-Origin", cfg_.cors_origin},
                                    {"Access-Control-Allow-Headers", "Content-Type"},
                                    {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
        server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
        auto send = [](httplib::Response& res, const Reply& r) {
            res.status = r.status;
            res.set_content(r.body.dump(), "application/json");
        };
        server.Post("/v1/sessions", [this, send](const httplib::Request&, httplib::Response& res) {
            send(res, create_session());
        });
        server.Post(R"(/v1/sessions/([^/]+)/answers)", [this, send](const httplib::Request& req, httplib::Response& res) {
            nlohmann::json body;
            try {
                body = nlohmann::json::parse(req.body);
            } catch (const nlohmann::json::exception&) {
                return send(res, error(400, "body is not valid JSON"));
            }
            send(res, answer(req.matches[1], body));
        });
        server.Post(R"(/v1/sessions/([^/]+)/finish)", [this, send](const httplib::Request& req, httplib::Response& res) {
            send(res, finish(req.matches[1]));
        });
        server.Get(R"(/v1/sessions/([^/]+)/recommendations)",
                   [this, send](const httplib::Request& req, httplib::Response& res) {
                       send(res, recommendations(req.matches[1]));
                   });
        server.Get("/v1/questions", [this, send](const httplib::Request&, httplib::Response& res) {
            send(res, questions());
        });
        for (const char* path : {"/v1/healthz", "/healthz"})
            server.Get(path, [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
        server.Get("/v1/model/info", [this, send](const httplib::Request&, httplib::Response& res) {
            send(res, model_info());
        });
        server.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string what = "internal error";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                what = e.what();
            } catch (...) {
            }
            send(res, error(500, what));
        });
    }

private:
    static Reply error(int status, const std::string& message) {
        return {status, {{"code", status}, {"message", message}}};
    }

    std::string events_path() const { return (std::filesystem::path(cfg_.state_dir) / "events.jsonl").string(); }

    std::string new_session_id() {
        static constexpr char kHex[] = "0123456789abcdef";
        for (;;) {
            std::string id;
            for (int i = 0; i < 2; ++i) {
                auto v = id_rng_();
                for (int j = 0; j < 16; ++j, v >>= 4) id += kHex[v & 0xf];
            }
            if (!sessions_.count(id)) return id;
        }
    }

    void log_event(nlohmann::json event) {
        if (!events_.is_open()) return;
        event["t"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
        events_ << event.dump() << '\n';
        events_.flush();
    }

    nlohmann::json question_json(int qid) const {
        const auto& q = cfg_.questionnaire[static_cast<std::size_t>(qid)];
        return {{"id", q.id}, {"text", q.text}, {"levels", q.levels}};
    }

    nlohmann::json candidates_json(const RecommendationSet& set, std::size_t limit) const {
        auto list = nlohmann::json::array();
        for (std::size_t i = 0; i < std::min(limit, set.ids.size()); ++i) {
            const auto& who = cfg_.candidates.respondents[set.ids[i]];
            list.push_back({{"id", who.id},
                            {"party", who.party ? nlohmann::json(*who.party) : nlohmann::json(nullptr)},
                            {"distance", set.distances[i]}});
        }
        return list;
    }

    nlohmann::json recommendations_json(const Session& s, const TrainedModel& model, std::size_t limit) const {
        const auto imputed = impute_at(s.state.current_point, s.state.answered, model);
        return candidates_json(recommend_candidates(imputed, candidate_rows_, cfg_.recommendations), limit);
    }

    void apply_answer(Session& s, int qid, double value, const TrainedModel& model) const {
        PosteriorAccumulator posterior(model, cfg_.grid_resolution);
        for (const auto& [q, v] : s.state.answered) posterior.add(q, v);
        posterior.add(qid, value);
        s.state.record(qid, value, posterior.mean());
        s.served.reset();
    }

    void finish_locked(Session& s, SessionStatus status) {
        s.status = status;
        s.served.reset();
        log_event({{"event", "finished"}, {"session", s.id}, {"status", to_string(status)}});
        enqueue_finished(s);
        cv_.notify_all();
    }

    void enqueue_finished(const Session& s) {
        ++finished_count_;
        if (s.state.answered.empty()) return;
        AnswerRow row(cfg_.questionnaire.size());
        for (const auto& [q, v] : s.state.answered) row[static_cast<std::size_t>(q)] = v;
        pending_.emplace_back(Respondent{s.id, RespondentKind::voter, std::nullopt}, std::move(row));
        if (pending_.size() >= cfg_.users_per_refit && !pending_since_)
            pending_since_ = std::chrono::steady_clock::now();
    }

    bool stale_locked() const {
        return pending_since_ && std::chrono::steady_clock::now() - *pending_since_ > cfg_.staleness_budget;
    }

    TrainedModel fit_current() const {
        return fit_model(pool_.matrix(), cfg_.questionnaire,
                         {derive_seed(cfg_.seed, "service-fit"), pool_.refits(), {}});
    }

    /// Applies one batch of U finished sessions to the pool. Caller holds mu_.
    bool take_batch_locked() {
        if (pending_.size() < cfg_.users_per_refit) return false;
        std::vector<std::pair<Respondent, AnswerRow>> batch(
            pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(cfg_.users_per_refit));
        pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(cfg_.users_per_refit));
        pool_.refit_batch(batch);
        return true;
    }

    void install(TrainedModel model) {
        auto next = std::make_shared<const TrainedModel>(std::move(model));
        std::lock_guard lock(model_mu_);
        model_ = std::move(next);
    }

    void worker_loop() {
        std::unique_lock lock(mu_);
        for (;;) {
            cv_.wait_for(lock, std::chrono::seconds(1),
                         [&] { return stopping_ || pending_.size() >= cfg_.users_per_refit; });
            if (stopping_) return;
            if (!take_batch_locked()) {
                lock.unlock();
                expire_idle(std::chrono::steady_clock::now());
                lock.lock();
                continue;
            }
            refitting_ = true;
            const ResponseMatrix training = pool_.matrix();
            const std::uint64_t refit_index = pool_.refits();
            lock.unlock();
            auto model = fit_model(training, cfg_.questionnaire, {derive_seed(cfg_.seed, "service-fit"), refit_index, {}});
            install(std::move(model));
            if (!cfg_.state_dir.empty()) {
                std::ofstream snap(std::filesystem::path(cfg_.state_dir) / "model.json");
                snap << to_json(*current_model()).dump() << '\n';
            }
            lock.lock();
            ++refits_done_;
            refitting_ = false;
            pending_since_.reset();
            if (pending_.size() >= cfg_.users_per_refit) pending_since_ = std::chrono::steady_clock::now();
            idle_cv_.notify_all();
        }
    }

    /// Rebuilds sessions, pool and model from the event log, applying refits
    /// synchronously at the same batch boundaries the live worker used.
    void replay_events() {
        std::ifstream in(events_path());
        if (!in) return;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            nlohmann::json ev;
            try {
                ev = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception&) {
                // a torn final line from a crash is tolerated
                if (in.peek() == EOF) break;
                throw LoadError("event log line " + std::to_string(line_no) + " is not valid JSON");
            }
            const auto type = ev.at("event").get<std::string>();
            const auto id = ev.at("session").get<std::string>();
            if (type == "created") {
                Session s;
                s.id = id;
                s.state = UserSessionState::fresh(cfg_.questionnaire.size());
                s.created = std::chrono::system_clock::time_point(std::chrono::milliseconds(ev.value("t", 0LL)));
                s.last_activity = std::chrono::steady_clock::now();
                sessions_.emplace(id, std::move(s));
                continue;
            }
            auto it = sessions_.find(id);
            if (it == sessions_.end()) throw LoadError("event log references unknown session " + id);
            auto& s = it->second;
            if (type == "served") {
                s.served = ev.at("question_id").get<int>();
            } else if (type == "answer") {
                apply_answer(s, ev.at("question_id").get<int>(), ev.at("value").get<double>(), *model_);
            } else if (type == "finished") {
                s.status = ev.at("status").get<std::string>() == "abandoned" ? SessionStatus::abandoned
                                                                              : SessionStatus::completed;
                s.served.reset();
                enqueue_finished(s);
                if (take_batch_locked()) {
                    model_ = std::make_shared<const TrainedModel>(fit_current());
                    ++refits_done_;
                }
            }
        }
        pending_since_.reset();
        if (pending_.size() >= cfg_.users_per_refit) pending_since_ = std::chrono::steady_clock::now();
        // re-embed open sessions under the restored model
        for (auto& [id, s] : sessions_) {
            if (s.state.answered.empty()) continue;
            PosteriorAccumulator posterior(*model_, cfg_.grid_resolution);
            for (const auto& [q, v] : s.state.answered) posterior.add(q, v);
            s.state.current_point = posterior.mean();
        }
    }

    ServiceConfig cfg_;
    std::vector<std::vector<double>> candidate_rows_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable idle_cv_;
    std::map<std::string, Session> sessions_;
    std::vector<std::pair<Respondent, AnswerRow>> pending_;
    std::optional<std::chrono::steady_clock::time_point> pending_since_;
    TrainingPool pool_;
    std::size_t refits_done_ = 0;
    std::size_t finished_count_ = 0;
    bool refitting_ = false;
    bool stopping_ = false;
    std::mt19937_64 id_rng_;
    std::ofstream events_;

    mutable std::mutex model_mu_;
    std::shared_ptr<const TrainedModel> model_;

    std::thread worker_;
};

}  // namespace adaptq
