#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csv.hpp"
#include "errors.hpp"

namespace adaptq {

inline constexpr int kMinLevels = 4;
inline constexpr int kMaxLevels = 7;

struct Question {
    int id = 0;
    std::string text;
    int levels = kMinLevels;

    friend bool operator==(const Question&, const Question&) = default;
};

/// Ordered question list; position defines the column index everywhere.
class Questionnaire {
public:
    Questionnaire() = default;
    explicit Questionnaire(std::vector<Question> questions) : questions_(std::move(questions)) { validate(); }

    std::size_t size() const noexcept { return questions_.size(); }
    const Question& operator[](std::size_t k) const { return questions_.at(k); }
    const std::vector<Question>& questions() const noexcept { return questions_; }

    auto begin() const noexcept { return questions_.begin(); }
    auto end() const noexcept { return questions_.end(); }

    friend bool operator==(const Questionnaire&, const Questionnaire&) = default;

private:
    void validate() const {
        if (questions_.empty()) throw LoadError("questionnaire: at least one question is required");
        for (std::size_t k = 0; k < questions_.size(); ++k) {
            const auto& q = questions_[k];
            if (q.levels < kMinLevels || q.levels > kMaxLevels)
                throw LoadError("questionnaire entry " + std::to_string(k) + ": levels " +
                                std::to_string(q.levels) + " outside [4,7]");
            if (q.id != static_cast<int>(k))
                throw LoadError("questionnaire entry " + std::to_string(k) + ": id " + std::to_string(q.id) +
                                " breaks the contiguous 0-based id sequence");
        }
    }

    std::vector<Question> questions_;
};

/// Normalized answer in [0,1]; nullopt means missing.
using Answer = std::optional<double>;
using AnswerRow = std::vector<Answer>;

enum class RespondentKind { candidate, voter, synthetic };

inline std::string to_string(RespondentKind kind) {
    switch (kind) {
        case RespondentKind::candidate: return "candidate";
        case RespondentKind::voter: return "voter";
        case RespondentKind::synthetic: return "synthetic";
    }
    return "unknown";
}

inline RespondentKind parse_kind(const std::string& s) {
    if (s == "candidate") return RespondentKind::candidate;
    if (s == "voter") return RespondentKind::voter;
    if (s == "synthetic") return RespondentKind::synthetic;
    throw InputError("unknown respondent kind '" + s + "'");
}

struct Respondent {
    std::string id;
    RespondentKind kind = RespondentKind::voter;
    std::optional<std::string> party;

    friend bool operator==(const Respondent&, const Respondent&) = default;
};

/// Respondents x questions grid of optional normalized answers.
struct ResponseMatrix {
    std::vector<Respondent> respondents;
    std::vector<AnswerRow> answers;
    std::size_t num_questions = 0;

    ResponseMatrix() = default;
    explicit ResponseMatrix(std::size_t questions) : num_questions(questions) {}

    std::size_t rows() const noexcept { return answers.size(); }
    std::size_t cols() const noexcept { return num_questions; }
    bool empty() const noexcept { return answers.empty(); }

    void add_row(Respondent who, AnswerRow row) {
        if (row.size() != num_questions)
            throw InputError("row for '" + who.id + "' has " + std::to_string(row.size()) + " answers, expected " +
                             std::to_string(num_questions));
        for (const auto& a : row)
            if (a && !(*a >= 0.0 && *a <= 1.0)) throw InputError("answer outside [0,1] in row '" + who.id + "'");
        respondents.push_back(std::move(who));
        answers.push_back(std::move(row));
    }

    friend bool operator==(const ResponseMatrix&, const ResponseMatrix&) = default;
};

struct PartyMean {
    std::string party;
    AnswerRow mean;
    AnswerRow per_question_std;
    std::size_t count = 0;
};

struct PartyShare {
    std::string party;
    double fraction = 0.0;
};

inline double normalize_likert(int raw_index, int levels) {
    if (levels < 2) throw InputError("normalize_likert: levels must be >= 2, got " + std::to_string(levels));
    if (raw_index < 0 || raw_index >= levels)
        throw InputError("normalize_likert: index " + std::to_string(raw_index) + " outside [0," +
                         std::to_string(levels - 1) + "]");
    return static_cast<double>(raw_index) / static_cast<double>(levels - 1);
}

/// Inverse of normalize_likert for values that came from it.
inline int likert_index(double value, int levels) {
    return static_cast<int>(std::lround(value * static_cast<double>(levels - 1)));
}

// ---------------------------------------------------------------------------
// Questionnaire JSON: [{"id":0,"text":"...","levels":4}, ...]

inline Questionnaire parse_questionnaire(const nlohmann::json& doc) {
    if (!doc.is_array()) throw LoadError("questionnaire: top-level JSON value must be an array");
    std::vector<Question> questions;
    std::map<int, std::size_t> seen;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto& e = doc[i];
        const std::string ctx = "questionnaire entry " + std::to_string(i);
        if (!e.is_object() || !e.contains("id") || !e.contains("text") || !e.contains("levels"))
            throw LoadError(ctx + ": expected object with id, text, levels");
        if (!e["id"].is_number_integer() || !e["levels"].is_number_integer() || !e["text"].is_string())
            throw LoadError(ctx + ": wrong field types");
        Question q{e["id"].get<int>(), e["text"].get<std::string>(), e["levels"].get<int>()};
        if (auto [it, fresh] = seen.emplace(q.id, i); !fresh)
            throw LoadError(ctx + ": duplicate id " + std::to_string(q.id) + " (first at entry " +
                            std::to_string(it->second) + ")");
        questions.push_back(std::move(q));
    }
    std::sort(questions.begin(), questions.end(), [](const Question& a, const Question& b) { return a.id < b.id; });
    return Questionnaire(std::move(questions));
}

inline nlohmann::json to_json(const Questionnaire& questionnaire) {
    auto doc = nlohmann::json::array();
    for (const auto& q : questionnaire) doc.push_back({{"id", q.id}, {"text", q.text}, {"levels", q.levels}});
    return doc;
}

inline Questionnaire load_questionnaire(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open questionnaire file '" + path + "'");
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw LoadError("questionnaire '" + path + "': malformed JSON: " + e.what());
    }
    return parse_questionnaire(doc);
}

// ---------------------------------------------------------------------------
// Responses CSV: id,party,q0,...,q{Q-1}.
// Candidate and voter cells are raw Likert indices. Synthetic cells hold
// normalized reals, since LLM and interpolated answers are not on a Likert grid.

namespace detail {

inline void check_header(const std::vector<std::string>& header, std::size_t questions, const std::string& ctx) {
    if (header.size() != questions + 2)
        throw LoadError(ctx + " header: expected " + std::to_string(questions + 2) + " columns, found " +
                        std::to_string(header.size()));
    if (csv::trim(header[0]) != "id" || csv::trim(header[1]) != "party")
        throw LoadError(ctx + " header: must start with id,party");
    for (std::size_t k = 0; k < questions; ++k)
        if (csv::trim(header[k + 2]) != "q" + std::to_string(k))
            throw LoadError(ctx + " header: column " + std::to_string(k + 2) + " must be q" + std::to_string(k));
}

inline std::string cell_ctx(const std::string& ctx, std::size_t line, std::size_t column) {
    return ctx + " line " + std::to_string(line) + " column " + std::to_string(column + 1);
}

}  // namespace detail

inline ResponseMatrix read_responses(std::istream& in, const Questionnaire& questionnaire, RespondentKind kind,
                                     const std::string& ctx = "responses") {
    const std::size_t nq = questionnaire.size();
    std::string line;
    if (!csv::read_line(in, line)) throw LoadError(ctx + ": missing header");
    detail::check_header(csv::split_record(line), nq, ctx);

    ResponseMatrix matrix(nq);
    std::size_t line_no = 1;
    while (csv::read_line(in, line)) {
        ++line_no;
        if (csv::trim(line).empty()) continue;
        auto fields = csv::split_record(line);
        if (fields.size() != nq + 2)
            throw LoadError(ctx + " line " + std::to_string(line_no) + ": expected " + std::to_string(nq + 2) +
                            " columns, found " + std::to_string(fields.size()));
        Respondent who{std::string(csv::trim(fields[0])), kind, std::nullopt};
        if (auto party = csv::trim(fields[1]); !party.empty()) who.party = std::string(party);
        // synthetic mixtures (GPTvoters) have no single party, so only candidates must carry one
        if (kind == RespondentKind::candidate && !who.party)
            throw LoadError(detail::cell_ctx(ctx, line_no, 1) + ": candidate row requires a party");

        AnswerRow row(nq);
        for (std::size_t k = 0; k < nq; ++k) {
            const auto cell = csv::trim(fields[k + 2]);
            if (cell.empty()) continue;
            if (kind == RespondentKind::synthetic) {
                auto v = csv::parse_double(cell);
                if (!v || *v < 0.0 || *v > 1.0)
                    throw LoadError(detail::cell_ctx(ctx, line_no, k + 2) + ": '" + std::string(cell) +
                                    "' is not a value in [0,1]");
                row[k] = *v;
            } else {
                auto idx = csv::parse_int(cell);
                if (!idx)
                    throw LoadError(detail::cell_ctx(ctx, line_no, k + 2) + ": '" + std::string(cell) +
                                    "' is not an integer");
                const int levels = questionnaire[k].levels;
                if (*idx < 0 || *idx >= levels)
                    throw LoadError(detail::cell_ctx(ctx, line_no, k + 2) + ": index " + std::to_string(*idx) +
                                    " outside [0," + std::to_string(levels - 1) + "]");
                row[k] = normalize_likert(static_cast<int>(*idx), levels);
            }
        }
        matrix.add_row(std::move(who), std::move(row));
    }
    return matrix;
}

inline ResponseMatrix load_responses(const std::string& path, const Questionnaire& questionnaire,
                                     RespondentKind kind) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open responses file '" + path + "'");
    return read_responses(in, questionnaire, kind, path);
}

/// Synthetic CSVs carry no Likert metadata; the question count comes from the header.
inline ResponseMatrix read_synthetic(std::istream& in, const std::string& ctx = "synthetic") {
    std::string header;
    if (!csv::read_line(in, header)) throw LoadError(ctx + ": missing header");
    const auto fields = csv::split_record(header);
    if (fields.size() < 3) throw LoadError(ctx + " header: needs id,party and at least one question column");
    std::vector<Question> qs;
    for (std::size_t k = 0; k + 2 < fields.size(); ++k) qs.push_back({static_cast<int>(k), "", kMinLevels});
    std::stringstream rest;
    rest << header << '\n' << in.rdbuf();
    return read_responses(rest, Questionnaire(std::move(qs)), RespondentKind::synthetic, ctx);
}

inline ResponseMatrix load_synthetic(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open synthetic file '" + path + "'");
    return read_synthetic(in, path);
}

/// Writes rows in the schema read_responses expects for each row's kind.
/// Likert rows need a questionnaire; synthetic-only matrices may pass nullptr.
inline void write_responses(std::ostream& out, const ResponseMatrix& matrix, const Questionnaire* questionnaire) {
    out << "id,party";
    for (std::size_t k = 0; k < matrix.cols(); ++k) out << ",q" << k;
    out << '\n';
    for (std::size_t n = 0; n < matrix.rows(); ++n) {
        const auto& who = matrix.respondents[n];
        out << csv::quote(who.id) << ',' << csv::quote(who.party.value_or(""));
        for (std::size_t k = 0; k < matrix.cols(); ++k) {
            out << ',';
            const auto& a = matrix.answers[n][k];
            if (!a) continue;
            if (who.kind == RespondentKind::synthetic) {
                out << csv::format_double(*a);
            } else {
                if (!questionnaire) throw InputError("write_responses: Likert rows need the questionnaire");
                out << likert_index(*a, (*questionnaire)[k].levels);
            }
        }
        out << '\n';
    }
}

inline void save_responses(const std::string& path, const ResponseMatrix& matrix,
                           const Questionnaire* questionnaire = nullptr) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write responses file '" + path + "'");
    write_responses(out, matrix, questionnaire);
}

// ---------------------------------------------------------------------------
// Party results CSV: party,fraction (fractions sum to 1 within 1e-6).

inline std::vector<PartyShare> read_party_results(std::istream& in, const std::string& ctx = "party results") {
    std::string line;
    if (!csv::read_line(in, line)) throw LoadError(ctx + ": missing header");
    auto header = csv::split_record(line);
    if (header.size() != 2 || csv::trim(header[0]) != "party" || csv::trim(header[1]) != "fraction")
        throw LoadError(ctx + ": header must be party,fraction");
    std::vector<PartyShare> shares;
    double total = 0.0;
    std::size_t line_no = 1;
    while (csv::read_line(in, line)) {
        ++line_no;
        if (csv::trim(line).empty()) continue;
        auto f = csv::split_record(line);
        if (f.size() != 2) throw LoadError(ctx + " line " + std::to_string(line_no) + ": expected 2 columns");
        auto v = csv::parse_double(f[1]);
        if (!v || *v <= 0.0)
            throw LoadError(ctx + " line " + std::to_string(line_no) + ": fraction must be a positive number");
        shares.push_back({std::string(csv::trim(f[0])), *v});
        total += *v;
    }
    if (shares.empty()) throw LoadError(ctx + ": no parties");
    if (std::abs(total - 1.0) > 1e-6)
        throw LoadError(ctx + ": fractions sum to " + csv::format_double(total) + ", expected 1");
    return shares;
}

inline std::vector<PartyShare> load_party_results(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open party results file '" + path + "'");
    return read_party_results(in, path);
}

// ---------------------------------------------------------------------------

/// Per-party mean and population std over present answers only.
/// Parties are returned in order of first appearance.
inline std::vector<PartyMean> party_means(const ResponseMatrix& matrix) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t n = 0; n < matrix.rows(); ++n) {
        const auto& party = matrix.respondents[n].party;
        if (!party) continue;
        auto [it, fresh] = members.try_emplace(*party);
        if (fresh) order.push_back(*party);
        it->second.push_back(n);
    }
    if (order.empty()) throw InputError("party_means: no respondent carries a party label");

    std::vector<PartyMean> result;
    for (const auto& party : order) {
        const auto& rows = members[party];
        PartyMean pm{party, AnswerRow(matrix.cols()), AnswerRow(matrix.cols()), rows.size()};
        for (std::size_t k = 0; k < matrix.cols(); ++k) {
            double sum = 0.0;
            std::size_t n = 0;
            for (auto r : rows)
                if (const auto& a = matrix.answers[r][k]) {
                    sum += *a;
                    ++n;
                }
            if (n == 0) continue;
            const double mean = sum / static_cast<double>(n);
            double ss = 0.0;
            for (auto r : rows)
                if (const auto& a = matrix.answers[r][k]) ss += (*a - mean) * (*a - mean);
            pm.mean[k] = mean;
            pm.per_question_std[k] = std::sqrt(ss / static_cast<double>(n));
        }
        result.push_back(std::move(pm));
    }
    return result;
}

/// Fills gaps with the column mean over present values (0.5 for empty columns).
inline std::vector<std::vector<double>> complete_by_column_mean(const ResponseMatrix& matrix) {
    std::vector<double> means(matrix.cols(), 0.5);
    for (std::size_t k = 0; k < matrix.cols(); ++k) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& row : matrix.answers)
            if (row[k]) {
                sum += *row[k];
                ++n;
            }
        if (n > 0) means[k] = sum / static_cast<double>(n);
    }
    std::vector<std::vector<double>> full(matrix.rows(), std::vector<double>(matrix.cols()));
    for (std::size_t n = 0; n < matrix.rows(); ++n)
        for (std::size_t k = 0; k < matrix.cols(); ++k) full[n][k] = matrix.answers[n][k].value_or(means[k]);
    return full;
}

}  // namespace adaptq
