#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lwaft/error.hpp"
#include "lwaft/tasks.hpp"

namespace lwaft {

/// Decodes UTF-8 into code points. Each byte of a malformed sequence
/// becomes one U+FFFD so the result is total and deterministic.
inline std::u32string utf8_codepoints(std::string_view s) {
    std::u32string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const auto b0 = static_cast<unsigned char>(s[i]);
        std::size_t len = 0;
        char32_t cp = 0;
        if (b0 < 0x80) {
            len = 1;
            cp = b0;
        } else if ((b0 & 0xE0) == 0xC0) {
            len = 2;
            cp = b0 & 0x1F;
        } else if ((b0 & 0xF0) == 0xE0) {
            len = 3;
            cp = b0 & 0x0F;
        } else if ((b0 & 0xF8) == 0xF0) {
            len = 4;
            cp = b0 & 0x07;
        }
        bool ok = len > 0 && i + len <= s.size();
        for (std::size_t k = 1; ok && k < len; ++k) {
            const auto b = static_cast<unsigned char>(s[i + k]);
            ok = (b & 0xC0) == 0x80;
            cp = (cp << 6) | (b & 0x3F);
        }
        // reject overlong forms, surrogates and out-of-range values
        static constexpr char32_t min_for_len[] = {0, 0, 0x80, 0x800, 0x10000};
        ok = ok && cp >= min_for_len[len] && cp <= 0x10FFFF && !(cp >= 0xD800 && cp <= 0xDFFF);
        if (ok) {
            out.push_back(cp);
            i += len;
        } else {
            out.push_back(U'\uFFFD');
            ++i;
        }
    }
    return out;
}

/// Levenshtein distance with unit costs, two-row DP.
inline std::size_t edit_distance(std::u32string_view a, std::u32string_view b) {
    if (a.size() < b.size()) {
        std::swap(a, b);
    }
    std::vector<std::size_t> prev(b.size() + 1);
    std::vector<std::size_t> cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) {
        prev[j] = j;
    }
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
    return edit_distance(utf8_codepoints(a), utf8_codepoints(b));
}

/// Edit distance over the longer length; two empty strings give 0.
inline double ned(std::string_view prediction, std::string_view truth) {
    const auto a = utf8_codepoints(prediction);
    const auto b = utf8_codepoints(truth);
    const auto longest = std::max(a.size(), b.size());
    if (longest == 0) {
        return 0.0;
    }
    return static_cast<double>(edit_distance(a, b)) / static_cast<double>(longest);
}

/// Trims and collapses every whitespace run to one space.
inline std::string normalize_whitespace(std::string_view s) {
    std::string out;
    bool pending = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c)) != 0) {
            pending = !out.empty();
        } else {
            if (pending) {
                out += ' ';
                pending = false;
            }
            out += c;
        }
    }
    return out;
}

/// First standalone option letter, scanning left to right. A letter is
/// standalone when neither neighbour is alphanumeric. Case-insensitive.
inline std::optional<char> parse_choice(std::string_view prediction, std::string_view options) {
    const auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const char c = prediction[i];
        if (std::isalpha(static_cast<unsigned char>(c)) == 0) {
            continue;
        }
        if ((i > 0 && alnum(prediction[i - 1])) || (i + 1 < prediction.size() && alnum(prediction[i + 1]))) {
            continue;
        }
        const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        if (options.find(up) != std::string_view::npos) {
            return up;
        }
    }
    return std::nullopt;
}

enum class ScoreDetail : std::uint8_t { ned, choice, parse_failure };

struct CaseScore {
    std::string case_id;
    double score = 0.0;
    ScoreDetail detail = ScoreDetail::parse_failure;
    double ned_value = 1.0; // meaningful for ScoreDetail::ned
    bool correct = false;   // meaningful for ScoreDetail::choice
};

struct ScoreOptions {
    bool normalize_whitespace = false;
};

inline CaseScore case_score(std::string_view prediction, const TaskCase& c, const ScoreOptions& opts = {}) {
    CaseScore s;
    s.case_id = c.case_id;
    if (c.answer_kind == AnswerKind::choice) {
        const auto letter = parse_choice(prediction, c.options);
        if (!letter) {
            s.detail = ScoreDetail::parse_failure;
            s.score = 0.0;
            return s;
        }
        s.detail = ScoreDetail::choice;
        s.correct = std::string(1, *letter) == c.ground_truth;
        s.score = s.correct ? 1.0 : 0.0;
        return s;
    }
    s.detail = ScoreDetail::ned;
    s.ned_value = opts.normalize_whitespace
                      ? ned(normalize_whitespace(prediction), normalize_whitespace(c.ground_truth))
                      : ned(prediction, c.ground_truth);
    s.score = 1.0 - s.ned_value;
    return s;
}

inline CaseScore missing_prediction(const std::string& case_id) {
    CaseScore s;
    s.case_id = case_id;
    s.detail = ScoreDetail::parse_failure;
    return s;
}

/// Scores each case against its prediction. A case with no prediction
/// scores 0 and is flagged as a parse failure.
inline std::vector<CaseScore> score_predictions(const std::map<std::string, std::string>& predictions,
                                                const std::vector<TaskCase>& cases, const ScoreOptions& opts = {}) {
    std::vector<CaseScore> out;
    out.reserve(cases.size());
    for (const auto& c : cases) {
        auto it = predictions.find(c.case_id);
        out.push_back(it == predictions.end() ? missing_prediction(c.case_id) : case_score(it->second, c, opts));
    }
    return out;
}

struct GridCell {
    double mean = 0.0;
    std::size_t count = 0;
};

struct BenchReport {
    double overall = 0.0;
    std::size_t n = 0;
    std::size_t parse_failures = 0;
    std::map<std::string, GridCell> grid; // keyed "R1V2"; only cells that have cases

    [[nodiscard]] std::optional<GridCell> cell(RLevel r, VLevel v) const {
        auto it = grid.find(cell_name(r, v));
        if (it == grid.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json cells = nlohmann::json::object();
        for (const auto& [name, c] : grid) {
            cells[name] = {{"mean", c.mean}, {"count", c.count}};
        }
        return {{"overall", overall}, {"n", n}, {"parse_failures", parse_failures}, {"grid", cells}};
    }

    static BenchReport from_json(const nlohmann::json& j) {
        BenchReport r;
        r.overall = j.at("overall").get<double>();
        r.n = j.at("n").get<std::size_t>();
        r.parse_failures = j.value("parse_failures", std::size_t{0});
        for (const auto& [name, c] : j.at("grid").items()) {
            r.grid[name] = {c.at("mean").get<double>(), c.at("count").get<std::size_t>()};
        }
        return r;
    }

    /// Rows R0-R2, columns V0-V2, then the overall mean. Empty cells print "-".
    [[nodiscard]] std::string table() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(3);
        os << "  ";
        for (auto v : all_v_levels) {
            os << std::setw(7) << to_string(v);
        }
        os << '\n';
        for (auto r : all_r_levels) {
            os << to_string(r);
            for (auto v : all_v_levels) {
                const auto c = cell(r, v);
                if (c) {
                    os << std::setw(7) << c->mean;
                } else {
                    os << std::setw(7) << "-";
                }
            }
            os << '\n';
        }
        os << "Overall " << overall << "  (N=" << n << ")\n";
        return os.str();
    }
};

/// Mean over all cases plus per-(R,V) means. Scores are matched to cases by
/// id; a case without a score counts as a 0-scored parse failure.
inline BenchReport aggregate(const std::vector<CaseScore>& scores, const std::vector<TaskCase>& cases) {
    require(!cases.empty(), "aggregate: no cases");
    std::map<std::string_view, const CaseScore*> by_id;
    for (const auto& s : scores) {
        require(s.score >= 0.0 && s.score <= 1.0, "aggregate: score out of [0, 1] for " + s.case_id);
        by_id[s.case_id] = &s;
    }
    BenchReport r;
    std::map<std::string, double> sums;
    double total = 0.0;
    for (const auto& c : cases) {
        auto it = by_id.find(c.case_id);
        const double score = it == by_id.end() ? 0.0 : it->second->score;
        const bool failed = it == by_id.end() || it->second->detail == ScoreDetail::parse_failure;
        r.parse_failures += failed ? 1 : 0;
        total += score;
        const auto name = cell_name(c.tags.r_level, c.tags.v_level);
        sums[name] += score;
        ++r.grid[name].count;
    }
    r.n = cases.size();
    r.overall = total / static_cast<double>(r.n);
    for (auto& [name, cell] : r.grid) {
        cell.mean = sums[name] / static_cast<double>(cell.count);
    }
    return r;
}

// Predictions file: one {"case_id": ..., "prediction": ...} object per line.

inline std::string predictions_to_ndjson(const std::map<std::string, std::string>& predictions) {
    std::string out;
    for (const auto& [id, pred] : predictions) {
        out += nlohmann::json{{"case_id", id}, {"prediction", pred}}.dump();
        out += '\n';
    }
    return out;
}

inline std::map<std::string, std::string> parse_predictions_ndjson(std::string_view text, const std::string& what) {
    std::map<std::string, std::string> out;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            nl = text.size();
        }
        const auto line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            const auto id = j.at("case_id").get<std::string>();
            if (!out.emplace(id, j.at("prediction").get<std::string>()).second) {
                throw ValidationError(what + ":" + std::to_string(line_no) + ": duplicate case_id '" + id + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(what + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

} // namespace lwaft
