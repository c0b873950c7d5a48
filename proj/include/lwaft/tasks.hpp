#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lwaft/error.hpp"
#include "lwaft/hash.hpp"
#include "lwaft/rng.hpp"

namespace lwaft {

enum class RLevel : std::uint8_t { R0 = 0, R1 = 1, R2 = 2 };
enum class VLevel : std::uint8_t { V0 = 0, V1 = 1, V2 = 2 };

inline constexpr std::array<RLevel, 3> all_r_levels{RLevel::R0, RLevel::R1, RLevel::R2};
inline constexpr std::array<VLevel, 3> all_v_levels{VLevel::V0, VLevel::V1, VLevel::V2};

inline std::string to_string(RLevel r) { return "R" + std::to_string(static_cast<int>(r)); }
inline std::string to_string(VLevel v) { return "V" + std::to_string(static_cast<int>(v)); }
inline std::string cell_name(RLevel r, VLevel v) { return to_string(r) + to_string(v); }

inline RLevel parse_r_level(std::string_view s) {
    for (auto r : all_r_levels) {
        if (s == to_string(r)) {
            return r;
        }
    }
    throw ValidationError("unknown reasoning level '" + std::string(s) + "'");
}

inline VLevel parse_v_level(std::string_view s) {
    for (auto v : all_v_levels) {
        if (s == to_string(v)) {
            return v;
        }
    }
    throw ValidationError("unknown structure level '" + std::string(s) + "'");
}

/// Task family for each reasoning level.
inline std::string task_type_of(RLevel r) {
    switch (r) {
    case RLevel::R0:
        return "transcribe";
    case RLevel::R1:
        return "lookup";
    case RLevel::R2:
        return "compare";
    }
    return "";
}

/// Characters that mark structure. Plain prose (V0) never contains them.
inline constexpr std::string_view structure_delimiters = ":|=[];";

/// A synthetic document family: key vocabulary, value range and layout style.
struct DomainGrammar {
    std::string name;
    std::string title_key;
    std::vector<std::string> titles; // fixed title list, used when title_syllables is 0
    // generated titles: title_syllables picks of (consonant, vowel)
    int title_syllables = 0;
    std::string title_consonants = "bdfgklmnprstvz";
    std::string title_vowels = "aeiou";
    std::vector<std::string> keys; // numeric fields
    int value_lo = 10;
    int value_hi = 99;
    char kv_sep = ':';
    char rec_sep = ';';
    char col_sep = '|';
    // prose: "<prefix><title> <verb> <a> and <b>." where a field reads "<v> <k>" or "<k> <v>"
    std::string prose_prefix;
    std::string prose_verb = "has";
    std::string prose_join = "and";
    bool prose_key_first = false;
};

inline const std::vector<DomainGrammar>& builtin_domains() {
    static const std::vector<DomainGrammar> domains = [] {
        std::vector<DomainGrammar> d;
        DomainGrammar gazette;
        gazette.name = "gazette";
        gazette.title_key = "town";
        gazette.title_syllables = 2;
        gazette.keys = {"inns", "mills", "wells", "farms", "docks", "barns", "forts", "gates"};
        gazette.kv_sep = ':';
        gazette.rec_sep = ';';
        gazette.col_sep = '|';
        gazette.prose_verb = "has";
        gazette.prose_join = "and";
        d.push_back(gazette);

        DomainGrammar ledger;
        ledger.name = "ledger";
        ledger.title_key = "acct";
        ledger.titles = {"k7", "m2", "q9", "t4", "w1", "x8", "z3", "r6", "b5", "d0", "h3", "n8"};
        ledger.keys = {"tax", "net", "fee", "due", "qty", "vat", "cost", "rent"};
        ledger.kv_sep = '=';
        ledger.rec_sep = ',';
        ledger.col_sep = '/';
        ledger.prose_prefix = "acct ";
        ledger.prose_verb = "paid";
        ledger.prose_join = "plus";
        ledger.prose_key_first = true;
        d.push_back(ledger);

        DomainGrammar chartnote;
        chartnote.name = "chartnote";
        chartnote.title_key = "ward";
        chartnote.titles = {"oak", "elm", "ash", "fir", "yew", "bay", "ivy", "rye"};
        chartnote.keys = {"hr", "bp", "temp", "dose", "resp", "gluc", "sats", "pain"};
        chartnote.kv_sep = ':';
        chartnote.rec_sep = ' ';
        chartnote.col_sep = '|';
        chartnote.prose_prefix = "ward ";
        chartnote.prose_verb = "logs";
        chartnote.prose_join = "then";
        chartnote.prose_key_first = true;
        d.push_back(chartnote);
        return d;
    }();
    return domains;
}

inline const DomainGrammar& domain_grammar(std::string_view name) {
    for (const auto& d : builtin_domains()) {
        if (d.name == name) {
            return d;
        }
    }
    throw ValidationError("unknown domain '" + std::string(name) + "'");
}

struct Field {
    std::string key;
    std::string value;
    bool numeric = false;
    bool operator==(const Field&) const = default;
};

/// A contiguous span of the rendered text. logical_index is -1 for distractors.
struct Segment {
    std::string label;
    std::size_t begin = 0;
    std::size_t end = 0;
    int logical_index = -1;
    bool operator==(const Segment&) const = default;
};

struct Annotations {
    std::string layout; // prose, records, table, segments
    std::string title;
    std::vector<Field> fields; // logical order; the title field comes first
    std::vector<Field> distractors;
    std::vector<Segment> segments; // in rendered order
    bool operator==(const Annotations&) const = default;

    [[nodiscard]] const Field* find(std::string_view key) const {
        for (const auto& f : fields) {
            if (f.key == key) {
                return &f;
            }
        }
        return nullptr;
    }
};

struct RenderedDoc {
    std::string text;
    Annotations annotations;
    VLevel v_level = VLevel::V0;
    std::string domain;
};

/// Longest document the generator will emit. With the query and a full
/// transcription answer every case still fits a 96-token context.
inline constexpr std::size_t max_doc_len = 46;

namespace detail {

inline std::string kv(const DomainGrammar& g, const Field& f) { return f.key + g.kv_sep + f.value; }

inline std::vector<Field> draw_fields(const DomainGrammar& g, Rng& rng, std::size_t numeric_count) {
    std::vector<Field> fields;
    std::string title;
    if (g.title_syllables > 0) {
        for (int i = 0; i < g.title_syllables; ++i) {
            title += g.title_consonants[rng.below(g.title_consonants.size())];
            title += g.title_vowels[rng.below(g.title_vowels.size())];
        }
    } else {
        title = g.titles[rng.below(g.titles.size())];
    }
    fields.push_back({g.title_key, title, false});
    std::vector<std::size_t> idx(g.keys.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    rng.shuffle(std::span(idx));
    for (std::size_t i = 0; i < numeric_count; ++i) {
        fields.push_back({g.keys[idx[i]], std::to_string(rng.between(g.value_lo, g.value_hi)), true});
    }
    return fields;
}

inline std::string prose_field(const DomainGrammar& g, const Field& f) {
    return g.prose_key_first ? f.key + " " + f.value : f.value + " " + f.key;
}

} // namespace detail

/// Deterministic document for (level, domain, seed).
/// V0: one sentence of prose. V1: key/value records or a two-row table.
/// V2: labelled segments in shuffled order with one distractor segment.
inline RenderedDoc render_document(VLevel v, const DomainGrammar& g, std::uint64_t doc_seed) {
    Rng rng(derive_seed(doc_seed, "doc"));
    RenderedDoc doc;
    doc.v_level = v;
    doc.domain = g.name;
    auto& ann = doc.annotations;
    std::ostringstream os;
    switch (v) {
    case VLevel::V0: {
        ann.layout = "prose";
        ann.fields = detail::draw_fields(g, rng, 2 + rng.below(2));
        ann.title = ann.fields[0].value;
        os << g.prose_prefix << ann.title << ' ' << g.prose_verb << ' ';
        for (std::size_t i = 1; i < ann.fields.size(); ++i) {
            if (i > 1) {
                os << (i + 1 == ann.fields.size() ? " " + g.prose_join + " " : std::string(", "));
            }
            os << detail::prose_field(g, ann.fields[i]);
        }
        os << '.';
        ann.segments.push_back({"body", 0, os.str().size(), 0});
        break;
    }
    case VLevel::V1: {
        ann.fields = detail::draw_fields(g, rng, 2 + rng.below(2));
        ann.title = ann.fields[0].value;
        if (rng.below(2) == 0) {
            ann.layout = "records";
            for (std::size_t i = 0; i < ann.fields.size(); ++i) {
                const auto begin = os.str().size();
                if (i > 0) {
                    os << g.rec_sep;
                }
                os << detail::kv(g, ann.fields[i]);
                ann.segments.push_back({"rec", begin, os.str().size(), static_cast<int>(i)});
            }
        } else {
            ann.layout = "table";
            for (std::size_t i = 0; i < ann.fields.size(); ++i) {
                os << (i > 0 ? std::string(1, g.col_sep) : "") << ann.fields[i].key;
            }
            ann.segments.push_back({"header", 0, os.str().size(), -1});
            os << g.rec_sep;
            const auto begin = os.str().size();
            for (std::size_t i = 0; i < ann.fields.size(); ++i) {
                os << (i > 0 ? std::string(1, g.col_sep) : "") << ann.fields[i].value;
            }
            ann.segments.push_back({"row", begin, os.str().size(), -1});
        }
        break;
    }
    case VLevel::V2: {
        ann.layout = "segments";
        ann.fields = detail::draw_fields(g, rng, 2);
        ann.title = ann.fields[0].value;
        // distractor key is drawn from the keys not used by the real fields
        std::vector<std::string> unused;
        for (const auto& k : g.keys) {
            if (ann.find(k) == nullptr) {
                unused.push_back(k);
            }
        }
        ann.distractors.push_back(
            {unused[rng.below(unused.size())], std::to_string(rng.between(g.value_lo, g.value_hi)), true});
        std::vector<int> order(ann.fields.size() + 1);
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = static_cast<int>(i);
        }
        rng.shuffle(std::span(order));
        // the real segments must not come out in logical order
        std::vector<int> real;
        for (int o : order) {
            if (o < static_cast<int>(ann.fields.size())) {
                real.push_back(o);
            }
        }
        if (std::is_sorted(real.begin(), real.end())) {
            for (auto& o : order) {
                if (o == real[0]) {
                    o = real[1];
                } else if (o == real[1]) {
                    o = real[0];
                }
            }
        }
        for (int o : order) {
            const auto begin = os.str().size();
            const bool distractor = o == static_cast<int>(ann.fields.size());
            const auto label = distractor ? std::string("x") : std::to_string(o + 1);
            os << '[' << label << ']' << detail::kv(g, distractor ? ann.distractors[0] : ann.fields[o]);
            ann.segments.push_back({label, begin, os.str().size(), distractor ? -1 : o});
        }
        break;
    }
    }
    doc.text = os.str();
    if (doc.text.size() > max_doc_len) {
        throw RuntimeFailure("render_document: document exceeds " + std::to_string(max_doc_len) + " characters");
    }
    return doc;
}

/// Fields in logical order as "k<kv>v" joined by the record separator.
inline std::string canonical_linearization(const Annotations& ann, const DomainGrammar& g) {
    std::string out;
    for (std::size_t i = 0; i < ann.fields.size(); ++i) {
        if (i > 0) {
            out += g.rec_sep;
        }
        out += detail::kv(g, ann.fields[i]);
    }
    return out;
}

enum class AnswerKind : std::uint8_t { free_text, choice };

struct CaseTags {
    RLevel r_level = RLevel::R0;
    VLevel v_level = VLevel::V0;
    std::string domain;
    std::string task_type;
    bool operator==(const CaseTags&) const = default;
};

struct TaskCase {
    std::string case_id;
    std::string prompt;
    std::string ground_truth;
    AnswerKind answer_kind = AnswerKind::free_text;
    std::string options; // option letters for choice cases
    CaseTags tags;
    std::uint64_t doc_seed = 0;
    bool operator==(const TaskCase&) const = default;
};

inline constexpr std::string_view choice_letters = "ABC";

/// Turns a document into one question. R0 transcribes, R1 reads one field,
/// R2 asks which of two numeric fields is larger (or "eq").
inline TaskCase make_case(RLevel r, const RenderedDoc& doc, std::uint64_t case_seed) {
    const auto& g = domain_grammar(doc.domain);
    const auto& ann = doc.annotations;
    Rng rng(derive_seed(case_seed, "case"));
    TaskCase c;
    c.tags = {r, doc.v_level, doc.domain, task_type_of(r)};
    switch (r) {
    case RLevel::R0:
        c.prompt = doc.text + " ?all>";
        c.ground_truth = doc.v_level == VLevel::V0 ? doc.text : canonical_linearization(ann, g);
        break;
    case RLevel::R1: {
        if (ann.fields.empty()) {
            throw ValidationError("make_case: document has no keys to look up");
        }
        const auto& f = ann.fields[rng.below(ann.fields.size())];
        c.prompt = doc.text + " ?" + f.key + ">";
        c.ground_truth = f.value;
        break;
    }
    case RLevel::R2: {
        std::vector<const Field*> numeric;
        for (const auto& f : ann.fields) {
            if (f.numeric) {
                numeric.push_back(&f);
            }
        }
        if (numeric.size() < 2) {
            throw ValidationError("make_case: comparison needs two numeric fields");
        }
        rng.shuffle(std::span(numeric));
        const Field* a = numeric[0];
        const Field* b = numeric[1];
        std::vector<std::string> opts{a->key, b->key, "eq"};
        rng.shuffle(std::span(opts));
        const int va = std::stoi(a->value);
        const int vb = std::stoi(b->value);
        const std::string winner = va > vb ? a->key : (vb > va ? b->key : "eq");
        c.prompt = doc.text + " ?";
        for (std::size_t i = 0; i < opts.size(); ++i) {
            c.prompt += (i > 0 ? " " : "") + std::string(1, choice_letters[i]) + "=" + opts[i];
            if (opts[i] == winner) {
                c.ground_truth = std::string(1, choice_letters[i]);
            }
        }
        c.prompt += ">";
        c.answer_kind = AnswerKind::choice;
        c.options = std::string(choice_letters);
        break;
    }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Suites

struct SuiteConfig {
    std::string name = "suite";
    std::array<std::array<std::size_t, 3>, 3> counts{}; // [r][v]
    std::vector<std::string> domains{"gazette"};
    std::uint64_t seed = 0;
    double eval_fraction = 0.2;

    static SuiteConfig uniform(std::string name, std::size_t per_cell, std::vector<std::string> domains,
                               std::uint64_t seed) {
        SuiteConfig c;
        c.name = std::move(name);
        for (auto& row : c.counts) {
            row.fill(per_cell);
        }
        c.domains = std::move(domains);
        c.seed = seed;
        return c;
    }

    [[nodiscard]] std::size_t& count(RLevel r, VLevel v) { return counts[static_cast<int>(r)][static_cast<int>(v)]; }
    [[nodiscard]] std::size_t count(RLevel r, VLevel v) const {
        return counts[static_cast<int>(r)][static_cast<int>(v)];
    }

    [[nodiscard]] std::size_t total() const {
        std::size_t n = 0;
        for (const auto& row : counts) {
            for (auto c : row) {
                n += c;
            }
        }
        return n;
    }

    void validate() const {
        require(!name.empty(), "suite: name must be non-empty");
        require(total() > 0, "suite: all cell counts are zero");
        require(!domains.empty(), "suite: at least one domain is required");
        require(eval_fraction >= 0.0 && eval_fraction < 1.0, "suite: eval_fraction must be in [0, 1)");
        std::set<std::string> seen;
        for (const auto& d : domains) {
            (void)domain_grammar(d);
            require(seen.insert(d).second, "suite: duplicate domain '" + d + "'");
        }
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json cells = nlohmann::json::object();
        for (auto r : all_r_levels) {
            for (auto v : all_v_levels) {
                cells[cell_name(r, v)] = count(r, v);
            }
        }
        return {{"name", name},
                {"counts", cells},
                {"domains", domains},
                {"seed", seed},
                {"eval_fraction", eval_fraction}};
    }

    static SuiteConfig from_json(const nlohmann::json& j) {
        SuiteConfig c;
        c.name = j.at("name").get<std::string>();
        for (const auto& [cell, n] : j.at("counts").items()) {
            require(cell.size() == 4, "suite: bad cell name '" + cell + "'");
            c.count(parse_r_level(cell.substr(0, 2)), parse_v_level(cell.substr(2, 2))) = n.get<std::size_t>();
        }
        c.domains = j.at("domains").get<std::vector<std::string>>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.eval_fraction = j.at("eval_fraction").get<double>();
        return c;
    }
};

inline std::string to_string(AnswerKind k) { return k == AnswerKind::choice ? "choice" : "free_text"; }

inline nlohmann::json case_to_json(const TaskCase& c) {
    nlohmann::json j{{"case_id", c.case_id},
                     {"prompt", c.prompt},
                     {"ground_truth", c.ground_truth},
                     {"answer_kind", to_string(c.answer_kind)},
                     {"tags",
                      {{"r_level", to_string(c.tags.r_level)},
                       {"v_level", to_string(c.tags.v_level)},
                       {"domain", c.tags.domain},
                       {"task_type", c.tags.task_type}}},
                     {"doc_seed", c.doc_seed}};
    if (c.answer_kind == AnswerKind::choice) {
        j["options"] = c.options;
    }
    return j;
}

inline TaskCase case_from_json(const nlohmann::json& j) {
    TaskCase c;
    c.case_id = j.at("case_id").get<std::string>();
    c.prompt = j.at("prompt").get<std::string>();
    c.ground_truth = j.at("ground_truth").get<std::string>();
    const auto kind = j.at("answer_kind").get<std::string>();
    require(kind == "free_text" || kind == "choice", "suite: unknown answer_kind '" + kind + "'");
    c.answer_kind = kind == "choice" ? AnswerKind::choice : AnswerKind::free_text;
    if (c.answer_kind == AnswerKind::choice) {
        c.options = j.at("options").get<std::string>();
        require(c.ground_truth.size() == 1 && c.options.find(c.ground_truth[0]) != std::string::npos,
                "suite: case " + c.case_id + " has a choice answer outside its options");
    }
    const auto& t = j.at("tags");
    c.tags.r_level = parse_r_level(t.at("r_level").get<std::string>());
    c.tags.v_level = parse_v_level(t.at("v_level").get<std::string>());
    c.tags.domain = t.at("domain").get<std::string>();
    c.tags.task_type = t.at("task_type").get<std::string>();
    c.doc_seed = j.at("doc_seed").get<std::uint64_t>();
    return c;
}

struct TaskSuite {
    SuiteConfig config;
    std::vector<TaskCase> cases;
    std::vector<std::string> train_ids;
    std::vector<std::string> eval_ids;

    [[nodiscard]] const TaskCase* find(std::string_view id) const {
        for (const auto& c : cases) {
            if (c.case_id == id) {
                return &c;
            }
        }
        return nullptr;
    }

    [[nodiscard]] std::vector<TaskCase> select(const std::vector<std::string>& ids) const {
        std::map<std::string_view, const TaskCase*> by_id;
        for (const auto& c : cases) {
            by_id[c.case_id] = &c;
        }
        std::vector<TaskCase> out;
        out.reserve(ids.size());
        for (const auto& id : ids) {
            auto it = by_id.find(id);
            require(it != by_id.end(), "suite: unknown case id '" + id + "'");
            out.push_back(*it->second);
        }
        return out;
    }

    [[nodiscard]] std::vector<TaskCase> train_cases() const { return select(train_ids); }
    [[nodiscard]] std::vector<TaskCase> eval_cases() const { return select(eval_ids); }

    [[nodiscard]] std::set<std::uint64_t> doc_seeds(const std::vector<std::string>& ids) const {
        std::set<std::uint64_t> out;
        for (const auto& c : select(ids)) {
            out.insert(c.doc_seed);
        }
        return out;
    }

    [[nodiscard]] std::string to_ndjson() const {
        std::string out;
        for (const auto& c : cases) {
            out += case_to_json(c).dump();
            out += '\n';
        }
        return out;
    }

    [[nodiscard]] nlohmann::json manifest() const {
        return {{"config", config.to_json()},
                {"num_cases", cases.size()},
                {"train", train_ids},
                {"eval", eval_ids},
                {"cases_sha256", sha256_hex(to_ndjson())}};
    }

    [[nodiscard]] std::string hash() const { return sha256_hex(to_ndjson()); }
};

/// Generates every requested cell. Documents are one per case, so the
/// train/eval split by case is also a split by doc_seed. Seeds already in
/// `taken` are skipped and the new ones are added, which keeps several suites
/// disjoint from each other.
inline TaskSuite gen_suite(const SuiteConfig& config, std::set<std::uint64_t>* taken = nullptr) {
    config.validate();
    std::set<std::uint64_t> local;
    auto& used = taken != nullptr ? *taken : local;
    TaskSuite suite;
    suite.config = config;
    for (auto r : all_r_levels) {
        for (auto v : all_v_levels) {
            const auto cell = cell_name(r, v);
            const auto n = config.count(r, v);
            std::vector<std::string> ids;
            for (std::size_t i = 0; i < n; ++i) {
                const auto& domain = config.domains[i % config.domains.size()];
                const auto& g = domain_grammar(domain);
                std::optional<TaskCase> made;
                for (std::uint64_t attempt = 0; !made; ++attempt) {
                    require(attempt < 64, "gen_suite: could not generate a case for " + cell);
                    const auto tag = config.name + "/" + cell + "/" + std::to_string(i) + "/" + std::to_string(attempt);
                    const auto doc_seed = derive_seed(config.seed, tag);
                    if (used.count(doc_seed) != 0) {
                        continue;
                    }
                    const auto doc = render_document(v, g, doc_seed);
                    try {
                        made = make_case(r, doc, derive_seed(doc_seed, "q"));
                    } catch (const ValidationError&) {
                        continue; // document unsuitable for this question; draw another
                    }
                    made->doc_seed = doc_seed;
                    used.insert(doc_seed);
                }
                std::ostringstream id;
                id << config.name << '-' << cell << '-';
                id.width(4);
                id.fill('0');
                id << i;
                made->case_id = id.str();
                ids.push_back(made->case_id);
                suite.cases.push_back(std::move(*made));
            }
            // seeded 80/20 (by default) split inside each cell
            Rng rng(derive_seed(config.seed, config.name + "/split/" + cell));
            rng.shuffle(std::span(ids));
            const auto n_eval = static_cast<std::size_t>(std::llround(config.eval_fraction * static_cast<double>(n)));
            for (std::size_t i = 0; i < ids.size(); ++i) {
                (i < n_eval ? suite.eval_ids : suite.train_ids).push_back(ids[i]);
            }
        }
    }
    return suite;
}

inline void save_suite(const TaskSuite& suite, const std::filesystem::path& ndjson,
                       const std::filesystem::path& manifest) {
    write_file_text(ndjson, suite.to_ndjson());
    write_file_text(manifest, suite.manifest().dump(2) + "\n");
}

inline std::vector<TaskCase> parse_cases_ndjson(std::string_view text, const std::string& what) {
    std::vector<TaskCase> cases;
    std::size_t line_no = 0;
    std::size_t pos = 0;
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
            cases.push_back(case_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(what + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cases;
}

inline TaskSuite load_suite(const std::filesystem::path& ndjson, const std::filesystem::path& manifest) {
    TaskSuite suite;
    const auto text = read_file_text(ndjson);
    suite.cases = parse_cases_ndjson(text, ndjson.string());
    try {
        const auto m = nlohmann::json::parse(read_file_text(manifest));
        suite.config = SuiteConfig::from_json(m.at("config"));
        suite.train_ids = m.at("train").get<std::vector<std::string>>();
        suite.eval_ids = m.at("eval").get<std::vector<std::string>>();
        const auto expected = m.at("cases_sha256").get<std::string>();
        if (expected != sha256_hex(text)) {
            throw ValidationError(manifest.string() + ": case file hash does not match manifest");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(manifest.string() + ": " + e.what());
    }
    (void)suite.select(suite.train_ids);
    (void)suite.select(suite.eval_ids);
    return suite;
}

} // namespace lwaft
