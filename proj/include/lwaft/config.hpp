#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "lwaft/error.hpp"
#include "lwaft/freeze_tuner.hpp"
#include "lwaft/hash.hpp"
#include "lwaft/model.hpp"
#include "lwaft/optim.hpp"
#include "lwaft/tasks.hpp"

namespace lwaft {

/// Everything a run needs, grouped by the module that consumes it.
struct LabConfig {
    ModelSpec model;
    // task_gen
    std::string base_domain = "gazette";
    std::string target_domain = "ledger";
    std::size_t base_per_cell = 200;
    std::size_t target_per_cell = 50;
    double eval_fraction = 0.2;
    std::uint64_t task_seed = 7;
    // pretrain
    OptimConfig pretrain;
    std::uint64_t pretrain_seed = 3;
    // freeze_tuner, mask_planner and the fine-tune optimizer
    FreezeTuneConfig tune;
    // eval_scoring
    ScoreOptions scoring;

    LabConfig() {
        model.kind = ModelKind::seq_transducer;
        model.model_dim = 32;
        model.num_layers = 2;
        model.num_heads = 4;
        model.context_len = 96;
        model.seed = 1;
        pretrain.learning_rate = 3e-3;
        pretrain.epochs = 60;
        pretrain.batch_size = 16;
        tune.optim.learning_rate = 3e-3;
        tune.optim.epochs = 5;
        tune.optim.batch_size = 12;
        tune.seed = 5;
    }

    [[nodiscard]] SuiteConfig base_suite() const {
        auto c = SuiteConfig::uniform("base", base_per_cell, {base_domain}, task_seed);
        c.eval_fraction = eval_fraction;
        return c;
    }

    [[nodiscard]] SuiteConfig target_suite() const {
        auto c = SuiteConfig::uniform("target", target_per_cell, {target_domain}, task_seed);
        c.eval_fraction = eval_fraction;
        return c;
    }

    void validate() const {
        model.validate();
        require(model.kind == ModelKind::seq_transducer, "model.kind: the lab pipeline needs seq_transducer");
        (void)domain_grammar(base_domain);
        (void)domain_grammar(target_domain);
        require(base_per_cell > 0 && target_per_cell > 0, "task_gen: per-cell counts must be > 0");
        require(eval_fraction > 0.0 && eval_fraction < 1.0, "task_gen.eval_fraction must be in (0, 1)");
        pretrain.validate();
        tune.validate();
    }

    [[nodiscard]] std::string to_ini() const;
    [[nodiscard]] std::string hash() const { return sha256_hex(to_ini()); }
};

namespace detail {

// Shortest text that parses back to the same double.
inline std::string fmt_double(double x) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
}

inline void write_optim(std::ostringstream& os, const OptimConfig& o) {
    os << "learning_rate = " << fmt_double(o.learning_rate) << '\n'
       << "weight_decay = " << fmt_double(o.weight_decay) << '\n'
       << "warmup_ratio = " << fmt_double(o.warmup_ratio) << '\n'
       << "schedule = " << to_string(o.schedule) << '\n'
       << "epochs = " << o.epochs << '\n'
       << "batch_size = " << o.batch_size << '\n'
       << "beta1 = " << fmt_double(o.beta1) << '\n'
       << "beta2 = " << fmt_double(o.beta2) << '\n'
       << "eps = " << fmt_double(o.eps) << '\n';
}

} // namespace detail

inline std::string LabConfig::to_ini() const {
    std::ostringstream os;
    os << "[model]\n"
       << "kind = " << to_string(model.kind) << '\n'
       << "model_dim = " << model.model_dim << '\n'
       << "num_layers = " << model.num_layers << '\n'
       << "num_heads = " << model.num_heads << '\n'
       << "context_len = " << model.context_len << '\n'
       << "ffn_mult = " << model.ffn_mult << '\n'
       << "seed = " << model.seed << '\n'
       << "\n[task_gen]\n"
       << "base_domain = " << base_domain << '\n'
       << "target_domain = " << target_domain << '\n'
       << "base_per_cell = " << base_per_cell << '\n'
       << "target_per_cell = " << target_per_cell << '\n'
       << "eval_fraction = " << detail::fmt_double(eval_fraction) << '\n'
       << "seed = " << task_seed << '\n'
       << "\n[pretrain]\n";
    detail::write_optim(os, pretrain);
    os << "seed = " << pretrain_seed << '\n'
       << "\n[mask_planner]\n"
       << "budget_mode = " << (tune.budget.mode == BudgetConfig::Mode::freeze_rate ? "freeze_rate" : "global_count")
       << '\n'
       << "freeze_rate = " << detail::fmt_double(tune.budget.freeze_rate) << '\n'
       << "global_count = " << tune.budget.global_count << '\n'
       << "\n[freeze_tuner]\n"
       << "method = " << to_string(tune.method) << '\n'
       << "alpha = " << detail::fmt_double(tune.alpha) << '\n'
       << "lora_rank = " << tune.lora_rank << '\n'
       << "lora_alpha = " << detail::fmt_double(tune.lora_alpha) << '\n'
       << "seed = " << tune.seed << '\n'
       << "\n[optim]\n";
    detail::write_optim(os, tune.optim);
    os << "\n[eval_scoring]\n"
       << "normalize_whitespace = " << (scoring.normalize_whitespace ? "true" : "false") << '\n';
    return os.str();
}

namespace detail {

template <class T>
T parse_value(const std::string& key, const std::string& text);

template <>
inline std::string parse_value<std::string>(const std::string&, const std::string& text) {
    return text;
}

template <>
inline double parse_value<double>(const std::string& key, const std::string& text) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    require(used == text.size() && !text.empty(), key + ": expected a number, got '" + text + "'");
    return v;
}

template <>
inline std::int64_t parse_value<std::int64_t>(const std::string& key, const std::string& text) {
    std::size_t used = 0;
    std::int64_t v = 0;
    try {
        v = std::stoll(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    require(used == text.size() && !text.empty(), key + ": expected an integer, got '" + text + "'");
    return v;
}

template <>
inline std::uint64_t parse_value<std::uint64_t>(const std::string& key, const std::string& text) {
    require(!text.empty() && text[0] != '-', key + ": expected a non-negative integer, got '" + text + "'");
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
        v = std::stoull(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    require(used == text.size(), key + ": expected a non-negative integer, got '" + text + "'");
    return v;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") {
        return true;
    }
    if (text == "false" || text == "0") {
        return false;
    }
    throw ValidationError(key + ": expected true or false, got '" + text + "'");
}

using Setter = std::function<void(LabConfig&, const std::string& key, const std::string& value)>;

template <class T, class Apply>
Setter setter(Apply apply) {
    return [apply](LabConfig& c, const std::string& key, const std::string& value) {
        apply(c, parse_value<T>(key, value));
    };
}

inline int to_int(const std::string& key, std::int64_t v) {
    require(v >= std::numeric_limits<int>::min() && v <= std::numeric_limits<int>::max(), key + ": out of range");
    return static_cast<int>(v);
}

inline void add_optim_setters(std::map<std::string, Setter>& m, const std::string& section,
                              OptimConfig& (*opt)(LabConfig&)) {
    m[section + ".learning_rate"] = setter<double>([opt](LabConfig& c, double v) { opt(c).learning_rate = v; });
    m[section + ".weight_decay"] = setter<double>([opt](LabConfig& c, double v) { opt(c).weight_decay = v; });
    m[section + ".warmup_ratio"] = setter<double>([opt](LabConfig& c, double v) { opt(c).warmup_ratio = v; });
    m[section + ".schedule"] =
        setter<std::string>([opt](LabConfig& c, const std::string& v) { opt(c).schedule = parse_schedule(v); });
    m[section + ".epochs"] = setter<std::int64_t>(
        [opt, section](LabConfig& c, std::int64_t v) { opt(c).epochs = to_int(section + ".epochs", v); });
    m[section + ".batch_size"] = setter<std::int64_t>(
        [opt, section](LabConfig& c, std::int64_t v) { opt(c).batch_size = to_int(section + ".batch_size", v); });
    m[section + ".beta1"] = setter<double>([opt](LabConfig& c, double v) { opt(c).beta1 = v; });
    m[section + ".beta2"] = setter<double>([opt](LabConfig& c, double v) { opt(c).beta2 = v; });
    m[section + ".eps"] = setter<double>([opt](LabConfig& c, double v) { opt(c).eps = v; });
}

inline const std::map<std::string, Setter>& config_setters() {
    static const std::map<std::string, Setter> setters = [] {
        std::map<std::string, Setter> m;
        m["model.kind"] =
            setter<std::string>([](LabConfig& c, const std::string& v) { c.model.kind = parse_model_kind(v); });
        m["model.model_dim"] = setter<std::int64_t>(
            [](LabConfig& c, std::int64_t v) { c.model.model_dim = to_int("model.model_dim", v); });
        m["model.num_layers"] = setter<std::int64_t>(
            [](LabConfig& c, std::int64_t v) { c.model.num_layers = to_int("model.num_layers", v); });
        m["model.num_heads"] = setter<std::int64_t>(
            [](LabConfig& c, std::int64_t v) { c.model.num_heads = to_int("model.num_heads", v); });
        m["model.context_len"] = setter<std::int64_t>(
            [](LabConfig& c, std::int64_t v) { c.model.context_len = to_int("model.context_len", v); });
        m["model.ffn_mult"] = setter<std::int64_t>(
            [](LabConfig& c, std::int64_t v) { c.model.ffn_mult = to_int("model.ffn_mult", v); });
        m["model.seed"] = setter<std::uint64_t>([](LabConfig& c, std::uint64_t v) { c.model.seed = v; });

        m["task_gen.base_domain"] =
            setter<std::string>([](LabConfig& c, const std::string& v) { c.base_domain = v; });
        m["task_gen.target_domain"] =
            setter<std::string>([](LabConfig& c, const std::string& v) { c.target_domain = v; });
        m["task_gen.base_per_cell"] = setter<std::uint64_t>([](LabConfig& c, std::uint64_t v) { c.base_per_cell = v; });
        m["task_gen.target_per_cell"] =
            setter<std::uint64_t>([](LabConfig& c, std::uint64_t v) { c.target_per_cell = v; });
        m["task_gen.eval_fraction"] = setter<double>([](LabConfig& c, double v) { c.eval_fraction = v; });
        m["task_gen.seed"] = setter<std::uint64_t>([](LabConfig& c, std::uint64_t v) { c.task_seed = v; });

        add_optim_setters(m, "pretrain", [](LabConfig& c) -> OptimConfig& { return c.pretrain; });
        m["pretrain.seed"] = setter<std::uint64_t>([](LabConfig& c, std::uint64_t v) { c.pretrain_seed = v; });

        m["mask_planner.budget_mode"] = setter<std::string>([](LabConfig& c, const std::string& v) {
            if (v == "freeze_rate") {
                c.tune.budget.mode = BudgetConfig::Mode::freeze_rate;
            } else if (v == "global_count") {
                c.tune.budget.mode = BudgetConfig::Mode::global_count;
            } else {
                throw ValidationError("mask_planner.budget_mode: expected freeze_rate or global_count, got '" + v +
                                      "'");
            }
        });
        m["mask_planner.freeze_rate"] = setter<double>([](LabConfig& c, double v) { c.tune.budget.freeze_rate = v; });
        m["mask_planner.global_count"] =
            setter<std::uint64_t>([](LabConfig& c, std::uint64_t v) { c.tune.budget.global_count = v; });

        m["freeze_tuner.method"] =
            setter<std::string>([](LabConfig& c, const std::string& v) { c.tune.method = parse_method(v); });
        m["freeze_tuner.alpha"] = setter<double>([](LabConfig& c, double v) { c.tune.alpha = v; });
        m["freeze_tuner.lora_rank"] = setter<std::int64_t>(
            [](LabConfig& c, std::int64_t v) { c.tune.lora_rank = to_int("freeze_tuner.lora_rank", v); });
        m["freeze_tuner.lora_alpha"] = setter<double>([](LabConfig& c, double v) { c.tune.lora_alpha = v; });
        m["freeze_tuner.seed"] = setter<std::uint64_t>([](LabConfig& c, std::uint64_t v) { c.tune.seed = v; });

        add_optim_setters(m, "optim", [](LabConfig& c) -> OptimConfig& { return c.tune.optim; });

        m["eval_scoring.normalize_whitespace"] =
            setter<bool>([](LabConfig& c, bool v) { c.scoring.normalize_whitespace = v; });
        return m;
    }();
    return setters;
}

} // namespace detail

/// Applies one "section.key = value" override on top of `config`.
inline void set_config_value(LabConfig& config, const std::string& dotted_key, const std::string& value) {
    const auto& setters = detail::config_setters();
    auto it = setters.find(dotted_key);
    require(it != setters.end(), "unknown config key '" + dotted_key + "'");
    it->second(config, dotted_key, value);
}

/// Parses INI text over the built-in defaults. Unknown sections or keys are errors.
inline LabConfig parse_config(const std::string& text, const std::string& what = "config") {
    LabConfig config;
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ValidationError(what + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    for (const auto& [section, body] : tree) {
        require(!body.empty() || body.data().empty(), what + ": key '" + section + "' outside any section");
        for (const auto& [key, value] : body) {
            try {
                set_config_value(config, section + "." + key, value.get_value<std::string>());
            } catch (const ValidationError& e) {
                throw ValidationError(what + ": " + e.what());
            }
        }
    }
    config.validate();
    return config;
}

inline LabConfig load_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw ValidationError("config file not found: " + path.string());
    }
    return parse_config(read_file_text(path), path.string());
}

inline std::string dump_default_config() { return LabConfig{}.to_ini(); }

} // namespace lwaft
