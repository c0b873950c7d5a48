#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lwaft/config.hpp"
#include "lwaft/delta.hpp"
#include "lwaft/error.hpp"
#include "lwaft/freeze_tuner.hpp"
#include "lwaft/hash.hpp"
#include "lwaft/manifest.hpp"
#include "lwaft/mask_plan.hpp"
#include "lwaft/mask_planner.hpp"
#include "lwaft/param_store.hpp"
#include "lwaft/scoring.hpp"
#include "lwaft/tasks.hpp"

// Run-directory orchestration shared by the command-line tool and the
// acceptance harness. Every command writes one directory holding
// config.ini, its artifacts and a manifest.json.

namespace lwaft::lab {

namespace fs = std::filesystem;

inline constexpr const char* workspace_env = "LWAFT_WORKSPACE";

/// Relative paths resolve against $LWAFT_WORKSPACE when it is set.
inline fs::path resolve_path(const fs::path& p) {
    if (p.is_absolute()) {
        return p;
    }
    if (const char* root = std::getenv(workspace_env); root != nullptr && *root != '\0') {
        return fs::path(root) / p;
    }
    return p;
}

inline void prepare_out_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw RuntimeFailure("cannot create output directory " + dir.string() + ": " + ec.message());
    }
}

inline void write_artifact(RunManifest& m, const fs::path& run_dir, const std::string& name, const std::string& rel,
                           std::string_view text) {
    const auto path = run_dir / rel;
    prepare_out_dir(path.parent_path());
    write_file_text(path, text);
    m.add_output(name, run_dir, rel);
}

/// Re-throws with the failing stage named. Validation problems stay validation problems.
template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ValidationError& e) {
        throw ValidationError("stage " + name + ": " + e.what());
    } catch (const std::exception& e) {
        throw RuntimeFailure("stage " + name + ": " + e.what());
    }
}

/// Deterministic run id: identical command, config and inputs give the same id.
inline std::string make_run_id(const RunManifest& m) {
    std::string key = m.command + "\n" + m.config_ini;
    for (const auto& in : m.inputs) {
        key += "\n" + in.name + "=" + in.sha256;
    }
    return sha256_hex(key).substr(0, 16);
}

inline RunManifest begin_manifest(const std::string& command, const LabConfig& cfg) {
    RunManifest m;
    m.command = command;
    m.config_ini = cfg.to_ini();
    m.seeds = {{"model", cfg.model.seed},
               {"task_gen", cfg.task_seed},
               {"pretrain", cfg.pretrain_seed},
               {"freeze_tuner", cfg.tune.seed}};
    m.started_at = utc_timestamp();
    return m;
}

/// Checks a producer directory's manifest before its artifacts are consumed.
inline void verify_input_dir(const fs::path& dir, const std::string& what) {
    const auto problems = verify_manifest(dir);
    if (!problems.empty()) {
        std::string msg = what + " " + dir.string() + " failed hash verification:";
        for (const auto& p : problems) {
            msg += "\n  " + p;
        }
        throw ValidationError(msg);
    }
}

/// Writes the manifest. With `verify`, a manifest already present in
/// `run_dir` must record the same output hashes as this run.
inline void finish_manifest(RunManifest& m, const fs::path& run_dir, bool verify,
                            const std::optional<RunManifest>& previous) {
    m.finished_at = utc_timestamp();
    if (verify) {
        require(previous.has_value(), "--verify: no earlier manifest in " + run_dir.string() + " to compare against");
        std::vector<std::string> diffs;
        for (const auto& out : m.outputs) {
            const auto* old = previous->output(out.name);
            if (old == nullptr) {
                diffs.push_back(out.name + ": not in the earlier manifest");
            } else if (old->sha256 != out.sha256) {
                diffs.push_back(out.name + ": hash differs from the earlier run");
            }
        }
        for (const auto& old : previous->outputs) {
            if (m.output(old.name) == nullptr) {
                diffs.push_back(old.name + ": missing from this run");
            }
        }
        m.save(run_dir);
        if (!diffs.empty()) {
            std::string msg = "--verify failed for " + run_dir.string() + ":";
            for (const auto& d : diffs) {
                msg += "\n  " + d;
            }
            throw RuntimeFailure(msg);
        }
        return;
    }
    m.save(run_dir);
}

inline std::optional<RunManifest> existing_manifest(const fs::path& run_dir) {
    if (!fs::exists(run_dir / manifest_file)) {
        return std::nullopt;
    }
    return load_manifest(run_dir);
}

// ---------------------------------------------------------------------------
// gen-tasks

struct Suites {
    TaskSuite base;
    TaskSuite target;
};

/// Base suite first, target second, drawing from one pool of document seeds
/// so the two never share a document.
inline Suites generate_suites(const LabConfig& cfg) {
    std::set<std::uint64_t> taken;
    Suites s;
    s.base = gen_suite(cfg.base_suite(), &taken);
    s.target = gen_suite(cfg.target_suite(), &taken);
    return s;
}

inline RunManifest cmd_gen_tasks(const LabConfig& cfg, const fs::path& out_dir, bool verify = false) {
    cfg.validate();
    const auto previous = verify ? existing_manifest(out_dir) : std::nullopt;
    prepare_out_dir(out_dir);
    auto m = begin_manifest("gen-tasks", cfg);
    const auto suites = stage("task_gen", [&] { return generate_suites(cfg); });
    write_artifact(m, out_dir, "config", "config.ini", m.config_ini);
    write_artifact(m, out_dir, "base_suite", "base.ndjson", suites.base.to_ndjson());
    write_artifact(m, out_dir, "base_suite_manifest", "base.manifest.json", suites.base.manifest().dump(2) + "\n");
    write_artifact(m, out_dir, "target_suite", "target.ndjson", suites.target.to_ndjson());
    write_artifact(m, out_dir, "target_suite_manifest", "target.manifest.json",
                   suites.target.manifest().dump(2) + "\n");
    m.run_id = make_run_id(m);
    finish_manifest(m, out_dir, verify, previous);
    return m;
}

inline Suites load_tasks(const fs::path& tasks_dir) {
    verify_input_dir(tasks_dir, "task directory");
    return {load_suite(tasks_dir / "base.ndjson", tasks_dir / "base.manifest.json"),
            load_suite(tasks_dir / "target.ndjson", tasks_dir / "target.manifest.json")};
}

inline void add_task_inputs(RunManifest& m, const fs::path& tasks_dir) {
    for (const auto* name : {"base.ndjson", "base.manifest.json", "target.ndjson", "target.manifest.json"}) {
        m.add_input(name, tasks_dir / name);
    }
}

// ---------------------------------------------------------------------------
// train-base

inline constexpr const char* base_checkpoint_rel = "checkpoints/base.ckpt";

inline RunManifest cmd_train_base(const LabConfig& cfg, const fs::path& tasks_dir, const fs::path& out_dir,
                                  bool verify = false) {
    cfg.validate();
    const auto suites = stage("load-tasks", [&] { return load_tasks(tasks_dir); });
    const auto previous = verify ? existing_manifest(out_dir) : std::nullopt;
    prepare_out_dir(out_dir);
    auto m = begin_manifest("train-base", cfg);
    add_task_inputs(m, tasks_dir);
    write_artifact(m, out_dir, "config", "config.ini", m.config_ini);
    const auto result =
        stage("pretrain", [&] { return pretrain_base(cfg.model, suites.base.train_cases(), cfg.pretrain, cfg.pretrain_seed); });
    prepare_out_dir(out_dir / "checkpoints");
    save_checkpoint(result.params, out_dir / base_checkpoint_rel);
    m.add_output("base_checkpoint", out_dir, base_checkpoint_rel);
    write_artifact(m, out_dir, "train_log", "reports/train_log.ndjson", result.log.to_ndjson());
    const auto scores = stage("evaluate", [&] { return evaluate_domains(result.params, cfg.model, suites.base, suites.target); });
    const nlohmann::json j{{"base_domain", scores.base_domain.to_json()}, {"target_domain", scores.target_domain.to_json()}};
    write_artifact(m, out_dir, "base_scores", "reports/base_scores.json", j.dump(2) + "\n");
    m.run_id = make_run_id(m);
    finish_manifest(m, out_dir, verify, previous);
    return m;
}

// ---------------------------------------------------------------------------
// pipeline

/// "base" evaluates the base checkpoint without tuning; everything else is a Method.
inline std::optional<Method> parse_pipeline_method(const std::string& text) {
    if (text == "base") {
        return std::nullopt;
    }
    return parse_method(text);
}

struct PipelineInputs {
    fs::path base_dir;  // train-base output
    fs::path tasks_dir; // gen-tasks output
};

inline RunManifest cmd_pipeline(const LabConfig& cfg, const PipelineInputs& in, const std::string& method_name,
                                const fs::path& out_dir, bool verify = false) {
    cfg.validate();
    const auto method = parse_pipeline_method(method_name);
    auto tune = cfg.tune;
    if (method) {
        tune.method = *method;
    }
    const auto suites = stage("load-tasks", [&] { return load_tasks(in.tasks_dir); });
    const auto base = stage("load-base", [&] {
        verify_input_dir(in.base_dir, "base directory");
        auto p = load_checkpoint(in.base_dir / base_checkpoint_rel);
        require(p.same_layout(build_model(cfg.model)),
                "base checkpoint layout does not match the [model] section of the config");
        return p;
    });
    const auto previous = verify ? existing_manifest(out_dir) : std::nullopt;
    prepare_out_dir(out_dir);

    // the snapshot records the method actually run
    LabConfig effective = cfg;
    effective.tune.method = tune.method;
    auto m = begin_manifest("pipeline " + method_name, effective);
    add_task_inputs(m, in.tasks_dir);
    m.add_input("base_checkpoint", in.base_dir / base_checkpoint_rel);
    m.run_id = make_run_id(m);
    write_artifact(m, out_dir, "config", "config.ini", m.config_ini);

    const auto target_train = suites.target.train_cases();
    const auto base_scores = stage("evaluate-base", [&] { return evaluate_domains(base, cfg.model, suites.base, suites.target); });

    ParamStore tuned = base;
    std::vector<std::string> warnings;
    std::string mask_hash;
    if (method) {
        const auto order_seed = derive_seed(tune.seed, "finetune-order");
        if (uses_expert(tune.method)) {
            const auto expert = stage("train_expert", [&] {
                return train_expert(base, cfg.model, target_train, tune.alpha, tune.optim, tune.seed);
            });
            warnings = expert.warnings;
            prepare_out_dir(out_dir / "checkpoints");
            save_checkpoint(expert.params, out_dir / "checkpoints/expert.ckpt");
            m.add_output("expert_checkpoint", out_dir, "checkpoints/expert.ckpt");
            write_artifact(m, out_dir, "expert_log", "reports/expert_log.ndjson", expert.log.to_ndjson());

            const auto delta = stage("param_delta", [&] { return param_delta(base, expert.params); });
            const auto profile = layer_profile(delta);
            write_artifact(m, out_dir, "delta_layers", "reports/delta_layers.csv", layer_profile_csv(profile));
            const auto edges = default_histogram_edges();
            write_artifact(m, out_dir, "delta_histogram", "reports/delta_histogram.csv",
                           delta_histogram(delta, edges).to_csv());

            const auto mask = stage("build_mask_plan", [&] {
                MaskProvenance prov;
                prov.expert_run_id = m.run_id + "/expert";
                return plan_for_method(tune.method, delta, tune, prov);
            });
            for (const auto& w : mask.provenance.warnings) {
                warnings.push_back(w);
            }
            prepare_out_dir(out_dir / "masks");
            save_mask(mask, out_dir / "masks/mask.lwmsk");
            m.add_output("mask", out_dir, "masks/mask.lwmsk");
            mask_hash = m.output("mask")->sha256;

            auto result = stage("lwaft_finetune", [&] {
                return lwaft_finetune(base, cfg.model, mask, target_train, tune.optim, order_seed);
            });
            require(changes_within_mask(base, result.params, mask), "masked fine-tune changed a frozen parameter");
            tuned = std::move(result.params);
            write_artifact(m, out_dir, "tune_log", "reports/tune_log.ndjson", result.log.to_ndjson());
        } else if (tune.method == Method::full) {
            auto result = stage("full_finetune", [&] {
                check_cases_fit(cfg.model, target_train, "full_finetune");
                return train(base, cfg.model, to_batch(target_train), tune.optim, nullptr, order_seed);
            });
            tuned = std::move(result.params);
            write_artifact(m, out_dir, "tune_log", "reports/tune_log.ndjson", result.log.to_ndjson());
        } else {
            auto result = stage("lora_finetune", [&] {
                return lora_finetune(base, cfg.model, target_train, tune.lora_rank, tune.lora_alpha, tune.optim,
                                     tune.seed);
            });
            m.notes["lora_targets"] = "all 2-D weight layers (" +
                                      std::to_string(lora_target_count(base, cfg.model)) + ")";
            tuned = std::move(result.params);
            write_artifact(m, out_dir, "tune_log", "reports/tune_log.ndjson", result.log.to_ndjson());
        }
        prepare_out_dir(out_dir / "checkpoints");
        save_checkpoint(tuned, out_dir / "checkpoints/tuned.ckpt");
        m.add_output("tuned_checkpoint", out_dir, "checkpoints/tuned.ckpt");
    }

    auto report = stage("retention_eval", [&] {
        return retention_eval(tuned, cfg.model, suites.base, suites.target, base_scores, method_name, effective.hash());
    });
    report.mask_hash = mask_hash;
    report.warnings = warnings;
    std::ostringstream summary;
    summary << "method " << method_name << "\n"
            << "changed parameters " << changed_count(base, tuned) << " of " << base.total_count() << "\n\n"
            << "base domain (" << cfg.base_domain << ")\n"
            << report.after.base_domain.table() << "\ntarget domain (" << cfg.target_domain << ")\n"
            << report.after.target_domain.table();
    write_artifact(m, out_dir, "retention_report", "reports/retention.json", report.to_json().dump(2) + "\n");
    write_artifact(m, out_dir, "retention_table", "reports/retention.txt", summary.str());
    finish_manifest(m, out_dir, verify, previous);
    return m;
}

inline RetentionReport load_retention(const fs::path& run_dir) {
    const auto path = run_dir / "reports/retention.json";
    if (!fs::exists(path)) {
        throw ValidationError("no retention report in " + run_dir.string());
    }
    try {
        return RetentionReport::from_json(nlohmann::json::parse(read_file_text(path)));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// sweep

enum class SweepParam : std::uint8_t { alpha, freeze_rate };

inline std::string to_string(SweepParam p) { return p == SweepParam::alpha ? "alpha" : "freeze_rate"; }

inline SweepParam parse_sweep_param(const std::string& text) {
    if (text == "alpha") {
        return SweepParam::alpha;
    }
    if (text == "freeze_rate") {
        return SweepParam::freeze_rate;
    }
    throw ValidationError("sweep parameter must be alpha or freeze_rate, got '" + text + "'");
}

struct SweepSpec {
    SweepParam param = SweepParam::alpha;
    std::vector<double> values;
    std::string method = "lwaft";

    void validate() const {
        require(!values.empty(), "sweep: value list is empty");
        for (double v : values) {
            if (param == SweepParam::alpha) {
                require(v > 0.0 && v <= 1.0, "sweep: alpha value " + detail::fmt_double(v) + " is outside (0, 1]");
            } else {
                require(v >= 0.0 && v < 1.0,
                        "sweep: freeze_rate value " + detail::fmt_double(v) + " is outside [0, 1)");
            }
        }
        std::vector<double> sorted = values;
        std::sort(sorted.begin(), sorted.end());
        require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), "sweep: duplicate values");
    }
};

struct SweepRow {
    double value = 0.0;
    std::string run_dir;
    bool ok = false;
    double base_score = 0.0;
    double target_score = 0.0;
    double base_delta = 0.0;
    double target_delta = 0.0;
    std::string error;
};

/// Parameter value as a short, stable directory name.
inline std::string value_label(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

inline std::string sweep_csv(const SweepSpec& spec, const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << to_string(spec.param) << ",base_retention,target_score,base_delta,target_delta,status\n";
    for (const auto& r : rows) {
        os << value_label(r.value) << ',';
        if (r.ok) {
            os << r.base_score << ',' << r.target_score << ',' << r.base_delta << ',' << r.target_delta << ",ok\n";
        } else {
            std::string err = r.error;
            std::replace(err.begin(), err.end(), '\n', ' ');
            std::replace(err.begin(), err.end(), ',', ';');
            os << ",,,,error: " << err << '\n';
        }
    }
    return os.str();
}

/// One pipeline per value, each in its own run directory under out_dir/runs.
/// A failing value is recorded in the CSV and the sweep carries on.
inline std::vector<SweepRow> cmd_sweep(const LabConfig& cfg, const SweepSpec& spec, const PipelineInputs& in,
                                       const fs::path& out_dir, int parallel = 1, bool verify = false) {
    cfg.validate();
    spec.validate();
    require(parallel >= 1, "--parallel must be >= 1");
    (void)parse_pipeline_method(spec.method);
    const auto previous = verify ? existing_manifest(out_dir) : std::nullopt;
    prepare_out_dir(out_dir);

    std::vector<double> values = spec.values;
    std::sort(values.begin(), values.end());
    std::vector<SweepRow> rows(values.size());
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (auto i = next.fetch_add(1); i < values.size(); i = next.fetch_add(1)) {
            auto& row = rows[i];
            row.value = values[i];
            row.run_dir = "runs/" + to_string(spec.param) + "-" + value_label(values[i]);
            LabConfig c = cfg;
            if (spec.param == SweepParam::alpha) {
                c.tune.alpha = values[i];
            } else {
                c.tune.budget = BudgetConfig::rate(values[i]);
            }
            try {
                cmd_pipeline(c, in, spec.method, out_dir / row.run_dir, verify);
                const auto rep = load_retention(out_dir / row.run_dir);
                row.base_score = rep.base_domain_score();
                row.target_score = rep.target_domain_score();
                row.base_delta = rep.base_domain_delta();
                row.target_delta = rep.target_domain_delta();
                row.ok = true;
            } catch (const std::exception& e) {
                row.error = e.what();
            }
        }
    };
    std::vector<std::thread> threads;
    const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(parallel), values.size());
    for (std::size_t t = 1; t < n_threads; ++t) {
        threads.emplace_back(worker);
    }
    worker();
    for (auto& t : threads) {
        t.join();
    }

    auto m = begin_manifest("sweep " + to_string(spec.param) + " " + spec.method, cfg);
    add_task_inputs(m, in.tasks_dir);
    m.add_input("base_checkpoint", in.base_dir / base_checkpoint_rel);
    m.run_id = make_run_id(m);
    write_artifact(m, out_dir, "config", "config.ini", m.config_ini);
    write_artifact(m, out_dir, "sweep_csv", "sweep.csv", sweep_csv(spec, rows));
    for (const auto& r : rows) {
        m.notes[r.run_dir] = r.ok ? "ok" : "error";
    }
    finish_manifest(m, out_dir, verify, previous);
    return rows;
}

// ---------------------------------------------------------------------------
// evaluate

/// Scores a checkpoint (greedy decode) or a predictions file against one
/// split of a suite.
struct EvaluateRequest {
    fs::path suite_ndjson;
    fs::path suite_manifest;
    std::string split = "eval"; // eval | train | all
    std::optional<fs::path> checkpoint;
    std::optional<fs::path> predictions;
};

inline BenchReport cmd_evaluate(const LabConfig& cfg, const EvaluateRequest& req, const fs::path* out_dir = nullptr) {
    require(req.checkpoint.has_value() != req.predictions.has_value(),
            "evaluate: give exactly one of a checkpoint or a predictions file");
    const auto suite = load_suite(req.suite_ndjson, req.suite_manifest);
    std::vector<TaskCase> cases;
    if (req.split == "eval") {
        cases = suite.eval_cases();
    } else if (req.split == "train") {
        cases = suite.train_cases();
    } else if (req.split == "all") {
        cases = suite.cases;
    } else {
        throw ValidationError("evaluate: split must be eval, train or all, got '" + req.split + "'");
    }
    require(!cases.empty(), "evaluate: the selected split is empty");
    std::map<std::string, std::string> predictions;
    if (req.checkpoint) {
        const auto params = load_checkpoint(*req.checkpoint);
        require(params.same_layout(build_model(cfg.model)),
                "checkpoint layout does not match the [model] section of the config");
        predictions = evaluate_cases(params, cfg.model, cases).predictions;
    } else {
        predictions = parse_predictions_ndjson(read_file_text(*req.predictions), req.predictions->string());
    }
    const auto scores = score_predictions(predictions, cases, cfg.scoring);
    auto report = aggregate(scores, cases);
    if (out_dir != nullptr) {
        prepare_out_dir(*out_dir);
        auto m = begin_manifest("evaluate", cfg);
        m.add_input("suite", req.suite_ndjson);
        m.add_input("suite_manifest", req.suite_manifest);
        m.add_input(req.checkpoint ? "checkpoint" : "predictions", req.checkpoint ? *req.checkpoint : *req.predictions);
        m.run_id = make_run_id(m);
        write_artifact(m, *out_dir, "config", "config.ini", m.config_ini);
        write_artifact(m, *out_dir, "predictions", "reports/predictions.ndjson", predictions_to_ndjson(predictions));
        write_artifact(m, *out_dir, "bench_report", "reports/bench.json", report.to_json().dump(2) + "\n");
        write_artifact(m, *out_dir, "bench_table", "reports/bench.txt", report.table());
        finish_manifest(m, *out_dir, false, std::nullopt);
    }
    return report;
}

// ---------------------------------------------------------------------------
// report

/// Methods as rows; overall and per-cell scores for both domains as columns.
/// Cells a run does not have are shown as "-".
inline std::string cmd_report(const std::vector<fs::path>& run_dirs) {
    require(!run_dirs.empty(), "report: no run directories given");
    std::vector<std::pair<std::string, RetentionReport>> runs;
    for (const auto& dir : run_dirs) {
        (void)load_manifest(dir);
        runs.emplace_back(dir.filename().string(), load_retention(dir));
    }
    const auto& first = runs.front().second;
    for (const auto& [name, r] : runs) {
        if (r.base_suite_hash != first.base_suite_hash || r.target_suite_hash != first.target_suite_hash) {
            throw ValidationError("report: run '" + name +
                                  "' was scored on different suites; only runs with matching suite hashes "
                                  "can share a table");
        }
    }
    std::vector<std::string> cells;
    for (auto r : all_r_levels) {
        for (auto v : all_v_levels) {
            cells.push_back(cell_name(r, v));
        }
    }
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    const auto header = [&](const std::string& title) {
        os << title << "\n" << std::left << std::setw(14) << "method" << std::right << std::setw(8) << "overall";
        for (const auto& c : cells) {
            os << std::setw(7) << c;
        }
        os << "\n";
    };
    const auto row = [&](const std::string& method, const BenchReport& b) {
        os << std::left << std::setw(14) << method << std::right << std::setw(8) << b.overall;
        for (const auto& c : cells) {
            auto it = b.grid.find(c);
            if (it == b.grid.end()) {
                os << std::setw(7) << "-";
            } else {
                os << std::setw(7) << it->second.mean;
            }
        }
        os << "\n";
    };
    header("base domain");
    for (const auto& [name, r] : runs) {
        row(r.method, r.after.base_domain);
    }
    os << "\n";
    header("target domain");
    for (const auto& [name, r] : runs) {
        row(r.method, r.after.target_domain);
    }
    return os.str();
}

/// Seed from the entropy source, for runs that ask for one.
inline std::uint64_t entropy_seed() {
    std::random_device rd;
    return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

} // namespace lwaft::lab
