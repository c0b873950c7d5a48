// lwaft: command-line driver for the freeze-tuning lab.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lwaft/lab.hpp"

namespace {

using namespace lwaft;
namespace fs = std::filesystem;

struct Common {
    std::string config_path;
    std::string seed;
    std::vector<std::string> overrides;
    bool verify = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_seed = true) {
    cmd->add_option("--config", c.config_path, "INI config file (defaults apply to anything it omits)");
    if (with_seed) {
        cmd->add_option("--seed", c.seed, "seed for this command's stage, or 'random' to draw and record one");
    }
    cmd->add_option("--set", c.overrides, "override a config key, e.g. --set optim.epochs=3")->take_all();
}

enum class SeedTarget { task_gen, pretrain, tune };

LabConfig load_lab_config(const Common& c, SeedTarget target) {
    LabConfig cfg = c.config_path.empty() ? LabConfig{} : load_config(lab::resolve_path(c.config_path));
    for (const auto& o : c.overrides) {
        const auto eq = o.find('=');
        require(eq != std::string::npos && eq > 0, "--set expects section.key=value, got '" + o + "'");
        set_config_value(cfg, o.substr(0, eq), o.substr(eq + 1));
    }
    if (!c.seed.empty()) {
        std::uint64_t s = 0;
        if (c.seed == "random") {
            s = lab::entropy_seed();
            std::cerr << "seed " << s << " drawn from the entropy source\n";
        } else {
            s = detail::parse_value<std::uint64_t>("--seed", c.seed);
        }
        switch (target) {
        case SeedTarget::task_gen:
            cfg.task_seed = s;
            break;
        case SeedTarget::pretrain:
            cfg.pretrain_seed = s;
            break;
        case SeedTarget::tune:
            cfg.tune.seed = s;
            break;
        }
    }
    cfg.validate();
    return cfg;
}

fs::path path_arg(const std::string& p) { return lab::resolve_path(p); }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Layer-wise adaptive freeze-tuning lab"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(tool_version));

    // config dump-defaults
    auto* config_cmd = app.add_subcommand("config", "configuration helpers");
    config_cmd->require_subcommand(1);
    auto* dump_cmd = config_cmd->add_subcommand("dump-defaults", "print the built-in defaults as INI");
    std::string dump_out;
    dump_cmd->add_option("--out", dump_out, "write to this file instead of stdout");

    // gen-tasks
    Common gen;
    std::string gen_out;
    auto* gen_cmd = app.add_subcommand("gen-tasks", "generate the base and target task suites");
    add_common(gen_cmd, gen);
    gen_cmd->add_option("--out", gen_out, "output directory")->required();
    gen_cmd->add_flag("--verify", gen.verify, "compare outputs with the manifest already in --out");

    // train-base
    Common tb;
    std::string tb_tasks, tb_out;
    auto* tb_cmd = app.add_subcommand("train-base", "pretrain the base model on the base suite");
    add_common(tb_cmd, tb);
    tb_cmd->add_option("--tasks", tb_tasks, "gen-tasks output directory")->required();
    tb_cmd->add_option("--out", tb_out, "output directory")->required();
    tb_cmd->add_flag("--verify", tb.verify, "compare outputs with the manifest already in --out");

    // pipeline
    Common pl;
    std::string pl_base, pl_tasks, pl_out, pl_method = "lwaft";
    auto* pl_cmd = app.add_subcommand("pipeline", "fine-tune the base model on the target suite and score retention");
    add_common(pl_cmd, pl);
    pl_cmd->add_option("--base", pl_base, "train-base output directory")->required();
    pl_cmd->add_option("--tasks", pl_tasks, "gen-tasks output directory")->required();
    pl_cmd->add_option("--method", pl_method, "base, lwaft, full, lora, random_mask, global_topk or layer_uniform");
    pl_cmd->add_option("--out", pl_out, "run directory")->required();
    pl_cmd->add_flag("--verify", pl.verify, "compare outputs with the manifest already in --out");

    // sweep
    Common sw;
    std::string sw_base, sw_tasks, sw_out, sw_param, sw_method = "lwaft";
    std::vector<double> sw_values;
    int sw_parallel = 1;
    auto* sw_cmd = app.add_subcommand("sweep", "one pipeline run per alpha or freeze-rate value");
    add_common(sw_cmd, sw);
    sw_cmd->add_option("--param", sw_param, "alpha or freeze_rate")->required();
    sw_cmd->add_option("--values", sw_values, "values to try (default: 0.05 0.1 0.25 0.5 1 or 0.9 0.95 0.99 0.999)");
    sw_cmd->add_option("--base", sw_base, "train-base output directory")->required();
    sw_cmd->add_option("--tasks", sw_tasks, "gen-tasks output directory")->required();
    sw_cmd->add_option("--method", sw_method, "masked method to sweep");
    sw_cmd->add_option("--out", sw_out, "sweep directory")->required();
    sw_cmd->add_option("--parallel", sw_parallel, "number of values run at once");
    sw_cmd->add_flag("--verify", sw.verify, "compare outputs with the manifests already in --out");

    // evaluate
    Common ev;
    std::string ev_suite, ev_suite_manifest, ev_ckpt, ev_pred, ev_split = "eval", ev_out;
    auto* ev_cmd = app.add_subcommand("evaluate", "score a checkpoint or a predictions file on a suite");
    add_common(ev_cmd, ev, false);
    ev_cmd->add_option("--suite", ev_suite, "suite .ndjson file")->required();
    ev_cmd->add_option("--suite-manifest", ev_suite_manifest, "suite manifest (default: <suite>.manifest.json)");
    auto* ckpt_opt = ev_cmd->add_option("--checkpoint", ev_ckpt, "checkpoint to decode with");
    auto* pred_opt = ev_cmd->add_option("--predictions", ev_pred, "predictions .ndjson (case_id, prediction)");
    ckpt_opt->excludes(pred_opt);
    ev_cmd->add_option("--split", ev_split, "eval, train or all");
    ev_cmd->add_option("--out", ev_out, "also write predictions and the report here");

    // report
    std::vector<std::string> rp_dirs;
    std::string rp_out;
    bool rp_verify = false;
    auto* rp_cmd = app.add_subcommand("report", "comparison table across pipeline run directories");
    rp_cmd->add_option("runs", rp_dirs, "pipeline run directories")->required();
    rp_cmd->add_option("--out", rp_out, "also write the table to this file");
    rp_cmd->add_flag("--verify", rp_verify, "re-hash every artifact listed in each run's manifest first");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (dump_cmd->parsed()) {
            if (dump_out.empty()) {
                std::cout << dump_default_config();
            } else {
                write_file_text(path_arg(dump_out), dump_default_config());
            }
        } else if (gen_cmd->parsed()) {
            const auto cfg = load_lab_config(gen, SeedTarget::task_gen);
            const auto m = lab::cmd_gen_tasks(cfg, path_arg(gen_out), gen.verify);
            std::cout << "gen-tasks " << m.run_id << ": wrote " << m.outputs.size() << " files to " << gen_out << "\n";
        } else if (tb_cmd->parsed()) {
            const auto cfg = load_lab_config(tb, SeedTarget::pretrain);
            const auto m = lab::cmd_train_base(cfg, path_arg(tb_tasks), path_arg(tb_out), tb.verify);
            std::cout << "train-base " << m.run_id << ": " << lab::base_checkpoint_rel << " in " << tb_out << "\n";
        } else if (pl_cmd->parsed()) {
            const auto cfg = load_lab_config(pl, SeedTarget::tune);
            const auto out = path_arg(pl_out);
            lab::cmd_pipeline(cfg, {path_arg(pl_base), path_arg(pl_tasks)}, pl_method, out, pl.verify);
            std::cout << read_file_text(out / "reports/retention.txt");
        } else if (sw_cmd->parsed()) {
            const auto cfg = load_lab_config(sw, SeedTarget::tune);
            lab::SweepSpec spec;
            spec.param = lab::parse_sweep_param(sw_param);
            spec.method = sw_method;
            spec.values = sw_values;
            if (spec.values.empty()) {
                spec.values = spec.param == lab::SweepParam::alpha ? std::vector<double>{0.05, 0.1, 0.25, 0.5, 1.0}
                                                                   : std::vector<double>{0.9, 0.95, 0.99, 0.999};
            }
            const auto out = path_arg(sw_out);
            const auto rows =
                lab::cmd_sweep(cfg, spec, {path_arg(sw_base), path_arg(sw_tasks)}, out, sw_parallel, sw.verify);
            std::cout << read_file_text(out / "sweep.csv");
            for (const auto& r : rows) {
                if (!r.ok) {
                    return 2;
                }
            }
        } else if (ev_cmd->parsed()) {
            const auto cfg = load_lab_config(ev, SeedTarget::tune);
            lab::EvaluateRequest req;
            req.suite_ndjson = path_arg(ev_suite);
            if (ev_suite_manifest.empty()) {
                auto m = req.suite_ndjson;
                req.suite_manifest = m.replace_extension(".manifest.json");
            } else {
                req.suite_manifest = path_arg(ev_suite_manifest);
            }
            req.split = ev_split;
            if (!ev_ckpt.empty()) {
                req.checkpoint = path_arg(ev_ckpt);
            }
            if (!ev_pred.empty()) {
                req.predictions = path_arg(ev_pred);
            }
            const fs::path out = path_arg(ev_out);
            const auto report = lab::cmd_evaluate(cfg, req, ev_out.empty() ? nullptr : &out);
            std::cout << report.table();
        } else if (rp_cmd->parsed()) {
            std::vector<fs::path> dirs;
            for (const auto& d : rp_dirs) {
                dirs.push_back(path_arg(d));
                if (rp_verify) {
                    lab::verify_input_dir(dirs.back(), "run directory");
                }
            }
            const auto table = lab::cmd_report(dirs);
            std::cout << table;
            if (!rp_out.empty()) {
                write_file_text(path_arg(rp_out), table);
            }
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
