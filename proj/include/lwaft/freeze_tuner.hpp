#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lwaft/delta.hpp"
#include "lwaft/error.hpp"
#include "lwaft/mask_planner.hpp"
#include "lwaft/model.hpp"
#include "lwaft/optim.hpp"
#include "lwaft/scoring.hpp"
#include "lwaft/tasks.hpp"
#include "lwaft/train.hpp"
#include "lwaft/vocab.hpp"

namespace lwaft {

enum class Method : std::uint8_t { lwaft, full, lora, random_mask, global_topk, layer_uniform };

inline std::string to_string(Method m) {
    switch (m) {
    case Method::lwaft:
        return "lwaft";
    case Method::full:
        return "full";
    case Method::lora:
        return "lora";
    case Method::random_mask:
        return "random_mask";
    case Method::global_topk:
        return "global_topk";
    case Method::layer_uniform:
        return "layer_uniform";
    }
    return "";
}

inline Method parse_method(const std::string& text) {
    for (auto m : {Method::lwaft, Method::full, Method::lora, Method::random_mask, Method::global_topk,
                   Method::layer_uniform}) {
        if (text == to_string(m)) {
            return m;
        }
    }
    throw ValidationError("unknown method '" + text + "'");
}

/// Methods that need the expert run and its parameter deltas.
inline bool uses_expert(Method m) { return m != Method::full && m != Method::lora; }

struct FreezeTuneConfig {
    double alpha = 0.1;
    BudgetConfig budget = BudgetConfig::rate(0.99);
    Method method = Method::lwaft;
    int lora_rank = 4;
    double lora_alpha = 8.0; // factor update is scaled by lora_alpha / lora_rank
    OptimConfig optim = OptimConfig::toy();
    std::uint64_t seed = 0;

    void validate() const {
        require(alpha > 0.0 && alpha <= 1.0, "freeze_tuner.alpha must be in (0, 1]");
        require(lora_rank >= 1, "freeze_tuner.lora_rank must be >= 1");
        require(lora_alpha > 0.0, "freeze_tuner.lora_alpha must be > 0");
        budget.validate();
        optim.validate();
    }

    [[nodiscard]] std::string describe() const {
        std::ostringstream os;
        os.precision(17);
        os << "alpha=" << alpha << ";" << budget.describe() << ";method=" << to_string(method)
           << ";lora_rank=" << lora_rank << ";lora_alpha=" << lora_alpha << ";" << optim.describe()
           << ";seed=" << seed;
        return os.str();
    }

    [[nodiscard]] std::string hash() const { return sha256_hex(describe()); }
};

// ---------------------------------------------------------------------------
// Cases as model inputs

/// prompt + answer + END; only the answer and END are prediction targets.
inline TokenSequence to_sequence(const TaskCase& c) {
    TokenSequence s;
    s.tokens = vocab::encode(c.prompt);
    require(!s.tokens.empty(), "case " + c.case_id + ": empty prompt");
    s.target.assign(s.tokens.size(), 0);
    for (int t : vocab::encode(c.ground_truth)) {
        s.tokens.push_back(t);
        s.target.push_back(1);
    }
    s.tokens.push_back(vocab::end);
    s.target.push_back(1);
    return s;
}

inline Batch to_batch(const std::vector<TaskCase>& cases) {
    Batch b;
    b.sequences.reserve(cases.size());
    for (const auto& c : cases) {
        b.sequences.push_back(to_sequence(c));
    }
    return b;
}

/// Every case must encode in the model's vocabulary and fit its context.
inline void check_cases_fit(const ModelSpec& spec, const std::vector<TaskCase>& cases, const std::string& what) {
    require(spec.kind == ModelKind::seq_transducer, what + ": task suites need a seq_transducer model");
    require(spec.vocab_size == vocab::size, what + ": model vocab size " + std::to_string(spec.vocab_size) +
                                                " does not match the character vocabulary (" +
                                                std::to_string(vocab::size) + ")");
    for (const auto& c : cases) {
        require(vocab::encodable(c.prompt) && vocab::encodable(c.ground_truth),
                what + ": case " + c.case_id + " has characters outside the vocabulary");
        require(c.prompt.size() + c.ground_truth.size() + 1 <= static_cast<std::size_t>(spec.context_len),
                what + ": case " + c.case_id + " does not fit context_len " + std::to_string(spec.context_len));
    }
}

struct SuiteEvaluation {
    BenchReport report;
    std::map<std::string, std::string> predictions;
};

/// Greedy-decodes every case and scores it.
inline SuiteEvaluation evaluate_cases(const ParamStore& params, const ModelSpec& spec,
                                      const std::vector<TaskCase>& cases, const ScoreOptions& opts = {}) {
    check_cases_fit(spec, cases, "evaluate");
    SuiteEvaluation out;
    for (const auto& c : cases) {
        const auto prompt = vocab::encode(c.prompt);
        const auto room = static_cast<std::size_t>(spec.context_len) - prompt.size();
        out.predictions[c.case_id] = decode_greedy(params, spec, prompt, room);
    }
    out.report = aggregate(score_predictions(out.predictions, cases, opts), cases);
    return out;
}

// ---------------------------------------------------------------------------
// Training stages

inline TrainResult pretrain_base(const ModelSpec& spec, const std::vector<TaskCase>& train_cases,
                                 const OptimConfig& optim, std::uint64_t seed) {
    check_cases_fit(spec, train_cases, "train-base");
    return train(build_model(spec), spec, to_batch(train_cases), optim, nullptr, seed);
}

/// ceil(alpha * n), ignoring floating-point fuzz just above an integer.
inline std::size_t subset_size(double alpha, std::size_t n) {
    const double x = alpha * static_cast<double>(n);
    const double nearest = std::round(x);
    if (std::abs(x - nearest) <= 1e-9 * std::max(1.0, x)) {
        return static_cast<std::size_t>(nearest);
    }
    return static_cast<std::size_t>(std::ceil(x));
}

struct ExpertResult {
    ParamStore params;
    TrainLog log;
    std::vector<std::string> subset_ids;
    std::vector<std::string> warnings;
};

/// Full fine-tune of a copy of `base` on a seeded alpha-fraction of the data.
inline ExpertResult train_expert(const ParamStore& base, const ModelSpec& spec, const std::vector<TaskCase>& cases,
                                 double alpha, const OptimConfig& optim, std::uint64_t seed) {
    require(alpha > 0.0 && alpha <= 1.0, "train_expert: alpha must be in (0, 1]");
    require(!cases.empty(), "train_expert: empty dataset");
    check_cases_fit(spec, cases, "train_expert");
    ExpertResult out;
    const auto k = subset_size(alpha, cases.size());
    if (alpha * static_cast<double>(cases.size()) < 1.0) {
        out.warnings.push_back("alpha*N = " + std::to_string(alpha * static_cast<double>(cases.size())) +
                               " < 1; expert trained on a single case");
    }
    require(k >= 1, "train_expert: empty subset");
    std::vector<std::size_t> order(cases.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "expert-subset"));
    rng.shuffle(std::span(order));
    std::vector<TaskCase> subset;
    for (std::size_t i = 0; i < k; ++i) {
        subset.push_back(cases[order[i]]);
        out.subset_ids.push_back(cases[order[i]].case_id);
    }
    auto result = train(base, spec, to_batch(subset), optim, nullptr, derive_seed(seed, "expert"));
    out.params = std::move(result.params);
    out.log = std::move(result.log);
    return out;
}

/// Masked fine-tune that starts from the base parameters, not the expert.
inline TrainResult lwaft_finetune(const ParamStore& base, const ModelSpec& spec, const MaskPlan& mask,
                                  const std::vector<TaskCase>& cases, const OptimConfig& optim, std::uint64_t seed) {
    mask.check_layout(base);
    require(mask.total_unfrozen() > 0, "lwaft_finetune: mask unfreezes no parameters");
    check_cases_fit(spec, cases, "lwaft_finetune");
    return train(base, spec, to_batch(cases), optim, &mask, seed);
}

namespace detail {

struct LoraFactors {
    ParamStore factors; // "<layer>.lora_a" (r x cols) then "<layer>.lora_b" (rows x r) per adapted layer
    std::vector<std::size_t> layers;
    std::vector<std::size_t> rows;
    std::vector<std::size_t> cols;
};

// W = W0 + s * B A for every adapted layer.
inline void lora_merge(const ParamStore& base, const LoraFactors& lf, int rank, double scale, ParamStore& out) {
    const auto r = static_cast<std::size_t>(rank);
    for (std::size_t k = 0; k < lf.layers.size(); ++k) {
        const auto l = lf.layers[k];
        const auto rows = lf.rows[k];
        const auto cols = lf.cols[k];
        const auto a = lf.factors.values(2 * k);
        const auto b = lf.factors.values(2 * k + 1);
        const auto w0 = base.values(l);
        auto w = out.mutable_values(l);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                double acc = 0.0;
                for (std::size_t q = 0; q < r; ++q) {
                    acc += b[i * r + q] * a[q * cols + j];
                }
                w[i * cols + j] = w0[i * cols + j] + scale * acc;
            }
        }
    }
}

} // namespace detail

/// Number of weight layers a LoRA adapter would attach to.
inline std::size_t lora_target_count(const ParamStore& params, const ModelSpec& spec) {
    std::size_t n = 0;
    for (const auto& shape : layer_shapes(spec)) {
        n += shape.is_matrix() && params.find(shape.name) ? 1 : 0;
    }
    return n;
}

/// Rank-r factors on every 2-D weight; everything else stays frozen. The
/// factors are merged into the returned parameters.
inline TrainResult lora_finetune(const ParamStore& base, const ModelSpec& spec, const std::vector<TaskCase>& cases,
                                 int rank, double lora_alpha, const OptimConfig& optim, std::uint64_t seed) {
    require(rank >= 1, "lora: rank must be >= 1");
    check_cases_fit(spec, cases, "lora_finetune");
    const auto r = static_cast<std::size_t>(rank);
    const double scale = lora_alpha / static_cast<double>(rank);
    detail::LoraFactors lf;
    for (const auto& shape : layer_shapes(spec)) {
        if (!shape.is_matrix()) {
            continue;
        }
        const auto l = base.find(shape.name);
        require(l.has_value(), "lora: layer " + shape.name + " missing from checkpoint");
        Rng rng(derive_seed(seed, "lora/" + shape.name));
        std::vector<double> a(r * shape.cols);
        for (auto& x : a) {
            x = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(shape.cols)));
        }
        lf.factors.add_layer(shape.name + ".lora_a", std::move(a));
        lf.factors.add_layer(shape.name + ".lora_b", std::vector<double>(shape.rows * r, 0.0));
        lf.layers.push_back(*l);
        lf.rows.push_back(shape.rows);
        lf.cols.push_back(shape.cols);
    }
    if (lf.layers.empty()) {
        throw ValidationError("lora: model has no 2-D weight layers to adapt");
    }
    const auto data = to_batch(cases);
    ParamStore merged = base;
    OptimState state(lf.factors, optim, total_train_steps(data.size(), optim));
    auto log = run_training_loop(data.size(), optim, derive_seed(seed, "finetune-order"),
                                 [&](std::span<const std::size_t> idx, std::int64_t step) {
        detail::lora_merge(base, lf, rank, scale, merged);
        auto fwd = forward_loss(merged, spec, data.select(idx));
        if (!std::isfinite(fwd.loss)) {
            return fwd.loss;
        }
        const auto g = backward(fwd.cache);
        // chain rule through W = W0 + s B A:  dA = s B^T dW,  dB = s dW A^T
        auto fg = GradStore::zeros_like(lf.factors);
        for (std::size_t k = 0; k < lf.layers.size(); ++k) {
            const auto rows = lf.rows[k];
            const auto cols = lf.cols[k];
            const auto dw = g.values(lf.layers[k]);
            const auto a = lf.factors.values(2 * k);
            const auto b = lf.factors.values(2 * k + 1);
            auto da = fg.mutable_values(2 * k);
            auto db = fg.mutable_values(2 * k + 1);
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) {
                    const double d = scale * dw[i * cols + j];
                    if (d == 0.0) {
                        continue;
                    }
                    for (std::size_t q = 0; q < r; ++q) {
                        da[q * cols + j] += b[i * r + q] * d;
                        db[i * r + q] += d * a[q * cols + j];
                    }
                }
            }
        }
        apply_update(lf.factors, fg, state, step);
        return fwd.loss;
    });
    detail::lora_merge(base, lf, rank, scale, merged);
    require(merged.all_finite(), "lora: merged parameters are not finite");
    log.config_hash = sha256_hex(optim.describe() + ";lora_rank=" + std::to_string(rank));
    return {std::move(merged), std::move(log)};
}

/// Everything one method produces on the way to its tuned checkpoint.
struct MethodRun {
    Method method = Method::lwaft;
    ParamStore tuned;
    TrainLog tune_log;
    std::optional<ExpertResult> expert;
    std::optional<DeltaStats> delta;
    std::optional<MaskPlan> mask;
    std::vector<std::string> warnings;
};

/// Mask for a delta-guided method. LW-AFT allocates per layer by mean delta;
/// the other three are ablations that share its budget H.
inline MaskPlan plan_for_method(Method m, const DeltaStats& delta, const FreezeTuneConfig& cfg,
                                MaskProvenance provenance) {
    provenance.alpha = cfg.alpha;
    switch (m) {
    case Method::lwaft:
        provenance.method = "lwaft";
        return build_mask_plan(delta, cfg.budget, std::move(provenance));
    case Method::random_mask:
        return random_mask_plan(delta, cfg.budget, derive_seed(cfg.seed, "random-mask"), std::move(provenance));
    case Method::global_topk:
        return global_topk_plan(delta, cfg.budget, std::move(provenance));
    case Method::layer_uniform:
        return layer_uniform_plan(delta, cfg.budget, std::move(provenance));
    default:
        throw ValidationError("method " + to_string(m) + " does not use a mask");
    }
}

/// Runs one method end to end from the base checkpoint. Masked methods run
/// the expert first; full and lora train directly. All methods see the
/// target data in the same seeded order.
inline MethodRun run_method(const ParamStore& base, const ModelSpec& spec, const std::vector<TaskCase>& target_train,
                            const FreezeTuneConfig& cfg, const std::string& expert_run_id = "") {
    cfg.validate();
    require(!target_train.empty(), "run_method: empty target dataset");
    MethodRun run;
    run.method = cfg.method;
    const auto order_seed = derive_seed(cfg.seed, "finetune-order");
    if (uses_expert(cfg.method)) {
        run.expert = train_expert(base, spec, target_train, cfg.alpha, cfg.optim, cfg.seed);
        run.warnings = run.expert->warnings;
        run.delta = param_delta(base, run.expert->params);
        MaskProvenance prov;
        prov.expert_run_id = expert_run_id;
        run.mask = plan_for_method(cfg.method, *run.delta, cfg, prov);
        for (const auto& w : run.mask->provenance.warnings) {
            run.warnings.push_back(w);
        }
        auto tuned = lwaft_finetune(base, spec, *run.mask, target_train, cfg.optim, order_seed);
        run.tuned = std::move(tuned.params);
        run.tune_log = std::move(tuned.log);
    } else if (cfg.method == Method::full) {
        check_cases_fit(spec, target_train, "full_finetune");
        auto tuned = train(base, spec, to_batch(target_train), cfg.optim, nullptr, order_seed);
        run.tuned = std::move(tuned.params);
        run.tune_log = std::move(tuned.log);
    } else {
        auto tuned = lora_finetune(base, spec, target_train, cfg.lora_rank, cfg.lora_alpha, cfg.optim, cfg.seed);
        run.tuned = std::move(tuned.params);
        run.tune_log = std::move(tuned.log);
    }
    return run;
}

/// Count of coordinates whose bits differ between two same-layout stores.
inline std::size_t changed_count(const ParamStore& a, const ParamStore& b) {
    require(a.same_layout(b), "changed_count: layout mismatch");
    std::size_t n = 0;
    for (std::size_t l = 0; l < a.num_layers(); ++l) {
        const auto x = a.values(l);
        const auto y = b.values(l);
        for (std::size_t j = 0; j < x.size(); ++j) {
            n += std::memcmp(&x[j], &y[j], sizeof(double)) != 0 ? 1 : 0;
        }
    }
    return n;
}

/// True when every bit-changed coordinate lies inside the mask.
inline bool changes_within_mask(const ParamStore& before, const ParamStore& after, const MaskPlan& mask) {
    mask.check_layout(before);
    for (std::size_t l = 0; l < before.num_layers(); ++l) {
        const auto x = before.values(l);
        const auto y = after.values(l);
        for (std::size_t j = 0; j < x.size(); ++j) {
            if (std::memcmp(&x[j], &y[j], sizeof(double)) != 0 && !mask.contains(l, j)) {
                return false;
            }
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Reports

struct DomainScores {
    BenchReport base_domain;
    BenchReport target_domain;
};

inline DomainScores evaluate_domains(const ParamStore& params, const ModelSpec& spec, const TaskSuite& base_suite,
                                     const TaskSuite& target_suite) {
    return {evaluate_cases(params, spec, base_suite.eval_cases()).report,
            evaluate_cases(params, spec, target_suite.eval_cases()).report};
}

struct RetentionReport {
    std::string method;
    std::string config_hash;
    DomainScores after;
    DomainScores base_model;
    std::string base_suite_hash;
    std::string target_suite_hash;
    std::string mask_hash; // empty for unmasked methods
    std::vector<std::string> warnings;

    [[nodiscard]] double base_domain_score() const { return after.base_domain.overall; }
    [[nodiscard]] double target_domain_score() const { return after.target_domain.overall; }
    [[nodiscard]] double base_domain_delta() const {
        return after.base_domain.overall - base_model.base_domain.overall;
    }
    [[nodiscard]] double target_domain_delta() const {
        return after.target_domain.overall - base_model.target_domain.overall;
    }

    [[nodiscard]] nlohmann::json to_json() const {
        const auto cell_deltas = [](const BenchReport& a, const BenchReport& b) {
            nlohmann::json out = nlohmann::json::object();
            for (const auto& [name, cell] : a.grid) {
                auto it = b.grid.find(name);
                if (it != b.grid.end()) {
                    out[name] = cell.mean - it->second.mean;
                }
            }
            return out;
        };
        return {{"method", method},
                {"config_hash", config_hash},
                {"base_domain", after.base_domain.to_json()},
                {"target_domain", after.target_domain.to_json()},
                {"base_model",
                 {{"base_domain", base_model.base_domain.to_json()},
                  {"target_domain", base_model.target_domain.to_json()}}},
                {"delta_vs_base",
                 {{"base_domain", base_domain_delta()},
                  {"target_domain", target_domain_delta()},
                  {"base_domain_cells", cell_deltas(after.base_domain, base_model.base_domain)},
                  {"target_domain_cells", cell_deltas(after.target_domain, base_model.target_domain)}}},
                {"base_suite_sha256", base_suite_hash},
                {"target_suite_sha256", target_suite_hash},
                {"mask_sha256", mask_hash},
                {"warnings", warnings}};
    }

    static RetentionReport from_json(const nlohmann::json& j) {
        RetentionReport r;
        r.method = j.at("method").get<std::string>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.after.base_domain = BenchReport::from_json(j.at("base_domain"));
        r.after.target_domain = BenchReport::from_json(j.at("target_domain"));
        r.base_model.base_domain = BenchReport::from_json(j.at("base_model").at("base_domain"));
        r.base_model.target_domain = BenchReport::from_json(j.at("base_model").at("target_domain"));
        r.base_suite_hash = j.at("base_suite_sha256").get<std::string>();
        r.target_suite_hash = j.at("target_suite_sha256").get<std::string>();
        r.mask_hash = j.value("mask_sha256", "");
        r.warnings = j.value("warnings", std::vector<std::string>{});
        return r;
    }
};

/// Scores `model` on both held-out suites and reports the change against the
/// base model's scores on the same suites.
inline RetentionReport retention_eval(const ParamStore& model, const ModelSpec& spec, const TaskSuite& base_suite,
                                      const TaskSuite& target_suite, const DomainScores& base_model_scores,
                                      const std::string& method, const std::string& config_hash) {
    RetentionReport r;
    r.method = method;
    r.config_hash = config_hash;
    r.after = evaluate_domains(model, spec, base_suite, target_suite);
    r.base_model = base_model_scores;
    r.base_suite_hash = base_suite.hash();
    r.target_suite_hash = target_suite.hash();
    return r;
}

struct CrossEvalResult {
    std::string train_tag;
    std::string eval_tag;
    std::size_t n = 0;
    double mean_ned = 0.0;
    [[nodiscard]] double score() const { return 1.0 - mean_ned; }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"train_tag", train_tag}, {"eval_tag", eval_tag}, {"n", n}, {"ned", mean_ned},
                {"one_minus_ned", score()}};
    }
};

/// "domain/task_type", e.g. "gazette/lookup".
inline std::pair<std::string, std::string> parse_tag(const std::string& tag) {
    const auto slash = tag.find('/');
    require(slash != std::string::npos && slash > 0 && slash + 1 < tag.size(),
            "tag '" + tag + "' must look like domain/task_type");
    return {tag.substr(0, slash), tag.substr(slash + 1)};
}

/// Cases of `suite` (eval split) carrying the (domain, task_type) tag.
inline std::vector<TaskCase> cases_with_tag(const TaskSuite& suite, const std::string& tag, bool eval_split = true) {
    const auto [domain, task] = parse_tag(tag);
    (void)domain_grammar(domain);
    std::vector<TaskCase> out;
    for (const auto& c : eval_split ? suite.eval_cases() : suite.train_cases()) {
        if (c.tags.domain == domain && c.tags.task_type == task) {
            out.push_back(c);
        }
    }
    require(!out.empty(), "unknown tag '" + tag + "': no cases carry it");
    return out;
}

/// Mean NED of the model's predictions on the eval-tag cases. Lower NED is
/// better; 1 - NED is reported alongside.
inline CrossEvalResult cross_eval(const ParamStore& model, const ModelSpec& spec, const TaskSuite& suite,
                                  const std::string& train_tag, const std::string& eval_tag) {
    (void)parse_tag(train_tag);
    const auto cases = cases_with_tag(suite, eval_tag);
    const auto ev = evaluate_cases(model, spec, cases);
    CrossEvalResult r;
    r.train_tag = train_tag;
    r.eval_tag = eval_tag;
    r.n = cases.size();
    double total = 0.0;
    for (const auto& c : cases) {
        total += ned(ev.predictions.at(c.case_id), c.ground_truth);
    }
    r.mean_ned = total / static_cast<double>(cases.size());
    return r;
}

} // namespace lwaft
