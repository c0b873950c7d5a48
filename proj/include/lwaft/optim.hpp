#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <string>

#include "lwaft/error.hpp"
#include "lwaft/mask_plan.hpp"
#include "lwaft/param_store.hpp"

namespace lwaft {

enum class Schedule : std::uint8_t { cosine, constant };

inline std::string to_string(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

inline Schedule parse_schedule(const std::string& text) {
    if (text == "cosine") {
        return Schedule::cosine;
    }
    if (text == "constant") {
        return Schedule::constant;
    }
    throw ValidationError("optim.schedule: unknown schedule '" + text + "'");
}

/// AdamW hyperparameters with warmup and an optional cosine decay.
struct OptimConfig {
    double learning_rate = 1e-2;
    double weight_decay = 0.05;
    double warmup_ratio = 0.03;
    Schedule schedule = Schedule::cosine;
    int epochs = 1;
    int batch_size = 12;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    /// Desk-scale default: the large-model learning rate barely moves toy models.
    static OptimConfig toy() { return OptimConfig{}; }

    /// Settings for fine-tuning a multi-billion-parameter model: lr 3e-5, otherwise the defaults.
    static OptimConfig large_model() {
        OptimConfig c;
        c.learning_rate = 3e-5;
        return c;
    }

    void validate() const {
        require(learning_rate > 0.0 && std::isfinite(learning_rate), "optim.learning_rate must be > 0");
        require(weight_decay >= 0.0, "optim.weight_decay must be >= 0");
        require(warmup_ratio >= 0.0 && warmup_ratio < 1.0, "optim.warmup_ratio must be in [0, 1)");
        require(epochs >= 1, "optim.epochs must be >= 1");
        require(batch_size >= 1, "optim.batch_size must be >= 1");
        require(beta1 >= 0.0 && beta1 < 1.0, "optim.beta1 must be in [0, 1)");
        require(beta2 >= 0.0 && beta2 < 1.0, "optim.beta2 must be in [0, 1)");
        require(eps > 0.0, "optim.eps must be > 0");
    }

    [[nodiscard]] std::string describe() const {
        std::ostringstream os;
        os.precision(17);
        os << "lr=" << learning_rate << ";wd=" << weight_decay << ";warmup=" << warmup_ratio
           << ";schedule=" << to_string(schedule) << ";epochs=" << epochs << ";batch=" << batch_size
           << ";beta1=" << beta1 << ";beta2=" << beta2 << ";eps=" << eps;
        return os.str();
    }
};

inline std::int64_t warmup_steps(const OptimConfig& cfg, std::int64_t total_steps) {
    return static_cast<std::int64_t>(std::ceil(cfg.warmup_ratio * static_cast<double>(total_steps)));
}

/// Linear warmup to the peak rate, then constant or half-cosine decay toward zero.
inline double learning_rate_at(const OptimConfig& cfg, std::int64_t step, std::int64_t total_steps) {
    const auto warm = warmup_steps(cfg, total_steps);
    if (step < warm) {
        return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
    }
    if (cfg.schedule == Schedule::constant) {
        return cfg.learning_rate;
    }
    const double span = static_cast<double>(std::max<std::int64_t>(1, total_steps - warm));
    const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// First and second moments, laid out like the parameters they track.
struct OptimState {
    OptimConfig config;
    std::int64_t total_steps = 1;
    GradStore m;
    GradStore v;

    OptimState(const ParamStore& params, OptimConfig cfg, std::int64_t total)
        : config(cfg), total_steps(total), m(GradStore::zeros_like(params)), v(GradStore::zeros_like(params)) {
        config.validate();
        require(total_steps >= 1, "optimizer needs at least one step");
    }
};

namespace detail {

inline void adamw_element(double& p, double g, double& m, double& v, double lr, double c1, double c2,
                          const OptimConfig& cfg) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double mhat = m / c1;
    const double vhat = v / c2;
    p -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p);
}

} // namespace detail

/// One AdamW step at `step` (0-based). With a mask, the gradient is multiplied
/// elementwise by the binary mask; masked-out parameters and their moments are
/// left untouched (no decay either).
inline void apply_update(ParamStore& params, const GradStore& grads, OptimState& state, std::int64_t step,
                         const MaskPlan* mask = nullptr) {
    if (auto mismatch = params.first_layout_mismatch(grads)) {
        throw ValidationError("apply_update: gradient layout mismatch at " + *mismatch);
    }
    if (mask != nullptr) {
        mask->check_layout(params);
    }
    for (std::size_t l = 0; l < grads.num_layers(); ++l) {
        const auto g = grads.values(l);
        auto check = [&](std::size_t j) {
            if (!std::isfinite(g[j])) {
                throw DivergenceError("non-finite gradient in layer '" + grads.name(l) + "' at step " +
                                          std::to_string(step),
                                      step, step - 1);
            }
        };
        if (mask == nullptr) {
            for (std::size_t j = 0; j < g.size(); ++j) {
                check(j);
            }
        } else {
            for (auto j : mask->layers[l].unfrozen) {
                check(j);
            }
        }
    }
    const double lr = learning_rate_at(state.config, step, state.total_steps);
    const double c1 = 1.0 - std::pow(state.config.beta1, static_cast<double>(step + 1));
    const double c2 = 1.0 - std::pow(state.config.beta2, static_cast<double>(step + 1));
    for (std::size_t l = 0; l < params.num_layers(); ++l) {
        auto p = params.mutable_values(l);
        auto m = state.m.mutable_values(l);
        auto v = state.v.mutable_values(l);
        const auto g = grads.values(l);
        if (mask == nullptr) {
            for (std::size_t j = 0; j < p.size(); ++j) {
                detail::adamw_element(p[j], g[j], m[j], v[j], lr, c1, c2, state.config);
            }
        } else {
            for (auto j : mask->layers[l].unfrozen) {
                detail::adamw_element(p[j], g[j], m[j], v[j], lr, c1, c2, state.config);
            }
        }
    }
}

} // namespace lwaft
