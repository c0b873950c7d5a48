#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lwaft/error.hpp"
#include "lwaft/hash.hpp"
#include "lwaft/mask_plan.hpp"
#include "lwaft/model.hpp"
#include "lwaft/optim.hpp"
#include "lwaft/rng.hpp"

namespace lwaft {

struct TrainRecord {
    std::int64_t step = 0;
    double loss = 0.0;
    double learning_rate = 0.0;
};

struct TrainLog {
    std::vector<TrainRecord> records;
    double wall_time_s = 0.0;
    std::uint64_t seed = 0;
    std::string config_hash;

    /// One JSON object per step.
    [[nodiscard]] std::string to_ndjson() const {
        std::string out;
        for (const auto& r : records) {
            out += nlohmann::json{{"step", r.step}, {"loss", r.loss}, {"lr", r.learning_rate}}.dump();
            out += '\n';
        }
        return out;
    }

    [[nodiscard]] double final_loss() const { return records.empty() ? 0.0 : records.back().loss; }
};

struct TrainResult {
    ParamStore params;
    TrainLog log;
};

inline std::int64_t steps_per_epoch(std::size_t dataset_size, int batch_size) {
    const auto bs = static_cast<std::size_t>(batch_size);
    return static_cast<std::int64_t>((dataset_size + bs - 1) / bs);
}

inline std::int64_t total_train_steps(std::size_t dataset_size, const OptimConfig& cfg) {
    return steps_per_epoch(dataset_size, cfg.batch_size) * cfg.epochs;
}

/// Seeded minibatch loop. Each epoch reshuffles with a seed derived from
/// (seed, epoch). `step_fn(indices, step)` performs one update and returns the
/// batch loss.
template <class StepFn>
TrainLog run_training_loop(std::size_t dataset_size, const OptimConfig& cfg, std::uint64_t seed, StepFn&& step_fn) {
    require(dataset_size > 0, "train: empty dataset");
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    const auto total = total_train_steps(dataset_size, cfg);
    TrainLog log;
    log.seed = seed;
    std::vector<std::size_t> order(dataset_size);
    std::int64_t step = 0;
    std::int64_t last_finite = -1;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(std::span(order));
        for (std::size_t begin = 0; begin < dataset_size; begin += static_cast<std::size_t>(cfg.batch_size)) {
            const auto end = std::min(dataset_size, begin + static_cast<std::size_t>(cfg.batch_size));
            std::span<const std::size_t> indices(order.data() + begin, end - begin);
            double loss = 0.0;
            try {
                loss = step_fn(indices, step);
            } catch (const DivergenceError& e) {
                throw DivergenceError(e.what(), step, last_finite);
            }
            if (!std::isfinite(loss)) {
                throw DivergenceError("training diverged at step " + std::to_string(step) +
                                          " (last finite step " + std::to_string(last_finite) + ")",
                                      step, last_finite);
            }
            last_finite = step;
            log.records.push_back({step, loss, learning_rate_at(cfg, step, total)});
            ++step;
        }
    }
    log.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return log;
}

inline std::string train_config_hash(const ModelSpec& spec, const OptimConfig& cfg, std::uint64_t seed,
                                     const MaskPlan* mask) {
    std::string text = cfg.describe() + ";kind=" + to_string(spec.kind) + ";dim=" + std::to_string(spec.model_dim) +
                       ";layers=" + std::to_string(spec.num_layers) + ";seed=" + std::to_string(seed);
    if (mask != nullptr) {
        text += ";mask=" + sha256_hex(serialize_mask(*mask));
    }
    return sha256_hex(text);
}

/// Deterministic minibatch AdamW training; with a mask, only unfrozen
/// coordinates can change.
inline TrainResult train(ParamStore params, const ModelSpec& spec, const Batch& dataset, const OptimConfig& cfg,
                         const MaskPlan* mask, std::uint64_t seed) {
    require(!dataset.empty(), "train: empty dataset");
    if (mask != nullptr) {
        mask->check_layout(params);
    }
    OptimState state(params, cfg, total_train_steps(dataset.size(), cfg));
    auto log = run_training_loop(dataset.size(), cfg, seed, [&](std::span<const std::size_t> idx, std::int64_t step) {
        const auto batch = dataset.select(idx);
        auto fwd = forward_loss(params, spec, batch);
        if (!std::isfinite(fwd.loss)) {
            return fwd.loss;
        }
        const auto grads = backward(fwd.cache);
        apply_update(params, grads, state, step, mask);
        return fwd.loss;
    });
    log.config_hash = train_config_hash(spec, cfg, seed, mask);
    if (!params.all_finite()) {
        throw DivergenceError("training produced non-finite parameters", static_cast<std::int64_t>(log.records.size()),
                              static_cast<std::int64_t>(log.records.size()) - 1);
    }
    return {std::move(params), std::move(log)};
}

} // namespace lwaft
