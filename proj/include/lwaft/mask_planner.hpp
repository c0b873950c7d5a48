#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lwaft/delta.hpp"
#include "lwaft/error.hpp"
#include "lwaft/mask_plan.hpp"
#include "lwaft/rng.hpp"

namespace lwaft {

/// Global budget H of unfrozen parameters, given directly or as a freeze rate.
struct BudgetConfig {
    enum class Mode : std::uint8_t { global_count, freeze_rate };

    Mode mode = Mode::freeze_rate;
    std::uint64_t global_count = 0;
    double freeze_rate = 0.99;

    static BudgetConfig count(std::uint64_t h) { return {Mode::global_count, h, 0.0}; }
    static BudgetConfig rate(double r) { return {Mode::freeze_rate, 0, r}; }

    void validate() const {
        if (mode == Mode::global_count) {
            require(global_count > 0, "budget: global_count must be > 0");
        } else {
            require(freeze_rate >= 0.0 && freeze_rate < 1.0, "budget: freeze_rate must be in [0, 1)");
        }
    }

    /// H for a model with `total` parameters. Zero is an error.
    [[nodiscard]] std::size_t resolve(std::size_t total) const {
        validate();
        if (mode == Mode::global_count) {
            return static_cast<std::size_t>(global_count);
        }
        const auto h = static_cast<std::size_t>(std::llround((1.0 - freeze_rate) * static_cast<double>(total)));
        if (h == 0) {
            throw ValidationError("budget underflow, specify global_count (freeze_rate " + describe() + " of " +
                                  std::to_string(total) + " parameters leaves none unfrozen)");
        }
        return h;
    }

    [[nodiscard]] std::string describe() const {
        std::ostringstream os;
        os.precision(17);
        if (mode == Mode::global_count) {
            os << "global_count=" << global_count;
        } else {
            os << "freeze_rate=" << freeze_rate;
        }
        return os.str();
    }
};

struct BudgetAllocation {
    std::vector<std::size_t> h;     // integer per-layer budgets
    std::vector<double> raw;        // first-pass fractional shares, before any clamping
    std::vector<std::size_t> first_pass; // raw integerized over all layers, before any clamping
    std::vector<bool> clamped;      // layer hit its size and was fixed at w_l
    std::size_t budget = 0;         // effective H after clamping to the parameter count
    std::vector<std::string> warnings;
};

namespace detail {

// Floor + largest remainder (ties by layer order) so the integers sum to `target`.
inline void integerize(std::span<const double> raw, std::span<const std::size_t> members,
                       std::span<const std::size_t> caps, std::size_t target, std::vector<std::size_t>& h) {
    std::vector<double> rem(raw.size(), 0.0);
    std::size_t assigned = 0;
    for (auto l : members) {
        const double fl = std::floor(raw[l]);
        h[l] = std::min(caps[l], static_cast<std::size_t>(std::max(0.0, fl)));
        rem[l] = raw[l] - static_cast<double>(h[l]);
        assigned += h[l];
    }
    std::vector<std::size_t> order(members.begin(), members.end());
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    // Rounding in the shares can leave the floors one off either way.
    while (assigned < target) {
        bool progressed = false;
        for (auto l : order) {
            if (assigned == target) {
                break;
            }
            if (h[l] < caps[l]) {
                ++h[l];
                ++assigned;
                progressed = true;
            }
        }
        if (!progressed) {
            break;
        }
    }
    while (assigned > target) {
        for (auto it = order.rbegin(); it != order.rend() && assigned > target; ++it) {
            if (h[*it] > 0) {
                --h[*it];
                --assigned;
            }
        }
    }
}

} // namespace detail

/// Split `budget` across layers in proportion to `weights`, never exceeding
/// `caps`. Oversubscribed layers are clamped to their cap and the surplus is
/// re-split among the rest until nothing is oversubscribed.
inline BudgetAllocation allocate_proportional(std::span<const double> weights, std::span<const std::size_t> caps,
                                              std::size_t budget) {
    require(!weights.empty(), "allocate_budget: empty profile");
    require(weights.size() == caps.size(), "allocate_budget: weights/caps size mismatch");
    require(budget >= 1, "allocate_budget: budget must be >= 1");
    const auto L = weights.size();
    BudgetAllocation out;
    std::size_t capacity = 0;
    for (std::size_t l = 0; l < L; ++l) {
        require(caps[l] >= 1, "allocate_budget: every layer needs at least one parameter");
        require(weights[l] >= 0.0 && std::isfinite(weights[l]), "allocate_budget: weights must be finite and >= 0");
        capacity += caps[l];
    }
    if (budget > capacity) {
        out.warnings.push_back("budget " + std::to_string(budget) + " exceeds parameter count " +
                               std::to_string(capacity) + "; clamped");
        budget = capacity;
    }
    out.budget = budget;

    std::vector<double> w(weights.begin(), weights.end());
    if (std::all_of(w.begin(), w.end(), [](double x) { return x == 0.0; })) {
        out.warnings.push_back("all layer weights are zero; allocating in proportion to layer size");
        for (std::size_t l = 0; l < L; ++l) {
            w[l] = static_cast<double>(caps[l]);
        }
    }

    out.h.assign(L, 0);
    out.clamped.assign(L, false);
    out.raw.assign(L, 0.0);
    std::vector<std::size_t> active(L);
    std::iota(active.begin(), active.end(), std::size_t{0});
    std::size_t remaining = budget;
    bool first_pass = true;
    std::vector<double> raw(L, 0.0);
    while (true) {
        double total = 0.0;
        for (auto l : active) {
            total += w[l];
        }
        if (total == 0.0 && remaining > 0) {
            out.warnings.push_back("remaining layers have zero weight; allocating surplus by layer size");
            for (auto l : active) {
                w[l] = static_cast<double>(caps[l]);
                total += w[l];
            }
        }
        for (auto l : active) {
            raw[l] = total > 0.0 ? w[l] / total * static_cast<double>(remaining) : 0.0;
        }
        if (first_pass) {
            out.raw = raw;
            out.first_pass.assign(L, 0);
            const std::vector<std::size_t> uncapped(L, budget);
            detail::integerize(raw, active, uncapped, budget, out.first_pass);
            first_pass = false;
        }
        std::vector<std::size_t> keep;
        bool any_clamped = false;
        for (auto l : active) {
            if (raw[l] > static_cast<double>(caps[l])) {
                out.h[l] = caps[l];
                out.clamped[l] = true;
                remaining -= caps[l];
                any_clamped = true;
            } else {
                keep.push_back(l);
            }
        }
        active = std::move(keep);
        if (!any_clamped) {
            break;
        }
    }
    detail::integerize(raw, active, caps, remaining, out.h);
    return out;
}

/// Layer budgets h_l proportional to m_l * w_l, summing exactly to min(H, sum w_l).
inline BudgetAllocation allocate_budget(std::span<const LayerProfileRow> profile, std::size_t budget) {
    std::vector<double> weights;
    std::vector<std::size_t> caps;
    for (const auto& row : profile) {
        require(row.mean_abs >= 0.0, "allocate_budget: mean_abs must be >= 0");
        weights.push_back(row.mean_abs * static_cast<double>(row.count));
        caps.push_back(row.count);
    }
    return allocate_proportional(weights, caps, budget);
}

/// Indices of the k largest deltas, ties to the smaller index, returned ascending.
inline std::vector<std::uint64_t> topk_mask(std::span<const double> deltas, std::size_t k) {
    require(k <= deltas.size(), "topk_mask: k=" + std::to_string(k) + " exceeds length " +
                                    std::to_string(deltas.size()));
    std::vector<std::uint64_t> idx(deltas.size());
    std::iota(idx.begin(), idx.end(), std::uint64_t{0});
    const auto before = [&](std::uint64_t a, std::uint64_t b) {
        return deltas[a] > deltas[b] || (deltas[a] == deltas[b] && a < b);
    };
    if (k < idx.size()) {
        std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
        idx.resize(k);
    }
    std::sort(idx.begin(), idx.end());
    return idx;
}

namespace detail {

inline MaskPlan plan_from_topk(const DeltaStats& stats, std::span<const std::size_t> h) {
    MaskPlan plan;
    for (std::size_t l = 0; l < stats.layers.size(); ++l) {
        const auto& layer = stats.layers[l];
        plan.layers.push_back(LayerMask{layer.layer_name, layer.count, topk_mask(layer.deltas, h[l])});
    }
    return plan;
}

} // namespace detail

/// Proportional allocation followed by per-layer top-k selection.
inline MaskPlan build_mask_plan(const DeltaStats& stats, const BudgetConfig& budget, MaskProvenance provenance = {}) {
    require(!stats.layers.empty(), "build_mask_plan: empty delta stats");
    const auto H = budget.resolve(stats.total_count());
    const auto profile = layer_profile(stats);
    auto alloc = allocate_budget(profile, H);
    auto plan = detail::plan_from_topk(stats, alloc.h);
    provenance.budget = budget.describe();
    provenance.delta_hash = stats.hash();
    provenance.warnings.insert(provenance.warnings.end(), alloc.warnings.begin(), alloc.warnings.end());
    plan.provenance = std::move(provenance);
    return plan;
}

/// Same per-layer budgets as build_mask_plan, but uniformly random indices.
inline MaskPlan random_mask_plan(const DeltaStats& stats, const BudgetConfig& budget, std::uint64_t seed,
                                 MaskProvenance provenance = {}) {
    const auto H = budget.resolve(stats.total_count());
    const auto alloc = allocate_budget(layer_profile(stats), H);
    MaskPlan plan;
    for (std::size_t l = 0; l < stats.layers.size(); ++l) {
        const auto& layer = stats.layers[l];
        std::vector<std::uint64_t> idx(layer.count);
        std::iota(idx.begin(), idx.end(), std::uint64_t{0});
        Rng rng(derive_seed(seed, layer.layer_name));
        // partial Fisher-Yates: the first h entries are a uniform sample
        for (std::size_t i = 0; i < alloc.h[l]; ++i) {
            const auto j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(alloc.h[l]);
        std::sort(idx.begin(), idx.end());
        plan.layers.push_back(LayerMask{layer.layer_name, layer.count, std::move(idx)});
    }
    provenance.method = "random_mask";
    provenance.budget = budget.describe();
    provenance.delta_hash = stats.hash();
    provenance.warnings = alloc.warnings;
    plan.provenance = std::move(provenance);
    return plan;
}

/// Top-H deltas network-wide, ignoring layer structure. Ties go to the
/// earlier layer, then the smaller index.
inline MaskPlan global_topk_plan(const DeltaStats& stats, const BudgetConfig& budget, MaskProvenance provenance = {}) {
    const auto total = stats.total_count();
    const auto H = std::min(budget.resolve(total), total);
    std::vector<double> flat;
    flat.reserve(total);
    for (const auto& l : stats.layers) {
        flat.insert(flat.end(), l.deltas.begin(), l.deltas.end());
    }
    const auto chosen = topk_mask(flat, H);
    MaskPlan plan;
    std::size_t offset = 0;
    auto it = chosen.begin();
    for (const auto& l : stats.layers) {
        LayerMask m{l.layer_name, l.count, {}};
        while (it != chosen.end() && *it < offset + l.count) {
            m.unfrozen.push_back(*it - offset);
            ++it;
        }
        offset += l.count;
        plan.layers.push_back(std::move(m));
    }
    provenance.method = "global_topk";
    provenance.budget = budget.describe();
    provenance.delta_hash = stats.hash();
    plan.provenance = std::move(provenance);
    return plan;
}

/// Equal budget per layer (capped at layer size), top-k within each layer.
inline MaskPlan layer_uniform_plan(const DeltaStats& stats, const BudgetConfig& budget,
                                   MaskProvenance provenance = {}) {
    const auto H = budget.resolve(stats.total_count());
    std::vector<double> weights(stats.layers.size(), 1.0);
    std::vector<std::size_t> caps;
    for (const auto& l : stats.layers) {
        caps.push_back(l.count);
    }
    const auto alloc = allocate_proportional(weights, caps, H);
    auto plan = detail::plan_from_topk(stats, alloc.h);
    provenance.method = "layer_uniform";
    provenance.budget = budget.describe();
    provenance.delta_hash = stats.hash();
    provenance.warnings = alloc.warnings;
    plan.provenance = std::move(provenance);
    return plan;
}

} // namespace lwaft
