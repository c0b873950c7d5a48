#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

#include "lwaft/mask_planner.hpp"
#include "lwaft/model.hpp"
#include "lwaft/rng.hpp"

using namespace lwaft;

namespace {

std::vector<LayerProfileRow> profile(std::vector<double> m, std::vector<std::size_t> w) {
    std::vector<LayerProfileRow> rows;
    for (std::size_t i = 0; i < m.size(); ++i) {
        rows.push_back({"L" + std::to_string(i), m[i], w[i]});
    }
    return rows;
}

// Full stable sort by (value desc, index asc).
std::vector<std::uint64_t> topk_oracle(const std::vector<double>& d, std::size_t k) {
    std::vector<std::uint64_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return d[a] > d[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

DeltaStats stats_of(std::vector<std::vector<double>> layers) {
    DeltaStats s;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        LayerDelta l;
        l.layer_name = "L" + std::to_string(i);
        l.count = layers[i].size();
        l.mean_abs = layer_mean(layers[i]);
        l.deltas = std::move(layers[i]);
        s.layers.push_back(std::move(l));
    }
    return s;
}

DeltaStats random_stats(Rng& rng, std::size_t layers, std::size_t max_len) {
    std::vector<std::vector<double>> v(layers);
    for (auto& l : v) {
        l.resize(1 + rng.below(max_len));
        for (auto& x : l) {
            x = std::abs(rng.normal()) * 0.01;
        }
    }
    return stats_of(std::move(v));
}

} // namespace

TEST(AllocateBudget, ProportionalShares) {
    const auto a = allocate_budget(profile({0.02, 0.01}, {100, 300}), 50);
    EXPECT_EQ(a.h, (std::vector<std::size_t>{20, 30}));
}

TEST(AllocateBudget, ClampAndRedistribute) {
    const auto a = allocate_budget(profile({1.0, 0.001}, {10, 1000}), 20);
    EXPECT_NEAR(a.raw[0], 18.181818181818183, 1e-12);
    EXPECT_NEAR(a.raw[1], 1.8181818181818181, 1e-12);
    EXPECT_EQ(a.h, (std::vector<std::size_t>{10, 10}));
    EXPECT_TRUE(a.clamped[0]);
    EXPECT_FALSE(a.clamped[1]);
    EXPECT_EQ(a.first_pass, (std::vector<std::size_t>{18, 2}));
}

TEST(AllocateBudget, SingleLayer) {
    EXPECT_EQ(allocate_budget(profile({0.3}, {50}), 7).h, (std::vector<std::size_t>{7}));
}

TEST(AllocateBudget, AllZeroMeansFallBackToSize) {
    const auto a = allocate_budget(profile({0.0, 0.0}, {10, 30}), 8);
    EXPECT_EQ(a.h, (std::vector<std::size_t>{2, 6}));
    EXPECT_FALSE(a.warnings.empty());
}

TEST(AllocateBudget, OversizedBudgetClampsWithWarning) {
    const auto a = allocate_budget(profile({0.1, 0.2}, {3, 4}), 100);
    EXPECT_EQ(a.budget, 7u);
    EXPECT_EQ(a.h, (std::vector<std::size_t>{3, 4}));
    EXPECT_FALSE(a.warnings.empty());
}

TEST(AllocateBudget, Errors) {
    EXPECT_THROW(allocate_budget({}, 5), ValidationError);
    EXPECT_THROW(allocate_budget(profile({0.1}, {3}), 0), ValidationError);
    EXPECT_THROW(allocate_budget(profile({-0.1}, {3}), 1), ValidationError);
}

TEST(AllocateBudget, LargestRemainderTiesByLayerOrder) {
    // three equal layers, budget 4: floors 1,1,1 and the spare unit goes to layer 0
    const auto a = allocate_budget(profile({1.0, 1.0, 1.0}, {10, 10, 10}), 4);
    EXPECT_EQ(a.h, (std::vector<std::size_t>{2, 1, 1}));
}

TEST(AllocateBudget, PropertiesOnRandomProfiles) {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto L = 1 + rng.below(12);
        std::vector<double> m;
        std::vector<std::size_t> w;
        std::size_t total = 0;
        for (std::uint64_t i = 0; i < L; ++i) {
            m.push_back(rng.uniform() < 0.1 ? 0.0 : std::exp(rng.uniform(-8.0, 0.0)));
            w.push_back(1 + rng.below(500));
            total += w.back();
        }
        const auto H = 1 + rng.below(total + total / 4);
        const auto a = allocate_budget(profile(m, w), H);
        const auto sum = std::accumulate(a.h.begin(), a.h.end(), std::size_t{0});
        ASSERT_EQ(sum, std::min<std::size_t>(H, total));
        const bool any_clamped = std::any_of(a.clamped.begin(), a.clamped.end(), [](bool b) { return b; });
        for (std::size_t l = 0; l < L; ++l) {
            ASSERT_LE(a.h[l], w[l]);
            ASSERT_LT(std::abs(static_cast<double>(a.first_pass[l]) - a.raw[l]), 1.0);
            if (!any_clamped) {
                ASSERT_LT(std::abs(static_cast<double>(a.h[l]) - a.raw[l]), 1.0);
            }
        }
        const double c = std::exp(rng.uniform(-10.0, 10.0));
        auto scaled = m;
        for (auto& x : scaled) {
            x *= c;
        }
        ASSERT_EQ(allocate_budget(profile(scaled, w), H).h, a.h) << "trial " << trial;
    }
}

TEST(TopkMask, TieRuleAndBoundaries) {
    const std::vector<double> d{0.5, 0.1, 0.9, 0.5};
    EXPECT_EQ(topk_mask(d, 2), (std::vector<std::uint64_t>{0, 2}));
    EXPECT_TRUE(topk_mask(d, 0).empty());
    EXPECT_EQ(topk_mask(d, 4), (std::vector<std::uint64_t>{0, 1, 2, 3}));
    EXPECT_THROW(topk_mask(d, 5), ValidationError);
}

TEST(TopkMask, MatchesFullSortOracle) {
    Rng rng(99);
    for (int trial = 0; trial < 300; ++trial) {
        const auto n = 1 + rng.below(trial < 250 ? 200 : 10000);
        std::vector<double> d(n);
        for (auto& x : d) {
            // coarse values force plenty of ties
            x = trial % 2 == 0 ? std::floor(rng.uniform() * 8.0) / 8.0 : rng.uniform();
        }
        const auto k = rng.below(n + 1);
        const auto got = topk_mask(d, k);
        ASSERT_EQ(got, topk_oracle(d, k));
        // every selected value >= every unselected value
        std::vector<bool> sel(n, false);
        for (auto i : got) {
            sel[i] = true;
        }
        double min_sel = 1e300, max_unsel = -1e300;
        for (std::size_t i = 0; i < n; ++i) {
            if (sel[i]) {
                min_sel = std::min(min_sel, d[i]);
            } else {
                max_unsel = std::max(max_unsel, d[i]);
            }
        }
        if (!got.empty() && got.size() < n) {
            ASSERT_GE(min_sel, max_unsel);
        }
    }
}

TEST(BuildMaskPlan, FreezeRateOnTinyModelUnderflows) {
    const auto p = build_model(ModelSpec::mlp_smoke(8, 4, 2));
    const auto stats = param_delta(p, p);
    try {
        build_mask_plan(stats, BudgetConfig::rate(0.99));
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("budget underflow"), std::string::npos);
    }
    EXPECT_THROW((void)BudgetConfig::count(0).resolve(46), ValidationError);
}

TEST(BuildMaskPlan, FreezeRateOnLargeModel) {
    EXPECT_EQ(BudgetConfig::rate(0.99).resolve(100000), 1000u);
    std::vector<std::vector<double>> layers(4, std::vector<double>(25000, 0.0));
    Rng rng(1);
    for (auto& l : layers) {
        for (auto& x : l) {
            x = rng.uniform();
        }
    }
    const auto plan = build_mask_plan(stats_of(layers), BudgetConfig::rate(0.99));
    EXPECT_EQ(plan.total_unfrozen(), 1000u);
}

TEST(BuildMaskPlan, UniformDeltasSplitEvenly) {
    const auto plan = build_mask_plan(stats_of({std::vector<double>(20, 0.1), std::vector<double>(20, 0.1)}),
                                      BudgetConfig::count(10));
    ASSERT_EQ(plan.layers.size(), 2u);
    EXPECT_EQ(plan.layers[0].budget(), 5u);
    EXPECT_EQ(plan.layers[1].budget(), 5u);
    EXPECT_EQ(plan.layers[0].unfrozen, (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
}

TEST(BuildMaskPlan, InvariantsAndProvenance) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const auto stats = random_stats(rng, 1 + rng.below(8), 300);
        const auto H = 1 + rng.below(stats.total_count());
        const auto plan = build_mask_plan(stats, BudgetConfig::count(H));
        EXPECT_NO_THROW(plan.validate());
        EXPECT_EQ(plan.total_unfrozen(), std::min<std::size_t>(H, stats.total_count()));
        EXPECT_EQ(plan.provenance.delta_hash, stats.hash());
        for (std::size_t l = 0; l < plan.layers.size(); ++l) {
            EXPECT_EQ(plan.layers[l].layer_name, stats.layers[l].layer_name);
            EXPECT_EQ(plan.layers[l].unfrozen, topk_oracle(stats.layers[l].deltas, plan.layers[l].budget()));
        }
    }
}

TEST(BaselineMasks, SameBudgetDifferentSelection) {
    Rng rng(8);
    const auto stats = random_stats(rng, 5, 400);
    const auto budget = BudgetConfig::count(120);
    const auto lwaft = build_mask_plan(stats, budget);
    const auto random = random_mask_plan(stats, budget, 3);
    const auto global = global_topk_plan(stats, budget);
    const auto uniform = layer_uniform_plan(stats, budget);
    for (const auto* p : {&lwaft, &random, &global, &uniform}) {
        EXPECT_NO_THROW(p->validate());
        EXPECT_EQ(p->total_unfrozen(), 120u);
    }
    for (std::size_t l = 0; l < stats.layers.size(); ++l) {
        EXPECT_EQ(random.layers[l].budget(), lwaft.layers[l].budget());
    }
    EXPECT_EQ(random_mask_plan(stats, budget, 3), random);
    // global top-k: every chosen delta is >= every unchosen delta network-wide
    double min_sel = 1e300, max_unsel = -1e300;
    for (std::size_t l = 0; l < stats.layers.size(); ++l) {
        for (std::size_t j = 0; j < stats.layers[l].count; ++j) {
            const double d = stats.layers[l].deltas[j];
            if (global.contains(l, j)) {
                min_sel = std::min(min_sel, d);
            } else {
                max_unsel = std::max(max_unsel, d);
            }
        }
    }
    EXPECT_GE(min_sel, max_unsel);
    // layer-uniform: budgets differ by at most one unless capped
    std::size_t lo = 1000, hi = 0;
    for (const auto& l : uniform.layers) {
        if (l.budget() < l.layer_size) {
            lo = std::min(lo, l.budget());
            hi = std::max(hi, l.budget());
        }
    }
    EXPECT_LE(hi - lo, 1u);
}

TEST(MaskFile, RoundTripRandomPlan) {
    Rng rng(17);
    const auto stats = random_stats(rng, 6, 200);
    MaskProvenance prov;
    prov.expert_run_id = "run-1";
    prov.alpha = 0.1;
    const auto plan = build_mask_plan(stats, BudgetConfig::count(77), prov);
    const auto back = parse_mask(serialize_mask(plan));
    EXPECT_EQ(back, plan);
    const auto path = std::filesystem::temp_directory_path() / "lwaft_roundtrip.mask";
    save_mask(plan, path);
    EXPECT_EQ(load_mask(path), plan);
    std::filesystem::remove(path);
}

TEST(MaskFile, CorruptionIsRejected) {
    Rng rng(18);
    const auto plan = build_mask_plan(random_stats(rng, 3, 100), BudgetConfig::count(40));
    const auto bytes = serialize_mask(plan);
    // flip one byte at every position in the file; none may load
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        auto bad = bytes;
        bad[i] ^= 0x01;
        EXPECT_THROW(parse_mask(bad), ValidationError) << "byte " << i;
    }
    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    EXPECT_THROW(parse_mask(truncated), ValidationError);
}

TEST(MaskFile, UnsortedIndicesRejectedEvenWithValidChecksum) {
    ParamStore p;
    p.add_layer("L0", std::vector<double>(10, 0.0));
    MaskPlan plan = MaskPlan::none_of(p);
    plan.layers[0].unfrozen = {1, 4, 7};
    auto bytes = serialize_mask(plan);
    // swap the first two indices and re-seal the checksum
    const std::size_t first = 5 + 2 + 4 + 2 + 2 + 8 + 8;
    std::swap_ranges(bytes.begin() + first, bytes.begin() + first + 8, bytes.begin() + first + 8);
    const auto body = std::span(bytes).first(bytes.size() - 32);
    const auto digest = sha256(body);
    std::copy(digest.begin(), digest.end(), bytes.end() - 32);
    EXPECT_THROW(parse_mask(bytes), ValidationError);
    // and a version bump is rejected
    auto versioned = serialize_mask(plan);
    versioned[5] = 2;
    EXPECT_THROW(parse_mask(versioned), ValidationError);
}

TEST(MaskFile, ReusableAgainstFreshCheckpointWithSameLayout) {
    const auto spec = ModelSpec::mlp_smoke(8, 16, 2, 1);
    const auto base = build_model(spec);
    auto other_spec = spec;
    other_spec.seed = 99;
    const auto expert = build_model(other_spec);
    const auto plan = build_mask_plan(param_delta(base, expert), BudgetConfig::count(20));
    const auto loaded = parse_mask(serialize_mask(plan));
    auto fresh_spec = spec;
    fresh_spec.seed = 12345;
    EXPECT_NO_THROW(loaded.check_layout(build_model(fresh_spec)));
    EXPECT_THROW(loaded.check_layout(build_model(ModelSpec::mlp_smoke(8, 8, 2))), ValidationError);
}
