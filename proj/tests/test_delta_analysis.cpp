#include <cmath>

#include <gtest/gtest.h>

#include "lwaft/delta.hpp"
#include "lwaft/model.hpp"
#include "lwaft/rng.hpp"

using namespace lwaft;

namespace {

ParamStore store(std::initializer_list<std::pair<std::string, std::vector<double>>> layers) {
    ParamStore p;
    for (const auto& [name, values] : layers) {
        p.add_layer(name, values);
    }
    return p;
}

ParamStore random_like(const ParamStore& layout, std::uint64_t seed) {
    Rng rng(seed);
    ParamStore out;
    for (const auto& l : layout.layers()) {
        std::vector<double> v(l.values.size());
        for (auto& x : v) {
            x = rng.normal(0.0, 0.3);
        }
        out.add_layer(l.name, std::move(v));
    }
    return out;
}

} // namespace

TEST(ParamDelta, Definition) {
    const auto base = store({{"L0", {1.0, 2.0}}});
    const auto expert = store({{"L0", {1.5, 1.9}}});
    const auto stats = param_delta(base, expert);
    ASSERT_EQ(stats.layers.size(), 1u);
    EXPECT_DOUBLE_EQ(stats.layers[0].deltas[0], 0.5);
    EXPECT_NEAR(stats.layers[0].deltas[1], 0.1, 1e-15);
    EXPECT_NEAR(stats.layers[0].mean_abs, 0.3, 1e-15);
    EXPECT_EQ(stats.layers[0].count, 2u);
}

TEST(ParamDelta, IdentityIsZero) {
    const auto p = build_model(ModelSpec::mlp_smoke(8, 4, 2, 1));
    const auto stats = param_delta(p, p);
    for (const auto& l : stats.layers) {
        for (double d : l.deltas) {
            ASSERT_EQ(d, 0.0);
        }
        EXPECT_EQ(l.mean_abs, 0.0);
    }
}

TEST(ParamDelta, MatchesScalarLoopOracleAndIsSymmetric) {
    ModelSpec spec;
    spec.model_dim = 16;
    spec.context_len = 16;
    const auto layout = build_model(spec);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto a = random_like(layout, seed * 2);
        const auto b = random_like(layout, seed * 2 + 1);
        const auto ab = param_delta(a, b);
        const auto ba = param_delta(b, a);
        std::size_t counted = 0;
        for (std::size_t l = 0; l < a.num_layers(); ++l) {
            double sum = 0.0;
            for (std::size_t j = 0; j < a.size(l); ++j) {
                const double x = a.values(l)[j];
                const double y = b.values(l)[j];
                const double oracle = x > y ? x - y : y - x;
                ASSERT_EQ(ab.layers[l].deltas[j], oracle);
                ASSERT_EQ(ba.layers[l].deltas[j], oracle);
                ASSERT_GE(oracle, 0.0);
                sum += oracle;
            }
            EXPECT_NEAR(ab.layers[l].mean_abs, sum / static_cast<double>(a.size(l)), 1e-15);
            EXPECT_EQ(ab.layers[l].layer_name, a.name(l));
            counted += ab.layers[l].count;
        }
        EXPECT_EQ(counted, a.total_count());
    }
}

TEST(ParamDelta, LayoutMismatchNamesLayer) {
    const auto a = store({{"L0", {1.0}}, {"L1", {1.0, 2.0}}});
    const auto b = store({{"L0", {1.0}}, {"L1", {1.0}}});
    try {
        param_delta(a, b);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("L1"), std::string::npos);
    }
}

TEST(DeltaHistogram, FractionAboveMarker) {
    const auto base = store({{"L0", {0.0, 0.0, 0.0}}});
    const auto expert = store({{"L0", {0.001, 0.01, 0.2}}});
    const auto h = delta_histogram(param_delta(base, expert), default_histogram_edges());
    EXPECT_NEAR(h.fraction_above_marker, 2.0 / 3.0, 1e-15);
    EXPECT_EQ(h.total(), 3u);
}

TEST(DeltaHistogram, AllZeroDeltas) {
    const auto p = store({{"L0", {1.0, 2.0, 3.0}}});
    const auto h = delta_histogram(param_delta(p, p), default_histogram_edges());
    EXPECT_EQ(h.fraction_above_marker, 0.0);
    EXPECT_EQ(h.counts.front(), 3u); // underflow bin holds the zeros
}

TEST(DeltaHistogram, CountsSumToTotalForAnyEdges) {
    Rng rng(3);
    const auto base = build_model(ModelSpec::mlp_smoke(8, 16, 3, 1));
    const auto expert = random_like(base, 8);
    const auto stats = param_delta(base, expert);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> edges;
        double e = rng.uniform(-0.1, 0.1);
        const auto n = 1 + rng.below(30);
        for (std::uint64_t i = 0; i < n; ++i) {
            edges.push_back(e);
            e += rng.uniform(1e-6, 0.2);
        }
        const auto h = delta_histogram(stats, edges);
        ASSERT_EQ(h.counts.size(), edges.size() + 1);
        ASSERT_EQ(h.total(), base.total_count());
    }
}

TEST(DeltaHistogram, RejectsBadEdges) {
    const auto p = store({{"L0", {1.0}}});
    const auto stats = param_delta(p, p);
    EXPECT_THROW(delta_histogram(stats, std::vector<double>{}), ValidationError);
    EXPECT_THROW(delta_histogram(stats, std::vector<double>{0.1, 0.1}), ValidationError);
    EXPECT_THROW(delta_histogram(stats, std::vector<double>{0.2, 0.1}), ValidationError);
}

TEST(DeltaHistogram, DefaultEdgesAreLogSpaced) {
    const auto edges = default_histogram_edges();
    ASSERT_EQ(edges.size(), 26u);
    EXPECT_NEAR(edges.front(), 1e-8, 1e-22);
    EXPECT_EQ(edges.back(), 1.0);
}

TEST(LayerProfile, MeansAndCounts) {
    const auto base = store({{"L0", {0.0, 0.0}}, {"L1", {0.0}}});
    const auto expert = store({{"L0", {0.5, -0.1}}, {"L1", {0.2}}});
    const auto rows = layer_profile(param_delta(base, expert));
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].layer_name, "L0");
    EXPECT_NEAR(rows[0].mean_abs, 0.3, 1e-15);
    EXPECT_EQ(rows[0].count, 2u);
    EXPECT_EQ(rows[1].layer_name, "L1");
    EXPECT_NEAR(rows[1].mean_abs, 0.2, 1e-15);
    EXPECT_EQ(rows[1].count, 1u);
    const auto csv = layer_profile_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer_name,mean_abs,count");
}

TEST(LayerProfile, RowPerCheckpointLayerAndNoEmptyLayers) {
    const auto p = build_model(ModelSpec{});
    const auto rows = layer_profile(param_delta(p, p));
    EXPECT_EQ(rows.size(), p.num_layers());
    for (const auto& r : rows) {
        EXPECT_GE(r.count, 1u);
    }
    ParamStore q;
    EXPECT_THROW(q.add_layer("empty", {}), ValidationError);
}
