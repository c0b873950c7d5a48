#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lwaft/error.hpp"
#include "lwaft/hash.hpp"
#include "lwaft/param_store.hpp"

namespace lwaft {

struct LayerDelta {
    std::string layer_name;
    std::vector<double> deltas; // |expert - base|, elementwise
    double mean_abs = 0.0;      // m_l
    std::size_t count = 0;      // w_l
};

/// Per-parameter absolute change between two checkpoints.
struct DeltaStats {
    std::vector<LayerDelta> layers;

    [[nodiscard]] std::size_t total_count() const noexcept {
        std::size_t n = 0;
        for (const auto& l : layers) {
            n += l.count;
        }
        return n;
    }

    /// Fraction of all parameters whose delta is strictly above `threshold`.
    [[nodiscard]] double fraction_above(double threshold) const {
        std::size_t above = 0;
        for (const auto& l : layers) {
            for (double d : l.deltas) {
                above += d > threshold ? 1 : 0;
            }
        }
        const auto total = total_count();
        return total == 0 ? 0.0 : static_cast<double>(above) / static_cast<double>(total);
    }

    /// SHA-256 over layer names and raw delta bytes; recorded in mask provenance.
    [[nodiscard]] std::string hash() const {
        io::ByteWriter w;
        for (const auto& l : layers) {
            w.text(l.layer_name);
            w.u64(l.deltas.size());
            for (double d : l.deltas) {
                w.f64(d);
            }
        }
        return sha256_hex(w.data());
    }
};

inline double layer_mean(std::span<const double> values) {
    double s = 0.0;
    for (double v : values) {
        s += v;
    }
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
}

inline DeltaStats param_delta(const ParamStore& base, const ParamStore& expert) {
    if (auto mismatch = base.first_layout_mismatch(expert)) {
        throw ValidationError("param_delta: layout mismatch at " + *mismatch);
    }
    DeltaStats stats;
    stats.layers.reserve(base.num_layers());
    for (std::size_t l = 0; l < base.num_layers(); ++l) {
        const auto a = base.values(l);
        const auto b = expert.values(l);
        LayerDelta ld;
        ld.layer_name = base.name(l);
        ld.deltas.resize(a.size());
        for (std::size_t j = 0; j < a.size(); ++j) {
            ld.deltas[j] = std::abs(b[j] - a[j]);
        }
        ld.count = a.size();
        ld.mean_abs = layer_mean(ld.deltas);
        stats.layers.push_back(std::move(ld));
    }
    return stats;
}

/// Counts per bin with explicit underflow and overflow bins:
/// counts[0] = #(d < e0), counts[i] = #(e_{i-1} <= d < e_i), counts[n] = #(d >= e_{n-1}).
struct DeltaHistogram {
    std::vector<double> edges;
    std::vector<std::size_t> counts;
    double marker = 0.005;
    double fraction_above_marker = 0.0;

    [[nodiscard]] std::size_t total() const noexcept {
        std::size_t n = 0;
        for (auto c : counts) {
            n += c;
        }
        return n;
    }

    [[nodiscard]] std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "bin_low,bin_high,count\n";
        for (std::size_t i = 0; i < counts.size(); ++i) {
            const double lo = i == 0 ? -std::numeric_limits<double>::infinity() : edges[i - 1];
            const double hi = i == edges.size() ? std::numeric_limits<double>::infinity() : edges[i];
            os << lo << ',' << hi << ',' << counts[i] << '\n';
        }
        return os.str();
    }
};

/// 26 log-spaced edges from 1e-8 to 1 (25 bins between them).
inline std::vector<double> default_histogram_edges() {
    std::vector<double> edges;
    for (int i = 0; i <= 25; ++i) {
        edges.push_back(std::pow(10.0, -8.0 + 8.0 * i / 25.0));
    }
    edges.back() = 1.0;
    return edges;
}

inline DeltaHistogram delta_histogram(const DeltaStats& stats, std::span<const double> edges,
                                      double marker = 0.005) {
    require(!edges.empty(), "delta_histogram: empty edge list");
    for (std::size_t i = 1; i < edges.size(); ++i) {
        require(edges[i - 1] < edges[i], "delta_histogram: edges must be strictly increasing");
    }
    DeltaHistogram h;
    h.edges.assign(edges.begin(), edges.end());
    h.counts.assign(edges.size() + 1, 0);
    h.marker = marker;
    for (const auto& l : stats.layers) {
        for (double d : l.deltas) {
            const auto bin = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), d) - edges.begin());
            ++h.counts[bin];
        }
    }
    h.fraction_above_marker = stats.fraction_above(marker);
    return h;
}

struct LayerProfileRow {
    std::string layer_name;
    double mean_abs = 0.0;
    std::size_t count = 0;
};

/// (layer, m_l, w_l) in checkpoint order.
inline std::vector<LayerProfileRow> layer_profile(const DeltaStats& stats) {
    std::vector<LayerProfileRow> rows;
    rows.reserve(stats.layers.size());
    for (const auto& l : stats.layers) {
        rows.push_back({l.layer_name, l.mean_abs, l.count});
    }
    return rows;
}

inline std::string layer_profile_csv(std::span<const LayerProfileRow> rows) {
    std::ostringstream os;
    os.precision(17);
    os << "layer_name,mean_abs,count\n";
    for (const auto& r : rows) {
        os << r.layer_name << ',' << r.mean_abs << ',' << r.count << '\n';
    }
    return os.str();
}

} // namespace lwaft
