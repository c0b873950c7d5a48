#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "lwaft/binary_io.hpp"
#include "lwaft/error.hpp"
#include "lwaft/hash.hpp"

namespace lwaft {

struct ParamTag {};
struct GradTag {};

/// Ordered, named layers of flat float64 vectors.
///
/// Every mutable accessor bumps generation(), which lets activation caches
/// detect that the values they were computed from have changed.
template <class Tag>
class LayerStore {
public:
    struct Layer {
        std::string name;
        std::vector<double> values;
    };

    LayerStore() = default;

    void add_layer(std::string name, std::vector<double> values) {
        require(!name.empty(), "layer name must be non-empty");
        require(!values.empty(), "layer '" + name + "' must hold at least one value");
        require(!find(name).has_value(), "duplicate layer name '" + name + "'");
        total_ += values.size();
        layers_.push_back(Layer{std::move(name), std::move(values)});
        ++generation_;
    }

    [[nodiscard]] std::size_t num_layers() const noexcept { return layers_.size(); }
    [[nodiscard]] std::size_t total_count() const noexcept { return total_; }
    [[nodiscard]] bool empty() const noexcept { return layers_.empty(); }
    [[nodiscard]] std::uint64_t generation() const noexcept { return generation_; }

    [[nodiscard]] const std::string& name(std::size_t i) const { return layers_.at(i).name; }
    [[nodiscard]] std::size_t size(std::size_t i) const { return layers_.at(i).values.size(); }
    [[nodiscard]] std::span<const double> values(std::size_t i) const { return layers_.at(i).values; }
    [[nodiscard]] std::span<double> mutable_values(std::size_t i) {
        ++generation_;
        return layers_.at(i).values;
    }
    [[nodiscard]] const std::vector<Layer>& layers() const noexcept { return layers_; }

    [[nodiscard]] std::optional<std::size_t> find(std::string_view layer_name) const {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (layers_[i].name == layer_name) {
                return i;
            }
        }
        return std::nullopt;
    }

    [[nodiscard]] std::span<const double> values(std::string_view layer_name) const {
        auto idx = find(layer_name);
        require(idx.has_value(), "unknown layer '" + std::string(layer_name) + "'");
        return values(*idx);
    }

    /// Description of the first layout difference, or nullopt when names and
    /// lengths agree layer by layer.
    template <class OtherTag>
    [[nodiscard]] std::optional<std::string> first_layout_mismatch(const LayerStore<OtherTag>& other) const {
        const auto n = std::min(num_layers(), other.num_layers());
        for (std::size_t i = 0; i < n; ++i) {
            if (name(i) != other.name(i) || size(i) != other.size(i)) {
                return "layer " + std::to_string(i) + " ('" + name(i) + "' vs '" + other.name(i) + "')";
            }
        }
        if (num_layers() != other.num_layers()) {
            return "layer count " + std::to_string(num_layers()) + " vs " + std::to_string(other.num_layers());
        }
        return std::nullopt;
    }

    template <class OtherTag>
    [[nodiscard]] bool same_layout(const LayerStore<OtherTag>& other) const {
        return !first_layout_mismatch(other).has_value();
    }

    template <class OtherTag>
    static LayerStore zeros_like(const LayerStore<OtherTag>& other) {
        LayerStore out;
        for (const auto& layer : other.layers()) {
            out.add_layer(layer.name, std::vector<double>(layer.values.size(), 0.0));
        }
        return out;
    }

    [[nodiscard]] bool all_finite() const {
        for (const auto& layer : layers_) {
            for (double v : layer.values) {
                if (!std::isfinite(v)) {
                    return false;
                }
            }
        }
        return true;
    }

    /// Bitwise equality of names and values (distinguishes -0.0 from 0.0).
    [[nodiscard]] bool bit_equal(const LayerStore& other) const {
        if (!same_layout(other)) {
            return false;
        }
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& a = layers_[i].values;
            const auto& b = other.layers_[i].values;
            if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) {
                return false;
            }
        }
        return true;
    }

private:
    std::vector<Layer> layers_;
    std::size_t total_ = 0;
    std::uint64_t generation_ = 0;
};

using ParamStore = LayerStore<ParamTag>;
using GradStore = LayerStore<GradTag>;

// Checkpoint file:
//   "LWAFT\0" | u16 version | u32 layer count
//   per layer: u16 name length | UTF-8 name | u64 byte offset into payload | u64 element count
//   payload: contiguous little-endian float64 values
inline constexpr std::string_view checkpoint_magic{"LWAFT\0", 6};
inline constexpr std::uint16_t checkpoint_version = 1;

inline std::vector<std::uint8_t> serialize_checkpoint(const ParamStore& params) {
    io::ByteWriter w;
    w.text(checkpoint_magic);
    w.u16(checkpoint_version);
    w.u32(static_cast<std::uint32_t>(params.num_layers()));
    std::uint64_t offset = 0;
    for (const auto& layer : params.layers()) {
        require(layer.name.size() <= 0xffff, "layer name too long");
        w.u16(static_cast<std::uint16_t>(layer.name.size()));
        w.text(layer.name);
        w.u64(offset);
        w.u64(layer.values.size());
        offset += layer.values.size() * sizeof(double);
    }
    for (const auto& layer : params.layers()) {
        for (double v : layer.values) {
            w.f64(v);
        }
    }
    return std::move(w).take();
}

inline ParamStore parse_checkpoint(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes, "checkpoint");
    if (r.text(checkpoint_magic.size()) != checkpoint_magic) {
        throw ValidationError("checkpoint: bad magic");
    }
    const auto version = r.u16();
    if (version != checkpoint_version) {
        throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto count = r.u32();
    struct Entry {
        std::string name;
        std::uint64_t offset;
        std::uint64_t size;
    };
    std::vector<Entry> table;
    std::uint64_t expected_offset = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e;
        e.name = r.text(r.u16());
        e.offset = r.u64();
        e.size = r.u64();
        if (e.offset != expected_offset) {
            throw ValidationError("checkpoint: non-contiguous payload at layer '" + e.name + "'");
        }
        expected_offset += e.size * sizeof(double);
        table.push_back(std::move(e));
    }
    const auto payload_start = r.position();
    if (r.remaining() != expected_offset) {
        throw ValidationError("checkpoint: truncated file");
    }
    ParamStore out;
    for (auto& e : table) {
        r.seek(payload_start + e.offset);
        std::vector<double> values(e.size);
        for (auto& v : values) {
            v = r.f64();
            if (!std::isfinite(v)) {
                throw ValidationError("checkpoint: non-finite value in layer '" + e.name + "'");
            }
        }
        out.add_layer(std::move(e.name), std::move(values));
    }
    return out;
}

inline void save_checkpoint(const ParamStore& params, const std::filesystem::path& path) {
    write_file_bytes(path, serialize_checkpoint(params));
}

inline ParamStore load_checkpoint(const std::filesystem::path& path) {
    return parse_checkpoint(read_file_bytes(path));
}

inline std::string checkpoint_hash(const ParamStore& params) {
    return sha256_hex(serialize_checkpoint(params));
}

} // namespace lwaft
