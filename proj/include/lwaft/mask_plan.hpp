#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lwaft/binary_io.hpp"
#include "lwaft/error.hpp"
#include "lwaft/hash.hpp"
#include "lwaft/param_store.hpp"

namespace lwaft {

struct LayerMask {
    std::string layer_name;
    std::uint64_t layer_size = 0;         // w_l
    std::vector<std::uint64_t> unfrozen;  // strictly increasing, each < layer_size

    [[nodiscard]] std::size_t budget() const noexcept { return unfrozen.size(); } // h_l
    bool operator==(const LayerMask&) const = default;
};

/// Where a mask came from. Serialized as JSON inside the mask file.
struct MaskProvenance {
    std::string method = "lwaft";
    std::string expert_run_id;
    double alpha = 0.0;
    std::string budget;
    std::string delta_hash;
    std::string tie_rule = "value-desc, smaller-index-first";
    std::vector<std::string> warnings;

    bool operator==(const MaskProvenance&) const = default;
};

inline void to_json(nlohmann::json& j, const MaskProvenance& p) {
    j = nlohmann::json{{"method", p.method},     {"expert_run_id", p.expert_run_id}, {"alpha", p.alpha},
                       {"budget", p.budget},     {"delta_hash", p.delta_hash},       {"tie_rule", p.tie_rule},
                       {"warnings", p.warnings}};
}

inline void from_json(const nlohmann::json& j, MaskProvenance& p) {
    p.method = j.value("method", std::string{});
    p.expert_run_id = j.value("expert_run_id", std::string{});
    p.alpha = j.value("alpha", 0.0);
    p.budget = j.value("budget", std::string{});
    p.delta_hash = j.value("delta_hash", std::string{});
    p.tie_rule = j.value("tie_rule", std::string{});
    p.warnings = j.value("warnings", std::vector<std::string>{});
}

/// Per-layer sets of unfrozen parameter indices, applied as a binary gradient mask.
struct MaskPlan {
    std::vector<LayerMask> layers;
    MaskProvenance provenance;

    [[nodiscard]] std::size_t total_unfrozen() const noexcept {
        std::size_t n = 0;
        for (const auto& l : layers) {
            n += l.unfrozen.size();
        }
        return n;
    }

    [[nodiscard]] std::size_t total_count() const noexcept {
        std::size_t n = 0;
        for (const auto& l : layers) {
            n += l.layer_size;
        }
        return n;
    }

    void validate() const {
        for (const auto& l : layers) {
            for (std::size_t i = 0; i < l.unfrozen.size(); ++i) {
                require(l.unfrozen[i] < l.layer_size,
                        "mask: index out of range in layer '" + l.layer_name + "'");
                require(i == 0 || l.unfrozen[i - 1] < l.unfrozen[i],
                        "mask: unsorted index list in layer '" + l.layer_name + "'");
            }
        }
    }

    template <class Tag>
    void check_layout(const LayerStore<Tag>& store) const {
        require(layers.size() == store.num_layers(), "mask layout mismatch: layer count " +
                                                         std::to_string(layers.size()) + " vs " +
                                                         std::to_string(store.num_layers()));
        for (std::size_t i = 0; i < layers.size(); ++i) {
            require(layers[i].layer_name == store.name(i) && layers[i].layer_size == store.size(i),
                    "mask layout mismatch at layer '" + store.name(i) + "'");
        }
    }

    [[nodiscard]] bool contains(std::size_t layer, std::uint64_t index) const {
        const auto& u = layers.at(layer).unfrozen;
        return std::binary_search(u.begin(), u.end(), index);
    }

    /// Mask that unfreezes everything in `store`.
    template <class Tag>
    static MaskPlan all_of(const LayerStore<Tag>& store) {
        MaskPlan plan;
        for (std::size_t i = 0; i < store.num_layers(); ++i) {
            LayerMask m{store.name(i), store.size(i), {}};
            m.unfrozen.resize(store.size(i));
            for (std::uint64_t j = 0; j < m.unfrozen.size(); ++j) {
                m.unfrozen[j] = j;
            }
            plan.layers.push_back(std::move(m));
        }
        return plan;
    }

    /// Mask that freezes everything in `store`.
    template <class Tag>
    static MaskPlan none_of(const LayerStore<Tag>& store) {
        MaskPlan plan;
        for (std::size_t i = 0; i < store.num_layers(); ++i) {
            plan.layers.push_back(LayerMask{store.name(i), store.size(i), {}});
        }
        return plan;
    }

    bool operator==(const MaskPlan&) const = default;
};

// Mask file:
//   "LWMSK" | u16 version | u32 layer count
//   per layer: u16 name length | UTF-8 name | u64 layer size | u64 count | count x u64 sorted indices
//   u32 provenance length | provenance JSON (UTF-8)
//   32-byte SHA-256 of all preceding bytes
inline constexpr std::string_view mask_magic{"LWMSK"};
inline constexpr std::uint16_t mask_version = 1;

inline std::vector<std::uint8_t> serialize_mask(const MaskPlan& plan) {
    plan.validate();
    io::ByteWriter w;
    w.text(mask_magic);
    w.u16(mask_version);
    w.u32(static_cast<std::uint32_t>(plan.layers.size()));
    for (const auto& l : plan.layers) {
        w.u16(static_cast<std::uint16_t>(l.layer_name.size()));
        w.text(l.layer_name);
        w.u64(l.layer_size);
        w.u64(l.unfrozen.size());
        for (auto idx : l.unfrozen) {
            w.u64(idx);
        }
    }
    const std::string prov = nlohmann::json(plan.provenance).dump();
    w.u32(static_cast<std::uint32_t>(prov.size()));
    w.text(prov);
    const auto digest = sha256(w.data());
    w.bytes(digest);
    return std::move(w).take();
}

inline MaskPlan parse_mask(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < mask_magic.size() + 2 + 32) {
        throw ValidationError("mask: truncated file");
    }
    io::ByteReader r(bytes, "mask");
    if (r.text(mask_magic.size()) != mask_magic) {
        throw ValidationError("mask: bad magic");
    }
    const auto version = r.u16();
    if (version != mask_version) {
        throw ValidationError("mask: unsupported version " + std::to_string(version));
    }
    const auto body = bytes.first(bytes.size() - 32);
    const auto stored = bytes.last(32);
    const auto digest = sha256(body);
    if (!std::equal(digest.begin(), digest.end(), stored.begin())) {
        throw ValidationError("mask: checksum mismatch (corrupt or truncated file)");
    }
    io::ByteReader br(body, "mask");
    br.seek(mask_magic.size() + 2);
    MaskPlan plan;
    const auto count = br.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        LayerMask l;
        l.layer_name = br.text(br.u16());
        l.layer_size = br.u64();
        const auto n = br.u64();
        if (n > l.layer_size || n > br.remaining() / 8) {
            throw ValidationError("mask: truncated file");
        }
        l.unfrozen.resize(n);
        for (auto& idx : l.unfrozen) {
            idx = br.u64();
        }
        plan.layers.push_back(std::move(l));
    }
    const auto prov_len = br.u32();
    const auto prov = br.text(prov_len);
    if (br.remaining() != 0) {
        throw ValidationError("mask: trailing bytes");
    }
    try {
        plan.provenance = nlohmann::json::parse(prov).get<MaskProvenance>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("mask: bad provenance block: ") + e.what());
    }
    plan.validate();
    return plan;
}

inline void save_mask(const MaskPlan& plan, const std::filesystem::path& path) {
    write_file_bytes(path, serialize_mask(plan));
}

inline MaskPlan load_mask(const std::filesystem::path& path) { return parse_mask(read_file_bytes(path)); }

} // namespace lwaft
