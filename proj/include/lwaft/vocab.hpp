#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lwaft/error.hpp"

// Character vocabulary: two control tokens followed by printable ASCII.
namespace lwaft::vocab {

inline constexpr int pad = 0;
inline constexpr int end = 1;
inline constexpr int first_char = 2;
inline constexpr int size = first_char + 95;

[[nodiscard]] constexpr bool printable(char c) noexcept { return c >= 32 && c <= 126; }

[[nodiscard]] inline int encode_char(char c) {
    if (!printable(c)) {
        throw ValidationError("character outside vocabulary (code " + std::to_string(static_cast<int>(c)) + ")");
    }
    return first_char + (c - 32);
}

[[nodiscard]] inline bool encodable(std::string_view text) noexcept {
    for (char c : text) {
        if (!printable(c)) {
            return false;
        }
    }
    return true;
}

[[nodiscard]] inline std::vector<int> encode(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) {
        out.push_back(encode_char(c));
    }
    return out;
}

/// Control tokens render as nothing.
[[nodiscard]] inline std::string decode(std::span<const int> tokens) {
    std::string out;
    for (int t : tokens) {
        if (t >= first_char && t < size) {
            out.push_back(static_cast<char>(t - first_char + 32));
        }
    }
    return out;
}

} // namespace lwaft::vocab
