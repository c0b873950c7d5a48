#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lwaft {

/// Error category. Maps onto CLI exit codes: validation -> 1, runtime -> 2.
enum class ErrorKind : std::uint8_t { validation, runtime };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Bad input, bad config, mismatched layouts: the caller can fix it.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(ErrorKind::validation, what) {}
};

/// Something went wrong while running (divergence, IO, stale state).
class RuntimeFailure : public Error {
public:
    explicit RuntimeFailure(const std::string& what) : Error(ErrorKind::runtime, what) {}
};

class StaleCacheError : public RuntimeFailure {
public:
    StaleCacheError()
        : RuntimeFailure("stale cache: parameters were mutated after forward_loss") {}
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public RuntimeFailure {
public:
    DivergenceError(const std::string& what, std::int64_t step, std::int64_t last_finite_step)
        : RuntimeFailure(what), step_(step), last_finite_step_(last_finite_step) {}
    [[nodiscard]] std::int64_t step() const noexcept { return step_; }
    /// -1 when no step finished with a finite loss.
    [[nodiscard]] std::int64_t last_finite_step() const noexcept { return last_finite_step_; }

private:
    std::int64_t step_;
    std::int64_t last_finite_step_;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw ValidationError(message);
    }
}

} // namespace lwaft
