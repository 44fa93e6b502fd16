#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

namespace mnas {

// Shape or dimension disagreement between operands.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A NaN or Inf surfaced in a forward or backward pass. Numeric state is
// considered corrupt once this fires; callers at the search level contain it
// per candidate.
struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed on-disk artifacts (FSDS datasets, checkpoints, cell files).
struct FormatError : std::runtime_error {
    enum class Kind { BadMagic, BadVersion, Truncated, CountMismatch, Malformed };

    FormatError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

  private:
    Kind kind_;
};

inline void check_finite(std::span<const double> values, const char* context) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NonFiniteError(std::string("non-finite value in ") + context);
        }
    }
}

}  // namespace mnas
