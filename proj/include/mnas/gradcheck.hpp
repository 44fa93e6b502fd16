#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mnas/tensor.hpp"

namespace mnas {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    size_t worst_index = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    bool pass = false;
    double tolerance = 0.0;
};

// Compares reverse-mode gradients of a scalar-producing fragment against
// central finite differences, per element of every listed leaf. The loss
// function must rebuild its tape from the leaves' current data on each call;
// the finite-difference side never touches the tape, which keeps the oracle
// independent of the path it checks. Fragments are capped at 10^4 parameters.
GradCheckReport grad_check(std::vector<std::pair<std::string, Tensor>> leaves,
                           const std::function<Tensor(Tape*)>& loss_fn, double tolerance,
                           double step = 1e-3);

}  // namespace mnas
