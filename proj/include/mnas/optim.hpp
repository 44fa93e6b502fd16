#pragma once

#include <vector>

#include "mnas/tensor.hpp"

namespace mnas {

enum class OptKind { SGD, Adam };

// Plain SGD and bias-corrected Adam over an aligned parameter list. Moment
// buffers are allocated on the first step and must keep matching parameter
// shapes afterwards. Updates are deterministic: identical (params, grads,
// state) produce identical output bits.
struct OptimState {
    OptKind kind = OptKind::Adam;
    double learning_rate = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step_count = 0;

    std::vector<std::vector<double>> m;  // first moments (Adam)
    std::vector<std::vector<double>> v;  // second moments (Adam)

    static OptimState sgd(double lr) {
        OptimState s;
        s.kind = OptKind::SGD;
        s.learning_rate = lr;
        return s;
    }

    static OptimState adam(double lr) {
        OptimState s;
        s.kind = OptKind::Adam;
        s.learning_rate = lr;
        return s;
    }

    // In-place update of params from aligned grads.
    void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);
};

}  // namespace mnas
