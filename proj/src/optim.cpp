#include "mnas/optim.hpp"

#include <cmath>

namespace mnas {

void OptimState::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) {
        throw ShapeError("optimizer step: parameter/gradient count mismatch");
    }
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape()) {
            throw ShapeError("optimizer step: parameter/gradient shape mismatch");
        }
    }
    ++step_count;

    if (kind == OptKind::SGD) {
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].data();
            const auto& g = grads[i].data();
            for (size_t k = 0; k < p.size(); ++k) {
                p[k] -= learning_rate * g[k];
            }
        }
        return;
    }

    if (m.empty()) {
        m.resize(params.size());
        v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m[i].assign(params[i].numel(), 0.0);
            v[i].assign(params[i].numel(), 0.0);
        }
    }
    if (m.size() != params.size()) {
        throw ShapeError("optimizer step: moment buffers do not match parameter count");
    }

    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].data();
        const auto& g = grads[i].data();
        auto& mi = m[i];
        auto& vi = v[i];
        if (mi.size() != p.size()) {
            throw ShapeError("optimizer step: moment buffers do not match parameter shape");
        }
        for (size_t k = 0; k < p.size(); ++k) {
            mi[k] = beta1 * mi[k] + (1.0 - beta1) * g[k];
            vi[k] = beta2 * vi[k] + (1.0 - beta2) * g[k] * g[k];
            const double m_hat = mi[k] / bc1;
            const double v_hat = vi[k] / bc2;
            p[k] -= learning_rate * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
}

}  // namespace mnas
