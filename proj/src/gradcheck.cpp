#include "mnas/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace mnas {

GradCheckReport grad_check(std::vector<std::pair<std::string, Tensor>> leaves,
                           const std::function<Tensor(Tape*)>& loss_fn, double tolerance,
                           double step) {
    size_t total = 0;
    for (auto& [name, leaf] : leaves) {
        leaf.set_requires_grad(true);
        total += leaf.numel();
    }
    if (total >= 10000) {
        throw std::invalid_argument("grad_check: fragment exceeds 10^4 parameters");
    }

    Tape tape;
    Tensor loss = loss_fn(&tape);
    GradMap analytic = tape.backward(loss);

    GradCheckReport report;
    report.tolerance = tolerance;
    for (auto& [name, leaf] : leaves) {
        GradCheckEntry entry;
        entry.name = name;
        auto it = analytic.find(leaf.node());
        // leaves the loss never touched have an all-zero gradient
        const std::vector<double>* ga = it != analytic.end() ? &it->second.data() : nullptr;
        auto& values = leaf.data();
        for (size_t k = 0; k < values.size(); ++k) {
            const double saved = values[k];
            values[k] = saved + step;
            const double f_plus = loss_fn(nullptr).item();
            values[k] = saved - step;
            const double f_minus = loss_fn(nullptr).item();
            values[k] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * step);
            const double a = ga ? (*ga)[k] : 0.0;
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1.0});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_index = k;
            }
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.entries.push_back(std::move(entry));
    }
    report.pass = report.max_rel_error < tolerance;
    return report;
}

}  // namespace mnas
