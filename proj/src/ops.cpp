#include "mnas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace mnas::ops {

namespace {

void expect_dims(const Tensor& t, size_t n, const char* what) {
    if (t.shape().size() != n) {
        throw ShapeError(std::string(what) + ": expected " + std::to_string(n) +
                         "-d tensor, got " + std::to_string(t.shape().size()) + "-d");
    }
}

bool wants_grad(Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

// Leaf inputs (not produced on this tape) are registered so backward() can
// hand their gradients back.
void note_inputs(Tape& tape, std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs) {
        if (t->requires_grad() && t->node()->tape != &tape) {
            tape.note_leaf(*t);
        }
    }
}

void accumulate(Tape* tape, const std::shared_ptr<TensorData>& node,
                const std::vector<double>& contribution) {
    auto& g = tape->grad_buffer(node.get());
    for (size_t i = 0; i < g.size(); ++i) {
        g[i] += contribution[i];
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, int pad_h, int pad_w,
              Tape* tape) {
    expect_dims(x, 4, "conv2d input");
    expect_dims(w, 4, "conv2d weight");
    const int n_batch = x.dim(0), in_ch = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
    const int out_ch = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != in_ch) {
        throw ShapeError("conv2d: weight input channels do not match input");
    }
    if (bias && (bias->shape().size() != 1 || bias->dim(0) != out_ch)) {
        throw ShapeError("conv2d: bias does not match output channels");
    }
    const int out_h = in_h + 2 * pad_h - kh + 1;
    const int out_w = in_w + 2 * pad_w - kw + 1;
    if (out_h <= 0 || out_w <= 0) {
        throw ShapeError("conv2d: kernel larger than padded input");
    }

    Tensor out({n_batch, out_ch, out_h, out_w});
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    double* od = out.data().data();
    const size_t x_plane = static_cast<size_t>(in_h) * in_w;
    const size_t o_plane = static_cast<size_t>(out_h) * out_w;

    for (int n = 0; n < n_batch; ++n) {
        for (int f = 0; f < out_ch; ++f) {
            double* o_base = od + (static_cast<size_t>(n) * out_ch + f) * o_plane;
            if (bias) {
                const double bv = bias->data()[static_cast<size_t>(f)];
                std::fill(o_base, o_base + o_plane, bv);
            }
            for (int c = 0; c < in_ch; ++c) {
                const double* x_base = xd + (static_cast<size_t>(n) * in_ch + c) * x_plane;
                const double* w_base =
                    wd + ((static_cast<size_t>(f) * in_ch + c) * kh) * kw;
                for (int u = 0; u < kh; ++u) {
                    const int i0 = std::max(0, pad_h - u);
                    const int i1 = std::min(out_h, in_h + pad_h - u);
                    for (int v = 0; v < kw; ++v) {
                        const double wv = w_base[static_cast<size_t>(u) * kw + v];
                        const int j0 = std::max(0, pad_w - v);
                        const int j1 = std::min(out_w, in_w + pad_w - v);
                        for (int i = i0; i < i1; ++i) {
                            const double* xrow = x_base + static_cast<size_t>(i + u - pad_h) * in_w;
                            double* orow = o_base + static_cast<size_t>(i) * out_w;
                            for (int j = j0; j < j1; ++j) {
                                orow[j] += wv * xrow[j + v - pad_w];
                            }
                        }
                    }
                }
            }
        }
    }
    check_finite(out.data(), "conv2d");

    const bool has_bias = bias != nullptr;
    if (wants_grad(tape, has_bias ? std::initializer_list<const Tensor*>{&x, &w, bias}
                                  : std::initializer_list<const Tensor*>{&x, &w})) {
        out.set_requires_grad(true);
        if (has_bias) {
            note_inputs(*tape, {&x, &w, bias});
        } else {
            note_inputs(*tape, {&x, &w});
        }
        auto xn = x.handle();
        auto wn = w.handle();
        auto bn = has_bias ? bias->handle() : nullptr;
        auto on = out.handle();
        tape->record(out, [=] {
            if (on->grad.empty()) {
                return;
            }
            const double* gy = on->grad.data();
            if (bn && bn->requires_grad) {
                auto& gb = tape->grad_buffer(bn.get());
                for (int n = 0; n < n_batch; ++n) {
                    for (int f = 0; f < out_ch; ++f) {
                        const double* row = gy + (static_cast<size_t>(n) * out_ch + f) * o_plane;
                        double s = 0.0;
                        for (size_t k = 0; k < o_plane; ++k) {
                            s += row[k];
                        }
                        gb[static_cast<size_t>(f)] += s;
                    }
                }
            }
            if (wn->requires_grad) {
                auto& gw = tape->grad_buffer(wn.get());
                for (int n = 0; n < n_batch; ++n) {
                    for (int f = 0; f < out_ch; ++f) {
                        const double* gy_base =
                            gy + (static_cast<size_t>(n) * out_ch + f) * o_plane;
                        for (int c = 0; c < in_ch; ++c) {
                            const double* x_base =
                                xn->data.data() + (static_cast<size_t>(n) * in_ch + c) * x_plane;
                            double* gw_base =
                                gw.data() + ((static_cast<size_t>(f) * in_ch + c) * kh) * kw;
                            for (int u = 0; u < kh; ++u) {
                                const int i0 = std::max(0, pad_h - u);
                                const int i1 = std::min(out_h, in_h + pad_h - u);
                                for (int v = 0; v < kw; ++v) {
                                    const int j0 = std::max(0, pad_w - v);
                                    const int j1 = std::min(out_w, in_w + pad_w - v);
                                    double s = 0.0;
                                    for (int i = i0; i < i1; ++i) {
                                        const double* xrow =
                                            x_base + static_cast<size_t>(i + u - pad_h) * in_w;
                                        const double* grow =
                                            gy_base + static_cast<size_t>(i) * out_w;
                                        for (int j = j0; j < j1; ++j) {
                                            s += grow[j] * xrow[j + v - pad_w];
                                        }
                                    }
                                    gw_base[static_cast<size_t>(u) * kw + v] += s;
                                }
                            }
                        }
                    }
                }
            }
            if (xn->requires_grad) {
                auto& gx = tape->grad_buffer(xn.get());
                for (int n = 0; n < n_batch; ++n) {
                    for (int f = 0; f < out_ch; ++f) {
                        const double* gy_base =
                            gy + (static_cast<size_t>(n) * out_ch + f) * o_plane;
                        for (int c = 0; c < in_ch; ++c) {
                            double* gx_base =
                                gx.data() + (static_cast<size_t>(n) * in_ch + c) * x_plane;
                            const double* w_base =
                                wn->data.data() + ((static_cast<size_t>(f) * in_ch + c) * kh) * kw;
                            for (int u = 0; u < kh; ++u) {
                                const int i0 = std::max(0, pad_h - u);
                                const int i1 = std::min(out_h, in_h + pad_h - u);
                                for (int v = 0; v < kw; ++v) {
                                    const double wv = w_base[static_cast<size_t>(u) * kw + v];
                                    const int j0 = std::max(0, pad_w - v);
                                    const int j1 = std::min(out_w, in_w + pad_w - v);
                                    for (int i = i0; i < i1; ++i) {
                                        double* xrow =
                                            gx_base + static_cast<size_t>(i + u - pad_h) * in_w;
                                        const double* grow =
                                            gy_base + static_cast<size_t>(i) * out_w;
                                        for (int j = j0; j < j1; ++j) {
                                            xrow[j + v - pad_w] += wv * grow[j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

namespace {

struct PoolDims {
    int n, c, h, w, oh, ow;
};

PoolDims pool_dims(const Tensor& x, int kernel, int pad, int stride, const char* what) {
    expect_dims(x, 4, what);
    PoolDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), 0, 0};
    d.oh = (d.h + 2 * pad - kernel) / stride + 1;
    d.ow = (d.w + 2 * pad - kernel) / stride + 1;
    if (d.oh <= 0 || d.ow <= 0) {
        throw ShapeError(std::string(what) + ": kernel larger than padded input");
    }
    return d;
}

}  // namespace

Tensor avg_pool(const Tensor& x, int kernel, int pad, int stride, Tape* tape) {
    const PoolDims d = pool_dims(x, kernel, pad, stride, "avg_pool");
    Tensor out({d.n, d.c, d.oh, d.ow});
    const double* xd = x.data().data();
    double* od = out.data().data();
    const size_t planes = static_cast<size_t>(d.n) * d.c;
    const size_t x_plane = static_cast<size_t>(d.h) * d.w;
    const size_t o_plane = static_cast<size_t>(d.oh) * d.ow;

    for (size_t p = 0; p < planes; ++p) {
        const double* xp = xd + p * x_plane;
        double* op = od + p * o_plane;
        for (int i = 0; i < d.oh; ++i) {
            const int r0 = std::max(0, i * stride - pad);
            const int r1 = std::min(d.h, i * stride - pad + kernel);
            for (int j = 0; j < d.ow; ++j) {
                const int c0 = std::max(0, j * stride - pad);
                const int c1 = std::min(d.w, j * stride - pad + kernel);
                double s = 0.0;
                for (int r = r0; r < r1; ++r) {
                    for (int c = c0; c < c1; ++c) {
                        s += xp[static_cast<size_t>(r) * d.w + c];
                    }
                }
                op[static_cast<size_t>(i) * d.ow + j] = s / ((r1 - r0) * (c1 - c0));
            }
        }
    }
    check_finite(out.data(), "avg_pool");

    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&x});
        auto xn = x.handle();
        auto on = out.handle();
        tape->record(out, [=] {
            if (on->grad.empty()) {
                return;
            }
            auto& gx = tape->grad_buffer(xn.get());
            const double* gy = on->grad.data();
            for (size_t p = 0; p < planes; ++p) {
                double* gxp = gx.data() + p * x_plane;
                const double* gyp = gy + p * o_plane;
                for (int i = 0; i < d.oh; ++i) {
                    const int r0 = std::max(0, i * stride - pad);
                    const int r1 = std::min(d.h, i * stride - pad + kernel);
                    for (int j = 0; j < d.ow; ++j) {
                        const int c0 = std::max(0, j * stride - pad);
                        const int c1 = std::min(d.w, j * stride - pad + kernel);
                        const double share =
                            gyp[static_cast<size_t>(i) * d.ow + j] / ((r1 - r0) * (c1 - c0));
                        for (int r = r0; r < r1; ++r) {
                            for (int c = c0; c < c1; ++c) {
                                gxp[static_cast<size_t>(r) * d.w + c] += share;
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor max_pool(const Tensor& x, int kernel, int pad, int stride, Tape* tape) {
    check_finite(x.data(), "max_pool input");  // NaN never wins a > comparison
    const PoolDims d = pool_dims(x, kernel, pad, stride, "max_pool");
    Tensor out({d.n, d.c, d.oh, d.ow});
    const double* xd = x.data().data();
    double* od = out.data().data();
    const size_t planes = static_cast<size_t>(d.n) * d.c;
    const size_t x_plane = static_cast<size_t>(d.h) * d.w;
    const size_t o_plane = static_cast<size_t>(d.oh) * d.ow;
    // argmax per output cell; ties resolve to the first element in scan order
    std::vector<int> argmax(planes * o_plane);

    for (size_t p = 0; p < planes; ++p) {
        const double* xp = xd + p * x_plane;
        double* op = od + p * o_plane;
        int* ap = argmax.data() + p * o_plane;
        for (int i = 0; i < d.oh; ++i) {
            const int r0 = std::max(0, i * stride - pad);
            const int r1 = std::min(d.h, i * stride - pad + kernel);
            for (int j = 0; j < d.ow; ++j) {
                const int c0 = std::max(0, j * stride - pad);
                const int c1 = std::min(d.w, j * stride - pad + kernel);
                double best = -std::numeric_limits<double>::infinity();
                int best_at = r0 * d.w + c0;
                for (int r = r0; r < r1; ++r) {
                    for (int c = c0; c < c1; ++c) {
                        const double v = xp[static_cast<size_t>(r) * d.w + c];
                        if (v > best) {
                            best = v;
                            best_at = r * d.w + c;
                        }
                    }
                }
                op[static_cast<size_t>(i) * d.ow + j] = best;
                ap[static_cast<size_t>(i) * d.ow + j] = best_at;
            }
        }
    }

    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&x});
        auto xn = x.handle();
        auto on = out.handle();
        tape->record(out, [=, am = std::move(argmax)] {
            if (on->grad.empty()) {
                return;
            }
            auto& gx = tape->grad_buffer(xn.get());
            const double* gy = on->grad.data();
            for (size_t p = 0; p < planes; ++p) {
                double* gxp = gx.data() + p * x_plane;
                const double* gyp = gy + p * o_plane;
                const int* ap = am.data() + p * o_plane;
                for (size_t k = 0; k < o_plane; ++k) {
                    gxp[ap[k]] += gyp[k];
                }
            }
        });
    }
    return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Mode mode,
                  BnState* state, Tape* tape) {
    expect_dims(x, 4, "batch_norm input");
    const int n_batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.numel() != static_cast<size_t>(channels) ||
        beta.numel() != static_cast<size_t>(channels)) {
        throw ShapeError("batch_norm: gamma/beta do not match channel count");
    }
    if (n_batch < 1) {
        throw ShapeError("batch_norm: empty batch");
    }
    const bool batch_stats = mode != Mode::EvalRunning;
    if (!batch_stats && !state) {
        throw std::invalid_argument("batch_norm: EvalRunning mode needs running statistics");
    }

    const size_t plane = static_cast<size_t>(h) * w;
    const size_t per_channel = static_cast<size_t>(n_batch) * plane;
    const double* xd = x.data().data();

    std::vector<double> mean(channels), inv_std(channels);
    for (int c = 0; c < channels; ++c) {
        double mu, var;
        if (batch_stats) {
            double s = 0.0;
            for (int n = 0; n < n_batch; ++n) {
                const double* xp = xd + (static_cast<size_t>(n) * channels + c) * plane;
                for (size_t k = 0; k < plane; ++k) {
                    s += xp[k];
                }
            }
            mu = s / static_cast<double>(per_channel);
            double sq = 0.0;
            for (int n = 0; n < n_batch; ++n) {
                const double* xp = xd + (static_cast<size_t>(n) * channels + c) * plane;
                for (size_t k = 0; k < plane; ++k) {
                    const double dlt = xp[k] - mu;
                    sq += dlt * dlt;
                }
            }
            var = sq / static_cast<double>(per_channel);
            if (mode == Mode::Train && state) {
                state->mean[c] = (1.0 - kBnMomentum) * state->mean[c] + kBnMomentum * mu;
                state->var[c] = (1.0 - kBnMomentum) * state->var[c] + kBnMomentum * var;
            }
        } else {
            mu = state->mean[c];
            var = state->var[c];
        }
        mean[c] = mu;
        inv_std[c] = 1.0 / std::sqrt(var + kBnEps);
    }

    Tensor out(x.shape());
    double* od = out.data().data();
    std::vector<double> xhat(x.numel());
    for (int n = 0; n < n_batch; ++n) {
        for (int c = 0; c < channels; ++c) {
            const size_t base = (static_cast<size_t>(n) * channels + c) * plane;
            const double g = gamma.data()[static_cast<size_t>(c)];
            const double b = beta.data()[static_cast<size_t>(c)];
            const double mu = mean[c];
            const double is = inv_std[c];
            for (size_t k = 0; k < plane; ++k) {
                const double xh = (xd[base + k] - mu) * is;
                xhat[base + k] = xh;
                od[base + k] = g * xh + b;
            }
        }
    }
    check_finite(out.data(), "batch_norm");

    if (wants_grad(tape, {&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&x, &gamma, &beta});
        auto xn = x.handle();
        auto gn = gamma.handle();
        auto bn = beta.handle();
        auto on = out.handle();
        tape->record(out, [=, xh = std::move(xhat), is = std::move(inv_std)] {
            if (on->grad.empty()) {
                return;
            }
            const double* gy = on->grad.data();
            const double m = static_cast<double>(per_channel);
            for (int c = 0; c < channels; ++c) {
                double sum_gy = 0.0, sum_gy_xh = 0.0;
                for (int n = 0; n < n_batch; ++n) {
                    const size_t base = (static_cast<size_t>(n) * channels + c) * plane;
                    for (size_t k = 0; k < plane; ++k) {
                        sum_gy += gy[base + k];
                        sum_gy_xh += gy[base + k] * xh[base + k];
                    }
                }
                if (bn->requires_grad) {
                    tape->grad_buffer(bn.get())[static_cast<size_t>(c)] += sum_gy;
                }
                if (gn->requires_grad) {
                    tape->grad_buffer(gn.get())[static_cast<size_t>(c)] += sum_gy_xh;
                }
                if (xn->requires_grad) {
                    auto& gx = tape->grad_buffer(xn.get());
                    const double g_is = gn->data[static_cast<size_t>(c)] * is[c];
                    if (batch_stats) {
                        const double mean_gy = sum_gy / m;
                        const double mean_gy_xh = sum_gy_xh / m;
                        for (int n = 0; n < n_batch; ++n) {
                            const size_t base = (static_cast<size_t>(n) * channels + c) * plane;
                            for (size_t k = 0; k < plane; ++k) {
                                gx[base + k] +=
                                    g_is * (gy[base + k] - mean_gy - xh[base + k] * mean_gy_xh);
                            }
                        }
                    } else {
                        for (int n = 0; n < n_batch; ++n) {
                            const size_t base = (static_cast<size_t>(n) * channels + c) * plane;
                            for (size_t k = 0; k < plane; ++k) {
                                gx[base + k] += g_is * gy[base + k];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x, Tape* tape) {
    check_finite(x.data(), "relu input");  // relu would silently absorb NaN into 0
    Tensor out(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < xd.size(); ++i) {
        od[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    }
    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&x});
        auto xn = x.handle();
        auto on = out.handle();
        tape->record(out, [=] {
            if (on->grad.empty()) {
                return;
            }
            auto& gx = tape->grad_buffer(xn.get());
            for (size_t i = 0; i < gx.size(); ++i) {
                if (xn->data[i] > 0.0) {
                    gx[i] += on->grad[i];
                }
            }
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x, Tape* tape) {
    Tensor out(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < xd.size(); ++i) {
        od[i] = 1.0 / (1.0 + std::exp(-xd[i]));
    }
    check_finite(od, "sigmoid");
    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&x});
        auto xn = x.handle();
        auto on = out.handle();
        tape->record(out, [=] {
            if (on->grad.empty()) {
                return;
            }
            auto& gx = tape->grad_buffer(xn.get());
            for (size_t i = 0; i < gx.size(); ++i) {
                const double y = on->data[i];
                gx[i] += on->grad[i] * y * (1.0 - y);
            }
        });
    }
    return out;
}

Tensor tanh_act(const Tensor& x, Tape* tape) {
    Tensor out(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < xd.size(); ++i) {
        od[i] = std::tanh(xd[i]);
    }
    check_finite(od, "tanh");
    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&x});
        auto xn = x.handle();
        auto on = out.handle();
        tape->record(out, [=] {
            if (on->grad.empty()) {
                return;
            }
            auto& gx = tape->grad_buffer(xn.get());
            for (size_t i = 0; i < gx.size(); ++i) {
                const double y = on->data[i];
                gx[i] += on->grad[i] * (1.0 - y * y);
            }
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias, Tape* tape) {
    expect_dims(x, 2, "linear input");
    expect_dims(w, 2, "linear weight");
    const int b_rows = x.dim(0), in_f = x.dim(1);
    const int out_f = w.dim(1);
    if (w.dim(0) != in_f) {
        throw ShapeError("linear: weight rows do not match input features");
    }
    if (bias && (bias->shape().size() != 1 || bias->dim(0) != out_f)) {
        throw ShapeError("linear: bias does not match output features");
    }
    Tensor out({b_rows, out_f});
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    double* od = out.data().data();
    for (int r = 0; r < b_rows; ++r) {
        double* orow = od + static_cast<size_t>(r) * out_f;
        if (bias) {
            std::memcpy(orow, bias->data().data(), sizeof(double) * static_cast<size_t>(out_f));
        }
        const double* xrow = xd + static_cast<size_t>(r) * in_f;
        for (int i = 0; i < in_f; ++i) {
            const double xv = xrow[i];
            const double* wrow = wd + static_cast<size_t>(i) * out_f;
            for (int o = 0; o < out_f; ++o) {
                orow[o] += xv * wrow[o];
            }
        }
    }
    check_finite(out.data(), "linear");

    const bool has_bias = bias != nullptr;
    if (wants_grad(tape, has_bias ? std::initializer_list<const Tensor*>{&x, &w, bias}
                                  : std::initializer_list<const Tensor*>{&x, &w})) {
        out.set_requires_grad(true);
        if (has_bias) {
            note_inputs(*tape, {&x, &w, bias});
        } else {
            note_inputs(*tape, {&x, &w});
        }
        auto xn = x.handle();
        auto wn = w.handle();
        auto bn = has_bias ? bias->handle() : nullptr;
        auto on = out.handle();
        tape->record(out, [=] {
            if (on->grad.empty()) {
                return;
            }
            const double* gy = on->grad.data();
            if (bn && bn->requires_grad) {
                auto& gb = tape->grad_buffer(bn.get());
                for (int r = 0; r < b_rows; ++r) {
                    const double* grow = gy + static_cast<size_t>(r) * out_f;
                    for (int o = 0; o < out_f; ++o) {
                        gb[o] += grow[o];
                    }
                }
            }
            if (wn->requires_grad) {
                auto& gw = tape->grad_buffer(wn.get());
                for (int r = 0; r < b_rows; ++r) {
                    const double* xrow = xn->data.data() + static_cast<size_t>(r) * in_f;
                    const double* grow = gy + static_cast<size_t>(r) * out_f;
                    for (int i = 0; i < in_f; ++i) {
                        double* gwrow = gw.data() + static_cast<size_t>(i) * out_f;
                        const double xv = xrow[i];
                        for (int o = 0; o < out_f; ++o) {
                            gwrow[o] += xv * grow[o];
                        }
                    }
                }
            }
            if (xn->requires_grad) {
                auto& gx = tape->grad_buffer(xn.get());
                for (int r = 0; r < b_rows; ++r) {
                    double* gxrow = gx.data() + static_cast<size_t>(r) * in_f;
                    const double* grow = gy + static_cast<size_t>(r) * out_f;
                    for (int i = 0; i < in_f; ++i) {
                        const double* wrow = wn->data.data() + static_cast<size_t>(i) * out_f;
                        double s = 0.0;
                        for (int o = 0; o < out_f; ++o) {
                            s += wrow[o] * grow[o];
                        }
                        gxrow[i] += s;
                    }
                }
            }
        });
    }
    return out;
}

Tensor global_avg_pool(const Tensor& x, Tape* tape) {
    expect_dims(x, 4, "global_avg_pool input");
    const int n_batch = x.dim(0), channels = x.dim(1);
    const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
    Tensor out({n_batch, channels});
    const double* xd = x.data().data();
    double* od = out.data().data();
    for (size_t p = 0; p < static_cast<size_t>(n_batch) * channels; ++p) {
        const double* xp = xd + p * plane;
        double s = 0.0;
        for (size_t k = 0; k < plane; ++k) {
            s += xp[k];
        }
        od[p] = s / static_cast<double>(plane);
    }
    check_finite(out.data(), "global_avg_pool");
    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&x});
        auto xn = x.handle();
        auto on = out.handle();
        tape->record(out, [=] {
            if (on->grad.empty()) {
                return;
            }
            auto& gx = tape->grad_buffer(xn.get());
            for (size_t p = 0; p < on->grad.size(); ++p) {
                const double share = on->grad[p] / static_cast<double>(plane);
                double* gxp = gx.data() + p * plane;
                for (size_t k = 0; k < plane; ++k) {
                    gxp[k] += share;
                }
            }
        });
    }
    return out;
}

Tensor concat_channels(std::span<const Tensor> xs, Tape* tape) {
    if (xs.empty()) {
        throw ShapeError("concat_channels: no inputs");
    }
    const int n_batch = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
    int total_c = 0;
    for (const Tensor& t : xs) {
        expect_dims(t, 4, "concat_channels input");
        if (t.dim(0) != n_batch || t.dim(2) != h || t.dim(3) != w) {
            throw ShapeError("concat_channels: mismatched batch or spatial dims");
        }
        total_c += t.dim(1);
    }
    Tensor out({n_batch, total_c, h, w});
    const size_t plane = static_cast<size_t>(h) * w;
    double* od = out.data().data();
    int c_off = 0;
    for (const Tensor& t : xs) {
        const int ci = t.dim(1);
        const double* td = t.data().data();
        for (int n = 0; n < n_batch; ++n) {
            std::memcpy(od + (static_cast<size_t>(n) * total_c + c_off) * plane,
                        td + static_cast<size_t>(n) * ci * plane,
                        sizeof(double) * static_cast<size_t>(ci) * plane);
        }
        c_off += ci;
    }

    bool any_grad = false;
    for (const Tensor& t : xs) {
        any_grad = any_grad || t.requires_grad();
    }
    if (tape && any_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorData>> in_nodes;
        in_nodes.reserve(xs.size());
        for (const Tensor& t : xs) {
            if (t.requires_grad() && t.node()->tape != tape) {
                tape->note_leaf(t);
            }
            in_nodes.push_back(t.handle());
        }
        auto on = out.handle();
        tape->record(out, [=, nodes = std::move(in_nodes)] {
            if (on->grad.empty()) {
                return;
            }
            const double* gy = on->grad.data();
            int off = 0;
            for (const auto& node : nodes) {
                const int ci = node->shape[1];
                if (node->requires_grad) {
                    auto& gx = tape->grad_buffer(node.get());
                    for (int n = 0; n < n_batch; ++n) {
                        const double* src = gy + (static_cast<size_t>(n) * total_c + off) * plane;
                        double* dst = gx.data() + static_cast<size_t>(n) * ci * plane;
                        for (size_t k = 0; k < static_cast<size_t>(ci) * plane; ++k) {
                            dst[k] += src[k];
                        }
                    }
                }
                off += ci;
            }
        });
    }
    return out;
}

namespace {

enum class BinOp { Add, Sub, Mul };

Tensor binary_elementwise(const Tensor& a, const Tensor& b, BinOp op, Tape* tape) {
    if (a.shape() != b.shape()) {
        throw ShapeError("elementwise op: shape mismatch");
    }
    Tensor out(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    switch (op) {
        case BinOp::Add:
            for (size_t i = 0; i < od.size(); ++i) {
                od[i] = ad[i] + bd[i];
            }
            break;
        case BinOp::Sub:
            for (size_t i = 0; i < od.size(); ++i) {
                od[i] = ad[i] - bd[i];
            }
            break;
        case BinOp::Mul:
            for (size_t i = 0; i < od.size(); ++i) {
                od[i] = ad[i] * bd[i];
            }
            break;
    }
    check_finite(od, "elementwise op");
    if (wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&a, &b});
        auto an = a.handle();
        auto bn = b.handle();
        auto on = out.handle();
        tape->record(out, [=] {
            if (on->grad.empty()) {
                return;
            }
            const auto& gy = on->grad;
            if (an->requires_grad) {
                auto& ga = tape->grad_buffer(an.get());
                switch (op) {
                    case BinOp::Add:
                    case BinOp::Sub:
                        for (size_t i = 0; i < ga.size(); ++i) {
                            ga[i] += gy[i];
                        }
                        break;
                    case BinOp::Mul:
                        for (size_t i = 0; i < ga.size(); ++i) {
                            ga[i] += gy[i] * bn->data[i];
                        }
                        break;
                }
            }
            if (bn->requires_grad) {
                auto& gb = tape->grad_buffer(bn.get());
                switch (op) {
                    case BinOp::Add:
                        for (size_t i = 0; i < gb.size(); ++i) {
                            gb[i] += gy[i];
                        }
                        break;
                    case BinOp::Sub:
                        for (size_t i = 0; i < gb.size(); ++i) {
                            gb[i] -= gy[i];
                        }
                        break;
                    case BinOp::Mul:
                        for (size_t i = 0; i < gb.size(); ++i) {
                            gb[i] += gy[i] * an->data[i];
                        }
                        break;
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    return binary_elementwise(a, b, BinOp::Add, tape);
}

Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
    return binary_elementwise(a, b, BinOp::Sub, tape);
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
    return binary_elementwise(a, b, BinOp::Mul, tape);
}

Tensor scale(const Tensor& x, double c, Tape* tape) {
    Tensor out(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) {
        od[i] = c * xd[i];
    }
    check_finite(od, "scale");
    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&x});
        auto xn = x.handle();
        auto on = out.handle();
        tape->record(out, [=] {
            if (on->grad.empty()) {
                return;
            }
            auto& gx = tape->grad_buffer(xn.get());
            for (size_t i = 0; i < gx.size(); ++i) {
                gx[i] += c * on->grad[i];
            }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x, Tape* tape) {
    double s = 0.0;
    for (double v : x.data()) {
        s += v;
    }
    Tensor out = Tensor::scalar(s);
    check_finite(out.data(), "sum_all");
    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&x});
        auto xn = x.handle();
        auto on = out.handle();
        tape->record(out, [=] {
            if (on->grad.empty()) {
                return;
            }
            const double g = on->grad[0];
            auto& gx = tape->grad_buffer(xn.get());
            for (size_t i = 0; i < gx.size(); ++i) {
                gx[i] += g;
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids, Tape* tape) {
    expect_dims(table, 2, "gather_rows table");
    const int vocab = table.dim(0), dim = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= vocab) {
            throw std::out_of_range("gather_rows: id out of vocabulary");
        }
    }
    Tensor out({static_cast<int>(ids.size()), dim});
    const double* td = table.data().data();
    double* od = out.data().data();
    for (size_t r = 0; r < ids.size(); ++r) {
        std::memcpy(od + r * dim, td + static_cast<size_t>(ids[r]) * dim,
                    sizeof(double) * static_cast<size_t>(dim));
    }
    if (wants_grad(tape, {&table})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&table});
        auto tn = table.handle();
        auto on = out.handle();
        tape->record(out, [=, idv = ids] {
            if (on->grad.empty()) {
                return;
            }
            auto& gt = tape->grad_buffer(tn.get());
            for (size_t r = 0; r < idv.size(); ++r) {
                double* dst = gt.data() + static_cast<size_t>(idv[r]) * dim;
                const double* src = on->grad.data() + r * dim;
                for (int k = 0; k < dim; ++k) {
                    dst[k] += src[k];
                }
            }
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, int c0, int c1, Tape* tape) {
    expect_dims(x, 2, "slice_cols input");
    const int rows = x.dim(0), cols = x.dim(1);
    if (c0 < 0 || c1 > cols || c0 >= c1) {
        throw ShapeError("slice_cols: bad column range");
    }
    const int width = c1 - c0;
    Tensor out({rows, width});
    const double* xd = x.data().data();
    double* od = out.data().data();
    for (int r = 0; r < rows; ++r) {
        std::memcpy(od + static_cast<size_t>(r) * width,
                    xd + static_cast<size_t>(r) * cols + c0,
                    sizeof(double) * static_cast<size_t>(width));
    }
    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&x});
        auto xn = x.handle();
        auto on = out.handle();
        tape->record(out, [=] {
            if (on->grad.empty()) {
                return;
            }
            auto& gx = tape->grad_buffer(xn.get());
            for (int r = 0; r < rows; ++r) {
                double* dst = gx.data() + static_cast<size_t>(r) * cols + c0;
                const double* src = on->grad.data() + static_cast<size_t>(r) * width;
                for (int k = 0; k < width; ++k) {
                    dst[k] += src[k];
                }
            }
        });
    }
    return out;
}

Tensor softmax_xent(const Tensor& logits, const std::vector<int>& labels, Tape* tape) {
    expect_dims(logits, 2, "softmax_xent logits");
    const int b_rows = logits.dim(0), classes = logits.dim(1);
    if (b_rows < 1) {
        throw ShapeError("softmax_xent: empty batch");
    }
    if (static_cast<int>(labels.size()) != b_rows) {
        throw ShapeError("softmax_xent: label count does not match batch");
    }
    for (int y : labels) {
        if (y < 0 || y >= classes) {
            throw std::out_of_range("softmax_xent: label out of range");
        }
    }
    const double* xd = logits.data().data();
    std::vector<double> probs(logits.numel());
    double loss = 0.0;
    for (int r = 0; r < b_rows; ++r) {
        const double* row = xd + static_cast<size_t>(r) * classes;
        double mx = row[0];
        for (int c = 1; c < classes; ++c) {
            mx = std::max(mx, row[c]);
        }
        double denom = 0.0;
        for (int c = 0; c < classes; ++c) {
            denom += std::exp(row[c] - mx);
        }
        const double lse = std::log(denom);
        double* prow = probs.data() + static_cast<size_t>(r) * classes;
        for (int c = 0; c < classes; ++c) {
            prow[c] = std::exp(row[c] - mx - lse);
        }
        loss += lse - (row[labels[static_cast<size_t>(r)]] - mx);
    }
    Tensor out = Tensor::scalar(loss / b_rows);
    check_finite(out.data(), "softmax_xent");

    if (wants_grad(tape, {&logits})) {
        out.set_requires_grad(true);
        note_inputs(*tape, {&logits});
        auto xn = logits.handle();
        auto on = out.handle();
        tape->record(out, [=, pv = std::move(probs), yv = labels] {
            if (on->grad.empty()) {
                return;
            }
            const double g = on->grad[0] / b_rows;
            auto& gx = tape->grad_buffer(xn.get());
            for (int r = 0; r < b_rows; ++r) {
                const double* prow = pv.data() + static_cast<size_t>(r) * classes;
                double* grow = gx.data() + static_cast<size_t>(r) * classes;
                for (int c = 0; c < classes; ++c) {
                    grow[c] += g * (prow[c] - (c == yv[static_cast<size_t>(r)] ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

Tensor forward(LayerKind kind, std::span<const Tensor> inputs, std::span<const Tensor> params,
               Mode mode, BnState* state, Tape* tape) {
    auto need = [&](size_t n_in) {
        if (inputs.size() != n_in) {
            throw ShapeError("forward: wrong input count for layer kind");
        }
    };
    switch (kind) {
        case LayerKind::Conv3x3:
            need(1);
            return conv2d(inputs[0], params[0], params.size() > 1 ? &params[1] : nullptr, 1, 1,
                          tape);
        case LayerKind::Conv1x1:
            need(1);
            return conv2d(inputs[0], params[0], params.size() > 1 ? &params[1] : nullptr, 0, 0,
                          tape);
        case LayerKind::FactorizedConv5x5: {
            need(1);
            if (params.size() == 2) {
                Tensor mid = conv2d(inputs[0], params[0], nullptr, 0, 2, tape);
                return conv2d(mid, params[1], nullptr, 2, 0, tape);
            }
            if (params.size() == 4) {
                Tensor mid = conv2d(inputs[0], params[0], &params[1], 0, 2, tape);
                return conv2d(mid, params[2], &params[3], 2, 0, tape);
            }
            throw ShapeError("forward: FactorizedConv5x5 takes [w1,w2] or [w1,b1,w2,b2]");
        }
        case LayerKind::Identity:
            need(1);
            return inputs[0];
        case LayerKind::AvgPool3x3:
            need(1);
            return avg_pool(inputs[0], 3, 1, 1, tape);
        case LayerKind::MaxPool3x3:
            need(1);
            return max_pool(inputs[0], 3, 1, 1, tape);
        case LayerKind::BatchNorm:
            need(1);
            return batch_norm(inputs[0], params[0], params[1], mode, state, tape);
        case LayerKind::ReLU:
            need(1);
            return relu(inputs[0], tape);
        case LayerKind::Linear:
            need(1);
            return linear(inputs[0], params[0], params.size() > 1 ? &params[1] : nullptr, tape);
        case LayerKind::GlobalAvgPool:
            need(1);
            return global_avg_pool(inputs[0], tape);
        case LayerKind::Concat:
            return concat_channels(inputs, tape);
        case LayerKind::Add:
            need(2);
            return add(inputs[0], inputs[1], tape);
    }
    throw std::invalid_argument("forward: unknown layer kind");
}

}  // namespace mnas::ops
