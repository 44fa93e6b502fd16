#pragma once

#include <span>
#include <vector>

#include "mnas/tensor.hpp"

namespace mnas {

// The first five kinds are exactly the block operation set searched over;
// the rest are plumbing used by network compilation and the surrogate.
enum class LayerKind {
    Conv3x3,
    FactorizedConv5x5,
    Identity,
    AvgPool3x3,
    MaxPool3x3,
    Conv1x1,
    BatchNorm,
    ReLU,
    Linear,
    GlobalAvgPool,
    Concat,
    Add,
};

enum class Mode { Train, EvalRunning, EvalTransduction };

// BatchNorm running statistics, one entry per channel. Updated by EMA
// (momentum 0.1) on Train-mode passes; consumed in EvalRunning mode.
struct BnState {
    std::vector<double> mean;
    std::vector<double> var;

    static BnState fresh(int channels) {
        BnState s;
        s.mean.assign(static_cast<size_t>(channels), 0.0);
        s.var.assign(static_cast<size_t>(channels), 1.0);
        return s;
    }
};

namespace ops {

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// Convolution, stride 1, explicit zero padding. x: [N,C,H,W], w: [F,C,kh,kw],
// bias: [F] or null.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, int pad_h, int pad_w,
              Tape* tape);

// Square-kernel pooling. Averages run over in-bounds cells only, so padding
// never dilutes the window; max likewise ignores padding.
Tensor avg_pool(const Tensor& x, int kernel, int pad, int stride, Tape* tape);
Tensor max_pool(const Tensor& x, int kernel, int pad, int stride, Tape* tape);

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Mode mode,
                  BnState* state, Tape* tape);

Tensor relu(const Tensor& x, Tape* tape);
Tensor sigmoid(const Tensor& x, Tape* tape);
Tensor tanh_act(const Tensor& x, Tape* tape);

// x: [B,I], w: [I,O], bias: [O] or null.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias, Tape* tape);

// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x, Tape* tape);

Tensor concat_channels(std::span<const Tensor> xs, Tape* tape);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape);
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape);
Tensor scale(const Tensor& x, double c, Tape* tape);
Tensor sum_all(const Tensor& x, Tape* tape);

// Embedding lookup: rows of table [V,D] selected by ids -> [B,D].
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids, Tape* tape);

// Column slice of a [B,K] matrix -> [B, c1-c0).
Tensor slice_cols(const Tensor& x, int c0, int c1, Tape* tape);

// Mean negative log-likelihood over the batch, max-subtraction stabilised.
// logits: [B,C], labels in [0,C).
Tensor softmax_xent(const Tensor& logits, const std::vector<int>& labels, Tape* tape);

// Dispatch over LayerKind for callers that hold layers generically.
// Conv kinds take params [w] or [w,bias]; FactorizedConv5x5 takes [w1,w2]
// ([F,C,1,5] then [F,F,5,1]); BatchNorm takes [gamma,beta]; Linear [w] or
// [w,bias]; the remaining kinds take no params. Mode matters to BatchNorm only.
Tensor forward(LayerKind kind, std::span<const Tensor> inputs, std::span<const Tensor> params,
               Mode mode, BnState* state, Tape* tape);

}  // namespace ops

}  // namespace mnas
