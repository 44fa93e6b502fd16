#pragma once

#include <utility>
#include <vector>

#include <json.hpp>

#include "mnas/cell.hpp"
#include "mnas/tensor.hpp"

namespace mnas {

// Token sequence for a cell: [left_in, left_op, right_in, right_op] per
// block, raw values. Injective on canonical cells.
struct CellTokens {
    std::vector<int> tokens;
};

CellTokens encode_cell(const CellSpec& cell);

struct SurrogateConfig {
    int max_blocks = 5;  // bounds the input-reference vocabulary (indices 0..B)
    int embed_dim = 32;
    int hidden = 100;    // recurrent cell size, single layer
    int epochs = 200;
    double learning_rate = 0.01;
};

// Single-layer LSTM over embedded cell tokens with a sigmoid readout of the
// final hidden state, so predictions always land in (0,1). Built on the same
// tape engine as the networks it ranks. Immutable (and thread-safe) once fit.
class SurrogateModel {
  public:
    SurrogateModel() = default;

    bool fitted() const { return !params_.empty(); }
    const SurrogateConfig& config() const { return config_; }
    double final_fit_mse() const { return final_mse_; }
    double initial_fit_mse() const { return initial_mse_; }

    nlohmann::ordered_json to_json() const;
    static SurrogateModel from_json(const nlohmann::json& j);

    friend SurrogateModel surrogate_fit(const std::vector<std::pair<CellSpec, double>>& history,
                                        const SurrogateConfig& cfg, uint64_t seed);
    friend std::vector<double> surrogate_predict(const SurrogateModel& model,
                                                 const std::vector<CellSpec>& cells);

  private:
    SurrogateConfig config_;
    // emb [V,D], wx [D,4H], wh [H,4H], b [4H], w_out [H,1], b_out [1]
    std::vector<Tensor> params_;
    double initial_mse_ = 0.0;
    double final_mse_ = 0.0;
};

// Retrains from scratch on the full accumulated history (MSE regression,
// Adam). Deterministic in (history, cfg, seed).
SurrogateModel surrogate_fit(const std::vector<std::pair<CellSpec, double>>& history,
                             const SurrogateConfig& cfg, uint64_t seed);

// One predicted accuracy in (0,1) per cell; pure and deterministic.
std::vector<double> surrogate_predict(const SurrogateModel& model,
                                      const std::vector<CellSpec>& cells);

}  // namespace mnas
