#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mnas/cell.hpp"
#include "mnas/ops.hpp"
#include "mnas/tensor.hpp"

namespace mnas {

// One executable layer of a compiled network. Slots index the activation
// scratchpad built per forward pass.
struct CompiledNode {
    enum class Op { Conv, AvgPool, MaxPool, BatchNorm, ReLU, Linear, GlobalAvgPool, Concat, Add };
    Op op;
    std::vector<int> inputs;
    std::vector<int> params;
    int bn = -1;
    int pad_h = 0, pad_w = 0;            // conv
    int kernel = 0, pad = 0, stride = 1;  // pools
    int out = -1;
};

// A compiled, parameterized network. Parameters are trainable leaves;
// BatchNorm running statistics live alongside as non-trainable state.
// A Model instance is single-threaded; clones are fully independent.
class Model {
  public:
    NetworkSpec spec;
    std::vector<Tensor> params;
    std::vector<std::string> param_names;
    std::vector<BnState> bn_states;
    std::vector<CompiledNode> nodes;
    int input_slot = 0;
    int output_slot = -1;
    int n_slots = 1;

    // images: [B,1,H,W] -> logits [B, n_classes]. Train-mode passes update
    // BatchNorm running statistics.
    Tensor forward(const Tensor& images, Mode mode, Tape* tape);

    // Gradients aligned with params; parameters absent from the map get
    // zero tensors.
    std::vector<Tensor> grads_for_params(const GradMap& grads) const;

    Model clone() const;
    long param_count() const;
};

// Deterministic compilation: same (spec, seed) yields bit-identical
// initial parameters.
Model compile_network(const NetworkSpec& spec, uint64_t seed);

nlohmann::ordered_json network_spec_to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const nlohmann::json& j);

// Full parameter + running-statistics snapshot, restorable onto a model
// compiled from the embedded spec.
nlohmann::ordered_json model_to_json(const Model& model);
Model model_from_json(const nlohmann::json& j);

}  // namespace mnas
