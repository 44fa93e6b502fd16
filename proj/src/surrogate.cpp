#include "mnas/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mnas/ops.hpp"
#include "mnas/optim.hpp"
#include "mnas/rng.hpp"

namespace mnas {

CellTokens encode_cell(const CellSpec& cell) {
    const CellSpec canon = canonicalize(cell);
    CellTokens out;
    out.tokens.reserve(canon.blocks.size() * 4);
    for (const BlockSpec& block : canon.blocks) {
        out.tokens.push_back(block.left.input);
        out.tokens.push_back(static_cast<int>(block.left.op));
        out.tokens.push_back(block.right.input);
        out.tokens.push_back(static_cast<int>(block.right.op));
    }
    return out;
}

namespace {

constexpr const char* kParamNames[] = {"emb", "wx", "wh", "b", "w_out", "b_out"};

// Positional tokens share one embedding table; ops are offset past the
// input-reference vocabulary.
std::vector<int> table_ids(const CellTokens& tokens, int input_vocab, int vocab) {
    std::vector<int> ids(tokens.tokens.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        const int raw = tokens.tokens[i];
        const int id = (i % 2 == 0) ? raw : input_vocab + raw;
        if (id < 0 || id >= vocab) {
            throw std::invalid_argument("surrogate: token outside vocabulary; cell too large?");
        }
        ids[i] = id;
    }
    return ids;
}

// Batched unrolled forward over same-length sequences. ids is [B][T].
Tensor lstm_forward(const std::vector<Tensor>& params, const std::vector<std::vector<int>>& ids,
                    int hidden, Tape* tape) {
    const Tensor& emb = params[0];
    const Tensor& wx = params[1];
    const Tensor& wh = params[2];
    const Tensor& b = params[3];
    const Tensor& w_out = params[4];
    const Tensor& b_out = params[5];

    const int batch = static_cast<int>(ids.size());
    const size_t steps = ids[0].size();
    Tensor h({batch, hidden});
    Tensor c({batch, hidden});
    for (size_t t = 0; t < steps; ++t) {
        std::vector<int> column(static_cast<size_t>(batch));
        for (int r = 0; r < batch; ++r) {
            column[static_cast<size_t>(r)] = ids[static_cast<size_t>(r)][t];
        }
        Tensor x = ops::gather_rows(emb, column, tape);
        Tensor z = ops::add(ops::linear(x, wx, &b, tape), ops::linear(h, wh, nullptr, tape), tape);
        Tensor gate_i = ops::sigmoid(ops::slice_cols(z, 0, hidden, tape), tape);
        Tensor gate_f = ops::sigmoid(ops::slice_cols(z, hidden, 2 * hidden, tape), tape);
        Tensor gate_g = ops::tanh_act(ops::slice_cols(z, 2 * hidden, 3 * hidden, tape), tape);
        Tensor gate_o = ops::sigmoid(ops::slice_cols(z, 3 * hidden, 4 * hidden, tape), tape);
        c = ops::add(ops::mul(gate_f, c, tape), ops::mul(gate_i, gate_g, tape), tape);
        h = ops::mul(gate_o, ops::tanh_act(c, tape), tape);
    }
    return ops::sigmoid(ops::linear(h, w_out, &b_out, tape), tape);
}

std::vector<Tensor> init_params(const SurrogateConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    const int input_vocab = cfg.max_blocks + 1;
    const int vocab = input_vocab + kNumBlockOps;
    const int d = cfg.embed_dim, hid = cfg.hidden;
    auto normal_tensor = [&](std::vector<int> shape, double std) {
        Tensor t(std::move(shape), 0.0, true);
        for (double& v : t.data()) {
            v = rng.normal(0.0, std);
        }
        return t;
    };
    std::vector<Tensor> params;
    params.push_back(normal_tensor({vocab, d}, 1.0));
    params.push_back(normal_tensor({d, 4 * hid}, std::sqrt(1.0 / d)));
    params.push_back(normal_tensor({hid, 4 * hid}, std::sqrt(1.0 / hid)));
    Tensor bias({4 * hid}, 0.0, true);
    for (int k = hid; k < 2 * hid; ++k) {
        bias.data()[static_cast<size_t>(k)] = 1.0;  // forget gate bias
    }
    params.push_back(std::move(bias));
    params.push_back(normal_tensor({hid, 1}, std::sqrt(1.0 / hid)));
    params.push_back(Tensor({1}, 0.0, true));
    return params;
}

struct LengthGroup {
    std::vector<std::vector<int>> ids;  // [B][T]
    std::vector<size_t> source;         // index into the original list
    std::vector<double> targets;
};

std::map<size_t, LengthGroup> group_by_length(const std::vector<CellSpec>& cells,
                                              const std::vector<double>* targets,
                                              const SurrogateConfig& cfg) {
    const int input_vocab = cfg.max_blocks + 1;
    const int vocab = input_vocab + kNumBlockOps;
    std::map<size_t, LengthGroup> groups;
    for (size_t i = 0; i < cells.size(); ++i) {
        const CellTokens tokens = encode_cell(cells[i]);
        auto ids = table_ids(tokens, input_vocab, vocab);
        LengthGroup& g = groups[ids.size()];
        g.ids.push_back(std::move(ids));
        g.source.push_back(i);
        if (targets) {
            g.targets.push_back((*targets)[i]);
        }
    }
    return groups;
}

}  // namespace

SurrogateModel surrogate_fit(const std::vector<std::pair<CellSpec, double>>& history,
                             const SurrogateConfig& cfg, uint64_t seed) {
    if (history.empty()) {
        throw std::invalid_argument("surrogate_fit: empty history");
    }
    std::vector<CellSpec> cells;
    std::vector<double> targets;
    cells.reserve(history.size());
    targets.reserve(history.size());
    for (const auto& [cell, score] : history) {
        if (!(score >= 0.0 && score <= 1.0)) {
            throw std::invalid_argument("surrogate_fit: scores must lie in [0,1]");
        }
        cells.push_back(cell);
        targets.push_back(score);
    }

    SurrogateModel model;
    model.config_ = cfg;
    model.params_ = init_params(cfg, seed);

    const auto groups = group_by_length(cells, &targets, cfg);
    const double inv_n = 1.0 / static_cast<double>(cells.size());
    OptimState opt = OptimState::adam(cfg.learning_rate);

    for (int epoch = 0; epoch <= cfg.epochs; ++epoch) {
        Tape tape;
        Tensor loss;  // sum of squared errors across groups, then scaled
        for (const auto& [len, group] : groups) {
            Tensor pred = lstm_forward(model.params_, group.ids, cfg.hidden, &tape);
            Tensor target = Tensor::from_data({static_cast<int>(group.targets.size()), 1},
                                              std::vector<double>(group.targets));
            Tensor diff = ops::sub(pred, target, &tape);
            Tensor se = ops::sum_all(ops::mul(diff, diff, &tape), &tape);
            loss = loss.defined() ? ops::add(loss, se, &tape) : se;
        }
        loss = ops::scale(loss, inv_n, &tape);
        if (epoch == 0) {
            model.initial_mse_ = loss.item();
        }
        model.final_mse_ = loss.item();
        if (epoch == cfg.epochs) {
            break;  // final pass measures the trained loss without stepping
        }
        GradMap grads = tape.backward(loss);
        std::vector<Tensor> aligned;
        aligned.reserve(model.params_.size());
        for (const Tensor& p : model.params_) {
            auto it = grads.find(p.node());
            aligned.push_back(it != grads.end() ? it->second : Tensor(p.shape(), 0.0));
        }
        opt.step(model.params_, aligned);
    }
    return model;
}

std::vector<double> surrogate_predict(const SurrogateModel& model,
                                      const std::vector<CellSpec>& cells) {
    if (!model.fitted()) {
        throw std::logic_error("surrogate_predict: model has not been fit");
    }
    std::vector<double> out(cells.size(), 0.0);
    const auto groups = group_by_length(cells, nullptr, model.config_);
    for (const auto& [len, group] : groups) {
        Tensor pred = lstm_forward(model.params_, group.ids, model.config_.hidden, nullptr);
        for (size_t r = 0; r < group.source.size(); ++r) {
            out[group.source[r]] = pred.data()[r];
        }
    }
    return out;
}

nlohmann::ordered_json SurrogateModel::to_json() const {
    nlohmann::ordered_json j;
    j["max_blocks"] = config_.max_blocks;
    j["embed_dim"] = config_.embed_dim;
    j["hidden"] = config_.hidden;
    j["epochs"] = config_.epochs;
    j["learning_rate"] = config_.learning_rate;
    j["fitted"] = fitted();
    if (fitted()) {
        nlohmann::ordered_json weights;
        for (size_t i = 0; i < params_.size(); ++i) {
            weights[kParamNames[i]] = params_[i].data();
        }
        j["weights"] = std::move(weights);
        j["initial_mse"] = initial_mse_;
        j["final_mse"] = final_mse_;
    }
    return j;
}

SurrogateModel SurrogateModel::from_json(const nlohmann::json& j) {
    try {
        SurrogateModel model;
        model.config_.max_blocks = j.at("max_blocks").get<int>();
        model.config_.embed_dim = j.at("embed_dim").get<int>();
        model.config_.hidden = j.at("hidden").get<int>();
        model.config_.epochs = j.at("epochs").get<int>();
        model.config_.learning_rate = j.at("learning_rate").get<double>();
        if (!j.at("fitted").get<bool>()) {
            return model;
        }
        model.initial_mse_ = j.at("initial_mse").get<double>();
        model.final_mse_ = j.at("final_mse").get<double>();
        // rebuild shapes with a throwaway init, then overwrite the values
        model.params_ = init_params(model.config_, 0);
        const auto& weights = j.at("weights");
        for (size_t i = 0; i < model.params_.size(); ++i) {
            auto values = weights.at(kParamNames[i]).get<std::vector<double>>();
            if (values.size() != model.params_[i].numel()) {
                throw FormatError(FormatError::Kind::CountMismatch,
                                  std::string("surrogate weight ") + kParamNames[i] +
                                      " has wrong length");
            }
            model.params_[i].data() = std::move(values);
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Malformed,
                          std::string("bad surrogate snapshot: ") + e.what());
    }
}

}  // namespace mnas
