#include "mnas/network.hpp"

#include <cmath>
#include <unordered_map>

#include "mnas/rng.hpp"

namespace mnas {

namespace {

void validate_network_spec(const NetworkSpec& spec) {
    validate_cell(spec.cell);
    if (spec.filters < 1) {
        throw std::invalid_argument("network: filters must be >= 1");
    }
    if (spec.unroll < 0) {
        throw std::invalid_argument("network: unroll must be >= 0");
    }
    if (spec.feature_scale_rate != 1 && spec.feature_scale_rate != 2) {
        throw std::invalid_argument("network: feature scale rate must be 1 or 2");
    }
    if (spec.n_stages < 1 || spec.n_classes < 2) {
        throw std::invalid_argument("network: need >= 1 stage and >= 2 classes");
    }
}

struct Builder {
    Model m;
    Rng rng;

    explicit Builder(const NetworkSpec& spec, uint64_t seed) : rng(seed) { m.spec = spec; }

    int new_slot() { return m.n_slots++; }

    int add_param(std::vector<int> shape, const std::string& name, double init_std) {
        Tensor t(shape, 0.0, true);
        if (init_std > 0.0) {
            for (double& v : t.data()) {
                v = rng.normal(0.0, init_std);
            }
        }
        m.params.push_back(std::move(t));
        m.param_names.push_back(name);
        return static_cast<int>(m.params.size()) - 1;
    }

    int add_const_param(std::vector<int> shape, const std::string& name, double fill) {
        Tensor t(shape, fill, true);
        m.params.push_back(std::move(t));
        m.param_names.push_back(name);
        return static_cast<int>(m.params.size()) - 1;
    }

    int emit(CompiledNode node) {
        node.out = new_slot();
        const int out = node.out;
        m.nodes.push_back(std::move(node));
        return out;
    }

    int conv(int in, int in_ch, int out_ch, int kh, int kw, int ph, int pw, bool bias,
             const std::string& name) {
        CompiledNode node;
        node.op = CompiledNode::Op::Conv;
        node.inputs = {in};
        node.pad_h = ph;
        node.pad_w = pw;
        const double std = std::sqrt(2.0 / (in_ch * kh * kw));
        node.params.push_back(add_param({out_ch, in_ch, kh, kw}, name + ".w", std));
        if (bias) {
            node.params.push_back(add_const_param({out_ch}, name + ".b", 0.0));
        }
        return emit(std::move(node));
    }

    int batch_norm(int in, int channels, const std::string& name) {
        CompiledNode node;
        node.op = CompiledNode::Op::BatchNorm;
        node.inputs = {in};
        node.params.push_back(add_const_param({channels}, name + ".bn.g", 1.0));
        node.params.push_back(add_const_param({channels}, name + ".bn.b", 0.0));
        node.bn = static_cast<int>(m.bn_states.size());
        m.bn_states.push_back(BnState::fresh(channels));
        return emit(std::move(node));
    }

    int relu(int in) {
        CompiledNode node;
        node.op = CompiledNode::Op::ReLU;
        node.inputs = {in};
        return emit(std::move(node));
    }

    int pool(CompiledNode::Op op, int in, int kernel, int pad, int stride) {
        CompiledNode node;
        node.op = op;
        node.inputs = {in};
        node.kernel = kernel;
        node.pad = pad;
        node.stride = stride;
        return emit(std::move(node));
    }

    // Block operand: ReLU -> op (projecting to `filters` channels) -> BN.
    // Pools and identity project through a leading 1x1 conv when channel
    // counts differ, since they cannot change width themselves.
    int operand(int src, int src_ch, BlockOp op, int filters, const std::string& name) {
        int h = relu(src);
        switch (op) {
            case BlockOp::Conv3x3:
                h = conv(h, src_ch, filters, 3, 3, 1, 1, false, name + ".conv");
                break;
            case BlockOp::FactorizedConv5x5:
                h = conv(h, src_ch, filters, 1, 5, 0, 2, false, name + ".conv_a");
                h = conv(h, filters, filters, 5, 1, 2, 0, false, name + ".conv_b");
                break;
            case BlockOp::Identity:
            case BlockOp::AvgPool3x3:
            case BlockOp::MaxPool3x3:
                if (src_ch != filters) {
                    h = conv(h, src_ch, filters, 1, 1, 0, 0, false, name + ".proj");
                }
                if (op == BlockOp::AvgPool3x3) {
                    h = pool(CompiledNode::Op::AvgPool, h, 3, 1, 1);
                } else if (op == BlockOp::MaxPool3x3) {
                    h = pool(CompiledNode::Op::MaxPool, h, 3, 1, 1);
                }
                break;
        }
        return batch_norm(h, filters, name);
    }

    // One cell instance; returns the cell output slot (always `filters` wide).
    int cell(const CellSpec& spec, int in_a, int ch_a, int in_b, int ch_b, int filters,
             const std::string& name) {
        const size_t n = spec.blocks.size();
        std::vector<int> block_out(n);
        std::vector<bool> consumed(n, false);
        auto resolve = [&](const BlockInput& side) -> std::pair<int, int> {
            if (side.input == 0) {
                return {in_a, ch_a};
            }
            if (side.input == 1) {
                return {in_b, ch_b};
            }
            const size_t j = static_cast<size_t>(side.input - 2);
            consumed[j] = true;
            return {block_out[j], filters};
        };
        for (size_t b = 0; b < n; ++b) {
            const BlockSpec& block = spec.blocks[b];
            const std::string bname = name + ".b" + std::to_string(b);
            auto [ls, lc] = resolve(block.left);
            const int left = operand(ls, lc, block.left.op, filters, bname + ".l");
            auto [rs, rc] = resolve(block.right);
            const int right = operand(rs, rc, block.right.op, filters, bname + ".r");
            CompiledNode addn;
            addn.op = CompiledNode::Op::Add;
            addn.inputs = {left, right};
            block_out[b] = emit(std::move(addn));
        }
        std::vector<int> loose;
        for (size_t b = 0; b < n; ++b) {
            if (!consumed[b]) {
                loose.push_back(block_out[b]);
            }
        }
        int cat = loose[0];
        if (loose.size() > 1) {
            CompiledNode catn;
            catn.op = CompiledNode::Op::Concat;
            catn.inputs = loose;
            cat = emit(std::move(catn));
        }
        return conv(cat, static_cast<int>(loose.size()) * filters, filters, 1, 1, 0, 0, true,
                    name + ".out");
    }
};

}  // namespace

Model compile_network(const NetworkSpec& spec, uint64_t seed) {
    validate_network_spec(spec);
    const CellSpec cell = canonicalize(spec.cell);
    Builder b(spec, seed);

    // stem
    int stem = b.conv(b.m.input_slot, 1, spec.filters, 3, 3, 1, 1, false, "stem.conv");
    stem = b.batch_norm(stem, spec.filters, "stem");

    int h_prev = stem, h_prev2 = stem;
    int ch_prev = spec.filters, ch_prev2 = spec.filters;
    int filters = spec.filters;
    int cell_index = 0;
    for (int stage = 0; stage < spec.n_stages; ++stage) {
        for (int copy = 0; copy <= spec.unroll; ++copy) {
            const int out = b.cell(cell, h_prev, ch_prev, h_prev2, ch_prev2, filters,
                                   "c" + std::to_string(cell_index++));
            h_prev2 = h_prev;
            ch_prev2 = ch_prev;
            h_prev = out;
            ch_prev = filters;
        }
        if (stage + 1 < spec.n_stages) {
            // downsample both carried cell outputs so the next stage sees
            // spatially consistent inputs
            std::unordered_map<int, int> pooled;
            auto downsample = [&](int slot) {
                auto it = pooled.find(slot);
                if (it != pooled.end()) {
                    return it->second;
                }
                const int p = b.pool(CompiledNode::Op::AvgPool, slot, 2, 0, 2);
                pooled.emplace(slot, p);
                return p;
            };
            h_prev = downsample(h_prev);
            h_prev2 = downsample(h_prev2);
            filters *= spec.feature_scale_rate;
        }
    }

    CompiledNode gap;
    gap.op = CompiledNode::Op::GlobalAvgPool;
    gap.inputs = {h_prev};
    const int pooled = b.emit(std::move(gap));

    CompiledNode head;
    head.op = CompiledNode::Op::Linear;
    head.inputs = {pooled};
    // zero-init head keeps the untrained model exactly class-symmetric, so
    // episode relabeling cannot shift meta-test accuracy
    head.params.push_back(b.add_const_param({ch_prev, spec.n_classes}, "head.w", 0.0));
    head.params.push_back(b.add_const_param({spec.n_classes}, "head.b", 0.0));
    b.m.output_slot = b.emit(std::move(head));
    return std::move(b.m);
}

Tensor Model::forward(const Tensor& images, Mode mode, Tape* tape) {
    std::vector<Tensor> slots(static_cast<size_t>(n_slots));
    slots[static_cast<size_t>(input_slot)] = images;
    for (const CompiledNode& node : nodes) {
        const Tensor& x = slots[static_cast<size_t>(node.inputs[0])];
        Tensor out;
        switch (node.op) {
            case CompiledNode::Op::Conv: {
                const Tensor& w = params[static_cast<size_t>(node.params[0])];
                const Tensor* bias =
                    node.params.size() > 1 ? &params[static_cast<size_t>(node.params[1])] : nullptr;
                out = ops::conv2d(x, w, bias, node.pad_h, node.pad_w, tape);
                break;
            }
            case CompiledNode::Op::AvgPool:
                out = ops::avg_pool(x, node.kernel, node.pad, node.stride, tape);
                break;
            case CompiledNode::Op::MaxPool:
                out = ops::max_pool(x, node.kernel, node.pad, node.stride, tape);
                break;
            case CompiledNode::Op::BatchNorm:
                out = ops::batch_norm(x, params[static_cast<size_t>(node.params[0])],
                                      params[static_cast<size_t>(node.params[1])], mode,
                                      &bn_states[static_cast<size_t>(node.bn)], tape);
                break;
            case CompiledNode::Op::ReLU:
                out = ops::relu(x, tape);
                break;
            case CompiledNode::Op::Linear: {
                const Tensor& w = params[static_cast<size_t>(node.params[0])];
                const Tensor* bias =
                    node.params.size() > 1 ? &params[static_cast<size_t>(node.params[1])] : nullptr;
                out = ops::linear(x, w, bias, tape);
                break;
            }
            case CompiledNode::Op::GlobalAvgPool:
                out = ops::global_avg_pool(x, tape);
                break;
            case CompiledNode::Op::Concat: {
                std::vector<Tensor> ins;
                ins.reserve(node.inputs.size());
                for (int slot : node.inputs) {
                    ins.push_back(slots[static_cast<size_t>(slot)]);
                }
                out = ops::concat_channels(ins, tape);
                break;
            }
            case CompiledNode::Op::Add:
                out = ops::add(x, slots[static_cast<size_t>(node.inputs[1])], tape);
                break;
        }
        slots[static_cast<size_t>(node.out)] = std::move(out);
    }
    return slots[static_cast<size_t>(output_slot)];
}

std::vector<Tensor> Model::grads_for_params(const GradMap& grads) const {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const Tensor& p : params) {
        auto it = grads.find(p.node());
        if (it != grads.end()) {
            out.push_back(it->second);
        } else {
            out.emplace_back(p.shape(), 0.0, false);
        }
    }
    return out;
}

Model Model::clone() const {
    Model copy;
    copy.spec = spec;
    copy.param_names = param_names;
    copy.bn_states = bn_states;
    copy.nodes = nodes;
    copy.input_slot = input_slot;
    copy.output_slot = output_slot;
    copy.n_slots = n_slots;
    copy.params.reserve(params.size());
    for (const Tensor& p : params) {
        Tensor c = p.clone();
        c.set_requires_grad(true);
        copy.params.push_back(std::move(c));
    }
    return copy;
}

long Model::param_count() const {
    long n = 0;
    for (const Tensor& p : params) {
        n += static_cast<long>(p.numel());
    }
    return n;
}

nlohmann::ordered_json network_spec_to_json(const NetworkSpec& spec) {
    nlohmann::ordered_json j;
    j["cell"] = cell_to_json(spec.cell);
    j["filters"] = spec.filters;
    j["unroll"] = spec.unroll;
    j["feature_scale_rate"] = spec.feature_scale_rate;
    j["n_stages"] = spec.n_stages;
    j["n_classes"] = spec.n_classes;
    return j;
}

NetworkSpec network_spec_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw FormatError(FormatError::Kind::Malformed, "network spec must be an object");
    }
    try {
        NetworkSpec spec;
        spec.cell = cell_from_json(j.at("cell"));
        spec.filters = j.at("filters").get<int>();
        spec.unroll = j.at("unroll").get<int>();
        spec.feature_scale_rate = j.at("feature_scale_rate").get<int>();
        spec.n_stages = j.at("n_stages").get<int>();
        spec.n_classes = j.at("n_classes").get<int>();
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Malformed,
                          std::string("bad network spec: ") + e.what());
    }
}

nlohmann::ordered_json model_to_json(const Model& model) {
    nlohmann::ordered_json j;
    j["format"] = "mnas-params";
    j["version"] = 1;
    j["network"] = network_spec_to_json(model.spec);
    nlohmann::ordered_json params = nlohmann::ordered_json::array();
    for (const Tensor& p : model.params) {
        params.push_back(p.data());
    }
    j["params"] = std::move(params);
    nlohmann::ordered_json bns = nlohmann::ordered_json::array();
    for (const BnState& s : model.bn_states) {
        nlohmann::ordered_json e;
        e["mean"] = s.mean;
        e["var"] = s.var;
        bns.push_back(std::move(e));
    }
    j["bn"] = std::move(bns);
    return j;
}

Model model_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("format") || j["format"] != "mnas-params") {
        throw FormatError(FormatError::Kind::BadMagic, "not a mnas-params file");
    }
    if (!j.contains("version") || j["version"].get<int>() != 1) {
        throw FormatError(FormatError::Kind::BadVersion, "unsupported params version");
    }
    try {
        // recompile for structure, then overwrite every value
        Model model = compile_network(network_spec_from_json(j.at("network")), 0);
        const auto& params = j.at("params");
        const auto& bns = j.at("bn");
        if (params.size() != model.params.size() || bns.size() != model.bn_states.size()) {
            throw FormatError(FormatError::Kind::CountMismatch,
                              "parameter count does not match the network spec");
        }
        for (size_t i = 0; i < model.params.size(); ++i) {
            auto values = params[i].get<std::vector<double>>();
            if (values.size() != model.params[i].numel()) {
                throw FormatError(FormatError::Kind::CountMismatch,
                                  "parameter " + model.param_names[i] + " has wrong length");
            }
            model.params[i].data() = std::move(values);
        }
        for (size_t i = 0; i < model.bn_states.size(); ++i) {
            auto mean = bns[i].at("mean").get<std::vector<double>>();
            auto var = bns[i].at("var").get<std::vector<double>>();
            if (mean.size() != model.bn_states[i].mean.size() ||
                var.size() != model.bn_states[i].var.size()) {
                throw FormatError(FormatError::Kind::CountMismatch,
                                  "batch-norm state " + std::to_string(i) + " has wrong length");
            }
            model.bn_states[i].mean = std::move(mean);
            model.bn_states[i].var = std::move(var);
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Malformed, std::string("bad params file: ") + e.what());
    }
}

}  // namespace mnas
