#include "mnas/cell.hpp"

#include <algorithm>
#include <stdexcept>

namespace mnas {

const char* block_op_name(BlockOp op) {
    switch (op) {
        case BlockOp::Conv3x3:
            return "conv3";
        case BlockOp::FactorizedConv5x5:
            return "fconv5";
        case BlockOp::Identity:
            return "id";
        case BlockOp::AvgPool3x3:
            return "avg3";
        case BlockOp::MaxPool3x3:
            return "max3";
    }
    throw std::invalid_argument("unknown block op");
}

BlockOp block_op_from_name(const std::string& name) {
    if (name == "conv3") return BlockOp::Conv3x3;
    if (name == "fconv5") return BlockOp::FactorizedConv5x5;
    if (name == "id") return BlockOp::Identity;
    if (name == "avg3") return BlockOp::AvgPool3x3;
    if (name == "max3") return BlockOp::MaxPool3x3;
    throw FormatError(FormatError::Kind::Malformed, "unknown block op name: " + name);
}

void validate_cell(const CellSpec& cell) {
    if (cell.blocks.empty()) {
        throw std::invalid_argument("cell has no blocks");
    }
    for (size_t b = 0; b < cell.blocks.size(); ++b) {
        const int limit = static_cast<int>(2 + b);
        for (const BlockInput& side : {cell.blocks[b].left, cell.blocks[b].right}) {
            if (side.input < 0 || side.input >= limit) {
                throw std::invalid_argument("block " + std::to_string(b) +
                                            " references input " + std::to_string(side.input) +
                                            " outside [0, " + std::to_string(limit) + ")");
            }
        }
    }
}

CellSpec canonicalize(const CellSpec& cell) {
    validate_cell(cell);
    CellSpec out = cell;
    for (BlockSpec& block : out.blocks) {
        if (block.right < block.left) {
            std::swap(block.left, block.right);
        }
    }
    return out;
}

bool is_canonical(const CellSpec& cell) {
    for (const BlockSpec& block : cell.blocks) {
        if (block.right < block.left) {
            return false;
        }
    }
    return true;
}

std::vector<CellSpec> enumerate_expansions(const CellSpec& parent, int max_blocks) {
    const int b = static_cast<int>(parent.blocks.size());
    if (b > 0) {
        validate_cell(parent);
    }
    if (b >= max_blocks) {
        throw std::invalid_argument("parent already has the maximum number of blocks");
    }
    const int n_sources = 2 + b;

    // all (input, op) choices in canonical order, then unordered pairs i <= j
    std::vector<BlockInput> choices;
    choices.reserve(static_cast<size_t>(n_sources) * kNumBlockOps);
    for (int in = 0; in < n_sources; ++in) {
        for (int op = 0; op < kNumBlockOps; ++op) {
            choices.push_back({in, static_cast<BlockOp>(op)});
        }
    }

    std::vector<CellSpec> out;
    out.reserve(choices.size() * (choices.size() + 1) / 2);
    for (size_t i = 0; i < choices.size(); ++i) {
        for (size_t j = i; j < choices.size(); ++j) {
            CellSpec child = parent;
            child.blocks.push_back({choices[i], choices[j]});
            out.push_back(std::move(child));
        }
    }
    return out;
}

int cell_depth(const CellSpec& cell) {
    validate_cell(cell);
    const size_t n = cell.blocks.size();
    std::vector<int> depth(n);
    std::vector<bool> consumed(n, false);
    auto source_depth = [&](const BlockInput& side) {
        if (side.input < 2) {
            return 0;  // cell inputs
        }
        const size_t j = static_cast<size_t>(side.input - 2);
        consumed[j] = true;
        return depth[j];
    };
    for (size_t b = 0; b < n; ++b) {
        const int dl = source_depth(cell.blocks[b].left);
        const int dr = source_depth(cell.blocks[b].right);
        depth[b] = 1 + std::max(dl, dr);
    }
    int out = 0;
    for (size_t b = 0; b < n; ++b) {
        if (!consumed[b]) {
            out = std::max(out, depth[b]);
        }
    }
    return out;
}

std::map<int, int> depth_distribution(const std::vector<CellSpec>& cells) {
    if (cells.empty()) {
        throw std::invalid_argument("depth_distribution: empty cell list");
    }
    std::map<int, int> hist;
    for (const CellSpec& cell : cells) {
        ++hist[cell_depth(cell)];
    }
    return hist;
}

nlohmann::json cell_to_json(const CellSpec& cell) {
    nlohmann::json j = nlohmann::json::array();
    for (const BlockSpec& block : cell.blocks) {
        j.push_back({block.left.input, block_op_name(block.left.op), block.right.input,
                     block_op_name(block.right.op)});
    }
    return j;
}

CellSpec cell_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.empty()) {
        throw FormatError(FormatError::Kind::Malformed, "cell JSON must be a nonempty array");
    }
    CellSpec cell;
    for (const auto& item : j) {
        if (!item.is_array() || item.size() != 4 || !item[0].is_number_integer() ||
            !item[1].is_string() || !item[2].is_number_integer() || !item[3].is_string()) {
            throw FormatError(FormatError::Kind::Malformed,
                              "cell block must be [in, \"op\", in, \"op\"]");
        }
        BlockSpec block;
        block.left = {item[0].get<int>(), block_op_from_name(item[1].get<std::string>())};
        block.right = {item[2].get<int>(), block_op_from_name(item[3].get<std::string>())};
        cell.blocks.push_back(block);
    }
    try {
        validate_cell(cell);
    } catch (const std::invalid_argument& e) {
        throw FormatError(FormatError::Kind::Malformed, e.what());
    }
    return cell;
}

std::string cell_key(const CellSpec& cell) {
    return cell_to_json(canonicalize(cell)).dump();
}

}  // namespace mnas
