#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mnas/common.hpp"

namespace mnas {

// The five searchable block operations, in canonical (serialization) order.
enum class BlockOp { Conv3x3, FactorizedConv5x5, Identity, AvgPool3x3, MaxPool3x3 };

inline constexpr int kNumBlockOps = 5;

const char* block_op_name(BlockOp op);
BlockOp block_op_from_name(const std::string& name);

// One side of a block: which source it reads and what it applies to it.
// Input index 0 is the previous cell's output, 1 the one before that, and
// 2+j the output of block j within the same cell.
struct BlockInput {
    int input = 0;
    BlockOp op = BlockOp::Identity;

    friend auto operator<=>(const BlockInput&, const BlockInput&) = default;
};

// Two inputs combined by elementwise addition. Canonical form keeps
// left <= right under (input, op) lexicographic order.
struct BlockSpec {
    BlockInput left;
    BlockInput right;

    friend auto operator<=>(const BlockSpec&, const BlockSpec&) = default;
};

struct CellSpec {
    std::vector<BlockSpec> blocks;

    friend auto operator<=>(const CellSpec&, const CellSpec&) = default;
};

// Macro-architecture recipe built around one cell.
struct NetworkSpec {
    CellSpec cell;
    int filters = 10;             // F: filters in the first stage
    int unroll = 0;               // N: each stage stacks N+1 cell copies
    int feature_scale_rate = 1;   // per-stage filter multiplier, 1 or 2
    int n_stages = 2;
    int n_classes = 5;
};

// Validates InputRef bounds: block b may reference sources [0, 2+b).
void validate_cell(const CellSpec& cell);

// Sorts each block's (left, right) pair; idempotent. The JSON serialization
// of the canonical form is the cell's identity key.
CellSpec canonicalize(const CellSpec& cell);

bool is_canonical(const CellSpec& cell);

// All canonical, deduplicated one-block extensions of `parent` (which must
// have fewer than max_blocks blocks). Count is M(M+1)/2 with
// M = 5 * (2 + #parent blocks). Results are sorted by canonical key order.
std::vector<CellSpec> enumerate_expansions(const CellSpec& parent, int max_blocks);

// Longest input-to-output path measured in blocks. Cell inputs have depth 0;
// a block sits one past its deepest operand; the cell output node sees every
// block not consumed by another block.
int cell_depth(const CellSpec& cell);

// Exact depth counts over a nonempty list; empty bins omitted.
std::map<int, int> depth_distribution(const std::vector<CellSpec>& cells);

// JSON array-of-blocks form: [[left_in, "left_op", right_in, "right_op"], ...].
nlohmann::json cell_to_json(const CellSpec& cell);
CellSpec cell_from_json(const nlohmann::json& j);

// Compact serialization of the canonical form; the identity key used for
// dedup, seeding, and checkpoint storage.
std::string cell_key(const CellSpec& cell);

}  // namespace mnas
