#include <doctest.h>

#include <set>

#include "mnas/gradcheck.hpp"
#include "mnas/network.hpp"
#include "test_util.hpp"

using namespace mnas;

namespace {

// brute-force oracle: all M*M ordered (input, op) pairs for the next block,
// canonicalized and deduplicated by key
std::set<std::string> brute_force_expansion_keys(const CellSpec& parent) {
    const int sources = 2 + static_cast<int>(parent.blocks.size());
    std::set<std::string> keys;
    for (int li = 0; li < sources; ++li) {
        for (int lo = 0; lo < kNumBlockOps; ++lo) {
            for (int ri = 0; ri < sources; ++ri) {
                for (int ro = 0; ro < kNumBlockOps; ++ro) {
                    CellSpec child = parent;
                    child.blocks.push_back({{li, static_cast<BlockOp>(lo)},
                                            {ri, static_cast<BlockOp>(ro)}});
                    keys.insert(cell_key(child));
                }
            }
        }
    }
    return keys;
}

CellSpec one_block(int li, BlockOp lo, int ri, BlockOp ro) {
    return CellSpec{{BlockSpec{{li, lo}, {ri, ro}}}};
}

}  // namespace

TEST_CASE("canonicalize sorts within-block pairs and is idempotent") {
    CellSpec messy = one_block(1, BlockOp::MaxPool3x3, 0, BlockOp::Conv3x3);
    CellSpec canon = canonicalize(messy);
    CHECK(canon.blocks[0].left.input == 0);
    CHECK(canon.blocks[0].left.op == BlockOp::Conv3x3);
    CHECK(canon.blocks[0].right.input == 1);
    CHECK(canon.blocks[0].right.op == BlockOp::MaxPool3x3);
    CHECK(canonicalize(canon) == canon);
    CHECK(is_canonical(canon));
}

TEST_CASE("within-block pair order never changes the identity key") {
    Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        const int li = rng.uniform_int(2), ri = rng.uniform_int(2);
        const auto lo = static_cast<BlockOp>(rng.uniform_int(kNumBlockOps));
        const auto ro = static_cast<BlockOp>(rng.uniform_int(kNumBlockOps));
        CHECK(cell_key(one_block(li, lo, ri, ro)) == cell_key(one_block(ri, ro, li, lo)));
    }
}

TEST_CASE("input references outside their window are rejected") {
    CHECK_THROWS_AS(validate_cell(one_block(0, BlockOp::Identity, 2, BlockOp::Identity)),
                    std::invalid_argument);
    CellSpec two = one_block(0, BlockOp::Identity, 1, BlockOp::Identity);
    two.blocks.push_back({{3, BlockOp::Conv3x3}, {0, BlockOp::Identity}});
    CHECK_THROWS_AS(validate_cell(two), std::invalid_argument);
}

TEST_CASE("enumeration counts match the closed form and the brute-force oracle") {
    // b = 0: M = 10 -> 55 distinct first blocks
    auto first = enumerate_expansions(CellSpec{}, 5);
    CHECK(first.size() == 55);
    std::set<std::string> keys;
    for (const CellSpec& cell : first) {
        CHECK(is_canonical(cell));
        keys.insert(cell_key(cell));
    }
    CHECK(keys.size() == 55);
    CHECK(keys == brute_force_expansion_keys(CellSpec{}));

    // deeper blocks against the closed form M(M+1)/2, M = 5*(2+b)
    CellSpec parent;
    for (int b = 0; b < 4; ++b) {
        const int m = 5 * (2 + b);
        auto expansions = enumerate_expansions(parent, 5);
        CHECK(static_cast<int>(expansions.size()) == m * (m + 1) / 2);
        std::set<std::string> got;
        for (const CellSpec& cell : expansions) {
            got.insert(cell_key(cell));
        }
        CHECK(got.size() == expansions.size());
        CHECK(got == brute_force_expansion_keys(parent));
        parent = expansions[static_cast<size_t>(b)];  // arbitrary deterministic parent
    }

    // full parent is a boundary error
    CellSpec full;
    for (int b = 0; b < 5; ++b) {
        full.blocks.push_back({{0, BlockOp::Identity}, {1, BlockOp::Identity}});
    }
    CHECK_THROWS_AS(enumerate_expansions(full, 5), std::invalid_argument);
}

TEST_CASE("cell depth follows the longest block path") {
    CHECK(cell_depth(one_block(0, BlockOp::Conv3x3, 1, BlockOp::Identity)) == 1);

    // three stacked blocks, each consuming the previous one on both sides
    CellSpec chain = one_block(0, BlockOp::Conv3x3, 1, BlockOp::Identity);
    chain.blocks.push_back({{2, BlockOp::Conv3x3}, {2, BlockOp::Identity}});
    chain.blocks.push_back({{3, BlockOp::MaxPool3x3}, {3, BlockOp::Identity}});
    CHECK(cell_depth(chain) == 3);

    // three blocks all reading only the cell inputs stay flat
    CellSpec flat;
    for (int b = 0; b < 3; ++b) {
        flat.blocks.push_back({{0, BlockOp::Conv3x3}, {1, BlockOp::AvgPool3x3}});
    }
    CHECK(cell_depth(flat) == 1);
}

TEST_CASE("depth is always within [1, #blocks]") {
    Rng rng(43);
    for (int trial = 0; trial < 200; ++trial) {
        CellSpec cell;
        const int blocks = 1 + rng.uniform_int(5);
        for (int b = 0; b < blocks; ++b) {
            const int sources = 2 + b;
            cell.blocks.push_back(
                {{rng.uniform_int(sources), static_cast<BlockOp>(rng.uniform_int(kNumBlockOps))},
                 {rng.uniform_int(sources), static_cast<BlockOp>(rng.uniform_int(kNumBlockOps))}});
        }
        const int d = cell_depth(cell);
        CHECK(d >= 1);
        CHECK(d <= blocks);
    }
}

TEST_CASE("depth distribution counts exactly and omits empty bins") {
    auto first = enumerate_expansions(CellSpec{}, 5);
    auto hist = depth_distribution(first);
    REQUIRE(hist.size() == 1);
    CHECK(hist.at(1) == 55);

    CellSpec chain = one_block(0, BlockOp::Conv3x3, 1, BlockOp::Identity);
    chain.blocks.push_back({{2, BlockOp::Conv3x3}, {2, BlockOp::Identity}});
    chain.blocks.push_back({{3, BlockOp::MaxPool3x3}, {3, BlockOp::Identity}});
    CellSpec flat;
    for (int b = 0; b < 3; ++b) {
        flat.blocks.push_back({{0, BlockOp::Conv3x3}, {1, BlockOp::AvgPool3x3}});
    }
    auto mixed = depth_distribution({chain, flat});
    REQUIRE(mixed.size() == 2);
    CHECK(mixed.at(3) == 1);
    CHECK(mixed.at(1) == 1);
    CHECK(mixed.count(2) == 0);

    CHECK_THROWS_AS(depth_distribution({}), std::invalid_argument);
}

TEST_CASE("cell json round-trips and rejects malformed input") {
    CellSpec cell = one_block(0, BlockOp::FactorizedConv5x5, 1, BlockOp::AvgPool3x3);
    cell.blocks.push_back({{1, BlockOp::Conv3x3}, {2, BlockOp::MaxPool3x3}});
    const auto j = cell_to_json(cell);
    CHECK(cell_from_json(j) == cell);
    CHECK(cell_key(cell) == "[[0,\"fconv5\",1,\"avg3\"],[1,\"conv3\",2,\"max3\"]]");

    CHECK_THROWS_AS(cell_from_json(nlohmann::json::array()), FormatError);
    CHECK_THROWS_AS(cell_from_json(nlohmann::json::parse(R"([[0,"conv9",1,"id"]])")), FormatError);
    CHECK_THROWS_AS(cell_from_json(nlohmann::json::parse(R"([[0,"conv3",5,"id"]])")), FormatError);
    CHECK_THROWS_AS(cell_from_json(nlohmann::json::parse(R"([[0,"conv3",1]])")), FormatError);
}

TEST_CASE("smallest network compiles and produces classifier-shaped output") {
    NetworkSpec spec;
    spec.cell = one_block(0, BlockOp::Identity, 1, BlockOp::Identity);
    spec.filters = 3;
    spec.unroll = 0;
    spec.n_stages = 1;
    spec.n_classes = 4;
    Model model = compile_network(spec, 99);
    Rng rng(1);
    Tensor x = test_util::random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
    Tensor logits = model.forward(x, Mode::Train, nullptr);
    CHECK(logits.shape() == std::vector<int>{2, 4});
}

TEST_CASE("compilation is deterministic in (spec, seed)") {
    NetworkSpec spec;
    spec.cell = one_block(0, BlockOp::Conv3x3, 1, BlockOp::MaxPool3x3);
    spec.filters = 4;
    spec.n_stages = 2;
    spec.feature_scale_rate = 2;
    Model a = compile_network(spec, 1234);
    Model b = compile_network(spec, 1234);
    REQUIRE(a.params.size() == b.params.size());
    CHECK(a.param_count() == b.param_count());
    for (size_t i = 0; i < a.params.size(); ++i) {
        CHECK(a.params[i].data() == b.params[i].data());
    }
    Model c = compile_network(spec, 1235);
    CHECK(c.params[0].data() != a.params[0].data());
}

TEST_CASE("doubling F roughly quadruples cell conv parameters") {
    NetworkSpec spec;
    spec.cell = one_block(0, BlockOp::Conv3x3, 1, BlockOp::FactorizedConv5x5);
    spec.cell.blocks.push_back({{2, BlockOp::Conv3x3}, {2, BlockOp::Conv3x3}});
    spec.n_stages = 2;
    auto cell_conv_params = [&](int filters) {
        spec.filters = filters;
        Model m = compile_network(spec, 7);
        long n = 0;
        for (size_t i = 0; i < m.params.size(); ++i) {
            const std::string& name = m.param_names[i];
            const bool cell_conv = name.find(".conv") != std::string::npos ||
                                   name.find(".out.w") != std::string::npos ||
                                   name.find(".proj") != std::string::npos;
            if (cell_conv) {
                n += static_cast<long>(m.params[i].numel());
            }
        }
        return n;
    };
    const double ratio =
        static_cast<double>(cell_conv_params(16)) / static_cast<double>(cell_conv_params(8));
    CHECK(ratio > 4.0 * 0.9);
    CHECK(ratio < 4.0 * 1.1);
}

TEST_CASE("every enumerated one-block cell compiles and runs forward") {
    Rng rng(55);
    Tensor x = test_util::random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
    for (const CellSpec& cell : enumerate_expansions(CellSpec{}, 3)) {
        NetworkSpec spec;
        spec.cell = cell;
        spec.filters = 2;
        spec.n_stages = 2;
        spec.n_classes = 3;
        Model model = compile_network(spec, 11);
        Tensor logits = model.forward(x, Mode::Train, nullptr);
        CHECK(logits.shape() == std::vector<int>{2, 3});
    }
}

TEST_CASE("compiled cells pass the full gradient check at 1e-3") {
    Rng rng(57);
    // a 2-block cell exercising conv, pool, identity, and a block chain
    CellSpec cell = one_block(0, BlockOp::Conv3x3, 1, BlockOp::MaxPool3x3);
    cell.blocks.push_back({{0, BlockOp::AvgPool3x3}, {2, BlockOp::Identity}});
    NetworkSpec spec;
    spec.cell = cell;
    spec.filters = 4;
    spec.n_stages = 2;
    spec.n_classes = 3;
    Model model = compile_network(spec, 303);

    Tensor x = test_util::random_tensor({2, 1, 6, 6}, rng, 0.0, 1.0);
    std::vector<int> labels{0, 2};
    std::vector<std::pair<std::string, Tensor>> leaves;
    for (size_t i = 0; i < model.params.size(); ++i) {
        leaves.emplace_back(model.param_names[i], model.params[i]);
    }
    auto report = grad_check(
        leaves,
        [&](Tape* tape) {
            Model probe = model;  // shares parameter nodes; BN stats copy is irrelevant here
            return ops::softmax_xent(probe.forward(x, Mode::Train, tape), labels, tape);
        },
        1e-3);
    CHECK(report.pass);
    if (!report.pass) {
        for (const auto& e : report.entries) {
            if (e.max_rel_error >= 1e-3) {
                MESSAGE(e.name, " rel err ", e.max_rel_error);
            }
        }
    }
}
