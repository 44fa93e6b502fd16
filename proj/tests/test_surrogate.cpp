#include <doctest.h>

#include <set>

#include "mnas/surrogate.hpp"
#include "test_util.hpp"

using namespace mnas;

namespace {

int conv_ops(const CellSpec& cell) {
    int n = 0;
    for (const BlockSpec& b : cell.blocks) {
        for (const BlockInput& side : {b.left, b.right}) {
            if (side.op == BlockOp::Conv3x3 || side.op == BlockOp::FactorizedConv5x5) {
                ++n;
            }
        }
    }
    return n;
}

SurrogateConfig small_cfg() {
    SurrogateConfig cfg;
    cfg.max_blocks = 5;
    return cfg;
}

}  // namespace

TEST_CASE("encode_cell maps blocks to four tokens each") {
    CellSpec cell{{BlockSpec{{0, BlockOp::Conv3x3}, {1, BlockOp::MaxPool3x3}}}};
    const CellTokens tokens = encode_cell(cell);
    CHECK(tokens.tokens == std::vector<int>{0, 0, 1, 4});

    cell.blocks.push_back({{2, BlockOp::Identity}, {0, BlockOp::AvgPool3x3}});
    const CellTokens two = encode_cell(cell);
    CHECK(two.tokens.size() == 8);
    // second block canonicalizes to (0, avg3) <= (2, id)
    CHECK(two.tokens == std::vector<int>{0, 0, 1, 4, 0, 3, 2, 2});
}

TEST_CASE("encoding is injective over all one-block cells") {
    std::set<std::vector<int>> seen;
    for (const CellSpec& cell : enumerate_expansions(CellSpec{}, 5)) {
        seen.insert(encode_cell(cell).tokens);
    }
    CHECK(seen.size() == 55);
}

TEST_CASE("within-block permutations encode identically") {
    CellSpec a{{BlockSpec{{1, BlockOp::MaxPool3x3}, {0, BlockOp::Conv3x3}}}};
    CellSpec b{{BlockSpec{{0, BlockOp::Conv3x3}, {1, BlockOp::MaxPool3x3}}}};
    CHECK(encode_cell(a).tokens == encode_cell(b).tokens);
}

TEST_CASE("a single training pair is memorized") {
    CellSpec cell{{BlockSpec{{0, BlockOp::Conv3x3}, {1, BlockOp::Identity}}}};
    SurrogateModel model = surrogate_fit({{cell, 0.62}}, small_cfg(), 3);
    CHECK(model.final_fit_mse() < 1e-3);
    const auto pred = surrogate_predict(model, {cell});
    CHECK(std::fabs(pred[0] - 0.62) < 0.05);
}

TEST_CASE("surrogate memorizes the 55-cell synthetic oracle and ranks it") {
    const auto cells = enumerate_expansions(CellSpec{}, 5);
    std::vector<std::pair<CellSpec, double>> history;
    std::vector<double> targets;
    for (const CellSpec& cell : cells) {
        const double score = 0.3 + 0.1 * conv_ops(cell);
        history.emplace_back(cell, score);
        targets.push_back(score);
    }
    SurrogateModel model = surrogate_fit(history, small_cfg(), 5);
    CHECK(model.final_fit_mse() < 1e-3);
    CHECK(model.final_fit_mse() < model.initial_fit_mse());

    const auto preds = surrogate_predict(model, cells);
    for (double p : preds) {
        CHECK(p > 0.0);
        CHECK(p < 1.0);
    }
    CHECK(test_util::spearman(preds, targets) >= 0.9);
}

TEST_CASE("constant targets are reproduced within two points") {
    const auto all = enumerate_expansions(CellSpec{}, 5);
    std::vector<std::pair<CellSpec, double>> history;
    for (size_t i = 0; i < 10; ++i) {
        history.emplace_back(all[i * 5], 0.47);
    }
    SurrogateModel model = surrogate_fit(history, small_cfg(), 7);
    std::vector<CellSpec> train_cells;
    for (const auto& [cell, score] : history) {
        train_cells.push_back(cell);
    }
    for (double p : surrogate_predict(model, train_cells)) {
        CHECK(std::fabs(p - 0.47) < 0.02);
    }
}

TEST_CASE("prediction is deterministic and fit is seed-deterministic") {
    const auto cells = enumerate_expansions(CellSpec{}, 5);
    std::vector<std::pair<CellSpec, double>> history;
    for (size_t i = 0; i < 8; ++i) {
        history.emplace_back(cells[i * 6], 0.2 + 0.05 * static_cast<double>(i));
    }
    SurrogateConfig cfg = small_cfg();
    cfg.epochs = 40;
    SurrogateModel m1 = surrogate_fit(history, cfg, 11);
    SurrogateModel m2 = surrogate_fit(history, cfg, 11);
    std::vector<CellSpec> probe(cells.begin(), cells.begin() + 20);
    CHECK(surrogate_predict(m1, probe) == surrogate_predict(m2, probe));
    CHECK(surrogate_predict(m1, probe) == surrogate_predict(m1, probe));

    SurrogateModel m3 = surrogate_fit(history, cfg, 12);
    CHECK(surrogate_predict(m3, probe) != surrogate_predict(m1, probe));
}

TEST_CASE("a model fit on one-block cells scores longer cells unchanged") {
    const auto cells = enumerate_expansions(CellSpec{}, 5);
    std::vector<std::pair<CellSpec, double>> history;
    for (size_t i = 0; i < 12; ++i) {
        history.emplace_back(cells[i * 4], 0.5);
    }
    SurrogateConfig cfg = small_cfg();
    cfg.epochs = 10;
    SurrogateModel model = surrogate_fit(history, cfg, 13);

    std::vector<CellSpec> longer;
    for (const CellSpec& parent : {cells[0], cells[30]}) {
        const auto kids = enumerate_expansions(parent, 5);
        longer.insert(longer.end(), kids.begin(), kids.begin() + 5);
        // and a 3-block example
        longer.push_back(enumerate_expansions(kids[2], 5)[7]);
    }
    const auto preds = surrogate_predict(model, longer);
    CHECK(preds.size() == longer.size());
    for (double p : preds) {
        CHECK(p > 0.0);
        CHECK(p < 1.0);
    }
}

TEST_CASE("surrogate snapshots round-trip through json") {
    const auto cells = enumerate_expansions(CellSpec{}, 5);
    std::vector<std::pair<CellSpec, double>> history;
    for (size_t i = 0; i < 6; ++i) {
        history.emplace_back(cells[i * 9], 0.3 + 0.1 * static_cast<double>(i % 3));
    }
    SurrogateConfig cfg = small_cfg();
    cfg.epochs = 15;
    SurrogateModel model = surrogate_fit(history, cfg, 17);
    SurrogateModel restored = SurrogateModel::from_json(model.to_json());
    std::vector<CellSpec> probe(cells.begin(), cells.begin() + 10);
    CHECK(surrogate_predict(model, probe) == surrogate_predict(restored, probe));

    SurrogateModel blank;
    SurrogateModel blank_restored = SurrogateModel::from_json(blank.to_json());
    CHECK_FALSE(blank_restored.fitted());
    CHECK_THROWS_AS(surrogate_predict(blank_restored, probe), std::logic_error);
}

TEST_CASE("bad fit inputs are rejected") {
    CHECK_THROWS_AS(surrogate_fit({}, small_cfg(), 1), std::invalid_argument);
    CellSpec cell{{BlockSpec{{0, BlockOp::Identity}, {1, BlockOp::Identity}}}};
    CHECK_THROWS_AS(surrogate_fit({{cell, 1.7}}, small_cfg(), 1), std::invalid_argument);
}
