#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "mnas/search.hpp"
#include "test_util.hpp"

using namespace mnas;

namespace {

// deterministic pseudo-score oracle over cell keys, values in [0,1)
double oracle_score(const CellSpec& cell) {
    return static_cast<double>(hash_str(0xfeedULL, cell_key(cell)) >> 11) * 0x1.0p-53;
}

SearchHooks oracle_hooks() {
    SearchHooks hooks;
    hooks.score = oracle_score;
    hooks.predict = [](const std::vector<CellSpec>& cells) {
        std::vector<double> out;
        out.reserve(cells.size());
        for (const CellSpec& cell : cells) {
            out.push_back(oracle_score(cell));
        }
        return out;
    };
    return hooks;
}

SearchConfig oracle_cfg() {
    SearchConfig cfg;
    cfg.max_blocks = 3;
    cfg.beam_size = 5;
    cfg.global_seed = 424242;
    return cfg;
}

const ClassDataset& dummy_data() {
    static ClassDataset empty;
    return empty;
}

std::vector<std::string> top_k_keys_by_oracle(const std::vector<CellSpec>& cells, int k) {
    std::vector<std::pair<double, std::string>> ranked;
    for (const CellSpec& cell : cells) {
        ranked.emplace_back(oracle_score(cell), cell_key(cell));
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) {
            return a.first > b.first;
        }
        return a.second < b.second;
    });
    std::vector<std::string> keys;
    for (int i = 0; i < k && i < static_cast<int>(ranked.size()); ++i) {
        keys.push_back(ranked[static_cast<size_t>(i)].second);
    }
    return keys;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SearchConfig micro_real_cfg(uint64_t seed) {
    SearchConfig cfg;
    cfg.max_blocks = 1;
    cfg.beam_size = 3;
    cfg.filters = 2;
    cfg.n_stages = 1;
    cfg.n_way = 3;
    cfg.k_shot = 1;
    cfg.query_per_class = 2;
    cfg.eval_episodes = 2;
    cfg.meta.inner_iterations = 1;
    cfg.meta.inner_batch = 4;
    cfg.meta.meta_batch = 1;
    cfg.meta.outer_iterations = 1;
    cfg.meta.eval_inner_iterations = 1;
    cfg.surrogate_epochs = 2;
    cfg.global_seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("with an exact oracle the search trains the true top-K at every stage") {
    const SearchConfig cfg = oracle_cfg();
    SearchState state;
    state.global_seed = cfg.global_seed;

    // stage 1: exhaustive over the 55 first blocks
    run_stage(state, cfg, nullptr, oracle_hooks());
    auto all55 = enumerate_expansions(CellSpec{}, cfg.max_blocks);
    CHECK(state.history.size() == 55);
    const auto want_beam1 = top_k_keys_by_oracle(all55, cfg.beam_size);
    std::vector<std::string> got_beam1;
    for (const ScoredCell& entry : state.beam) {
        got_beam1.push_back(cell_key(entry.cell));
    }
    CHECK(std::set<std::string>(got_beam1.begin(), got_beam1.end()) ==
          std::set<std::string>(want_beam1.begin(), want_beam1.end()));

    // stages 2..B: expansions of the previous beam, brute-force re-ranked
    std::vector<CellSpec> beam_cells;
    for (const ScoredCell& entry : state.beam) {
        beam_cells.push_back(entry.cell);
    }
    for (int stage = 2; stage <= cfg.max_blocks; ++stage) {
        std::set<std::string> seen;
        std::vector<CellSpec> expansions;
        for (const CellSpec& parent : beam_cells) {
            for (const CellSpec& child : enumerate_expansions(parent, cfg.max_blocks)) {
                if (seen.insert(cell_key(child)).second) {
                    expansions.push_back(child);
                }
            }
        }
        const auto want = top_k_keys_by_oracle(expansions, cfg.beam_size);

        run_stage(state, cfg, nullptr, oracle_hooks());
        std::set<std::string> trained;
        for (const ScoredCell& entry : state.history) {
            if (entry.stage == stage) {
                trained.insert(cell_key(entry.cell));
            }
        }
        CHECK(trained == std::set<std::string>(want.begin(), want.end()));

        beam_cells.clear();
        for (const ScoredCell& entry : state.beam) {
            beam_cells.push_back(entry.cell);
        }
    }

    // totals and the final winner
    CHECK(state.history.size() == 55 + 2 * static_cast<size_t>(cfg.beam_size));
    const ScoredCell& best = best_of_beam(state);
    for (const ScoredCell& entry : state.beam) {
        CHECK(entry.score <= best.score);
    }
    CHECK(best.score == oracle_score(best.cell));
}

TEST_CASE("beam never exceeds K and history keys stay unique") {
    const SearchConfig cfg = oracle_cfg();
    auto [best, state] = run_pnas_search(cfg, dummy_data(), {.hooks = oracle_hooks()});
    CHECK(state.beam.size() <= static_cast<size_t>(cfg.beam_size));
    std::set<std::string> keys;
    for (const ScoredCell& entry : state.history) {
        CHECK(keys.insert(cell_key(entry.cell)).second);
        CHECK(entry.score >= 0.0);
        CHECK(entry.score <= 1.0);
    }
}

TEST_CASE("a candidate that blows up is contained, not fatal") {
    SearchConfig cfg = oracle_cfg();
    cfg.max_blocks = 1;
    // fail the oracle's would-be winner so containment is observable
    auto all55 = enumerate_expansions(CellSpec{}, 1);
    const std::string doomed = top_k_keys_by_oracle(all55, 1)[0];
    SearchHooks hooks = oracle_hooks();
    hooks.score = [doomed](const CellSpec& cell) {
        if (cell_key(cell) == doomed) {
            throw NonFiniteError("injected divergence");
        }
        return oracle_score(cell);
    };
    SearchState state;
    state.global_seed = cfg.global_seed;
    run_stage(state, cfg, nullptr, hooks);
    CHECK(state.history.size() == 55);
    int failed = 0;
    for (const ScoredCell& entry : state.history) {
        if (!entry.ok) {
            ++failed;
            CHECK(cell_key(entry.cell) == doomed);
        }
    }
    CHECK(failed == 1);
    for (const ScoredCell& entry : state.beam) {
        CHECK(cell_key(entry.cell) != doomed);
        CHECK(entry.ok);
    }

    SearchHooks all_fail = oracle_hooks();
    all_fail.score = [](const CellSpec&) -> double { throw NonFiniteError("boom"); };
    SearchState dead;
    dead.global_seed = 1;
    CHECK_THROWS_AS(run_stage(dead, cfg, nullptr, all_fail), std::runtime_error);
}

TEST_CASE("scored multiset is identical for one worker and many") {
    SearchConfig cfg = oracle_cfg();
    SearchHooks hooks = oracle_hooks();
    auto run = [&](int workers) {
        SearchConfig c = cfg;
        c.workers = workers;
        SearchState state;
        state.global_seed = c.global_seed;
        run_stage(state, c, nullptr, hooks);
        run_stage(state, c, nullptr, hooks);
        std::vector<std::pair<std::string, double>> scored;
        for (const ScoredCell& entry : state.history) {
            scored.emplace_back(cell_key(entry.cell), entry.score);
        }
        std::sort(scored.begin(), scored.end());
        return scored;
    };
    CHECK(run(1) == run(4));
}

TEST_CASE("checkpoints are byte-stable and validate their input") {
    const SearchConfig cfg = oracle_cfg();
    auto [best, state] = run_pnas_search(cfg, dummy_data(), {.hooks = oracle_hooks()});
    const auto dir = std::filesystem::temp_directory_path() / "mnas_ckpt_test";
    std::filesystem::create_directories(dir);
    const auto p1 = dir / "state1.json";
    const auto p2 = dir / "state2.json";
    checkpoint_save(state, cfg, p1.string());
    auto [loaded, loaded_cfg] = checkpoint_load(p1.string());
    checkpoint_save(loaded, loaded_cfg, p2.string());
    CHECK(slurp(p1) == slurp(p2));
    CHECK(loaded.b_completed == state.b_completed);
    CHECK(loaded.history.size() == state.history.size());
    CHECK(cell_key(best_of_beam(loaded).cell) == cell_key(best));

    SUBCASE("truncated file is a structured error with no partial state") {
        std::string bytes = slurp(p1);
        std::ofstream(dir / "trunc.json", std::ios::binary)
            << bytes.substr(0, bytes.size() / 2);
        try {
            checkpoint_load((dir / "trunc.json").string());
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.kind() == FormatError::Kind::Malformed);
        }
    }
    SUBCASE("wrong format and version are distinct errors") {
        std::ofstream(dir / "notstate.json") << R"({"format":"something-else","version":1})";
        try {
            checkpoint_load((dir / "notstate.json").string());
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.kind() == FormatError::Kind::BadMagic);
        }
        std::ofstream(dir / "badver.json")
            << R"({"format":"mnas-search-state","version":99})";
        try {
            checkpoint_load((dir / "badver.json").string());
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.kind() == FormatError::Kind::BadVersion);
        }
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("interrupt after stage two and resume matches the uninterrupted run") {
    const SearchConfig cfg = oracle_cfg();
    auto [best_full, state_full] = run_pnas_search(cfg, dummy_data(), {.hooks = oracle_hooks()});

    const auto dir = std::filesystem::temp_directory_path() / "mnas_resume_test";
    std::filesystem::create_directories(dir);
    const std::string ckpt = (dir / "state.json").string();
    SearchOptions phase1;
    phase1.checkpoint_path = ckpt;
    phase1.hooks = oracle_hooks();
    phase1.stop_after_stage = 2;
    run_pnas_search(cfg, dummy_data(), phase1);

    auto [loaded, loaded_cfg] = checkpoint_load(ckpt);
    CHECK(loaded.b_completed == 2);
    SearchOptions phase2;
    phase2.hooks = oracle_hooks();
    auto [best_resumed, state_resumed] =
        run_pnas_search(loaded_cfg, dummy_data(), phase2, &loaded);

    CHECK(cell_key(best_resumed) == cell_key(best_full));
    REQUIRE(state_resumed.history.size() == state_full.history.size());
    for (size_t i = 0; i < state_full.history.size(); ++i) {
        CHECK(cell_key(state_resumed.history[i].cell) == cell_key(state_full.history[i].cell));
        CHECK(state_resumed.history[i].score == state_full.history[i].score);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("report files carry per-stage depth histograms and the best cell") {
    const SearchConfig cfg = oracle_cfg();
    auto [best, state] = run_pnas_search(cfg, dummy_data(), {.hooks = oracle_hooks()});
    const auto dir = std::filesystem::temp_directory_path() / "mnas_report_test";
    emit_report(state, cfg, dir.string());

    std::ifstream hist(dir / "depth_hist.csv");
    std::string line;
    std::getline(hist, line);
    CHECK(line == "stage,depth,count");
    std::map<int, int> totals;  // stage -> count sum
    std::map<int, std::map<int, int>> by_stage;
    while (std::getline(hist, line)) {
        int stage = 0, depth = 0, count = 0;
        REQUIRE(std::sscanf(line.c_str(), "%d,%d,%d", &stage, &depth, &count) == 3);
        totals[stage] += count;
        by_stage[stage][depth] = count;
    }
    for (int stage = 1; stage <= cfg.max_blocks; ++stage) {
        CHECK(totals[stage] == cfg.beam_size);
    }
    // every stage-1 cell has depth exactly one
    CHECK(by_stage[1] == std::map<int, int>{{1, cfg.beam_size}});

    const auto best_json = nlohmann::json::parse(slurp(dir / "best_cell.json"));
    CHECK(cell_key(cell_from_json(best_json)) == cell_key(best));

    std::ifstream traj(dir / "trajectory.csv");
    std::getline(traj, line);
    CHECK(line == "stage,n_scored,best_score,mean_score,mean_depth");
    int rows = 0;
    while (std::getline(traj, line)) {
        ++rows;
    }
    CHECK(rows == cfg.max_blocks);
    std::filesystem::remove_all(dir);
}

TEST_CASE("real candidate scoring is deterministic and worker-independent") {
    const ClassDataset data = generate_synthetic_glyphs(31337, 15, 4, 8);
    const SearchConfig cfg = micro_real_cfg(5);
    const CellSpec cell{{BlockSpec{{0, BlockOp::Conv3x3}, {1, BlockOp::Identity}}}};
    const double s1 = score_candidate(cell, cfg, data);
    const double s2 = score_candidate(cell, cfg, data);
    CHECK(s1 == s2);
    CHECK(s1 >= 0.0);
    CHECK(s1 <= 1.0);

    auto run = [&](int workers) {
        SearchConfig c = cfg;
        c.workers = workers;
        SearchState state;
        state.global_seed = c.global_seed;
        run_stage(state, c, &data, {});
        std::vector<std::pair<std::string, double>> scored;
        for (const ScoredCell& entry : state.history) {
            scored.emplace_back(cell_key(entry.cell), entry.score);
        }
        std::sort(scored.begin(), scored.end());
        return scored;
    };
    const auto one = run(1);
    CHECK(one == run(2));
    CHECK(one.size() == 55);
}
