#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mnas/meta.hpp"
#include "mnas/surrogate.hpp"
#include "mnas/tasks.hpp"

namespace mnas {

struct SearchConfig {
    int max_blocks = 5;          // B
    int beam_size = 5;           // K (paper-scale 100; desk default 5)
    int filters = 10;            // F
    int unroll = 0;              // N
    int feature_scale_rate = 1;
    int n_stages = 2;
    int n_way = 5;
    int k_shot = 1;
    int query_per_class = 15;
    int eval_episodes = 50;      // E, meta-test episodes per candidate score
    MetaConfig meta;             // search-time training budget
    int surrogate_epochs = 200;
    uint64_t global_seed = 0;
    int workers = 1;

    void validate() const;
};

struct ScoredCell {
    CellSpec cell;
    double score = 0.0;  // meaningful only when ok
    bool ok = false;
    int stage = 0;
};

// Checkpointable search state. Every random stream is a pure hash of
// global_seed plus stable labels (cell keys, stage numbers), so this struct
// plus the config reproduces the remaining run bit-exactly.
struct SearchState {
    int b_completed = 0;
    uint64_t global_seed = 0;
    std::vector<ScoredCell> history;  // append-only, duplicate-free by cell key
    std::vector<ScoredCell> beam;     // top-K of the last completed stage
    SurrogateModel surrogate;
};

// Injection points for oracle-driven tests: `score` replaces candidate
// training, `predict` replaces the surrogate ranking (and skips its refit).
struct SearchHooks {
    std::function<double(const CellSpec&)> score;
    std::function<std::vector<double>(const std::vector<CellSpec>&)> predict;
};

struct SearchOptions {
    std::string checkpoint_path;  // written after every completed stage
    SearchHooks hooks;
    int stop_after_stage = 0;     // 0: run to max_blocks
};

// Trains and meta-evaluates one candidate. Deterministic in
// (canonical cell key, global_seed) regardless of worker assignment.
double score_candidate(const CellSpec& cell, const SearchConfig& cfg, const ClassDataset& data);

// Advances the progressive search by one block stage: enumerate expansions
// of the beam (stage 1 scores all 55 first blocks exhaustively), rank with
// the surrogate, train the top-K picks, rebuild the beam from observed
// scores, refit the surrogate on the full history.
void run_stage(SearchState& state, const SearchConfig& cfg, const ClassDataset* data,
               const SearchHooks& hooks = {});

// Full progressive loop; returns the best observed cell of the final beam
// (ties broken by canonical key order) alongside the final state.
std::pair<CellSpec, SearchState> run_pnas_search(const SearchConfig& cfg, const ClassDataset& data,
                                                 const SearchOptions& opts = {},
                                                 const SearchState* resume = nullptr);

// Best cell of the current beam by (score desc, key asc).
const ScoredCell& best_of_beam(const SearchState& state);

void checkpoint_save(const SearchState& state, const SearchConfig& cfg, const std::string& path);
std::pair<SearchState, SearchConfig> checkpoint_load(const std::string& path);

nlohmann::ordered_json search_config_to_json(const SearchConfig& cfg);
SearchConfig search_config_from_json(const nlohmann::json& j);

struct FinalReport {
    CellSpec cell;
    long param_count = 0;
    EvalResult standard;
    EvalResult transduction;
    std::vector<TraceRow> trace;
    nlohmann::ordered_json json;
};

// Retrains the chosen cell with the full budget and a fresh seed, then
// evaluates with and without transduction on the same episode stream.
FinalReport final_train(const CellSpec& cell, const SearchConfig& cfg, const MetaConfig& full_meta,
                        const ClassDataset& data, uint64_t seed, Model* model_out = nullptr);

// Data-file report: per-stage depth histograms (depth_hist.csv), the score
// trajectory with per-stage mean depth (trajectory.csv), and best_cell.json.
void emit_report(const SearchState& state, const SearchConfig& cfg, const std::string& out_dir);

// Per-stage beam reconstructed from the history (top-K ok entries of that
// stage); stage counts from 1.
std::vector<ScoredCell> stage_beam(const SearchState& state, const SearchConfig& cfg, int stage);

}  // namespace mnas
