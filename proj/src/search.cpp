#include "mnas/search.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "mnas/parallel.hpp"

namespace mnas {

void SearchConfig::validate() const {
    if (max_blocks < 1 || beam_size < 1 || eval_episodes < 1) {
        throw std::invalid_argument("search config: B, K, E must be >= 1");
    }
    if (filters < 1 || n_way < 2 || k_shot < 1 || query_per_class < 1) {
        throw std::invalid_argument("search config: bad network or episode shape");
    }
    meta.validate();
}

namespace {

// (score desc, key asc); failed entries sink to the bottom
bool better(const ScoredCell& a, const ScoredCell& b) {
    if (a.ok != b.ok) {
        return a.ok;
    }
    if (a.score != b.score) {
        return a.score > b.score;
    }
    return cell_key(a.cell) < cell_key(b.cell);
}

}  // namespace

double score_candidate(const CellSpec& cell, const SearchConfig& cfg, const ClassDataset& data) {
    const uint64_t cand_seed = hash_str(cfg.global_seed, cell_key(cell));
    NetworkSpec ns;
    ns.cell = canonicalize(cell);
    ns.filters = cfg.filters;
    ns.unroll = cfg.unroll;
    ns.feature_scale_rate = cfg.feature_scale_rate;
    ns.n_stages = cfg.n_stages;
    ns.n_classes = cfg.n_way;
    Model model = compile_network(ns, hash_str(cand_seed, "init"));

    const uint64_t train_stream = hash_str(cand_seed, "train-ep");
    const uint64_t eval_stream = hash_str(cand_seed, "eval-ep");
    EpisodeFn train_eps = [&](uint64_t i) {
        Rng rng(hash_mix(train_stream, i));
        return sample_episode(data, Split::MetaTrain, cfg.n_way, cfg.k_shot, cfg.query_per_class,
                              rng);
    };
    EpisodeFn eval_eps = [&](uint64_t i) {
        Rng rng(hash_mix(eval_stream, i));
        return sample_episode(data, Split::MetaTest, cfg.n_way, cfg.k_shot, cfg.query_per_class,
                              rng);
    };

    TrainOptions opts;
    opts.workers = 1;  // candidate-level parallelism only, to keep scores schedule-free
    opts.trace_episodes = 0;
    reptile_train(model, train_eps, eval_eps, cfg.meta, hash_str(cand_seed, "train"), opts);
    return evaluate_meta(model, eval_eps, cfg.eval_episodes, cfg.meta,
                         hash_str(cand_seed, "eval"), 1)
        .mean_accuracy;
}

void run_stage(SearchState& state, const SearchConfig& cfg, const ClassDataset* data,
               const SearchHooks& hooks) {
    cfg.validate();
    const int b = state.b_completed + 1;
    if (b > cfg.max_blocks) {
        throw std::invalid_argument("run_stage: search already complete");
    }
    if (!hooks.score && !data) {
        throw std::invalid_argument("run_stage: need a dataset unless a score hook is injected");
    }

    // candidate set for this stage
    std::vector<CellSpec> candidates;
    if (b == 1) {
        candidates = enumerate_expansions(CellSpec{}, cfg.max_blocks);
    } else {
        std::set<std::string> seen;
        std::vector<std::pair<std::string, CellSpec>> keyed;
        for (const ScoredCell& parent : state.beam) {
            for (CellSpec& child : enumerate_expansions(parent.cell, cfg.max_blocks)) {
                std::string key = cell_key(child);
                if (seen.insert(key).second) {
                    keyed.emplace_back(std::move(key), std::move(child));
                }
            }
        }
        std::sort(keyed.begin(), keyed.end(),
                  [](const auto& a, const auto& b2) { return a.first < b2.first; });
        std::vector<CellSpec> expansions;
        expansions.reserve(keyed.size());
        for (auto& [key, cell] : keyed) {
            expansions.push_back(std::move(cell));
        }

        if (static_cast<int>(expansions.size()) <= cfg.beam_size) {
            candidates = std::move(expansions);
        } else {
            const std::vector<double> predicted =
                hooks.predict ? hooks.predict(expansions)
                              : surrogate_predict(state.surrogate, expansions);
            if (predicted.size() != expansions.size()) {
                throw std::logic_error("run_stage: predictor returned wrong count");
            }
            std::vector<size_t> order(expansions.size());
            for (size_t i = 0; i < order.size(); ++i) {
                order[i] = i;
            }
            // expansions are key-sorted, so equal predictions tie-break by key
            std::stable_sort(order.begin(), order.end(), [&](size_t x, size_t y) {
                return predicted[x] > predicted[y];
            });
            candidates.reserve(static_cast<size_t>(cfg.beam_size));
            for (int i = 0; i < cfg.beam_size; ++i) {
                candidates.push_back(expansions[order[static_cast<size_t>(i)]]);
            }
        }
    }

    // train/evaluate every candidate; aggregation is key-sorted so results
    // are independent of worker scheduling
    std::sort(candidates.begin(), candidates.end(), [](const CellSpec& a, const CellSpec& b2) {
        return cell_key(a) < cell_key(b2);
    });
    std::vector<ScoredCell> scored(candidates.size());
    parallel_for(static_cast<int>(candidates.size()), cfg.workers, [&](int i) {
        ScoredCell entry;
        entry.cell = canonicalize(candidates[static_cast<size_t>(i)]);
        entry.stage = b;
        try {
            entry.score =
                hooks.score ? hooks.score(entry.cell) : score_candidate(entry.cell, cfg, *data);
            entry.ok = true;
        } catch (const NonFiniteError&) {
            entry.score = 0.0;
            entry.ok = false;  // contained: a diverging candidate must not kill the search
        }
        scored[static_cast<size_t>(i)] = std::move(entry);
    });

    std::set<std::string> history_keys;
    for (const ScoredCell& entry : state.history) {
        history_keys.insert(cell_key(entry.cell));
    }
    for (ScoredCell& entry : scored) {
        if (!history_keys.insert(cell_key(entry.cell)).second) {
            throw std::logic_error("run_stage: duplicate cell reached the scoring set");
        }
        state.history.push_back(entry);
    }

    std::vector<ScoredCell> fresh;
    for (const ScoredCell& entry : scored) {
        if (entry.ok) {
            fresh.push_back(entry);
        }
    }
    if (fresh.empty()) {
        throw std::runtime_error("run_stage: every candidate of stage " + std::to_string(b) +
                                 " failed");
    }
    std::sort(fresh.begin(), fresh.end(), better);
    if (static_cast<int>(fresh.size()) > cfg.beam_size) {
        fresh.resize(static_cast<size_t>(cfg.beam_size));
    }
    state.beam = std::move(fresh);

    if (!hooks.predict && b < cfg.max_blocks) {
        std::vector<std::pair<CellSpec, double>> fit_data;
        for (const ScoredCell& entry : state.history) {
            if (entry.ok) {
                fit_data.emplace_back(entry.cell, entry.score);
            }
        }
        SurrogateConfig scfg;
        scfg.max_blocks = cfg.max_blocks;
        scfg.epochs = cfg.surrogate_epochs;
        state.surrogate =
            surrogate_fit(fit_data, scfg, hash_mix(hash_str(cfg.global_seed, "surrogate"),
                                                   static_cast<uint64_t>(b)));
    }
    state.b_completed = b;
}

const ScoredCell& best_of_beam(const SearchState& state) {
    if (state.beam.empty()) {
        throw std::logic_error("best_of_beam: empty beam");
    }
    const ScoredCell* best = &state.beam.front();
    for (const ScoredCell& entry : state.beam) {
        if (better(entry, *best)) {
            best = &entry;
        }
    }
    return *best;
}

std::pair<CellSpec, SearchState> run_pnas_search(const SearchConfig& cfg, const ClassDataset& data,
                                                 const SearchOptions& opts,
                                                 const SearchState* resume) {
    cfg.validate();
    SearchState state;
    if (resume) {
        state = *resume;
        if (state.global_seed != cfg.global_seed) {
            throw std::invalid_argument("run_pnas_search: resume state has a different seed");
        }
    } else {
        state.global_seed = cfg.global_seed;
    }
    const int last_stage = opts.stop_after_stage > 0
                               ? std::min(opts.stop_after_stage, cfg.max_blocks)
                               : cfg.max_blocks;
    while (state.b_completed < last_stage) {
        run_stage(state, cfg, &data, opts.hooks);
        if (!opts.checkpoint_path.empty()) {
            checkpoint_save(state, cfg, opts.checkpoint_path);
        }
    }
    return {best_of_beam(state).cell, std::move(state)};
}

nlohmann::ordered_json search_config_to_json(const SearchConfig& cfg) {
    nlohmann::ordered_json j;
    j["max_blocks"] = cfg.max_blocks;
    j["beam_size"] = cfg.beam_size;
    j["filters"] = cfg.filters;
    j["unroll"] = cfg.unroll;
    j["feature_scale_rate"] = cfg.feature_scale_rate;
    j["n_stages"] = cfg.n_stages;
    j["n_way"] = cfg.n_way;
    j["k_shot"] = cfg.k_shot;
    j["query_per_class"] = cfg.query_per_class;
    j["eval_episodes"] = cfg.eval_episodes;
    j["surrogate_epochs"] = cfg.surrogate_epochs;
    j["workers"] = cfg.workers;
    nlohmann::ordered_json m;
    m["inner_iterations"] = cfg.meta.inner_iterations;
    m["inner_batch"] = cfg.meta.inner_batch;
    m["inner_lr"] = cfg.meta.inner_lr;
    m["inner_opt"] = cfg.meta.inner_opt == OptKind::Adam ? "adam" : "sgd";
    m["meta_batch"] = cfg.meta.meta_batch;
    m["outer_step"] = cfg.meta.outer_step;
    m["anneal"] = cfg.meta.anneal == Anneal::Linear ? "linear" : "constant";
    m["outer_iterations"] = cfg.meta.outer_iterations;
    m["transduction"] = cfg.meta.transduction;
    m["eval_inner_iterations"] = cfg.meta.eval_inner_iterations;
    j["meta"] = std::move(m);
    return j;
}

SearchConfig search_config_from_json(const nlohmann::json& j) {
    try {
        SearchConfig cfg;
        cfg.max_blocks = j.at("max_blocks").get<int>();
        cfg.beam_size = j.at("beam_size").get<int>();
        cfg.filters = j.at("filters").get<int>();
        cfg.unroll = j.at("unroll").get<int>();
        cfg.feature_scale_rate = j.at("feature_scale_rate").get<int>();
        cfg.n_stages = j.at("n_stages").get<int>();
        cfg.n_way = j.at("n_way").get<int>();
        cfg.k_shot = j.at("k_shot").get<int>();
        cfg.query_per_class = j.at("query_per_class").get<int>();
        cfg.eval_episodes = j.at("eval_episodes").get<int>();
        cfg.surrogate_epochs = j.at("surrogate_epochs").get<int>();
        cfg.workers = j.at("workers").get<int>();
        const auto& m = j.at("meta");
        cfg.meta.inner_iterations = m.at("inner_iterations").get<int>();
        cfg.meta.inner_batch = m.at("inner_batch").get<int>();
        cfg.meta.inner_lr = m.at("inner_lr").get<double>();
        cfg.meta.inner_opt = m.at("inner_opt").get<std::string>() == "sgd" ? OptKind::SGD
                                                                           : OptKind::Adam;
        cfg.meta.meta_batch = m.at("meta_batch").get<int>();
        cfg.meta.outer_step = m.at("outer_step").get<double>();
        cfg.meta.anneal = m.at("anneal").get<std::string>() == "constant" ? Anneal::Constant
                                                                          : Anneal::Linear;
        cfg.meta.outer_iterations = m.at("outer_iterations").get<int>();
        cfg.meta.transduction = m.at("transduction").get<bool>();
        cfg.meta.eval_inner_iterations = m.at("eval_inner_iterations").get<int>();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Malformed,
                          std::string("bad search config: ") + e.what());
    }
}

namespace {

constexpr const char* kStateFormat = "mnas-search-state";
constexpr int kStateVersion = 1;

nlohmann::ordered_json scored_to_json(const ScoredCell& entry, bool with_stage) {
    nlohmann::ordered_json j;
    j["cell"] = cell_to_json(entry.cell);
    if (entry.ok) {
        j["score"] = entry.score;
    } else {
        j["score"] = nullptr;
    }
    j["ok"] = entry.ok;
    if (with_stage) {
        j["stage"] = entry.stage;
    }
    return j;
}

ScoredCell scored_from_json(const nlohmann::json& j, bool with_stage) {
    ScoredCell entry;
    entry.cell = cell_from_json(j.at("cell"));
    entry.ok = j.at("ok").get<bool>();
    entry.score = entry.ok ? j.at("score").get<double>() : 0.0;
    entry.stage = with_stage ? j.at("stage").get<int>() : 0;
    return entry;
}

}  // namespace

void checkpoint_save(const SearchState& state, const SearchConfig& cfg, const std::string& path) {
    nlohmann::ordered_json j;
    j["format"] = kStateFormat;
    j["version"] = kStateVersion;
    j["b_completed"] = state.b_completed;
    j["global_seed"] = state.global_seed;
    j["config"] = search_config_to_json(cfg);
    nlohmann::ordered_json history = nlohmann::ordered_json::array();
    for (const ScoredCell& entry : state.history) {
        history.push_back(scored_to_json(entry, true));
    }
    j["history"] = std::move(history);
    nlohmann::ordered_json beam = nlohmann::ordered_json::array();
    for (const ScoredCell& entry : state.beam) {
        beam.push_back(scored_to_json(entry, false));
    }
    j["beam"] = std::move(beam);
    j["surrogate"] = state.surrogate.to_json();

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    }
    out << j.dump(2) << '\n';
    if (!out) {
        throw std::runtime_error("checkpoint: write failed: " + path);
    }
}

std::pair<SearchState, SearchConfig> checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("checkpoint: cannot open: " + path);
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Malformed,
                          std::string("checkpoint: malformed JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("format") || j["format"] != kStateFormat) {
        throw FormatError(FormatError::Kind::BadMagic, "checkpoint: not a search state file");
    }
    if (!j.contains("version") || j["version"].get<int>() != kStateVersion) {
        throw FormatError(FormatError::Kind::BadVersion, "checkpoint: unsupported version");
    }
    try {
        SearchState state;
        state.b_completed = j.at("b_completed").get<int>();
        state.global_seed = j.at("global_seed").get<uint64_t>();
        for (const auto& entry : j.at("history")) {
            state.history.push_back(scored_from_json(entry, true));
        }
        for (const auto& entry : j.at("beam")) {
            state.beam.push_back(scored_from_json(entry, false));
        }
        state.surrogate = SurrogateModel::from_json(j.at("surrogate"));
        SearchConfig cfg = search_config_from_json(j.at("config"));
        cfg.global_seed = state.global_seed;
        return {std::move(state), std::move(cfg)};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Malformed,
                          std::string("checkpoint: bad field: ") + e.what());
    }
}

FinalReport final_train(const CellSpec& cell, const SearchConfig& cfg, const MetaConfig& full_meta,
                        const ClassDataset& data, uint64_t seed, Model* model_out) {
    NetworkSpec ns;
    ns.cell = canonicalize(cell);
    ns.filters = cfg.filters;
    ns.unroll = cfg.unroll;
    ns.feature_scale_rate = cfg.feature_scale_rate;
    ns.n_stages = cfg.n_stages;
    ns.n_classes = cfg.n_way;
    Model model = compile_network(ns, hash_str(seed, "init"));

    const uint64_t train_stream = hash_str(seed, "train-ep");
    const uint64_t eval_stream = hash_str(seed, "eval-ep");
    EpisodeFn train_eps = [&](uint64_t i) {
        Rng rng(hash_mix(train_stream, i));
        return sample_episode(data, Split::MetaTrain, cfg.n_way, cfg.k_shot, cfg.query_per_class,
                              rng);
    };
    EpisodeFn eval_eps = [&](uint64_t i) {
        Rng rng(hash_mix(eval_stream, i));
        return sample_episode(data, Split::MetaTest, cfg.n_way, cfg.k_shot, cfg.query_per_class,
                              rng);
    };

    TrainOptions opts;
    opts.workers = cfg.workers;
    opts.trace_interval = std::max(1, full_meta.outer_iterations / 20);
    opts.trace_episodes = 50;

    FinalReport report;
    report.cell = ns.cell;
    report.trace = reptile_train(model, train_eps, eval_eps, full_meta, hash_str(seed, "train"),
                                 opts);
    report.param_count = model.param_count();

    MetaConfig eval_cfg = full_meta;
    eval_cfg.transduction = false;
    report.standard = evaluate_meta(model, eval_eps, cfg.eval_episodes, eval_cfg,
                                    hash_str(seed, "eval"), cfg.workers);
    eval_cfg.transduction = true;
    report.transduction = evaluate_meta(model, eval_eps, cfg.eval_episodes, eval_cfg,
                                        hash_str(seed, "eval"), cfg.workers);

    nlohmann::ordered_json j;
    j["cell"] = cell_to_json(report.cell);
    j["cell_key"] = cell_key(report.cell);
    j["cell_depth"] = cell_depth(report.cell);
    j["param_count"] = report.param_count;
    j["episodes"] = cfg.eval_episodes;
    j["n_way"] = cfg.n_way;
    j["k_shot"] = cfg.k_shot;
    j["seed"] = seed;
    nlohmann::ordered_json acc;
    acc["standard"] = {{"mean", report.standard.mean_accuracy}, {"ci95", report.standard.ci95}};
    acc["transduction"] = {{"mean", report.transduction.mean_accuracy},
                           {"ci95", report.transduction.ci95}};
    j["accuracy"] = std::move(acc);
    report.json = std::move(j);

    if (model_out) {
        *model_out = std::move(model);
    }
    return report;
}

std::vector<ScoredCell> stage_beam(const SearchState& state, const SearchConfig& cfg, int stage) {
    std::vector<ScoredCell> entries;
    for (const ScoredCell& entry : state.history) {
        if (entry.stage == stage && entry.ok) {
            entries.push_back(entry);
        }
    }
    std::sort(entries.begin(), entries.end(), better);
    if (static_cast<int>(entries.size()) > cfg.beam_size) {
        entries.resize(static_cast<size_t>(cfg.beam_size));
    }
    return entries;
}

void emit_report(const SearchState& state, const SearchConfig& cfg, const std::string& out_dir) {
    if (state.b_completed < 1) {
        throw std::invalid_argument("emit_report: no completed stage");
    }
    std::filesystem::create_directories(out_dir);

    std::ofstream hist(std::filesystem::path(out_dir) / "depth_hist.csv");
    hist << "stage,depth,count\n";
    std::ofstream traj(std::filesystem::path(out_dir) / "trajectory.csv");
    traj.precision(10);
    traj << "stage,n_scored,best_score,mean_score,mean_depth\n";
    for (int stage = 1; stage <= state.b_completed; ++stage) {
        const std::vector<ScoredCell> beam = stage_beam(state, cfg, stage);
        std::vector<CellSpec> cells;
        double best = 0.0, mean = 0.0, mean_depth = 0.0;
        for (const ScoredCell& entry : beam) {
            cells.push_back(entry.cell);
            best = std::max(best, entry.score);
            mean += entry.score;
            mean_depth += cell_depth(entry.cell);
        }
        if (!beam.empty()) {
            mean /= static_cast<double>(beam.size());
            mean_depth /= static_cast<double>(beam.size());
        }
        for (const auto& [depth, count] : depth_distribution(cells)) {
            hist << stage << ',' << depth << ',' << count << '\n';
        }
        traj << stage << ',' << beam.size() << ',' << best << ',' << mean << ',' << mean_depth
             << '\n';
    }

    std::ofstream best_cell(std::filesystem::path(out_dir) / "best_cell.json");
    best_cell << cell_to_json(best_of_beam(state).cell).dump(2) << '\n';
}

}  // namespace mnas
