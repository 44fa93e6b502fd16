// Command-line surface: progressive cell search, final training, episodic
// evaluation, report emission, and synthetic dataset generation.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mnas/search.hpp"

using namespace mnas;

namespace {

struct DataOptions {
    std::string dataset = "synthetic";
    uint64_t data_seed = 7;
    int classes = 100;
    int per_class = 20;
    int size = 16;
    int train_classes = 0;  // 0: default 4/5 split

    void attach(CLI::App* cmd) {
        cmd->add_option("--dataset", dataset, "FSDS file path, or 'synthetic'")
            ->capture_default_str();
        cmd->add_option("--data-seed", data_seed, "seed for the synthetic glyph generator")
            ->capture_default_str();
        cmd->add_option("--classes", classes, "synthetic: total classes")->capture_default_str();
        cmd->add_option("--per-class", per_class, "synthetic: images per class")
            ->capture_default_str();
        cmd->add_option("--size", size, "synthetic: image side length")->capture_default_str();
        cmd->add_option("--train-classes", train_classes,
                        "meta-train class count (0 = four fifths of classes)")
            ->capture_default_str();
    }

    ClassDataset load() const {
        ClassDataset ds = dataset == "synthetic"
                              ? generate_synthetic_glyphs(data_seed, classes, per_class, size)
                              : load_dataset(dataset);
        if (train_classes > 0) {
            if (train_classes >= ds.n_classes()) {
                throw std::invalid_argument("--train-classes must leave meta-test classes");
            }
            ds.train_classes = train_classes;
        }
        return ds;
    }
};

struct MetaOptions {
    MetaConfig cfg;
    std::string opt_name = "adam";
    std::string anneal_name = "linear";

    void attach(CLI::App* cmd) {
        cmd->add_option("--inner-iters", cfg.inner_iterations, "inner-loop steps per task")
            ->capture_default_str();
        cmd->add_option("--inner-batch", cfg.inner_batch, "inner minibatch size")
            ->capture_default_str();
        cmd->add_option("--inner-lr", cfg.inner_lr, "inner learning rate")
            ->capture_default_str();
        cmd->add_option("--inner-opt", opt_name, "inner optimizer: adam or sgd")
            ->capture_default_str();
        cmd->add_option("--meta-batch", cfg.meta_batch, "tasks per outer step")
            ->capture_default_str();
        cmd->add_option("--outer-step", cfg.outer_step, "initial outer step size")
            ->capture_default_str();
        cmd->add_option("--anneal", anneal_name, "outer step schedule: linear or constant")
            ->capture_default_str();
        cmd->add_option("--outer-iters", cfg.outer_iterations, "outer iterations")
            ->capture_default_str();
        cmd->add_flag("--transduction", cfg.transduction,
                      "evaluate with batch statistics from the query batch");
        cmd->add_option("--eval-inner-iters", cfg.eval_inner_iterations,
                        "adaptation steps at evaluation time")
            ->capture_default_str();
    }

    MetaConfig resolve() const {
        MetaConfig out = cfg;
        if (opt_name == "sgd") {
            out.inner_opt = OptKind::SGD;
        } else if (opt_name == "adam") {
            out.inner_opt = OptKind::Adam;
        } else {
            throw std::invalid_argument("--inner-opt must be adam or sgd");
        }
        if (anneal_name == "constant") {
            out.anneal = Anneal::Constant;
        } else if (anneal_name == "linear") {
            out.anneal = Anneal::Linear;
        } else {
            throw std::invalid_argument("--anneal must be linear or constant");
        }
        out.validate();
        return out;
    }
};

struct NetOptions {
    int filters = 10;
    int unroll = 0;
    int scale = 1;
    int stages = 2;
    int way = 5;
    int shot = 1;
    int query = 15;

    void attach(CLI::App* cmd) {
        cmd->add_option("--filters", filters, "filters in the first stage (F)")
            ->capture_default_str();
        cmd->add_option("--unroll", unroll, "extra cell copies per stage (N)")
            ->capture_default_str();
        cmd->add_option("--scale", scale, "per-stage feature scale rate")->capture_default_str();
        cmd->add_option("--stages", stages, "downsampling stages")->capture_default_str();
        cmd->add_option("--way", way, "classes per episode")->capture_default_str();
        cmd->add_option("--shot", shot, "support images per class")->capture_default_str();
        cmd->add_option("--query", query, "query images per class")->capture_default_str();
    }
};

void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
    std::ofstream out(path);
    out << "outer_iter,meta_test_acc,ci95,wall_seconds\n";
    char line[160];
    for (const TraceRow& row : trace) {
        std::snprintf(line, sizeof(line), "%d,%.10g,%.10g,%.3f\n", row.outer_iter,
                      row.meta_test_acc, row.ci95, row.wall_seconds);
        out << line;
    }
}

CellSpec load_cell_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open cell file: " + path);
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Malformed,
                          std::string("cell file is not valid JSON: ") + e.what());
    }
    return cell_from_json(j);
}

int cmd_gen_data(uint64_t seed, int classes, int per_class, int size, const std::string& out) {
    const ClassDataset ds = generate_synthetic_glyphs(seed, classes, per_class, size);
    save_dataset(ds, out);
    std::printf("wrote %s: %d classes x %d images, %dx%d, %d meta-train\n", out.c_str(),
                ds.n_classes(), static_cast<int>(ds.classes[0].size()), ds.height, ds.width,
                ds.train_classes);
    return 0;
}

int cmd_search(SearchConfig cfg, const DataOptions& data_opts, const std::string& out_dir,
               const std::string& resume_path) {
    std::filesystem::create_directories(out_dir);
    const std::string state_path = (std::filesystem::path(out_dir) / "state.json").string();

    SearchState resume_state;
    const SearchState* resume = nullptr;
    if (!resume_path.empty()) {
        auto [state, stored_cfg] = checkpoint_load(resume_path);
        resume_state = std::move(state);
        cfg = stored_cfg;  // a resumed search continues under its original configuration
        resume = &resume_state;
        std::printf("resuming after stage %d (%zu cells in history)\n",
                    resume_state.b_completed, resume_state.history.size());
    }

    const ClassDataset ds = data_opts.load();
    SearchOptions opts;
    opts.checkpoint_path = state_path;
    auto [best, state] = run_pnas_search(cfg, ds, opts, resume);

    emit_report(state, cfg, out_dir);

    const ScoredCell& winner = best_of_beam(state);
    std::printf("search complete: %zu cells trained over %d stages\n", state.history.size(),
                state.b_completed);
    std::printf("best cell (observed %.4f, depth %d): %s\n", winner.score, cell_depth(best),
                cell_key(best).c_str());
    std::printf("outputs in %s: state.json, best_cell.json, depth_hist.csv, trajectory.csv\n",
                out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& cell_path, const SearchConfig& cfg, const MetaConfig& meta,
              const DataOptions& data_opts, uint64_t seed, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const CellSpec cell = load_cell_file(cell_path);
    const ClassDataset ds = data_opts.load();
    Model model;
    FinalReport report = final_train(cell, cfg, meta, ds, seed, &model);

    std::ofstream params_out(std::filesystem::path(out_dir) / "params.json");
    params_out << model_to_json(model).dump() << '\n';
    write_trace_csv(report.trace, (std::filesystem::path(out_dir) / "trace.csv").string());
    std::ofstream report_out(std::filesystem::path(out_dir) / "report.json");
    report_out << report.json.dump(2) << '\n';

    std::printf("trained %s (%ld parameters)\n", cell_key(cell).c_str(), report.param_count);
    std::printf("  standard:     %.4f +- %.4f\n", report.standard.mean_accuracy,
                report.standard.ci95);
    std::printf("  transduction: %.4f +- %.4f\n", report.transduction.mean_accuracy,
                report.transduction.ci95);
    std::printf("outputs in %s: params.json, trace.csv, report.json\n", out_dir.c_str());
    return 0;
}

int cmd_eval(const std::string& params_path, const DataOptions& data_opts, const MetaConfig& meta,
             const NetOptions& net, int episodes, uint64_t seed, int workers) {
    std::ifstream in(params_path);
    if (!in) {
        throw std::runtime_error("cannot open params file: " + params_path);
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Malformed,
                          std::string("params file is not valid JSON: ") + e.what());
    }
    Model model = model_from_json(j);
    const ClassDataset ds = data_opts.load();
    const uint64_t stream = hash_str(seed, "eval-ep");
    EpisodeFn eval_eps = [&](uint64_t i) {
        Rng rng(hash_mix(stream, i));
        return sample_episode(ds, Split::MetaTest, model.spec.n_classes, net.shot, net.query,
                              rng);
    };
    const EvalResult r = evaluate_meta(model, eval_eps, episodes, meta, hash_str(seed, "eval"),
                                       workers);
    std::printf("meta-test accuracy over %d episodes: %.4f +- %.4f (%s)\n", episodes,
                r.mean_accuracy, r.ci95, meta.transduction ? "transduction" : "running stats");
    return 0;
}

int cmd_report(const std::string& state_path, const std::string& out_dir) {
    auto [state, cfg] = checkpoint_load(state_path);
    emit_report(state, cfg, out_dir);
    std::printf("report for %d completed stages written to %s\n", state.b_completed,
                out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Progressive cell search driving a first-order meta-learner"};
    app.require_subcommand(1);
    app.set_config("--config", "", "flat key=value config file; flags override");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic glyph dataset (FSDS)");
    uint64_t gen_seed = 7;
    int gen_classes = 100, gen_per_class = 20, gen_size = 16;
    std::string gen_out = "glyphs.fsds";
    gen->add_option("--seed", gen_seed)->capture_default_str();
    gen->add_option("--classes", gen_classes)->capture_default_str();
    gen->add_option("--per-class", gen_per_class)->capture_default_str();
    gen->add_option("--size", gen_size)->capture_default_str();
    gen->add_option("--out", gen_out)->capture_default_str();

    // search
    auto* search = app.add_subcommand("search", "run the progressive cell search");
    DataOptions search_data;
    MetaOptions search_meta;
    NetOptions search_net;
    search_meta.cfg.outer_iterations = 1000;  // search-time budget
    search_meta.cfg.eval_inner_iterations = 50;
    int blocks = 5, beam = 5, episodes = 50, workers = 2, surrogate_epochs = 200;
    uint64_t search_seed = 0;
    std::string search_out = "search_out", resume_path;
    search->add_option("--blocks", blocks, "max blocks per cell (B)")->capture_default_str();
    search->add_option("--beam", beam, "beam size (K)")->capture_default_str();
    search->add_option("--episodes", episodes, "meta-test episodes per candidate score (E)")
        ->capture_default_str();
    search->add_option("--seed", search_seed, "global seed")->capture_default_str();
    search->add_option("--workers", workers, "parallel candidate workers")->capture_default_str();
    search->add_option("--surrogate-epochs", surrogate_epochs)->capture_default_str();
    search->add_option("--out", search_out, "output directory")->capture_default_str();
    search->add_option("--resume", resume_path, "resume from a state.json checkpoint");
    search_net.attach(search);
    search_meta.attach(search);
    search_data.attach(search);

    // train
    auto* train = app.add_subcommand("train", "train one cell with the full budget");
    DataOptions train_data;
    MetaOptions train_meta;
    NetOptions train_net;
    train_meta.cfg.outer_iterations = 2000;
    train_meta.cfg.eval_inner_iterations = 50;
    std::string cell_path, train_out = "train_out";
    uint64_t train_seed = 1;
    int train_episodes = 200, train_workers = 2;
    train->add_option("--cell", cell_path, "cell JSON file")->required();
    train->add_option("--seed", train_seed)->capture_default_str();
    train->add_option("--episodes", train_episodes, "final evaluation episodes")
        ->capture_default_str();
    train->add_option("--workers", train_workers)->capture_default_str();
    train->add_option("--out", train_out, "output directory")->capture_default_str();
    train_net.attach(train);
    train_meta.attach(train);
    train_data.attach(train);

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate saved parameters episodically");
    DataOptions eval_data;
    MetaOptions eval_meta;
    NetOptions eval_net;
    eval_meta.cfg.eval_inner_iterations = 50;
    std::string params_path;
    int eval_episodes_n = 200, eval_workers = 2;
    uint64_t eval_seed = 1;
    eval->add_option("--params", params_path, "params.json from train")->required();
    eval->add_option("--episodes", eval_episodes_n)->capture_default_str();
    eval->add_option("--seed", eval_seed)->capture_default_str();
    eval->add_option("--workers", eval_workers)->capture_default_str();
    eval_net.attach(eval);
    eval_meta.attach(eval);
    eval_data.attach(eval);

    // report
    auto* report = app.add_subcommand("report", "emit report files from a checkpoint");
    std::string report_state, report_out = "report_out";
    report->add_option("--state", report_state, "state.json checkpoint")->required();
    report->add_option("--out", report_out, "output directory")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            return cmd_gen_data(gen_seed, gen_classes, gen_per_class, gen_size, gen_out);
        }
        if (search->parsed()) {
            SearchConfig cfg;
            cfg.max_blocks = blocks;
            cfg.beam_size = beam;
            cfg.filters = search_net.filters;
            cfg.unroll = search_net.unroll;
            cfg.feature_scale_rate = search_net.scale;
            cfg.n_stages = search_net.stages;
            cfg.n_way = search_net.way;
            cfg.k_shot = search_net.shot;
            cfg.query_per_class = search_net.query;
            cfg.eval_episodes = episodes;
            cfg.meta = search_meta.resolve();
            cfg.surrogate_epochs = surrogate_epochs;
            cfg.global_seed = search_seed;
            cfg.workers = workers;
            return cmd_search(cfg, search_data, search_out, resume_path);
        }
        if (train->parsed()) {
            SearchConfig cfg;
            cfg.filters = train_net.filters;
            cfg.unroll = train_net.unroll;
            cfg.feature_scale_rate = train_net.scale;
            cfg.n_stages = train_net.stages;
            cfg.n_way = train_net.way;
            cfg.k_shot = train_net.shot;
            cfg.query_per_class = train_net.query;
            cfg.eval_episodes = train_episodes;
            cfg.workers = train_workers;
            cfg.global_seed = train_seed;
            return cmd_train(cell_path, cfg, train_meta.resolve(), train_data, train_seed,
                             train_out);
        }
        if (eval->parsed()) {
            return cmd_eval(params_path, eval_data, eval_meta.resolve(), eval_net,
                            eval_episodes_n, eval_seed, eval_workers);
        }
        if (report->parsed()) {
            return cmd_report(report_state, report_out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
