#pragma once

#include <functional>
#include <vector>

#include "mnas/episode.hpp"
#include "mnas/network.hpp"
#include "mnas/optim.hpp"

namespace mnas {

enum class Anneal { Linear, Constant };

struct MetaConfig {
    int inner_iterations = 8;
    int inner_batch = 10;
    double inner_lr = 0.001;       // 0.001 or 0.01
    OptKind inner_opt = OptKind::Adam;
    int meta_batch = 5;
    double outer_step = 1.0;       // 0.3 or 1.0; annealed to 0 when anneal == Linear
    Anneal anneal = Anneal::Linear;
    int outer_iterations = 1000;
    bool transduction = false;
    int eval_inner_iterations = 8;

    void validate() const;
};

// Deterministic episode source: the index is the only state, so concurrent
// consumers and resumed runs see identical streams.
using EpisodeFn = std::function<Episode(uint64_t index)>;

struct EvalResult {
    double mean_accuracy = 0.0;
    double ci95 = 0.0;  // 1.96 * sd / sqrt(episodes)
    int episodes = 0;
};

struct TraceRow {
    int outer_iter = 0;
    double meta_test_acc = 0.0;
    double ci95 = 0.0;
    double wall_seconds = 0.0;
};

struct TrainOptions {
    int workers = 1;
    int trace_interval = 0;    // 0: single evaluation at the end
    int trace_episodes = 100;  // 0: no evaluations at all
};

// Task adaptation: clones theta and runs inner-loop steps on the support
// set. Inner steps use the full support when it fits in inner_batch,
// otherwise inner_batch images sampled with replacement. Optimizer moments
// are fresh per episode; theta itself is never touched.
Model inner_adapt(const Model& theta, const Episode& episode, const MetaConfig& cfg,
                  uint64_t seed, bool eval_time = false);

// theta <- theta + eps * mean_j(phi_j - theta), phi_j = inner_adapt on task j.
// BatchNorm running statistics ride along in the same interpolation, which is
// how training-mode passes feed them back into theta. Task adaptations may
// run in parallel; the averaged update is identical for any worker count.
void reptile_outer_step(Model& theta, const std::vector<Episode>& tasks, const MetaConfig& cfg,
                        double eps, uint64_t seed, int workers = 1);

// Full meta-training loop with the outer step annealed per config. Returns
// the meta-test accuracy trace (row per trace interval plus a final row).
std::vector<TraceRow> reptile_train(Model& theta, const EpisodeFn& train_episodes,
                                    const EpisodeFn& eval_episodes, const MetaConfig& cfg,
                                    uint64_t seed, const TrainOptions& opts = {});

// Episodic evaluation: per episode, adapt a clone on the support set
// (eval_inner_iterations steps) and predict the query batch, with batch
// statistics (EvalTransduction) when cfg.transduction is set and running
// statistics otherwise. theta is unmodified.
EvalResult evaluate_meta(const Model& theta, const EpisodeFn& episodes, int n_episodes,
                         const MetaConfig& cfg, uint64_t seed, int workers = 1);
EvalResult evaluate_meta(const Model& theta, const std::vector<Episode>& episodes,
                         const MetaConfig& cfg, uint64_t seed, int workers = 1);

// Fraction of query rows whose argmax logit matches the label.
double query_accuracy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace mnas
