#include "mnas/meta.hpp"

#include <chrono>
#include <cmath>

#include "mnas/parallel.hpp"
#include "mnas/rng.hpp"

namespace mnas {

void MetaConfig::validate() const {
    if (inner_iterations < 0 || inner_batch < 1 || meta_batch < 1 || outer_iterations < 0 ||
        eval_inner_iterations < 0) {
        throw std::invalid_argument("meta config: counts must be positive");
    }
    if (!(outer_step > 0.0) || outer_step > 1.0) {
        throw std::invalid_argument("meta config: outer step must be in (0, 1]");
    }
    if (!(inner_lr > 0.0)) {
        throw std::invalid_argument("meta config: inner learning rate must be positive");
    }
}

namespace {

Tensor gather_images(const Tensor& images, const std::vector<int>& idx) {
    const auto& shape = images.shape();
    const size_t row = images.numel() / static_cast<size_t>(shape[0]);
    std::vector<double> data;
    data.reserve(idx.size() * row);
    for (int i : idx) {
        const double* src = images.data().data() + static_cast<size_t>(i) * row;
        data.insert(data.end(), src, src + row);
    }
    return Tensor::from_data({static_cast<int>(idx.size()), shape[1], shape[2], shape[3]},
                             std::move(data));
}

}  // namespace

Model inner_adapt(const Model& theta, const Episode& episode, const MetaConfig& cfg,
                  uint64_t seed, bool eval_time) {
    const int support = episode.support_x.defined() ? episode.support_x.dim(0) : 0;
    if (support == 0) {
        throw std::invalid_argument("inner_adapt: empty support set");
    }
    Model model = theta.clone();
    const int iterations = eval_time ? cfg.eval_inner_iterations : cfg.inner_iterations;
    if (iterations == 0) {
        return model;
    }

    OptimState opt = cfg.inner_opt == OptKind::Adam ? OptimState::adam(cfg.inner_lr)
                                                    : OptimState::sgd(cfg.inner_lr);
    const int batch = std::min(cfg.inner_batch, support);
    const bool full_batch = batch == support;
    Rng rng(seed);

    std::vector<int> idx(static_cast<size_t>(batch));
    for (int step = 0; step < iterations; ++step) {
        std::vector<int> labels(static_cast<size_t>(batch));
        if (full_batch) {
            for (int i = 0; i < batch; ++i) {
                idx[static_cast<size_t>(i)] = i;
            }
        } else {
            for (int i = 0; i < batch; ++i) {
                idx[static_cast<size_t>(i)] = rng.uniform_int(support);
            }
        }
        for (int i = 0; i < batch; ++i) {
            labels[static_cast<size_t>(i)] =
                episode.support_y[static_cast<size_t>(idx[static_cast<size_t>(i)])];
        }
        Tensor x = full_batch ? episode.support_x : gather_images(episode.support_x, idx);
        Tape tape;
        Tensor logits = model.forward(x, Mode::Train, &tape);
        Tensor loss = ops::softmax_xent(logits, labels, &tape);
        GradMap grads = tape.backward(loss);
        std::vector<Tensor> aligned = model.grads_for_params(grads);
        opt.step(model.params, aligned);
    }
    return model;
}

void reptile_outer_step(Model& theta, const std::vector<Episode>& tasks, const MetaConfig& cfg,
                        double eps, uint64_t seed, int workers) {
    if (tasks.empty()) {
        throw std::invalid_argument("reptile_outer_step: no tasks");
    }
    std::vector<Model> adapted(tasks.size());
    parallel_for(static_cast<int>(tasks.size()), workers, [&](int j) {
        adapted[static_cast<size_t>(j)] = inner_adapt(
            theta, tasks[static_cast<size_t>(j)], cfg, hash_mix(seed, static_cast<uint64_t>(j)));
    });

    const double inv = 1.0 / static_cast<double>(tasks.size());
    // fixed j-order reduction keeps the update identical for any worker count
    for (size_t p = 0; p < theta.params.size(); ++p) {
        auto& dst = theta.params[p].data();
        for (size_t k = 0; k < dst.size(); ++k) {
            double mean = 0.0;
            for (const Model& phi : adapted) {
                mean += phi.params[p].data()[k];
            }
            mean *= inv;
            dst[k] += eps * (mean - dst[k]);
        }
    }
    for (size_t s = 0; s < theta.bn_states.size(); ++s) {
        auto& mean_dst = theta.bn_states[s].mean;
        auto& var_dst = theta.bn_states[s].var;
        for (size_t k = 0; k < mean_dst.size(); ++k) {
            double m = 0.0, v = 0.0;
            for (const Model& phi : adapted) {
                m += phi.bn_states[s].mean[k];
                v += phi.bn_states[s].var[k];
            }
            m *= inv;
            v *= inv;
            mean_dst[k] += eps * (m - mean_dst[k]);
            var_dst[k] += eps * (v - var_dst[k]);
        }
    }
}

std::vector<TraceRow> reptile_train(Model& theta, const EpisodeFn& train_episodes,
                                    const EpisodeFn& eval_episodes, const MetaConfig& cfg,
                                    uint64_t seed, const TrainOptions& opts) {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    };
    std::vector<TraceRow> trace;
    auto record = [&](int iter) {
        EvalResult r = evaluate_meta(theta, eval_episodes, opts.trace_episodes, cfg,
                                     hash_str(seed, "trace"), opts.workers);
        trace.push_back({iter, r.mean_accuracy, r.ci95, elapsed()});
    };

    const uint64_t step_seed = hash_str(seed, "outer");
    for (int t = 0; t < cfg.outer_iterations; ++t) {
        const double eps =
            cfg.anneal == Anneal::Linear
                ? cfg.outer_step * (1.0 - static_cast<double>(t) / cfg.outer_iterations)
                : cfg.outer_step;
        std::vector<Episode> tasks;
        tasks.reserve(static_cast<size_t>(cfg.meta_batch));
        for (int j = 0; j < cfg.meta_batch; ++j) {
            tasks.push_back(train_episodes(static_cast<uint64_t>(t) * cfg.meta_batch + j));
        }
        reptile_outer_step(theta, tasks, cfg, eps, hash_mix(step_seed, static_cast<uint64_t>(t)),
                           opts.workers);
        if (opts.trace_interval > 0 && opts.trace_episodes > 0 && (t + 1) % opts.trace_interval == 0 &&
            t + 1 < cfg.outer_iterations) {
            record(t + 1);
        }
    }
    if (opts.trace_episodes > 0) {
        record(cfg.outer_iterations);
    }
    return trace;
}

double query_accuracy(const Tensor& logits, const std::vector<int>& labels) {
    const int rows = logits.dim(0), classes = logits.dim(1);
    int correct = 0;
    for (int r = 0; r < rows; ++r) {
        const double* row = logits.data().data() + static_cast<size_t>(r) * classes;
        int best = 0;
        for (int c = 1; c < classes; ++c) {
            if (row[c] > row[best]) {
                best = c;
            }
        }
        if (best == labels[static_cast<size_t>(r)]) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / rows;
}

EvalResult evaluate_meta(const Model& theta, const EpisodeFn& episodes, int n_episodes,
                         const MetaConfig& cfg, uint64_t seed, int workers) {
    if (n_episodes < 1) {
        throw std::invalid_argument("evaluate_meta: need at least one episode");
    }
    std::vector<double> acc(static_cast<size_t>(n_episodes));
    const uint64_t adapt_seed = hash_str(seed, "eval-adapt");
    parallel_for(n_episodes, workers, [&](int i) {
        const Episode ep = episodes(static_cast<uint64_t>(i));
        Model adapted = inner_adapt(theta, ep, cfg, hash_mix(adapt_seed, static_cast<uint64_t>(i)),
                                    /*eval_time=*/true);
        const Mode mode = cfg.transduction ? Mode::EvalTransduction : Mode::EvalRunning;
        Tensor logits = adapted.forward(ep.query_x, mode, nullptr);
        acc[static_cast<size_t>(i)] = query_accuracy(logits, ep.query_y);
    });

    double mean = 0.0;
    for (double a : acc) {
        mean += a;
    }
    mean /= n_episodes;
    double sd = 0.0;
    if (n_episodes > 1) {
        double ss = 0.0;
        for (double a : acc) {
            ss += (a - mean) * (a - mean);
        }
        sd = std::sqrt(ss / (n_episodes - 1));
    }
    return {mean, 1.96 * sd / std::sqrt(static_cast<double>(n_episodes)), n_episodes};
}

EvalResult evaluate_meta(const Model& theta, const std::vector<Episode>& episodes,
                         const MetaConfig& cfg, uint64_t seed, int workers) {
    return evaluate_meta(
        theta, [&](uint64_t i) { return episodes[static_cast<size_t>(i)]; },
        static_cast<int>(episodes.size()), cfg, seed, workers);
}

}  // namespace mnas
