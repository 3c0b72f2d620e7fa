#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "sfuda/data.hpp"
#include "sfuda/losses.hpp"
#include "sfuda/memory_queue.hpp"
#include "sfuda/model.hpp"
#include "sfuda/optimizer.hpp"

namespace sfuda {

struct PreAdaptConfig {
    int z{3};
    double lambda0{1.0};
    int batch_size{64};
    int epochs{0};          // K1 expressed in epochs
    int queue_capacity{0};  // 0 -> min(dataset size, 4096)
    OptimizerConfig opt{};

    void validate() const {
        if (z < 1) throw ConfigError("pre_adapt: z must be >= 1");
        if (epochs < 0) throw ConfigError("pre_adapt: epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("pre_adapt: batch_size must be >= 1");
        if (lambda0 < 0) throw ConfigError("pre_adapt: lambda0 must be >= 0");
    }

    int effective_queue_capacity(int dataset_size) const {
        const int cap = queue_capacity > 0 ? queue_capacity : std::min(dataset_size, 4096);
        if (cap < 2 * z)
            throw ConfigError("pre_adapt: queue capacity " + std::to_string(cap) +
                              " is below 2*z = " + std::to_string(2 * z));
        return cap;
    }
};

struct PreAdaptEpochStats {
    int epoch{0};
    double mean_smoothness{0.0};
    double mean_far{0.0};
    double lambda{0.0};
    double marginal_entropy{0.0};
    double accuracy{-1.0};  // -1 when no evaluation labels are available
};

// Fills the queue from evaluation-mode forward passes over randomly drawn
// target samples.
template <typename S>
void warm_up_queue(const Model<S>& model, const Dataset& target, MemoryQueue<S>& queue,
                   Rng& rng, int batch_size = 64) {
    TrainingPhaseGuard guard;
    std::vector<int> perm = rng.permutation(target.size());
    const int want = std::min(queue.capacity(), target.size());
    perm.resize(static_cast<std::size_t>(want));
    for (int start = 0; start < want; start += batch_size) {
        const int end = std::min(want, start + batch_size);
        std::vector<int> idx(perm.begin() + start, perm.begin() + end);
        const auto out = model.forward(gather_images<S>(target, idx));
        queue.push_batch(out.embedding, out.posterior);
    }
}

// One optimization epoch of the smoothness + furthest-neighbor objective.
// Per batch: forward, per-sample neighbor lookup against the queue snapshot,
// loss, one optimizer step, then the fresh batch outputs replace the oldest
// queue entries. `iter`/`max_iter` drive the lambda schedule across epochs.
template <typename S>
PreAdaptEpochStats pre_adapt_epoch(Model<S>& model, SgdOptimizer<S>& optimizer,
                                   const Dataset& target, MemoryQueue<S>& queue,
                                   const PreAdaptConfig& cfg, Rng& rng, int& iter, int max_iter) {
    TrainingPhaseGuard guard;
    PreAdaptEpochStats stats;
    const auto batches = epoch_batches(target.size(), cfg.batch_size, rng, true);
    double sm_sum = 0.0, far_sum = 0.0, lambda_last = lambda_schedule(std::min(iter, max_iter), max_iter, cfg.lambda0);
    std::int64_t sample_count = 0;
    VectorX<double> marginal = VectorX<double>::Zero(model.config().num_classes);

    for (const auto& batch : batches) {
        const double lambda = lambda_schedule(std::min(iter, max_iter), max_iter, cfg.lambda0);
        lambda_last = lambda;
        typename Model<S>::TrainCache cache;
        const Tensor<S> images = gather_images<S>(target, batch);
        const auto out = model.forward_train(images, cache);

        const int b = static_cast<int>(batch.size());
        MatrixX<S> dlogits = MatrixX<S>::Zero(b, model.config().num_classes);
        for (int i = 0; i < b; ++i) {
            const VectorX<S> p = out.posterior.row(i).transpose();
            const NeighborSet nb = find_neighbors(VectorX<S>(out.embedding.row(i).transpose()), queue, cfg.z);
            std::vector<VectorX<S>> nn_posts, fn_posts;
            for (int s : nb.nn_indices) nn_posts.push_back(queue.posterior(s));
            for (int s : nb.fn_indices) fn_posts.push_back(queue.posterior(s));

            const S l_sm = smoothness_loss(p, nn_posts);
            const S l_far = far_loss(p, fn_posts);
            if (!std::isfinite(static_cast<double>(l_sm)) || !std::isfinite(static_cast<double>(l_far)))
                throw NumericError("pre_adapt: non-finite loss");
            sm_sum += static_cast<double>(l_sm);
            far_sum += static_cast<double>(l_far);

            VectorX<S> d = smoothness_loss_dlogits(p, nn_posts);
            if (lambda != 0.0) d += static_cast<S>(lambda) * far_loss_dlogits(p, fn_posts);
            dlogits.row(i) = d.transpose();

            for (Eigen::Index c = 0; c < p.size(); ++c) marginal(c) += static_cast<double>(p(c));
        }
        sample_count += b;

        model.zero_grad();
        model.backward(dlogits, cache);
        optimizer.step();
        queue.push_batch(out.embedding, out.posterior);
        ++iter;
    }

    stats.mean_smoothness = sample_count ? sm_sum / static_cast<double>(sample_count) : 0.0;
    stats.mean_far = sample_count ? far_sum / static_cast<double>(sample_count) : 0.0;
    stats.lambda = lambda_last;
    if (sample_count) {
        marginal /= static_cast<double>(sample_count);
        stats.marginal_entropy = entropy(VectorX<double>(marginal));
    }
    return stats;
}

// Runs K1 epochs; `eval_fn` (optional) is invoked after each epoch outside
// the training guard so reported accuracy can use evaluation labels.
template <typename S>
std::vector<PreAdaptEpochStats> pre_adapt_run(Model<S>& model, SgdOptimizer<S>& optimizer,
                                              const Dataset& target, MemoryQueue<S>& queue,
                                              const PreAdaptConfig& cfg, Rng& rng,
                                              const std::function<double()>& eval_fn = {}) {
    cfg.validate();
    std::vector<PreAdaptEpochStats> history;
    if (cfg.epochs == 0) return history;
    if (cfg.batch_size > target.size())
        throw ConfigError("pre_adapt: batch_size exceeds target dataset size");
    const int steps_per_epoch = target.size() / cfg.batch_size;  // drop_last batching
    const int max_iter = std::max(1, cfg.epochs * steps_per_epoch);
    int iter = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
        PreAdaptEpochStats stats = pre_adapt_epoch(model, optimizer, target, queue, cfg, rng, iter, max_iter);
        stats.epoch = e;
        if (eval_fn) stats.accuracy = eval_fn();
        history.push_back(stats);
    }
    return history;
}

}  // namespace sfuda
