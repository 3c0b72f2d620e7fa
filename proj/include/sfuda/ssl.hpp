#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "sfuda/augment.hpp"
#include "sfuda/consolidation.hpp"
#include "sfuda/data.hpp"
#include "sfuda/losses.hpp"
#include "sfuda/model.hpp"
#include "sfuda/optimizer.hpp"

namespace sfuda {

struct SSLConfig {
    int labeled_batch{64};
    int unlabeled_batch{64};
    double confidence_tau{0.95};
    int epochs{0};  // K2 in epochs of the unlabeled set
    OptimizerConfig opt{};
    AugmentationPolicy weak_policy{AugmentationPolicy::weak()};
    AugmentationPolicy strong_policy{AugmentationPolicy::strong()};

    void validate() const {
        if (labeled_batch < 1 || unlabeled_batch < 1)
            throw ConfigError("ssl: batch sizes must be >= 1");
        if (!(confidence_tau > 0.0) || !(confidence_tau < 1.0))
            throw ConfigError("ssl: confidence_tau must lie in (0, 1)");
        if (epochs < 0) throw ConfigError("ssl: epochs must be >= 0");
    }
};

// Pre-augmented views for one step. Weak and strong views of the same image
// are drawn from separate rng streams.
template <typename S>
struct FixmatchBatch {
    Tensor<S> labeled_weak;     // Bl x H x W x C
    std::vector<int> labels;    // Bl pseudo-labels
    Tensor<S> unlabeled_weak;   // Bu x ...
    Tensor<S> unlabeled_strong; // Bu x ...
    bool has_unlabeled{false};
};

template <typename S>
struct FixmatchStats {
    S supervised_loss{0};
    S unsupervised_loss{0};
    double mask_rate{0.0};
    int masked_in{0};  // unlabeled examples that passed the confidence gate
};

namespace ssl_detail {

// Weak-view pseudo-targets for the unlabeled batch: argmax class and
// whether the max confidence clears tau. Evaluation-mode pass; the targets
// are constants with no gradient path.
template <typename S>
void weak_view_targets(const Model<S>& model, const Tensor<S>& unlabeled_weak, double tau,
                       std::vector<int>& targets, std::vector<char>& pass) {
    const auto fwd = model.forward(unlabeled_weak);
    const int b = unlabeled_weak.dim(0);
    targets.resize(static_cast<std::size_t>(b));
    pass.resize(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
        Eigen::Index arg = 0;
        const S conf = fwd.posterior.row(i).maxCoeff(&arg);
        targets[static_cast<std::size_t>(i)] = static_cast<int>(arg);
        pass[static_cast<std::size_t>(i)] = static_cast<double>(conf) >= tau ? 1 : 0;
    }
}

}  // namespace ssl_detail

// Loss of one batch without an optimizer step. Supervised term: summed
// cross-entropy of the weak labeled views against their pseudo-labels.
// Unsupervised term: summed cross-entropy of the strong views against
// weak-view argmax targets, restricted to examples whose weak-view
// confidence clears tau. Below-threshold examples contribute nothing and
// are excluded from the gradient batch entirely, so they cannot leak in
// through batch statistics either.
template <typename S>
FixmatchStats<S> fixmatch_loss(const Model<S>& model, const FixmatchBatch<S>& batch, double tau) {
    if (batch.labeled_weak.dim(0) < 1) throw StateError("fixmatch: empty labeled batch");
    FixmatchStats<S> stats;

    const auto lab = model.forward(batch.labeled_weak);
    for (int i = 0; i < batch.labeled_weak.dim(0); ++i)
        stats.supervised_loss += cross_entropy(VectorX<S>(lab.posterior.row(i).transpose()),
                                               batch.labels[static_cast<std::size_t>(i)]);

    if (batch.has_unlabeled && batch.unlabeled_weak.dim(0) > 0) {
        std::vector<int> targets;
        std::vector<char> pass;
        ssl_detail::weak_view_targets(model, batch.unlabeled_weak, tau, targets, pass);
        const auto strong = model.forward(batch.unlabeled_strong);
        int passed = 0;
        for (int i = 0; i < batch.unlabeled_weak.dim(0); ++i) {
            if (!pass[static_cast<std::size_t>(i)]) continue;
            ++passed;
            stats.unsupervised_loss += cross_entropy(VectorX<S>(strong.posterior.row(i).transpose()),
                                                     targets[static_cast<std::size_t>(i)]);
        }
        stats.masked_in = passed;
        stats.mask_rate = static_cast<double>(passed) / static_cast<double>(batch.unlabeled_weak.dim(0));
    }
    if (!std::isfinite(static_cast<double>(stats.supervised_loss)) ||
        !std::isfinite(static_cast<double>(stats.unsupervised_loss)))
        throw NumericError("fixmatch: non-finite loss");
    return stats;
}

// One optimizer step. The gradient batch concatenates the labeled weak
// views with the passing strong views and runs a single training-mode
// forward so batch statistics see exactly the examples that carry loss.
template <typename S>
FixmatchStats<S> fixmatch_step(Model<S>& model, SgdOptimizer<S>& optimizer,
                               const FixmatchBatch<S>& batch, double tau) {
    if (batch.labeled_weak.dim(0) < 1) throw StateError("fixmatch: empty labeled batch");
    FixmatchStats<S> stats;
    const int bl = batch.labeled_weak.dim(0);
    const int c_num = static_cast<int>(model.config().num_classes);

    std::vector<int> targets;
    std::vector<char> pass;
    std::vector<int> passing;
    if (batch.has_unlabeled && batch.unlabeled_weak.dim(0) > 0) {
        ssl_detail::weak_view_targets(model, batch.unlabeled_weak, tau, targets, pass);
        for (int i = 0; i < batch.unlabeled_weak.dim(0); ++i)
            if (pass[static_cast<std::size_t>(i)]) passing.push_back(i);
        stats.masked_in = static_cast<int>(passing.size());
        stats.mask_rate = static_cast<double>(passing.size()) / static_cast<double>(batch.unlabeled_weak.dim(0));
    }

    // Assemble the gradient batch.
    std::vector<Tensor<S>> items;
    items.reserve(static_cast<std::size_t>(bl) + passing.size());
    for (int i = 0; i < bl; ++i) items.push_back(batch.labeled_weak.slice(i));
    for (int i : passing) items.push_back(batch.unlabeled_strong.slice(i));
    const Tensor<S> grad_batch = stack(items);

    typename Model<S>::TrainCache cache;
    const auto out = model.forward_train(grad_batch, cache);
    MatrixX<S> dlogits = MatrixX<S>::Zero(grad_batch.dim(0), c_num);
    for (int i = 0; i < bl; ++i) {
        const VectorX<S> p = out.posterior.row(i).transpose();
        stats.supervised_loss += cross_entropy(p, batch.labels[static_cast<std::size_t>(i)]);
        dlogits.row(i) = cross_entropy_dlogits(p, batch.labels[static_cast<std::size_t>(i)]).transpose();
    }
    for (std::size_t k = 0; k < passing.size(); ++k) {
        const int row = bl + static_cast<int>(k);
        const VectorX<S> p = out.posterior.row(row).transpose();
        const int t = targets[static_cast<std::size_t>(passing[k])];
        stats.unsupervised_loss += cross_entropy(p, t);
        dlogits.row(row) = cross_entropy_dlogits(p, t).transpose();
    }
    if (!std::isfinite(static_cast<double>(stats.supervised_loss)) ||
        !std::isfinite(static_cast<double>(stats.unsupervised_loss)))
        throw NumericError("fixmatch: non-finite loss");

    model.zero_grad();
    model.backward(dlogits, cache);
    optimizer.step();
    return stats;
}

struct SSLStepRecord {
    int step{0};
    double supervised_loss{0.0};
    double unsupervised_loss{0.0};
    double mask_rate{0.0};
    double accuracy{-1.0};  // filled on epoch boundaries when labels exist
};

// Builds the augmented views of one step.
template <typename S>
FixmatchBatch<S> make_fixmatch_batch(const Dataset& target, const std::vector<int>& labeled_idx,
                                     const std::vector<int>& labels, const std::vector<int>& unlabeled_idx,
                                     const SSLConfig& cfg, Rng& weak_rng, Rng& strong_rng) {
    FixmatchBatch<S> out;
    std::vector<Tensor<S>> lw;
    for (int i : labeled_idx)
        lw.push_back(weak_augment(target.image(i), weak_rng, cfg.weak_policy).template cast<S>());
    out.labeled_weak = stack(lw);
    out.labels = labels;
    if (!unlabeled_idx.empty()) {
        std::vector<Tensor<S>> uw, us;
        for (int i : unlabeled_idx) {
            uw.push_back(weak_augment(target.image(i), weak_rng, cfg.weak_policy).template cast<S>());
            us.push_back(strong_augment(target.image(i), strong_rng, cfg.strong_policy).template cast<S>());
        }
        out.unlabeled_weak = stack(uw);
        out.unlabeled_strong = stack(us);
        out.has_unlabeled = true;
    }
    return out;
}

// K2 epochs of FixMatch over the pseudo-labeled partition. Labeled batches
// are drawn with replacement when the pseudo-labeled set is smaller than a
// batch; unlabeled batches iterate seeded epoch permutations of the
// unlabeled ids.
template <typename S>
std::vector<SSLStepRecord> ssl_train(Model<S>& model, SgdOptimizer<S>& optimizer,
                                     const PseudoLabelSet& pseudo, const Dataset& target,
                                     const SSLConfig& cfg, Rng& rng,
                                     const std::function<double()>& eval_fn = {}) {
    cfg.validate();
    if (pseudo.labeled.empty())
        throw StateError("ssl: the pseudo-labeled set is empty; selection thresholds are too strict "
                         "to provide any supervision");

    std::vector<int> lab_indices;
    std::vector<int> lab_labels;
    for (const auto& [id, label] : pseudo.labeled) {
        lab_indices.push_back(target.index_of(id));
        lab_labels.push_back(label);
    }
    std::vector<int> unl_indices;
    for (std::int64_t id : pseudo.unlabeled_ids) unl_indices.push_back(target.index_of(id));

    Rng weak_rng = rng.split(1);
    Rng strong_rng = rng.split(2);

    std::vector<SSLStepRecord> history;
    if (cfg.epochs == 0) return history;

    const int steps_per_epoch = unl_indices.empty()
        ? std::max(1, static_cast<int>(lab_indices.size()) / cfg.labeled_batch)
        : std::max(1, static_cast<int>(unl_indices.size()) / cfg.unlabeled_batch);

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> unl_perm = unl_indices;
        rng.shuffle(unl_perm);
        for (int s = 0; s < steps_per_epoch; ++s) {
            std::vector<int> bl_idx, bl_lab;
            if (static_cast<int>(lab_indices.size()) >= cfg.labeled_batch) {
                std::vector<int> order = rng.permutation(static_cast<int>(lab_indices.size()));
                for (int k = 0; k < cfg.labeled_batch; ++k) {
                    bl_idx.push_back(lab_indices[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]);
                    bl_lab.push_back(lab_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]);
                }
            } else {
                for (int k = 0; k < cfg.labeled_batch; ++k) {
                    const int pick = static_cast<int>(rng.below(lab_indices.size()));
                    bl_idx.push_back(lab_indices[static_cast<std::size_t>(pick)]);
                    bl_lab.push_back(lab_labels[static_cast<std::size_t>(pick)]);
                }
            }
            std::vector<int> bu_idx;
            if (!unl_perm.empty()) {
                for (int k = 0; k < cfg.unlabeled_batch; ++k)
                    bu_idx.push_back(unl_perm[static_cast<std::size_t>((s * cfg.unlabeled_batch + k) % unl_perm.size())]);
            }

            SSLStepRecord rec;
            rec.step = step;
            {
                TrainingPhaseGuard guard;
                const auto batch = make_fixmatch_batch<S>(target, bl_idx, bl_lab, bu_idx, cfg,
                                                          weak_rng, strong_rng);
                const auto stats = fixmatch_step(model, optimizer, batch, cfg.confidence_tau);
                rec.supervised_loss = static_cast<double>(stats.supervised_loss);
                rec.unsupervised_loss = static_cast<double>(stats.unsupervised_loss);
                rec.mask_rate = stats.mask_rate;
            }
            if (eval_fn && s == steps_per_epoch - 1) rec.accuracy = eval_fn();
            history.push_back(rec);
            ++step;
        }
    }
    return history;
}

}  // namespace sfuda
