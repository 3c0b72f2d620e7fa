#pragma once

#include <vector>

#include "sfuda/consolidation.hpp"
#include "sfuda/data.hpp"
#include "sfuda/model.hpp"

namespace sfuda {

struct EvalResult {
    double accuracy{0.0};             // overall top-1, percent
    double per_class_average{0.0};    // mean of per-class top-1, percent
    std::vector<double> per_class;    // percent per class
    std::vector<int> class_totals;
};

// Top-1 accuracy with per-class breakdown. Reads evaluation labels, so it
// must run outside any training phase.
template <typename S>
EvalResult evaluate(const Model<S>& model, const Dataset& dataset, int batch_size = 128) {
    const int c_num = model.config().num_classes;
    EvalResult out;
    out.per_class.assign(static_cast<std::size_t>(c_num), 0.0);
    out.class_totals.assign(static_cast<std::size_t>(c_num), 0);
    std::vector<int> correct(static_cast<std::size_t>(c_num), 0);

    int total_correct = 0;
    for (const auto& batch : sequential_batches(dataset.size(), batch_size)) {
        const auto fwd = model.forward(gather_images<S>(dataset, batch));
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Eigen::Index arg = 0;
            fwd.posterior.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
            const int truth = dataset.eval_only_labels() ? dataset.eval_label(batch[i])
                                                         : dataset.training_label(batch[i]);
            if (truth < 0 || truth >= c_num) throw InputError("evaluate: label out of range");
            ++out.class_totals[static_cast<std::size_t>(truth)];
            if (static_cast<int>(arg) == truth) {
                ++correct[static_cast<std::size_t>(truth)];
                ++total_correct;
            }
        }
    }
    out.accuracy = 100.0 * static_cast<double>(total_correct) / static_cast<double>(dataset.size());
    int present = 0;
    double sum = 0.0;
    for (int c = 0; c < c_num; ++c) {
        if (out.class_totals[static_cast<std::size_t>(c)] > 0) {
            out.per_class[static_cast<std::size_t>(c)] =
                100.0 * static_cast<double>(correct[static_cast<std::size_t>(c)]) /
                static_cast<double>(out.class_totals[static_cast<std::size_t>(c)]);
            sum += out.per_class[static_cast<std::size_t>(c)];
            ++present;
        }
    }
    out.per_class_average = present ? sum / static_cast<double>(present) : 0.0;
    return out;
}

// Precision of a pseudo-label set against evaluation labels (quality %),
// plus its quantity %.
struct PseudoQuality {
    double quantity_pct{0.0};
    double quality_pct{0.0};
    int selected{0};
    int correct{0};
};

inline PseudoQuality pseudo_quality(const PseudoLabelSet& pseudo, const Dataset& target) {
    PseudoQuality out;
    out.selected = static_cast<int>(pseudo.labeled.size());
    for (const auto& [id, label] : pseudo.labeled)
        if (target.eval_label(target.index_of(id)) == label) ++out.correct;
    out.quantity_pct = 100.0 * static_cast<double>(out.selected) / static_cast<double>(target.size());
    out.quality_pct = out.selected ? 100.0 * static_cast<double>(out.correct) / static_cast<double>(out.selected) : 0.0;
    return out;
}

}  // namespace sfuda
