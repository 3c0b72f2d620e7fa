#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sfuda/data.hpp"
#include "sfuda/errors.hpp"
#include "sfuda/model.hpp"

#include <json.hpp>

namespace sfuda {

template <typename S>
struct Hypothesis {
    std::int64_t instance_id{0};
    int hyp_label{0};
    S posterior_value{0};
    VectorX<S> rationale;        // d'
    S centroid_distance{0};
    int rank{-1};                // assigned by rank_hypotheses
};

template <typename S>
struct RationaleCentroids {
    std::vector<VectorX<S>> centroid;  // per class; empty vector when absent
    std::vector<int> count;

    bool present(int c) const { return count[static_cast<std::size_t>(c)] > 0; }
};

struct SelectionConfig {
    int k_tilde{4};
    double tau1_pct{0.8};
    double tau2_pct{1.6};
    bool global_rank_pool{false};  // rank all hypotheses in one pool instead of per class

    void validate() const {
        if (k_tilde < 2) throw ConfigError("selection: k_tilde must be >= 2");
        if (!(tau1_pct > 0) || !(tau1_pct < tau2_pct))
            throw ConfigError("selection: require 0 < tau1_pct < tau2_pct (got tau1_pct=" +
                              std::to_string(tau1_pct) + ", tau2_pct=" + std::to_string(tau2_pct) + ")");
    }
};

struct PseudoLabelSet {
    std::map<std::int64_t, int> labeled;     // instance id -> pseudo label
    std::vector<std::int64_t> unlabeled_ids; // sorted

    double quantity_pct(int total) const {
        return 100.0 * static_cast<double>(labeled.size()) / static_cast<double>(total);
    }
};

inline int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

// Top k classes by posterior, ties broken toward the lower class index.
template <typename S>
std::vector<std::pair<int, S>> top_k_hypotheses(const VectorX<S>& posterior, int k_tilde) {
    const int c = static_cast<int>(posterior.size());
    if (k_tilde > c) throw ConfigError("top_k: k_tilde exceeds the number of classes");
    std::vector<int> idx(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return posterior(a) > posterior(b); });
    std::vector<std::pair<int, S>> out;
    for (int i = 0; i < k_tilde; ++i) out.emplace_back(idx[static_cast<std::size_t>(i)], posterior(idx[static_cast<std::size_t>(i)]));
    return out;
}

// Gradient-weighted average pooling of the feature map: each grid cell is
// weighted by the rectified inner product of its gradient and feature
// vectors, and the weighted feature vectors are averaged over the grid.
template <typename S>
VectorX<S> rationale_representation(const Tensor<S>& feature_map, const Tensor<S>& grad) {
    if (!feature_map.same_shape(grad) || feature_map.ndim() != 3)
        throw InputError("rationale: feature map and gradient must share an HxWxC shape");
    const int h = feature_map.dim(0), w = feature_map.dim(1), d = feature_map.dim(2);
    VectorX<S> out = VectorX<S>::Zero(d);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            S dot = S(0);
            for (int c = 0; c < d; ++c) dot += grad.at3(y, x, c) * feature_map.at3(y, x, c);
            if (dot > S(0))
                for (int c = 0; c < d; ++c) out(c) += dot * feature_map.at3(y, x, c);
        }
    return out / static_cast<S>(h * w);
}

// One forward pass plus k_tilde gradient evaluations per batch produce the
// k_tilde hypotheses of every instance, each with its rationale. The model
// is frozen throughout.
template <typename S>
std::vector<Hypothesis<S>> build_all_hypotheses(const Model<S>& model, const Dataset& target,
                                                int k_tilde, int batch_size = 64) {
    if (k_tilde > model.config().num_classes)
        throw ConfigError("build_all_hypotheses: k_tilde exceeds the number of classes");
    std::vector<Hypothesis<S>> out;
    out.reserve(static_cast<std::size_t>(target.size()) * static_cast<std::size_t>(k_tilde));
    for (const auto& batch : sequential_batches(target.size(), batch_size)) {
        const Tensor<S> images = gather_images<S>(target, batch);
        const auto fwd = model.forward(images);
        const int b = static_cast<int>(batch.size());

        std::vector<std::vector<std::pair<int, S>>> tops(static_cast<std::size_t>(b));
        for (int i = 0; i < b; ++i)
            tops[static_cast<std::size_t>(i)] = top_k_hypotheses(VectorX<S>(fwd.posterior.row(i).transpose()), k_tilde);

        // One gradient pass per hypothesis slot, with per-sample classes.
        std::vector<Tensor<S>> grads;
        for (int k = 0; k < k_tilde; ++k) {
            std::vector<int> classes(static_cast<std::size_t>(b));
            for (int i = 0; i < b; ++i) classes[static_cast<std::size_t>(i)] = tops[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].first;
            grads.push_back(model.logit_feature_gradient(images, classes));
        }

        for (int i = 0; i < b; ++i) {
            const Tensor<S> fm = fwd.feature_map.slice(i);
            for (int k = 0; k < k_tilde; ++k) {
                Hypothesis<S> h;
                h.instance_id = target.id(batch[static_cast<std::size_t>(i)]);
                h.hyp_label = tops[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].first;
                h.posterior_value = tops[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].second;
                h.rationale = rationale_representation(fm, grads[static_cast<std::size_t>(k)].slice(i));
                out.push_back(std::move(h));
            }
        }
    }
    return out;
}

// Mean rationale per hypothetical class.
template <typename S>
RationaleCentroids<S> class_centroids(const std::vector<Hypothesis<S>>& hypotheses, int num_classes) {
    if (hypotheses.empty()) throw InputError("class_centroids: empty hypothesis list");
    RationaleCentroids<S> out;
    out.centroid.assign(static_cast<std::size_t>(num_classes), VectorX<S>());
    out.count.assign(static_cast<std::size_t>(num_classes), 0);
    for (const auto& h : hypotheses) {
        auto& c = out.centroid[static_cast<std::size_t>(h.hyp_label)];
        if (c.size() == 0)
            c = h.rationale;
        else
            c += h.rationale;
        ++out.count[static_cast<std::size_t>(h.hyp_label)];
    }
    for (int c = 0; c < num_classes; ++c)
        if (out.count[static_cast<std::size_t>(c)] > 0)
            out.centroid[static_cast<std::size_t>(c)] /= static_cast<S>(out.count[static_cast<std::size_t>(c)]);
    return out;
}

// Ranks hypotheses by ascending distance to their class centroid. The pool
// is per class by default (rank 0 .. pool-1 within each class), or one
// global pool when configured. Ties break by (instance_id, hyp_label).
template <typename S>
void rank_hypotheses(std::vector<Hypothesis<S>>& hypotheses, const RationaleCentroids<S>& centroids,
                     bool global_pool = false) {
    for (auto& h : hypotheses) {
        if (!centroids.present(h.hyp_label))
            throw StateError("rank_hypotheses: no centroid for class " + std::to_string(h.hyp_label));
        h.centroid_distance = static_cast<S>((h.rationale - centroids.centroid[static_cast<std::size_t>(h.hyp_label)]).norm());
    }
    auto order_key = [&](std::size_t a, std::size_t b) {
        const auto& ha = hypotheses[a];
        const auto& hb = hypotheses[b];
        if (ha.centroid_distance != hb.centroid_distance) return ha.centroid_distance < hb.centroid_distance;
        if (ha.instance_id != hb.instance_id) return ha.instance_id < hb.instance_id;
        return ha.hyp_label < hb.hyp_label;
    };
    if (global_pool) {
        std::vector<std::size_t> idx(hypotheses.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), order_key);
        for (std::size_t r = 0; r < idx.size(); ++r) hypotheses[idx[r]].rank = static_cast<int>(r);
    } else {
        std::map<int, std::vector<std::size_t>> pools;
        for (std::size_t i = 0; i < hypotheses.size(); ++i) pools[hypotheses[i].hyp_label].push_back(i);
        for (auto& [cls, pool] : pools) {
            std::sort(pool.begin(), pool.end(), order_key);
            for (std::size_t r = 0; r < pool.size(); ++r) hypotheses[pool[r]].rank = static_cast<int>(r);
        }
    }
}

// Two-threshold rule: an instance joins the pseudo-labeled set with label
// y_k' iff its hypothesis k' ranks below tau1 while every sibling
// hypothesis ranks above tau2. Thresholds are percentages of the total
// sample count, rounded half-up to absolute rank cut-offs.
template <typename S>
PseudoLabelSet select_reliable(const std::vector<Hypothesis<S>>& ranked, const SelectionConfig& cfg,
                               int total_samples) {
    cfg.validate();
    const int tau1 = round_half_up(cfg.tau1_pct / 100.0 * total_samples);
    const int tau2 = round_half_up(cfg.tau2_pct / 100.0 * total_samples);
    if (tau1 >= tau2)
        throw ConfigError("select_reliable: tau1 (" + std::to_string(tau1) +
                          ") must be below tau2 (" + std::to_string(tau2) + ") after rounding");

    std::map<std::int64_t, std::vector<const Hypothesis<S>*>> by_instance;
    for (const auto& h : ranked) {
        if (h.rank < 0) throw StateError("select_reliable: hypotheses must be ranked first");
        by_instance[h.instance_id].push_back(&h);
    }

    PseudoLabelSet out;
    for (const auto& [id, hyps] : by_instance) {
        const Hypothesis<S>* chosen = nullptr;
        for (const auto* cand : hyps) {
            if (cand->rank >= tau1) continue;
            bool conflict = false;
            for (const auto* other : hyps) {
                if (other == cand) continue;
                if (other->rank <= tau2) {
                    conflict = true;
                    break;
                }
            }
            if (!conflict) {
                chosen = cand;
                break;  // a second sub-tau1 hypothesis would have conflicted
            }
        }
        if (chosen)
            out.labeled.emplace(id, chosen->hyp_label);
        else
            out.unlabeled_ids.push_back(id);
    }
    return out;
}

// Baseline selector: per-instance top-1 pseudo-labels, per-class embedding
// centroids, then the tau1 instances closest to their centroid per class.
template <typename S>
PseudoLabelSet near_centroid_select(const Model<S>& model, const Dataset& target, double tau1_pct,
                                    int batch_size = 64) {
    const int n = target.size();
    const int tau1 = round_half_up(tau1_pct / 100.0 * n);
    const int c_num = model.config().num_classes;

    std::vector<int> top1(static_cast<std::size_t>(n));
    MatrixX<S> embeds(n, model.config().embed_dim);
    for (const auto& batch : sequential_batches(n, batch_size)) {
        const auto fwd = model.forward(gather_images<S>(target, batch));
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Eigen::Index arg = 0;
            fwd.posterior.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
            top1[static_cast<std::size_t>(batch[i])] = static_cast<int>(arg);
            embeds.row(batch[i]) = fwd.embedding.row(static_cast<Eigen::Index>(i));
        }
    }

    std::vector<VectorX<S>> centroids(static_cast<std::size_t>(c_num));
    std::vector<int> counts(static_cast<std::size_t>(c_num), 0);
    for (int i = 0; i < n; ++i) {
        auto& ctr = centroids[static_cast<std::size_t>(top1[static_cast<std::size_t>(i)])];
        if (ctr.size() == 0)
            ctr = VectorX<S>(embeds.row(i).transpose());
        else
            ctr += embeds.row(i).transpose();
        ++counts[static_cast<std::size_t>(top1[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < c_num; ++c)
        if (counts[static_cast<std::size_t>(c)] > 0) centroids[static_cast<std::size_t>(c)] /= static_cast<S>(counts[static_cast<std::size_t>(c)]);

    PseudoLabelSet out;
    std::vector<char> selected(static_cast<std::size_t>(n), 0);
    for (int c = 0; c < c_num; ++c) {
        if (counts[static_cast<std::size_t>(c)] == 0) continue;
        std::vector<std::pair<S, int>> order;
        for (int i = 0; i < n; ++i)
            if (top1[static_cast<std::size_t>(i)] == c)
                order.emplace_back(static_cast<S>((embeds.row(i).transpose() - centroids[static_cast<std::size_t>(c)]).norm()), i);
        std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return target.id(a.second) < target.id(b.second);
        });
        const int take = std::min<int>(tau1, static_cast<int>(order.size()));
        for (int k = 0; k < take; ++k) {
            const int i = order[static_cast<std::size_t>(k)].second;
            out.labeled.emplace(target.id(i), c);
            selected[static_cast<std::size_t>(i)] = 1;
        }
    }
    for (int i = 0; i < n; ++i)
        if (!selected[static_cast<std::size_t>(i)]) out.unlabeled_ids.push_back(target.id(i));
    std::sort(out.unlabeled_ids.begin(), out.unlabeled_ids.end());
    return out;
}

// Baseline selector: top-1 pseudo-labels where the posterior confidence
// exceeds the threshold.
template <typename S>
PseudoLabelSet confidence_select(const Model<S>& model, const Dataset& target, double threshold,
                                 int batch_size = 64) {
    PseudoLabelSet out;
    for (const auto& batch : sequential_batches(target.size(), batch_size)) {
        const auto fwd = model.forward(gather_images<S>(target, batch));
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Eigen::Index arg = 0;
            const S conf = fwd.posterior.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
            const std::int64_t id = target.id(batch[i]);
            if (static_cast<double>(conf) > threshold)
                out.labeled.emplace(id, static_cast<int>(arg));
            else
                out.unlabeled_ids.push_back(id);
        }
    }
    std::sort(out.unlabeled_ids.begin(), out.unlabeled_ids.end());
    return out;
}

// ---------------------------------------------------------------------------
// Consolidation pass + report file
// ---------------------------------------------------------------------------

struct ConsolidationSummary {
    int total_samples{0};
    int selected{0};
    double quantity_pct{0.0};
    std::map<int, int> per_class_counts;
    std::vector<int> absent_classes;
    int tau1{0};
    int tau2{0};
};

template <typename S>
struct ConsolidationResult {
    std::vector<Hypothesis<S>> hypotheses;  // ranked
    PseudoLabelSet pseudo;
    ConsolidationSummary summary;
};

template <typename S>
ConsolidationResult<S> consolidate(const Model<S>& model, const Dataset& target,
                                   const SelectionConfig& cfg, int batch_size = 64) {
    TrainingPhaseGuard guard;  // the consolidation pass must not read evaluation labels
    cfg.validate();
    ConsolidationResult<S> out;
    out.hypotheses = build_all_hypotheses(model, target, cfg.k_tilde, batch_size);
    const auto centroids = class_centroids(out.hypotheses, model.config().num_classes);
    rank_hypotheses(out.hypotheses, centroids, cfg.global_rank_pool);
    out.pseudo = select_reliable(out.hypotheses, cfg, target.size());

    out.summary.total_samples = target.size();
    out.summary.selected = static_cast<int>(out.pseudo.labeled.size());
    out.summary.quantity_pct = out.pseudo.quantity_pct(target.size());
    out.summary.tau1 = round_half_up(cfg.tau1_pct / 100.0 * target.size());
    out.summary.tau2 = round_half_up(cfg.tau2_pct / 100.0 * target.size());
    for (const auto& [id, label] : out.pseudo.labeled) ++out.summary.per_class_counts[label];
    for (int c = 0; c < model.config().num_classes; ++c)
        if (!centroids.present(c)) out.summary.absent_classes.push_back(c);
    return out;
}

template <typename S>
nlohmann::json consolidation_report_json(const ConsolidationResult<S>& result) {
    nlohmann::json j;
    j["summary"] = {
        {"total_samples", result.summary.total_samples},
        {"selected", result.summary.selected},
        {"quantity_pct", result.summary.quantity_pct},
        {"tau1", result.summary.tau1},
        {"tau2", result.summary.tau2},
        {"absent_classes", result.summary.absent_classes},
    };
    auto pc = nlohmann::json::object();
    for (const auto& [cls, cnt] : result.summary.per_class_counts) pc[std::to_string(cls)] = cnt;
    j["summary"]["per_class_counts"] = pc;

    std::map<std::int64_t, nlohmann::json> rows;
    for (const auto& h : result.hypotheses) {
        auto& row = rows[h.instance_id];
        if (row.is_null()) {
            row["id"] = h.instance_id;
            row["labels"] = nlohmann::json::array();
            row["posteriors"] = nlohmann::json::array();
            row["distances"] = nlohmann::json::array();
            row["ranks"] = nlohmann::json::array();
        }
        row["labels"].push_back(h.hyp_label);
        row["posteriors"].push_back(static_cast<double>(h.posterior_value));
        row["distances"].push_back(static_cast<double>(h.centroid_distance));
        row["ranks"].push_back(h.rank);
    }
    for (auto& [id, row] : rows) {
        const auto it = result.pseudo.labeled.find(id);
        row["selected"] = it != result.pseudo.labeled.end();
        if (it != result.pseudo.labeled.end()) row["selected_label"] = it->second;
    }
    auto arr = nlohmann::json::array();
    for (auto& [id, row] : rows) arr.push_back(std::move(row));
    j["instances"] = std::move(arr);
    return j;
}

inline void write_consolidation_report(const nlohmann::json& j, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("consolidation report: cannot write " + path);
    os << j.dump(2) << "\n";
}

// Rebuilds the pseudo-label partition from a report file; this is the input
// contract for the SSL stage and the analyzer.
inline PseudoLabelSet pseudo_set_from_report(const nlohmann::json& j) {
    PseudoLabelSet out;
    for (const auto& row : j.at("instances")) {
        const std::int64_t id = row.at("id").get<std::int64_t>();
        if (row.at("selected").get<bool>())
            out.labeled.emplace(id, row.at("selected_label").get<int>());
        else
            out.unlabeled_ids.push_back(id);
    }
    std::sort(out.unlabeled_ids.begin(), out.unlabeled_ids.end());
    return out;
}

}  // namespace sfuda
