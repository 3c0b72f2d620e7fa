#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sfuda/checkpoint.hpp"
#include "sfuda/config.hpp"
#include "sfuda/consolidation.hpp"
#include "sfuda/csv.hpp"
#include "sfuda/data.hpp"
#include "sfuda/evaluate.hpp"
#include "sfuda/pre_adapt.hpp"
#include "sfuda/ssl.hpp"
#include "sfuda/svg_plot.hpp"
#include "sfuda/version.hpp"

namespace sfuda {

// Stage-tagged failure so the CLI can report which pipeline stage aborted.
struct StageError : std::runtime_error {
    StageError(std::string stage_name, const std::string& msg)
        : std::runtime_error("stage '" + stage_name + "' failed: " + msg), stage(std::move(stage_name)) {}
    std::string stage;
};

template <typename F>
auto run_stage(const std::string& name, F&& f) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

// Minimal supervised trainer producing the pre-trained source model the
// adaptation pipeline starts from. Mean cross-entropy per batch.
template <typename S>
std::vector<double> train_source_model(Model<S>& model, const Dataset& source,
                                       const SourceModelConfig& cfg, Rng& rng) {
    if (source.eval_only_labels())
        throw ConfigError("source training requires a trainable-label dataset");
    if (cfg.epochs < 0) throw ConfigError("source_model.epochs must be >= 0");
    SgdOptimizer<S> optimizer(model.parameters(), cfg.opt);
    std::vector<double> epoch_losses;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::int64_t count = 0;
        for (const auto& batch :
             epoch_batches(source.size(), std::min(cfg.batch_size, source.size()), rng, true)) {
            typename Model<S>::TrainCache cache;
            const auto out = model.forward_train(gather_images<S>(source, batch), cache);
            const int b = static_cast<int>(batch.size());
            MatrixX<S> dlogits = MatrixX<S>::Zero(b, model.config().num_classes);
            for (int i = 0; i < b; ++i) {
                const int y = source.training_label(batch[static_cast<std::size_t>(i)]);
                const VectorX<S> p = out.posterior.row(i).transpose();
                loss_sum += static_cast<double>(cross_entropy(p, y));
                dlogits.row(i) = (cross_entropy_dlogits(p, y) / static_cast<S>(b)).transpose();
            }
            count += b;
            if (!std::isfinite(loss_sum)) throw NumericError("source training diverged");
            model.zero_grad();
            model.backward(dlogits, cache);
            optimizer.step();
        }
        epoch_losses.push_back(count ? loss_sum / static_cast<double>(count) : 0.0);
    }
    return epoch_losses;
}

struct PseudoHistoryPoint {
    double epoch{0.0};
    double quantity_pct{0.0};
    double quality_pct{0.0};
};

struct RunReport {
    std::string version;
    nlohmann::json config_echo;
    double source_only_accuracy{-1.0};
    double post_pa_accuracy{-1.0};
    int pseudo_selected{0};
    double pseudo_quantity_pct{0.0};
    double pseudo_quality_pct{-1.0};  // -1 when no evaluation labels
    double final_accuracy{-1.0};
    std::vector<PreAdaptEpochStats> pa_history;
    std::vector<SSLStepRecord> ssl_history;
    std::vector<PseudoHistoryPoint> pseudo_history;

    nlohmann::json to_json(bool with_timestamp = true) const {
        nlohmann::json j;
        j["version"] = version;
        if (with_timestamp) j["generated_at"] = current_timestamp();
        j["config"] = config_echo;
        j["source_only_accuracy"] = source_only_accuracy;
        j["post_pa_accuracy"] = post_pa_accuracy;
        j["pseudo_labels"] = {{"selected", pseudo_selected},
                              {"quantity_pct", pseudo_quantity_pct},
                              {"quality_pct", pseudo_quality_pct}};
        j["final_accuracy"] = final_accuracy;
        return j;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "adaptation run (library version " << version << ")\n";
        os << "  source-only target accuracy : " << source_only_accuracy << "%\n";
        os << "  post-pre-adaptation accuracy: " << post_pa_accuracy << "%\n";
        os << "  pseudo-labels selected      : " << pseudo_selected << " (quantity "
           << pseudo_quantity_pct << "%";
        if (pseudo_quality_pct >= 0) os << ", quality " << pseudo_quality_pct << "%";
        os << ")\n";
        os << "  final target accuracy       : " << final_accuracy << "%\n";
        return os.str();
    }

    static std::string current_timestamp() {
        const auto now = std::chrono::system_clock::now();
        const auto t = std::chrono::system_clock::to_time_t(now);
        char buf[32];
        std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
        return buf;
    }
};

namespace pipeline_detail {

inline std::pair<Dataset, Dataset> load_data(const DataConfig& cfg) {
    switch (cfg.kind) {
        case DataKind::Glyphs: return make_glyph_shift(cfg.glyphs, cfg.data_seed);
        case DataKind::Blobs: return make_blob_shift(cfg.blobs, cfg.data_seed);
        case DataKind::Manifest:
            return {load_dataset(cfg.source_manifest), load_dataset(cfg.target_manifest)};
    }
    throw ConfigError("unknown data kind");
}

inline nlohmann::json baseline_report_json(const PseudoLabelSet& pseudo, int total,
                                           const std::string& selector) {
    nlohmann::json j;
    j["summary"] = {{"total_samples", total},
                    {"selected", static_cast<int>(pseudo.labeled.size())},
                    {"quantity_pct", pseudo.quantity_pct(total)},
                    {"selector", selector}};
    auto arr = nlohmann::json::array();
    for (const auto& [id, label] : pseudo.labeled)
        arr.push_back({{"id", id}, {"selected", true}, {"selected_label", label}});
    for (const auto id : pseudo.unlabeled_ids) arr.push_back({{"id", id}, {"selected", false}});
    j["instances"] = std::move(arr);
    return j;
}

template <typename S>
PseudoLabelSet run_selector(const PipelineConfig& cfg, const Model<S>& model, const Dataset& target,
                            nlohmann::json* report_json) {
    switch (cfg.selector) {
        case SelectorKind::Hcpr: {
            const auto result = consolidate(model, target, cfg.selection);
            if (report_json) *report_json = consolidation_report_json(result);
            return result.pseudo;
        }
        case SelectorKind::NearCentroid: {
            auto pseudo = near_centroid_select(model, target, cfg.selection.tau1_pct);
            if (report_json) *report_json = baseline_report_json(pseudo, target.size(), "near_centroid");
            return pseudo;
        }
        case SelectorKind::ConfidenceThreshold: {
            auto pseudo = confidence_select(model, target, cfg.confidence_threshold);
            if (report_json)
                *report_json = baseline_report_json(pseudo, target.size(), "confidence_threshold");
            return pseudo;
        }
    }
    throw ConfigError("unknown selector");
}

inline void write_pa_csv(const std::string& path, const std::vector<PreAdaptEpochStats>& history) {
    CsvWriter csv(path, {"epoch", "smoothness_loss", "far_loss", "lambda", "marginal_entropy",
                         "target_accuracy"});
    for (const auto& s : history)
        csv.row({std::to_string(s.epoch), CsvWriter::num(s.mean_smoothness), CsvWriter::num(s.mean_far),
                 CsvWriter::num(s.lambda), CsvWriter::num(s.marginal_entropy),
                 s.accuracy >= 0 ? CsvWriter::num(s.accuracy) : ""});
}

inline void write_ssl_csv(const std::string& path, const std::vector<SSLStepRecord>& history) {
    CsvWriter csv(path, {"step", "supervised_loss", "unsupervised_loss", "mask_rate", "eval_accuracy"});
    for (const auto& s : history)
        csv.row({std::to_string(s.step), CsvWriter::num(s.supervised_loss),
                 CsvWriter::num(s.unsupervised_loss), CsvWriter::num(s.mask_rate),
                 s.accuracy >= 0 ? CsvWriter::num(s.accuracy) : ""});
}

inline void write_pseudo_history_csv(const std::string& path,
                                     const std::vector<PseudoHistoryPoint>& history) {
    CsvWriter csv(path, {"epoch", "quantity_pct", "quality_pct"});
    for (const auto& p : history)
        csv.row({CsvWriter::num(p.epoch), CsvWriter::num(p.quantity_pct), CsvWriter::num(p.quality_pct)});
}

inline void write_training_curves(const std::string& path,
                                  const std::vector<PreAdaptEpochStats>& pa,
                                  const std::vector<SSLStepRecord>& ssl) {
    SvgLineChart chart("training progress", "epoch", "value");
    std::vector<std::pair<double, double>> sm, far, acc;
    for (const auto& s : pa) {
        sm.emplace_back(s.epoch, s.mean_smoothness);
        far.emplace_back(s.epoch, s.mean_far);
        if (s.accuracy >= 0) acc.emplace_back(s.epoch, s.accuracy);
    }
    const double pa_epochs = static_cast<double>(pa.size());
    int ssl_epoch = 0;
    for (const auto& s : ssl)
        if (s.accuracy >= 0) acc.emplace_back(pa_epochs + ssl_epoch++, s.accuracy);
    chart.add_series("pre-adapt smoothness", sm);
    chart.add_series("pre-adapt far", far);
    chart.add_series("target accuracy (%)", acc);
    chart.write(path);
}

}  // namespace pipeline_detail

// Full three-step pipeline: source model, pre-adaptation, consolidation /
// selection, semi-supervised refinement, evaluation and artifact emission.
// Deterministic for a fixed (config, seed) in single-threaded runs.
inline RunReport run_pipeline(const PipelineConfig& cfg) {
    namespace fs = std::filesystem;
    cfg.validate();
    fs::create_directories(cfg.output_dir);
    const std::string out = cfg.output_dir + "/";

    RunReport report;
    report.version = kVersion;
    report.config_echo = pipeline_config_to_json(cfg);

    auto data = run_stage("data", [&] { return pipeline_detail::load_data(cfg.data); });
    const Dataset& source = data.first;
    const Dataset& target = data.second;
    const bool target_labeled = target.has_labels();

    Model<float> model = run_stage("source-model", [&] {
        if (!cfg.source.checkpoint.empty()) {
            auto loaded = checkpoint::load(cfg.source.checkpoint);
            return std::move(loaded.model);
        }
        Model<float> m(cfg.model, cfg.seed);
        Rng rng = Rng(cfg.seed).split(1);
        train_source_model(m, source, cfg.source, rng);
        checkpoint::save(out + "source.ckpt", m);
        return m;
    });

    auto eval_now = [&]() -> double {
        return target_labeled ? evaluate(model, target).accuracy : -1.0;
    };
    double epoch_counter = 0.0;
    auto epoch_hook = [&]() -> double {
        epoch_counter += 1.0;
        const double acc = eval_now();
        if (cfg.track_pseudo_history && target_labeled) {
            const auto pseudo = pipeline_detail::run_selector(cfg, model, target, nullptr);
            const auto q = pseudo_quality(pseudo, target);
            report.pseudo_history.push_back({epoch_counter, q.quantity_pct, q.quality_pct});
        }
        return acc;
    };

    run_stage("evaluate", [&] {
        report.source_only_accuracy = eval_now();
        return 0;
    });

    // --- step 1: pre-adaptation ----------------------------------------------
    run_stage("pre-adapt", [&] {
        if (cfg.pre_adapt.epochs > 0) {
            Rng rng = Rng(cfg.seed).split(2);
            SgdOptimizer<float> optimizer(model.parameters(), cfg.pre_adapt.opt);
            MemoryQueue<float> queue(cfg.pre_adapt.effective_queue_capacity(target.size()),
                                     cfg.model.embed_dim, cfg.model.num_classes);
            warm_up_queue(model, target, queue, rng, cfg.pre_adapt.batch_size);
            report.pa_history =
                pre_adapt_run(model, optimizer, target, queue, cfg.pre_adapt, rng, epoch_hook);
        }
        checkpoint::save(out + "post_pa.ckpt", model);
        pipeline_detail::write_pa_csv(out + "pre_adapt_stats.csv", report.pa_history);
        report.post_pa_accuracy = eval_now();
        return 0;
    });

    // --- step 2: consolidation / selection -------------------------------------
    PseudoLabelSet pseudo = run_stage("consolidation", [&] {
        nlohmann::json report_json;
        PseudoLabelSet p = pipeline_detail::run_selector(cfg, model, target, &report_json);
        write_consolidation_report(report_json, out + "consolidation_report.json");
        return p;
    });
    report.pseudo_selected = static_cast<int>(pseudo.labeled.size());
    report.pseudo_quantity_pct = pseudo.quantity_pct(target.size());
    if (target_labeled) report.pseudo_quality_pct = pseudo_quality(pseudo, target).quality_pct;

    // Optional second pre-adaptation pass integrating the consolidation
    // outcome's model state before the SSL stage.
    if (cfg.pa_after_consolidation && cfg.pre_adapt.epochs > 0) {
        run_stage("pre-adapt", [&] {
            Rng rng = Rng(cfg.seed).split(4);
            SgdOptimizer<float> optimizer(model.parameters(), cfg.pre_adapt.opt);
            MemoryQueue<float> queue(cfg.pre_adapt.effective_queue_capacity(target.size()),
                                     cfg.model.embed_dim, cfg.model.num_classes);
            warm_up_queue(model, target, queue, rng, cfg.pre_adapt.batch_size);
            auto extra = pre_adapt_run(model, optimizer, target, queue, cfg.pre_adapt, rng, epoch_hook);
            for (auto& s : extra) s.epoch += static_cast<int>(report.pa_history.size());
            report.pa_history.insert(report.pa_history.end(), extra.begin(), extra.end());
            return 0;
        });
    }

    // --- step 3: semi-supervised refinement ------------------------------------
    run_stage("ssl", [&] {
        if (cfg.ssl.epochs > 0) {
            Rng rng = Rng(cfg.seed).split(3);
            SgdOptimizer<float> optimizer(model.parameters(), cfg.ssl.opt);

            // Epoch segments between schedule points; consolidation re-runs at
            // each boundary and swaps the pseudo-label partition in place.
            std::vector<std::pair<int, int>> segments;
            int start = 0;
            for (int boundary : cfg.schedule) {
                if (boundary > start) segments.emplace_back(start, boundary);
                start = boundary;
            }
            if (start < cfg.ssl.epochs) segments.emplace_back(start, cfg.ssl.epochs);

            int step_offset = 0;
            for (std::size_t seg = 0; seg < segments.size(); ++seg) {
                if (seg > 0) {
                    nlohmann::json rejson;
                    pseudo = pipeline_detail::run_selector(cfg, model, target, &rejson);
                    write_consolidation_report(
                        rejson, out + "consolidation_report_epoch" +
                                    std::to_string(segments[seg].first) + ".json");
                }
                SSLConfig seg_cfg = cfg.ssl;
                seg_cfg.epochs = segments[seg].second - segments[seg].first;
                Rng seg_rng = rng.split(static_cast<std::uint64_t>(seg));
                auto records = ssl_train(model, optimizer, pseudo, target, seg_cfg, seg_rng, epoch_hook);
                for (auto& r : records) {
                    r.step += step_offset;
                    report.ssl_history.push_back(r);
                }
                if (!report.ssl_history.empty()) step_offset = report.ssl_history.back().step + 1;
            }
        }
        checkpoint::save(out + "final.ckpt", model);
        pipeline_detail::write_ssl_csv(out + "ssl_history.csv", report.ssl_history);
        return 0;
    });

    run_stage("report", [&] {
        report.final_accuracy = eval_now();
        pipeline_detail::write_training_curves(out + "training_curves.svg", report.pa_history,
                                               report.ssl_history);
        if (!report.pseudo_history.empty())
            pipeline_detail::write_pseudo_history_csv(out + "pseudo_history.csv", report.pseudo_history);
        std::ofstream js(out + "run_report.json");
        js << report.to_json().dump(2) << "\n";
        std::ofstream txt(out + "run_report.txt");
        txt << report.to_text();
        return 0;
    });
    return report;
}

// ---------------------------------------------------------------------------
// Pseudo-label quantity/quality analyzer
// ---------------------------------------------------------------------------

struct AnalysisRow {
    std::string selector;
    double quantity_pct{0.0};
    double quality_pct{0.0};
    int selected{0};
};

// Quantity/quality table for the standard baselines: confidence
// thresholding on the source model, confidence thresholding after
// pre-adaptation, rationale consolidation on the source model, and
// consolidation after pre-adaptation.
inline std::vector<AnalysisRow> analyze_pseudo_labels(const Model<float>& source_model,
                                                      const Model<float>& pa_model,
                                                      const Dataset& target,
                                                      const SelectionConfig& selection,
                                                      double confidence_threshold) {
    if (!target.has_labels())
        throw StateError("analysis requires evaluation labels on the target dataset");
    std::vector<AnalysisRow> rows;
    auto add = [&](const std::string& name, const PseudoLabelSet& pseudo) {
        const auto q = pseudo_quality(pseudo, target);
        rows.push_back({name, q.quantity_pct, q.quality_pct, q.selected});
    };
    add("source_confidence", confidence_select(source_model, target, confidence_threshold));
    add("pa_confidence", confidence_select(pa_model, target, confidence_threshold));
    add("hcpr_source", consolidate(source_model, target, selection).pseudo);
    add("pa_hcpr", consolidate(pa_model, target, selection).pseudo);
    return rows;
}

inline void write_analysis_csv(const std::string& path, const std::vector<AnalysisRow>& rows) {
    CsvWriter csv(path, {"selector", "quantity_pct", "quality_pct", "selected"});
    for (const auto& r : rows)
        csv.row({r.selector, CsvWriter::num(r.quantity_pct), CsvWriter::num(r.quality_pct),
                 std::to_string(r.selected)});
}

// Quantity/quality across epochs, plotted from a pseudo_history.csv.
inline void write_quantity_quality_plot(const std::string& csv_path, const std::string& svg_path) {
    const CsvTable table = read_csv(csv_path);
    const int ei = table.column_index("epoch");
    const int qi = table.column_index("quantity_pct");
    const int li = table.column_index("quality_pct");
    std::vector<std::pair<double, double>> quantity, quality;
    for (const auto& row : table.rows) {
        const double e = std::stod(row[static_cast<std::size_t>(ei)]);
        if (!row[static_cast<std::size_t>(qi)].empty())
            quantity.emplace_back(e, std::stod(row[static_cast<std::size_t>(qi)]));
        if (!row[static_cast<std::size_t>(li)].empty())
            quality.emplace_back(e, std::stod(row[static_cast<std::size_t>(li)]));
    }
    SvgLineChart chart("pseudo-label quantity and quality", "epoch", "percent");
    chart.add_series("quantity (%)", quantity);
    chart.add_series("quality (%)", quality);
    chart.write(svg_path);
}

}  // namespace sfuda
