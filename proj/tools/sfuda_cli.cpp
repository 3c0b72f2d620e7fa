// Command-line front end: source training, full adaptation, stage-wise
// consolidation, evaluation, pseudo-label analysis and synthetic fixture
// generation.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sfuda/sfuda.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    long long seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "pipeline config file (JSON)")->required();
    cmd->add_option("--set", args.overrides, "key.path=value config overrides (repeatable)");
    cmd->add_option("--seed", args.seed, "override the run seed");
}

sfuda::PipelineConfig load_config(const CommonArgs& args) {
    sfuda::PipelineConfig cfg = sfuda::parse_config(args.config_path, args.overrides);
    if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
    return cfg;
}

int cmd_train_source(const CommonArgs& args) {
    auto cfg = load_config(args);
    std::filesystem::create_directories(cfg.output_dir);
    auto data = sfuda::pipeline_detail::load_data(cfg.data);
    sfuda::Model<float> model(cfg.model, cfg.seed);
    sfuda::Rng rng = sfuda::Rng(cfg.seed).split(1);
    const auto losses = sfuda::train_source_model(model, data.first, cfg.source, rng);
    const std::string path = cfg.output_dir + "/source.ckpt";
    sfuda::checkpoint::save(path, model);
    const auto on_source = sfuda::evaluate(model, data.first);
    std::cout << "source model trained for " << cfg.source.epochs << " epochs\n";
    if (!losses.empty()) std::cout << "  final epoch mean loss: " << losses.back() << "\n";
    std::cout << "  source accuracy: " << on_source.accuracy << "%\n";
    if (data.second.has_labels())
        std::cout << "  target accuracy: " << sfuda::evaluate(model, data.second).accuracy << "%\n";
    std::cout << "  checkpoint: " << path << "\n";
    return 0;
}

int cmd_adapt(const CommonArgs& args) {
    const auto report = sfuda::run_pipeline(load_config(args));
    std::cout << report.to_text();
    return 0;
}

int cmd_consolidate(const CommonArgs& args, const std::string& ckpt_path) {
    auto cfg = load_config(args);
    std::filesystem::create_directories(cfg.output_dir);
    auto data = sfuda::pipeline_detail::load_data(cfg.data);
    auto loaded = sfuda::checkpoint::load(ckpt_path);
    nlohmann::json report_json;
    const auto pseudo =
        sfuda::pipeline_detail::run_selector(cfg, loaded.model, data.second, &report_json);
    const std::string path = cfg.output_dir + "/consolidation_report.json";
    sfuda::write_consolidation_report(report_json, path);
    std::cout << "selector " << sfuda::selector_name(cfg.selector) << " selected "
              << pseudo.labeled.size() << " of " << data.second.size() << " instances ("
              << pseudo.quantity_pct(data.second.size()) << "%)\n";
    if (data.second.has_labels()) {
        const auto q = sfuda::pseudo_quality(pseudo, data.second);
        std::cout << "  quality: " << q.quality_pct << "%\n";
    }
    std::cout << "  report: " << path << "\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& ckpt_path, bool on_source) {
    auto cfg = load_config(args);
    auto data = sfuda::pipeline_detail::load_data(cfg.data);
    auto loaded = sfuda::checkpoint::load(ckpt_path);
    const auto& ds = on_source ? data.first : data.second;
    const auto result = sfuda::evaluate(loaded.model, ds);
    std::cout << "top-1 accuracy on " << (on_source ? "source" : "target") << ": " << result.accuracy
              << "%\n";
    std::cout << "per-class average: " << result.per_class_average << "%\n";
    for (std::size_t c = 0; c < result.per_class.size(); ++c)
        std::cout << "  class " << c << ": " << result.per_class[c] << "% ("
                  << result.class_totals[c] << " samples)\n";
    return 0;
}

int cmd_analyze(const CommonArgs& args, const std::string& source_ckpt, const std::string& pa_ckpt) {
    auto cfg = load_config(args);
    std::filesystem::create_directories(cfg.output_dir);
    auto data = sfuda::pipeline_detail::load_data(cfg.data);
    auto source_model = sfuda::checkpoint::load(source_ckpt);
    auto pa_model = sfuda::checkpoint::load(pa_ckpt);
    const auto rows = sfuda::analyze_pseudo_labels(source_model.model, pa_model.model, data.second,
                                                   cfg.selection, cfg.confidence_threshold);
    const std::string csv_path = cfg.output_dir + "/analysis.csv";
    sfuda::write_analysis_csv(csv_path, rows);
    std::cout << "selector             quantity%   quality%   selected\n";
    for (const auto& r : rows)
        std::cout << r.selector << std::string(r.selector.size() < 21 ? 21 - r.selector.size() : 1, ' ')
                  << r.quantity_pct << "  " << r.quality_pct << "  " << r.selected << "\n";
    std::cout << "written: " << csv_path << "\n";

    const std::string history_csv = cfg.output_dir + "/pseudo_history.csv";
    if (std::filesystem::exists(history_csv)) {
        const std::string svg = cfg.output_dir + "/pseudo_history.svg";
        sfuda::write_quantity_quality_plot(history_csv, svg);
        std::cout << "plot: " << svg << "\n";
    }
    return 0;
}

int cmd_make_data(const CommonArgs& args) {
    auto cfg = load_config(args);
    std::filesystem::create_directories(cfg.output_dir);
    auto data = sfuda::pipeline_detail::load_data(cfg.data);
    const std::string sm = cfg.output_dir + "/source_manifest.json";
    const std::string tm = cfg.output_dir + "/target_manifest.json";
    sfuda::save_dataset(data.first, sm, cfg.output_dir + "/source_images.bin");
    sfuda::save_dataset(data.second, tm, cfg.output_dir + "/target_images.bin");
    std::cout << "source: " << data.first.size() << " examples -> " << sm << "\n";
    std::cout << "target: " << data.second.size() << " examples -> " << tm << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"source-free unsupervised domain adaptation pipeline"};
    app.require_subcommand(1);

    CommonArgs train_args, adapt_args, consolidate_args, eval_args, analyze_args, data_args;
    std::string consolidate_ckpt, eval_ckpt, analyze_source_ckpt, analyze_pa_ckpt;
    bool eval_on_source = false;

    auto* train = app.add_subcommand("train-source", "train a supervised source model");
    add_common(train, train_args);

    auto* adapt = app.add_subcommand("adapt", "run the full three-step adaptation pipeline");
    add_common(adapt, adapt_args);

    auto* consolidate = app.add_subcommand("consolidate", "run selection only, from a checkpoint");
    add_common(consolidate, consolidate_args);
    consolidate->add_option("--checkpoint", consolidate_ckpt, "model checkpoint")->required();

    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint");
    add_common(evaluate, eval_args);
    evaluate->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    evaluate->add_flag("--on-source", eval_on_source, "evaluate on the source split instead");

    auto* analyze = app.add_subcommand("analyze", "pseudo-label quantity/quality analysis");
    add_common(analyze, analyze_args);
    analyze->add_option("--source-checkpoint", analyze_source_ckpt, "source model checkpoint")->required();
    analyze->add_option("--pa-checkpoint", analyze_pa_ckpt, "pre-adapted model checkpoint")->required();

    auto* make_data = app.add_subcommand("make-data", "generate synthetic fixture manifests");
    add_common(make_data, data_args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train_source(train_args);
        if (adapt->parsed()) return cmd_adapt(adapt_args);
        if (consolidate->parsed()) return cmd_consolidate(consolidate_args, consolidate_ckpt);
        if (evaluate->parsed()) return cmd_evaluate(eval_args, eval_ckpt, eval_on_source);
        if (analyze->parsed()) return cmd_analyze(analyze_args, analyze_source_ckpt, analyze_pa_ckpt);
        if (make_data->parsed()) return cmd_make_data(data_args);
    } catch (const sfuda::StageError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
