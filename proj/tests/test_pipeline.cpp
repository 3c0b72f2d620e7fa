#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "sfuda/config.hpp"
#include "sfuda/evaluate.hpp"
#include "sfuda/pipeline.hpp"

using namespace sfuda;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path);
    os << content;
    return path;
}

// Identity-head model over one-hot tabular inputs: argmax(posterior) equals
// argmax(image).
Model<float> identity_model(int classes) {
    ModelConfig cfg;
    cfg.num_classes = classes;
    cfg.embed_dim = classes;
    cfg.input_h = 1;
    cfg.input_w = 1;
    cfg.input_c = classes;
    Model<float> model(cfg, 0);
    for (auto& p : model.parameters()) {
        if (p.name == "bottleneck.weight" || p.name == "classifier.v")
            for (int r = 0; r < classes; ++r)
                for (int c = 0; c < classes; ++c) p.value[r * classes + c] = (r == c) ? 1.0f : 0.0f;
        if (p.name == "bottleneck.bias" || p.name == "classifier.bias")
            for (std::int64_t i = 0; i < p.size; ++i) p.value[i] = 0.0f;
        if (p.name == "classifier.g")
            for (std::int64_t i = 0; i < p.size; ++i) p.value[i] = 1.0f;
    }
    model.bn_running_mean().setZero();
    model.bn_running_var().setConstant(1.0f - 1e-5f);
    return model;
}

Tensor<float> one_hot_image(int classes, int hot) {
    Tensor<float> img({1, 1, classes});
    img[static_cast<std::size_t>(hot)] = 1.0f;
    return img;
}

}  // namespace

TEST_CASE("an empty config file yields the library defaults") {
    TempDir dir("sfuda_cfg_empty");
    const auto path = write_file(dir.file("empty.json"), "");
    const auto cfg = parse_config(path);
    CHECK(cfg.pre_adapt.z == 3);
    CHECK(cfg.selection.k_tilde == 4);
    CHECK(cfg.selection.tau1_pct == 0.8);
    CHECK(cfg.selection.tau2_pct == 1.6);
    CHECK(cfg.ssl.confidence_tau == 0.95);
    CHECK(cfg.pre_adapt.batch_size == 64);
    CHECK(cfg.ssl.labeled_batch == 64);
    CHECK(cfg.ssl.unlabeled_batch == 64);
    CHECK(cfg.pre_adapt.lambda0 == 1.0);
    CHECK(cfg.pre_adapt.opt.lr == 1e-4);
    CHECK(cfg.pre_adapt.opt.head_lr_mult == 10.0);
    CHECK(cfg.pre_adapt.opt.momentum == 0.9);
    CHECK(cfg.pre_adapt.opt.weight_decay == 1e-3);
    CHECK(cfg.selector == SelectorKind::Hcpr);
}

TEST_CASE("threshold order violations name both fields") {
    TempDir dir("sfuda_cfg_tau");
    const auto path = write_file(dir.file("bad.json"),
                                 R"({"selection": {"tau1_pct": 2.0, "tau2_pct": 1.0}})");
    try {
        parse_config(path);
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("tau1_pct") != std::string::npos);
        CHECK(msg.find("tau2_pct") != std::string::npos);
    }
}

TEST_CASE("unknown keys are rejected with their path") {
    TempDir dir("sfuda_cfg_unknown");
    const auto path = write_file(dir.file("bad.json"), R"({"pre_adapt": {"zz": 3}})");
    CHECK_THROWS_WITH(parse_config(path), Catch::Matchers::ContainsSubstring("zz"));
    const auto path2 = write_file(dir.file("bad2.json"), R"({"nonsense": 1})");
    CHECK_THROWS_WITH(parse_config(path2), Catch::Matchers::ContainsSubstring("nonsense"));
    CHECK_THROWS_AS(parse_config(dir.file("missing.json")), ConfigError);
}

TEST_CASE("config round-trips through serialization") {
    TempDir dir("sfuda_cfg_rt");
    const auto path = write_file(dir.file("cfg.json"), R"({
        "seed": 9,
        "selector": "near_centroid",
        "schedule": [2, 5],
        "model": {"num_classes": 5, "embed_dim": 16, "input_shape": [8, 8, 1],
                  "conv_stages": [{"channels": 6, "stride": 2}]},
        "pre_adapt": {"z": 2, "epochs": 1, "optimizer": {"lr": 0.001}},
        "ssl": {"epochs": 7},
        "selection": {"tau1_pct": 3.0, "tau2_pct": 6.0}
    })");
    const auto cfg = parse_config(path);
    const auto echoed = pipeline_config_to_json(cfg);
    const auto reparsed = pipeline_config_from_json(echoed);
    CHECK(pipeline_config_to_json(reparsed).dump() == echoed.dump());
    CHECK(reparsed.seed == 9);
    CHECK(reparsed.selector == SelectorKind::NearCentroid);
    CHECK(reparsed.schedule == std::vector<int>{2, 5});
    CHECK(reparsed.pre_adapt.opt.lr == 0.001);
    CHECK(reparsed.pre_adapt.opt.head_lr_mult == 10.0);
}

TEST_CASE("set-style overrides reach nested keys") {
    TempDir dir("sfuda_cfg_set");
    const auto path = write_file(dir.file("cfg.json"), R"({"pre_adapt": {"epochs": 1}})");
    const auto cfg = parse_config(path, {"pre_adapt.epochs=4", "selection.tau1_pct=2.5",
                                         "selection.tau2_pct=5.0", "selector=confidence_threshold",
                                         "ssl.optimizer.lr=0.01"});
    CHECK(cfg.pre_adapt.epochs == 4);
    CHECK(cfg.selection.tau1_pct == 2.5);
    CHECK(cfg.selection.tau2_pct == 5.0);
    CHECK(cfg.selector == SelectorKind::ConfidenceThreshold);
    CHECK(cfg.ssl.opt.lr == 0.01);
    CHECK_THROWS_AS(parse_config(path, {"garbage"}), ConfigError);
}

TEST_CASE("schedule validation") {
    TempDir dir("sfuda_cfg_sched");
    const auto bad = write_file(dir.file("bad.json"), R"({"schedule": [5, 5], "ssl": {"epochs": 9}})");
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
    const auto oob = write_file(dir.file("oob.json"), R"({"schedule": [12], "ssl": {"epochs": 9}})");
    CHECK_THROWS_AS(parse_config(oob), ConfigError);
}

TEST_CASE("evaluation: exact predictions, half-right predictions, loop oracle") {
    const int classes = 4;
    Model<float> model = identity_model(classes);

    Dataset perfect(Domain::Target, true);
    for (int i = 0; i < 20; ++i) perfect.add(i, one_hot_image(classes, i % classes), i % classes);
    CHECK(evaluate(model, perfect).accuracy == 100.0);
    CHECK(evaluate(model, perfect).per_class_average == 100.0);

    // binary dataset, half right per class
    Dataset half(Domain::Target, true);
    int id = 0;
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 10; ++i) {
            const int shown = (i % 2 == 0) ? c : 1 - c;
            half.add(id++, one_hot_image(classes, shown), c);
        }
    const auto res = evaluate(model, half);
    CHECK(res.accuracy == 50.0);
    CHECK(res.per_class[0] == 50.0);
    CHECK(res.per_class[1] == 50.0);

    // scalar-loop oracle on an arbitrary dataset
    Rng rng(3);
    Dataset randomset(Domain::Target, true);
    for (int i = 0; i < 30; ++i) {
        Tensor<float> img({1, 1, classes});
        for (int c = 0; c < classes; ++c) img[static_cast<std::size_t>(c)] = static_cast<float>(rng.uniform());
        randomset.add(i, std::move(img), static_cast<int>(rng.below(classes)));
    }
    int correct = 0;
    for (int i = 0; i < randomset.size(); ++i) {
        std::vector<Tensor<float>> one{randomset.image(i)};
        const auto fwd = model.forward(stack(one));
        Eigen::Index arg;
        fwd.posterior.row(0).maxCoeff(&arg);
        if (static_cast<int>(arg) == randomset.eval_label(i)) ++correct;
    }
    CHECK(evaluate(model, randomset).accuracy ==
          Catch::Approx(100.0 * correct / randomset.size()).margin(1e-9));
}

TEST_CASE("pseudo-label quality arithmetic") {
    Dataset target(Domain::Target, true);
    for (int i = 0; i < 100; ++i) target.add(i, one_hot_image(2, i % 2), i % 2);
    PseudoLabelSet pseudo;
    for (int i = 0; i < 10; ++i) pseudo.labeled.emplace(i, i % 2);  // all correct
    for (int i = 10; i < 100; ++i) pseudo.unlabeled_ids.push_back(i);
    const auto q = pseudo_quality(pseudo, target);
    CHECK(q.quantity_pct == 10.0);
    CHECK(q.quality_pct == 100.0);

    PseudoLabelSet noisy = pseudo;
    noisy.labeled[0] = 1;  // one wrong
    CHECK(pseudo_quality(noisy, target).quality_pct == 90.0);
}

TEST_CASE("source trainer reaches 99% on separable blobs within 20 epochs") {
    BlobShiftSpec spec;
    spec.num_classes = 2;
    spec.dim = 4;
    spec.source_per_class = 80;
    spec.target_per_class = 10;
    spec.class_sep = 4.0;
    spec.spread = 0.5;
    auto [source, target] = make_blob_shift(spec, 21);

    ModelConfig mc;
    mc.num_classes = 2;
    mc.embed_dim = 6;
    mc.input_h = 1;
    mc.input_w = 1;
    mc.input_c = 4;
    Model<float> model(mc, 3);
    SourceModelConfig sm;
    sm.epochs = 20;
    sm.batch_size = 32;
    Rng rng(4);
    train_source_model(model, source, sm, rng);
    CHECK(evaluate(model, source).accuracy >= 99.0);
}

TEST_CASE("source trainer determinism and zero-epoch identity") {
    BlobShiftSpec spec;
    spec.num_classes = 2;
    spec.dim = 4;
    spec.source_per_class = 16;
    spec.target_per_class = 4;
    auto [source, target] = make_blob_shift(spec, 5);
    ModelConfig mc;
    mc.num_classes = 2;
    mc.embed_dim = 4;
    mc.input_h = 1;
    mc.input_w = 1;
    mc.input_c = 4;

    auto run = [&](int epochs) {
        Model<float> model(mc, 11);
        SourceModelConfig sm;
        sm.epochs = epochs;
        sm.batch_size = 8;
        Rng rng(2);
        train_source_model(model, source, sm, rng);
        std::vector<float> out;
        for (const auto& p : model.parameters()) out.insert(out.end(), p.value, p.value + p.size);
        return out;
    };
    CHECK(run(5) == run(5));

    // zero epochs: parameters equal a freshly built model
    Model<float> fresh(mc, 11);
    std::vector<float> fresh_params;
    for (const auto& p : fresh.parameters())
        fresh_params.insert(fresh_params.end(), p.value, p.value + p.size);
    CHECK(run(0) == fresh_params);

    // training with target labels is refused
    Model<float> m2(mc, 0);
    SourceModelConfig sm;
    sm.epochs = 1;
    Rng rng(1);
    CHECK_THROWS_AS(train_source_model(m2, target, sm, rng), ConfigError);
}

namespace {

// A small blob pipeline configuration that runs in well under a second.
PipelineConfig tiny_pipeline_config(const std::string& outdir) {
    PipelineConfig cfg;
    cfg.seed = 1;
    cfg.output_dir = outdir;
    cfg.data.kind = DataKind::Blobs;
    cfg.data.data_seed = 3;
    cfg.data.blobs = {3, 6, 40, 40, 3.0, 0.8, 1.2};
    cfg.model.num_classes = 3;
    cfg.model.embed_dim = 8;
    cfg.model.input_h = 1;
    cfg.model.input_w = 1;
    cfg.model.input_c = 6;
    cfg.model.conv_stages = {};
    cfg.source.epochs = 12;
    cfg.source.batch_size = 24;
    cfg.pre_adapt.epochs = 0;
    cfg.pre_adapt.batch_size = 24;
    cfg.selection.k_tilde = 2;
    cfg.selection.tau1_pct = 10.0;
    cfg.selection.tau2_pct = 20.0;
    cfg.ssl.epochs = 0;
    return cfg;
}

}  // namespace

TEST_CASE("a no-op pipeline reports final accuracy equal to the source accuracy") {
    TempDir dir("sfuda_pipe_noop");
    const auto report = run_pipeline(tiny_pipeline_config(dir.file("run")));
    CHECK(report.final_accuracy == report.source_only_accuracy);
    CHECK(report.post_pa_accuracy == report.source_only_accuracy);
    CHECK(fs::exists(dir.file("run") + "/run_report.json"));
    CHECK(fs::exists(dir.file("run") + "/consolidation_report.json"));
    CHECK(fs::exists(dir.file("run") + "/pre_adapt_stats.csv"));
    CHECK(fs::exists(dir.file("run") + "/ssl_history.csv"));
    CHECK(fs::exists(dir.file("run") + "/source.ckpt"));
    CHECK(fs::exists(dir.file("run") + "/final.ckpt"));
}

TEST_CASE("reports are byte-identical across reruns once timestamps are stripped") {
    TempDir dir("sfuda_pipe_det");
    auto cfg1 = tiny_pipeline_config(dir.file("a"));
    cfg1.pre_adapt.epochs = 1;
    cfg1.ssl.epochs = 1;
    cfg1.ssl.labeled_batch = 8;
    cfg1.ssl.unlabeled_batch = 16;
    auto cfg2 = cfg1;
    cfg2.output_dir = dir.file("b");

    const auto r1 = run_pipeline(cfg1);
    const auto r2 = run_pipeline(cfg2);
    auto strip = [](nlohmann::json j) {
        j.erase("generated_at");
        j["config"].erase("output_dir");
        return j.dump();
    };
    CHECK(strip(r1.to_json()) == strip(r2.to_json()));
}

TEST_CASE("run report quantity is recomputable from the consolidation report file") {
    TempDir dir("sfuda_pipe_quant");
    auto cfg = tiny_pipeline_config(dir.file("run"));
    const auto report = run_pipeline(cfg);

    std::ifstream is(dir.file("run") + "/consolidation_report.json");
    const auto j = nlohmann::json::parse(is);
    const auto pseudo = pseudo_set_from_report(j);
    const int total = j.at("summary").at("total_samples").get<int>();
    CHECK(report.pseudo_quantity_pct == pseudo.quantity_pct(total));
    CHECK(report.pseudo_selected == static_cast<int>(pseudo.labeled.size()));
    CHECK(j.at("summary").at("quantity_pct").get<double>() == report.pseudo_quantity_pct);
}

TEST_CASE("stage failures carry the stage name") {
    TempDir dir("sfuda_pipe_stage");
    auto cfg = tiny_pipeline_config(dir.file("run"));
    cfg.data.kind = DataKind::Manifest;
    cfg.data.source_manifest = dir.file("nope.json");
    cfg.data.target_manifest = dir.file("nope2.json");
    try {
        run_pipeline(cfg);
        FAIL("expected a stage error");
    } catch (const StageError& e) {
        CHECK(e.stage == "data");
        CHECK(std::string(e.what()).find("data") != std::string::npos);
    }
}

TEST_CASE("every selector toggle is expressible through config alone") {
    TempDir dir("sfuda_pipe_toggle");
    // pre-adaptation off + consolidation off (confidence selector) + ssl off
    auto cfg = tiny_pipeline_config(dir.file("run"));
    cfg.selector = SelectorKind::ConfidenceThreshold;
    cfg.confidence_threshold = 0.5;
    const auto report = run_pipeline(cfg);
    CHECK(report.final_accuracy == report.source_only_accuracy);

    auto cfg2 = tiny_pipeline_config(dir.file("run2"));
    cfg2.selector = SelectorKind::NearCentroid;
    CHECK_NOTHROW(run_pipeline(cfg2));
}

TEST_CASE("recursive consolidation schedule re-runs the selector between epochs") {
    TempDir dir("sfuda_pipe_sched");
    auto cfg = tiny_pipeline_config(dir.file("run"));
    cfg.selection.tau1_pct = 20.0;
    cfg.selection.tau2_pct = 40.0;
    cfg.ssl.epochs = 3;
    cfg.ssl.labeled_batch = 8;
    cfg.ssl.unlabeled_batch = 16;
    cfg.schedule = {1, 2};
    CHECK_NOTHROW(run_pipeline(cfg));
    CHECK(fs::exists(dir.file("run") + "/consolidation_report_epoch1.json"));
    CHECK(fs::exists(dir.file("run") + "/consolidation_report_epoch2.json"));
}

TEST_CASE("analyzer emits all four baseline rows") {
    BlobShiftSpec spec;
    spec.num_classes = 3;
    spec.dim = 6;
    spec.source_per_class = 30;
    spec.target_per_class = 30;
    spec.shift = 1.0;
    auto [source, target] = make_blob_shift(spec, 9);

    ModelConfig mc;
    mc.num_classes = 3;
    mc.embed_dim = 8;
    mc.input_h = 1;
    mc.input_w = 1;
    mc.input_c = 6;
    Model<float> source_model(mc, 2);
    SourceModelConfig sm;
    sm.epochs = 10;
    sm.batch_size = 32;
    Rng rng(7);
    train_source_model(source_model, source, sm, rng);
    Model<float> pa_model = source_model;  // stand-in for a pre-adapted model

    SelectionConfig sel;
    sel.k_tilde = 2;
    sel.tau1_pct = 10.0;
    sel.tau2_pct = 20.0;
    const auto rows = analyze_pseudo_labels(source_model, pa_model, target, sel, 0.95);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].selector == "source_confidence");
    CHECK(rows[1].selector == "pa_confidence");
    CHECK(rows[2].selector == "hcpr_source");
    CHECK(rows[3].selector == "pa_hcpr");
    for (const auto& r : rows) {
        CHECK(r.quantity_pct >= 0.0);
        CHECK(r.quantity_pct <= 100.0);
        CHECK(r.quality_pct >= 0.0);
        CHECK(r.quality_pct <= 100.0);
    }

    TempDir dir("sfuda_analysis");
    write_analysis_csv(dir.file("analysis.csv"), rows);
    const auto table = read_csv(dir.file("analysis.csv"));
    CHECK(table.rows.size() == 4);
    CHECK(table.column_index("quality_pct") == 2);
}
