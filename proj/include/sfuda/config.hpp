#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "sfuda/consolidation.hpp"
#include "sfuda/data.hpp"
#include "sfuda/errors.hpp"
#include "sfuda/model.hpp"
#include "sfuda/pre_adapt.hpp"
#include "sfuda/ssl.hpp"

#include <json.hpp>

namespace sfuda {

enum class SelectorKind { Hcpr, NearCentroid, ConfidenceThreshold };

inline std::string selector_name(SelectorKind s) {
    switch (s) {
        case SelectorKind::Hcpr: return "hcpr";
        case SelectorKind::NearCentroid: return "near_centroid";
        case SelectorKind::ConfidenceThreshold: return "confidence_threshold";
    }
    return "hcpr";
}

inline SelectorKind selector_from_name(const std::string& name) {
    if (name == "hcpr") return SelectorKind::Hcpr;
    if (name == "near_centroid") return SelectorKind::NearCentroid;
    if (name == "confidence_threshold") return SelectorKind::ConfidenceThreshold;
    throw ConfigError("selector: unknown value '" + name +
                      "' (expected hcpr | near_centroid | confidence_threshold)");
}

enum class DataKind { Glyphs, Blobs, Manifest };

struct DataConfig {
    DataKind kind{DataKind::Glyphs};
    std::uint64_t data_seed{7};  // fixture generation seed, independent of the run seed
    GlyphShiftSpec glyphs{};
    BlobShiftSpec blobs{};
    std::string source_manifest;
    std::string target_manifest;
};

struct SourceModelConfig {
    std::string checkpoint;  // load when non-empty, otherwise train
    int epochs{30};
    int batch_size{64};
    OptimizerConfig opt{0.01, 1.0, 0.9, 1e-3};
};

struct PipelineConfig {
    std::uint64_t seed{0};
    std::string output_dir{"runs/out"};
    SelectorKind selector{SelectorKind::Hcpr};
    std::vector<int> schedule;  // SSL epochs at which consolidation re-runs
    bool pa_after_consolidation{false};
    bool track_pseudo_history{false};
    double confidence_threshold{0.95};  // confidence selector / analyzer baseline
    ModelConfig model{};
    DataConfig data{};
    SourceModelConfig source{};
    PreAdaptConfig pre_adapt{};
    SelectionConfig selection{};
    SSLConfig ssl{};

    void validate() const {
        model.validate();
        pre_adapt.validate();
        selection.validate();
        ssl.validate();
        if (!(confidence_threshold > 0.0) || !(confidence_threshold < 1.0))
            throw ConfigError("confidence_threshold must lie in (0, 1)");
        for (std::size_t i = 1; i < schedule.size(); ++i)
            if (schedule[i] <= schedule[i - 1])
                throw ConfigError("schedule epochs must be strictly increasing");
        for (int e : schedule)
            if (e < 0 || e >= std::max(1, ssl.epochs))
                throw ConfigError("schedule epoch " + std::to_string(e) + " outside [0, ssl.epochs)");
        if (data.kind == DataKind::Manifest &&
            (data.source_manifest.empty() || data.target_manifest.empty()))
            throw ConfigError("manifest data requires source_manifest and target_manifest paths");
    }
};

namespace config_detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key))
            throw ConfigError(where + ": unknown key '" + key + "'");
}

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace config_detail

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    config_detail::check_keys(j, {"num_classes", "embed_dim", "input_shape", "conv_stages"}, "model");
    ModelConfig cfg;
    config_detail::get_if(j, "num_classes", cfg.num_classes);
    config_detail::get_if(j, "embed_dim", cfg.embed_dim);
    if (j.contains("input_shape")) {
        const auto v = j.at("input_shape").get<std::vector<int>>();
        if (v.size() != 3) throw ConfigError("model.input_shape: expected [h, w, c]");
        cfg.input_h = v[0];
        cfg.input_w = v[1];
        cfg.input_c = v[2];
    }
    if (j.contains("conv_stages")) {
        cfg.conv_stages.clear();
        for (const auto& s : j.at("conv_stages")) {
            config_detail::check_keys(s, {"channels", "stride"}, "model.conv_stages[]");
            ConvStage stage;
            config_detail::get_if(s, "channels", stage.channels);
            config_detail::get_if(s, "stride", stage.stride);
            cfg.conv_stages.push_back(stage);
        }
    }
    return cfg;
}

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["num_classes"] = cfg.num_classes;
    j["embed_dim"] = cfg.embed_dim;
    j["input_shape"] = {cfg.input_h, cfg.input_w, cfg.input_c};
    auto stages = nlohmann::json::array();
    for (const auto& s : cfg.conv_stages) stages.push_back({{"channels", s.channels}, {"stride", s.stride}});
    j["conv_stages"] = stages;
    return j;
}

inline OptimizerConfig optimizer_from_json(const nlohmann::json& j, const char* where,
                                           OptimizerConfig base) {
    config_detail::check_keys(j, {"lr", "head_lr_mult", "momentum", "weight_decay"}, where);
    config_detail::get_if(j, "lr", base.lr);
    config_detail::get_if(j, "head_lr_mult", base.head_lr_mult);
    config_detail::get_if(j, "momentum", base.momentum);
    config_detail::get_if(j, "weight_decay", base.weight_decay);
    return base;
}

inline nlohmann::json optimizer_to_json(const OptimizerConfig& o) {
    return {{"lr", o.lr}, {"head_lr_mult", o.head_lr_mult}, {"momentum", o.momentum},
            {"weight_decay", o.weight_decay}};
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& root) {
    config_detail::check_keys(root,
                              {"seed", "output_dir", "selector", "schedule", "pa_after_consolidation",
                               "track_pseudo_history", "confidence_threshold", "model", "data",
                               "source_model", "pre_adapt", "selection", "ssl"},
                              "config");
    PipelineConfig cfg;
    config_detail::get_if(root, "seed", cfg.seed);
    config_detail::get_if(root, "output_dir", cfg.output_dir);
    if (root.contains("selector")) cfg.selector = selector_from_name(root.at("selector").get<std::string>());
    config_detail::get_if(root, "schedule", cfg.schedule);
    config_detail::get_if(root, "pa_after_consolidation", cfg.pa_after_consolidation);
    config_detail::get_if(root, "track_pseudo_history", cfg.track_pseudo_history);
    config_detail::get_if(root, "confidence_threshold", cfg.confidence_threshold);

    if (root.contains("model")) cfg.model = model_config_from_json(root.at("model"));

    if (root.contains("data")) {
        const auto& d = root.at("data");
        config_detail::check_keys(d, {"kind", "data_seed", "glyphs", "blobs", "source_manifest",
                                      "target_manifest"},
                                  "data");
        if (d.contains("kind")) {
            const std::string k = d.at("kind").get<std::string>();
            if (k == "glyphs") cfg.data.kind = DataKind::Glyphs;
            else if (k == "blobs") cfg.data.kind = DataKind::Blobs;
            else if (k == "manifest") cfg.data.kind = DataKind::Manifest;
            else throw ConfigError("data.kind: unknown value '" + k + "'");
        }
        config_detail::get_if(d, "data_seed", cfg.data.data_seed);
        config_detail::get_if(d, "source_manifest", cfg.data.source_manifest);
        config_detail::get_if(d, "target_manifest", cfg.data.target_manifest);
        if (d.contains("glyphs")) {
            const auto& g = d.at("glyphs");
            config_detail::check_keys(g,
                                      {"num_classes", "side", "source_per_class", "target_per_class",
                                       "jitter_px", "intensity_lo", "intensity_hi", "noise_sigma",
                                       "distractor_count", "base_rotation_jitter_deg", "rotation_deg", "rotation_jitter_deg",
                                       "intensity_scale", "background", "target_noise_sigma"},
                                      "data.glyphs");
            auto& s = cfg.data.glyphs;
            config_detail::get_if(g, "num_classes", s.num_classes);
            config_detail::get_if(g, "side", s.side);
            config_detail::get_if(g, "source_per_class", s.source_per_class);
            config_detail::get_if(g, "target_per_class", s.target_per_class);
            config_detail::get_if(g, "jitter_px", s.jitter_px);
            config_detail::get_if(g, "intensity_lo", s.intensity_lo);
            config_detail::get_if(g, "intensity_hi", s.intensity_hi);
            config_detail::get_if(g, "noise_sigma", s.noise_sigma);
            config_detail::get_if(g, "distractor_count", s.distractor_count);
            config_detail::get_if(g, "base_rotation_jitter_deg", s.base_rotation_jitter_deg);
            config_detail::get_if(g, "rotation_deg", s.rotation_deg);
            config_detail::get_if(g, "rotation_jitter_deg", s.rotation_jitter_deg);
            config_detail::get_if(g, "intensity_scale", s.intensity_scale);
            config_detail::get_if(g, "background", s.background);
            config_detail::get_if(g, "target_noise_sigma", s.target_noise_sigma);
        }
        if (d.contains("blobs")) {
            const auto& b = d.at("blobs");
            config_detail::check_keys(b,
                                      {"num_classes", "dim", "source_per_class", "target_per_class",
                                       "class_sep", "spread", "shift"},
                                      "data.blobs");
            auto& s = cfg.data.blobs;
            config_detail::get_if(b, "num_classes", s.num_classes);
            config_detail::get_if(b, "dim", s.dim);
            config_detail::get_if(b, "source_per_class", s.source_per_class);
            config_detail::get_if(b, "target_per_class", s.target_per_class);
            config_detail::get_if(b, "class_sep", s.class_sep);
            config_detail::get_if(b, "spread", s.spread);
            config_detail::get_if(b, "shift", s.shift);
        }
    }

    if (root.contains("source_model")) {
        const auto& s = root.at("source_model");
        config_detail::check_keys(s, {"checkpoint", "epochs", "batch_size", "optimizer"}, "source_model");
        config_detail::get_if(s, "checkpoint", cfg.source.checkpoint);
        config_detail::get_if(s, "epochs", cfg.source.epochs);
        config_detail::get_if(s, "batch_size", cfg.source.batch_size);
        if (s.contains("optimizer"))
            cfg.source.opt = optimizer_from_json(s.at("optimizer"), "source_model.optimizer", cfg.source.opt);
    }

    if (root.contains("pre_adapt")) {
        const auto& p = root.at("pre_adapt");
        config_detail::check_keys(p, {"z", "lambda0", "batch_size", "epochs", "queue_capacity", "optimizer"},
                                  "pre_adapt");
        config_detail::get_if(p, "z", cfg.pre_adapt.z);
        config_detail::get_if(p, "lambda0", cfg.pre_adapt.lambda0);
        config_detail::get_if(p, "batch_size", cfg.pre_adapt.batch_size);
        config_detail::get_if(p, "epochs", cfg.pre_adapt.epochs);
        config_detail::get_if(p, "queue_capacity", cfg.pre_adapt.queue_capacity);
        if (p.contains("optimizer"))
            cfg.pre_adapt.opt = optimizer_from_json(p.at("optimizer"), "pre_adapt.optimizer", cfg.pre_adapt.opt);
    }

    if (root.contains("selection")) {
        const auto& s = root.at("selection");
        config_detail::check_keys(s, {"k_tilde", "tau1_pct", "tau2_pct", "global_rank_pool"}, "selection");
        config_detail::get_if(s, "k_tilde", cfg.selection.k_tilde);
        config_detail::get_if(s, "tau1_pct", cfg.selection.tau1_pct);
        config_detail::get_if(s, "tau2_pct", cfg.selection.tau2_pct);
        config_detail::get_if(s, "global_rank_pool", cfg.selection.global_rank_pool);
    }

    if (root.contains("ssl")) {
        const auto& s = root.at("ssl");
        config_detail::check_keys(s, {"labeled_batch", "unlabeled_batch", "confidence_tau", "epochs",
                                      "optimizer"},
                                  "ssl");
        config_detail::get_if(s, "labeled_batch", cfg.ssl.labeled_batch);
        config_detail::get_if(s, "unlabeled_batch", cfg.ssl.unlabeled_batch);
        config_detail::get_if(s, "confidence_tau", cfg.ssl.confidence_tau);
        config_detail::get_if(s, "epochs", cfg.ssl.epochs);
        if (s.contains("optimizer"))
            cfg.ssl.opt = optimizer_from_json(s.at("optimizer"), "ssl.optimizer", cfg.ssl.opt);
    }

    cfg.validate();
    return cfg;
}

inline nlohmann::json pipeline_config_to_json(const PipelineConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir;
    j["selector"] = selector_name(cfg.selector);
    j["schedule"] = cfg.schedule;
    j["pa_after_consolidation"] = cfg.pa_after_consolidation;
    j["track_pseudo_history"] = cfg.track_pseudo_history;
    j["confidence_threshold"] = cfg.confidence_threshold;
    j["model"] = model_config_to_json(cfg.model);
    j["data"] = {
        {"kind", cfg.data.kind == DataKind::Glyphs ? "glyphs"
                 : cfg.data.kind == DataKind::Blobs ? "blobs" : "manifest"},
        {"data_seed", cfg.data.data_seed},
        {"source_manifest", cfg.data.source_manifest},
        {"target_manifest", cfg.data.target_manifest},
        {"glyphs",
         {{"num_classes", cfg.data.glyphs.num_classes},
          {"side", cfg.data.glyphs.side},
          {"source_per_class", cfg.data.glyphs.source_per_class},
          {"target_per_class", cfg.data.glyphs.target_per_class},
          {"jitter_px", cfg.data.glyphs.jitter_px},
          {"intensity_lo", cfg.data.glyphs.intensity_lo},
          {"intensity_hi", cfg.data.glyphs.intensity_hi},
          {"noise_sigma", cfg.data.glyphs.noise_sigma},
          {"distractor_count", cfg.data.glyphs.distractor_count},
          {"base_rotation_jitter_deg", cfg.data.glyphs.base_rotation_jitter_deg},
          {"rotation_deg", cfg.data.glyphs.rotation_deg},
          {"rotation_jitter_deg", cfg.data.glyphs.rotation_jitter_deg},
          {"intensity_scale", cfg.data.glyphs.intensity_scale},
          {"background", cfg.data.glyphs.background},
          {"target_noise_sigma", cfg.data.glyphs.target_noise_sigma}}},
        {"blobs",
         {{"num_classes", cfg.data.blobs.num_classes},
          {"dim", cfg.data.blobs.dim},
          {"source_per_class", cfg.data.blobs.source_per_class},
          {"target_per_class", cfg.data.blobs.target_per_class},
          {"class_sep", cfg.data.blobs.class_sep},
          {"spread", cfg.data.blobs.spread},
          {"shift", cfg.data.blobs.shift}}},
    };
    j["source_model"] = {{"checkpoint", cfg.source.checkpoint},
                         {"epochs", cfg.source.epochs},
                         {"batch_size", cfg.source.batch_size},
                         {"optimizer", optimizer_to_json(cfg.source.opt)}};
    j["pre_adapt"] = {{"z", cfg.pre_adapt.z},
                      {"lambda0", cfg.pre_adapt.lambda0},
                      {"batch_size", cfg.pre_adapt.batch_size},
                      {"epochs", cfg.pre_adapt.epochs},
                      {"queue_capacity", cfg.pre_adapt.queue_capacity},
                      {"optimizer", optimizer_to_json(cfg.pre_adapt.opt)}};
    j["selection"] = {{"k_tilde", cfg.selection.k_tilde},
                      {"tau1_pct", cfg.selection.tau1_pct},
                      {"tau2_pct", cfg.selection.tau2_pct},
                      {"global_rank_pool", cfg.selection.global_rank_pool}};
    j["ssl"] = {{"labeled_batch", cfg.ssl.labeled_batch},
                {"unlabeled_batch", cfg.ssl.unlabeled_batch},
                {"confidence_tau", cfg.ssl.confidence_tau},
                {"epochs", cfg.ssl.epochs},
                {"optimizer", optimizer_to_json(cfg.ssl.opt)}};
    return j;
}

// Applies a `key.path=value` override; values parse as JSON when possible
// and fall back to strings.
inline void apply_override(nlohmann::json& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
        value = raw;
    }
    nlohmann::json* node = &root;
    std::size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("--set: empty key segment in '" + path + "'");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

// Reads a config file (an empty file means all defaults), applies overrides,
// and validates. Unknown keys are rejected with their path.
inline PipelineConfig parse_config(const std::string& path,
                                   const std::vector<std::string>& overrides = {}) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config file does not exist: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    nlohmann::json root;
    bool blank = true;
    for (char c : text)
        if (!std::isspace(static_cast<unsigned char>(c))) {
            blank = false;
            break;
        }
    if (blank) {
        root = nlohmann::json::object();
    } else {
        try {
            root = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(std::string("config parse failure: ") + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(root, o);
    return pipeline_config_from_json(root);
}

}  // namespace sfuda
