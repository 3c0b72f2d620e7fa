#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sfuda/errors.hpp"
#include "sfuda/model.hpp"
#include "sfuda/optimizer.hpp"

#include <json.hpp>

namespace sfuda {

// Single-file binary checkpoint: magic, format version, a JSON header with
// the model config echo, then named float32 arrays (parameters, batch-norm
// running statistics, optimizer momentum buffers).
namespace checkpoint {

constexpr std::uint32_t kMagic = 0x53464b43;  // "SFKC"
constexpr std::uint32_t kVersion = 1;

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw IoError("checkpoint: truncated file");
    return v;
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw IoError("checkpoint: truncated file");
    return v;
}
inline void write_string(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::istream& is) {
    const std::uint64_t n = read_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw IoError("checkpoint: truncated string");
    return s;
}
inline void write_array(std::ostream& os, const std::string& name, const float* data, std::uint64_t n) {
    write_string(os, name);
    write_u64(os, n);
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
}

}  // namespace detail

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["num_classes"] = cfg.num_classes;
    j["embed_dim"] = cfg.embed_dim;
    j["input_shape"] = {cfg.input_h, cfg.input_w, cfg.input_c};
    j["feature_tap"] = ModelConfig::kFeatureTap;
    auto stages = nlohmann::json::array();
    for (const auto& s : cfg.conv_stages) stages.push_back({{"channels", s.channels}, {"stride", s.stride}});
    j["conv_stages"] = stages;
    return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    const auto& shape = j.at("input_shape");
    cfg.input_h = shape.at(0).get<int>();
    cfg.input_w = shape.at(1).get<int>();
    cfg.input_c = shape.at(2).get<int>();
    cfg.conv_stages.clear();
    for (const auto& s : j.at("conv_stages"))
        cfg.conv_stages.push_back({s.at("channels").get<int>(), s.at("stride").get<int>()});
    return cfg;
}

inline void save(const std::string& path, Model<float>& model,
                 const SgdOptimizer<float>* optimizer = nullptr) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
    detail::write_u32(os, kMagic);
    detail::write_u32(os, kVersion);
    detail::write_string(os, config_to_json(model.config()).dump());

    std::vector<std::pair<std::string, std::pair<const float*, std::uint64_t>>> arrays;
    for (const auto& p : model.parameters())
        arrays.push_back({"param/" + p.name, {p.value, static_cast<std::uint64_t>(p.size)}});
    arrays.push_back({"stat/bn.running_mean",
                      {model.bn_running_mean().data(), static_cast<std::uint64_t>(model.bn_running_mean().size())}});
    arrays.push_back({"stat/bn.running_var",
                      {model.bn_running_var().data(), static_cast<std::uint64_t>(model.bn_running_var().size())}});
    if (optimizer)
        for (const auto& [name, buf] : optimizer->state())
            arrays.push_back({"opt/" + name, {buf.data(), buf.size()}});

    detail::write_u64(os, arrays.size());
    for (const auto& [name, arr] : arrays) detail::write_array(os, name, arr.first, arr.second);
    if (!os) throw IoError("checkpoint: write failed for " + path);
}

struct Loaded {
    Model<float> model;
    std::map<std::string, std::vector<float>> optimizer_state;
};

inline Loaded load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path);
    if (detail::read_u32(is) != kMagic) throw IoError("checkpoint: bad magic in " + path);
    const std::uint32_t version = detail::read_u32(is);
    if (version != kVersion)
        throw IoError("checkpoint: format version " + std::to_string(version) +
                      " does not match supported version " + std::to_string(kVersion));
    const ModelConfig cfg = config_from_json(nlohmann::json::parse(detail::read_string(is)));
    Loaded out{Model<float>(cfg, 0), {}};

    std::map<std::string, std::vector<float>> named;
    const std::uint64_t count = detail::read_u64(is);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = detail::read_string(is);
        const std::uint64_t n = detail::read_u64(is);
        std::vector<float> buf(n);
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
        if (!is) throw IoError("checkpoint: truncated array " + name);
        named.emplace(name, std::move(buf));
    }

    for (auto& p : out.model.parameters()) {
        const auto it = named.find("param/" + p.name);
        if (it == named.end()) throw IoError("checkpoint: missing parameter " + p.name);
        if (static_cast<std::int64_t>(it->second.size()) != p.size)
            throw IoError("checkpoint: size mismatch for " + p.name);
        std::memcpy(p.value, it->second.data(), it->second.size() * sizeof(float));
    }
    const auto rm = named.find("stat/bn.running_mean");
    const auto rv = named.find("stat/bn.running_var");
    if (rm == named.end() || rv == named.end()) throw IoError("checkpoint: missing batch-norm statistics");
    std::memcpy(out.model.bn_running_mean().data(), rm->second.data(), rm->second.size() * sizeof(float));
    std::memcpy(out.model.bn_running_var().data(), rv->second.data(), rv->second.size() * sizeof(float));

    for (auto& [name, buf] : named)
        if (name.rfind("opt/", 0) == 0) out.optimizer_state.emplace(name.substr(4), std::move(buf));
    return out;
}

}  // namespace checkpoint
}  // namespace sfuda
