#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sfuda/errors.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/tensor.hpp"

#include <json.hpp>

namespace sfuda {

enum class Domain { Source, Target };

inline std::string domain_name(Domain d) { return d == Domain::Source ? "source" : "target"; }

// Marks a training code path. While any guard is alive, evaluation-gated
// label reads throw, so a pseudo-labeling or optimization step that touches
// target ground truth fails loudly in tests.
class TrainingPhaseGuard {
public:
    TrainingPhaseGuard() { ++depth(); }
    ~TrainingPhaseGuard() { --depth(); }
    TrainingPhaseGuard(const TrainingPhaseGuard&) = delete;
    TrainingPhaseGuard& operator=(const TrainingPhaseGuard&) = delete;
    static bool active() { return depth() > 0; }

private:
    static int& depth() {
        static int d = 0;
        return d;
    }
};

// Immutable-after-construction collection of (image, optional label, id).
// Target-domain labels are carried for evaluation and analysis only; they
// are reachable solely through eval_label().
class Dataset {
public:
    Dataset(Domain domain, bool eval_only_labels)
        : domain_(domain), eval_only_labels_(eval_only_labels) {}

    void add(std::int64_t id, Tensor<float> image, int label = kNoLabel) {
        if (index_by_id_.count(id)) throw ConfigError("dataset: duplicate instance id " + std::to_string(id));
        if (!images_.empty() && !image.same_shape(images_.front()))
            throw ConfigError("dataset: all images must share one shape");
        index_by_id_.emplace(id, static_cast<int>(ids_.size()));
        ids_.push_back(id);
        images_.push_back(std::move(image));
        labels_.push_back(label);
    }

    int size() const { return static_cast<int>(ids_.size()); }
    Domain domain() const { return domain_; }
    bool eval_only_labels() const { return eval_only_labels_; }
    std::int64_t id(int i) const { return ids_.at(static_cast<std::size_t>(i)); }
    const Tensor<float>& image(int i) const { return images_.at(static_cast<std::size_t>(i)); }
    const std::vector<int>& image_shape() const { return images_.front().shape(); }

    int index_of(std::int64_t id) const {
        const auto it = index_by_id_.find(id);
        if (it == index_by_id_.end()) throw InputError("dataset: unknown instance id " + std::to_string(id));
        return it->second;
    }

    bool has_labels() const {
        for (int l : labels_)
            if (l == kNoLabel) return false;
        return !labels_.empty();
    }

    // Label for supervised training. Refused when labels are evaluation-only.
    int training_label(int i) const {
        if (eval_only_labels_)
            throw StateError("dataset: labels of this " + domain_name(domain_) +
                             " dataset are evaluation-only and must not drive training");
        return checked_label(i);
    }

    // Label for evaluation/analysis. Trips while a TrainingPhaseGuard is
    // active.
    int eval_label(int i) const {
        if (TrainingPhaseGuard::active())
            throw StateError("dataset: evaluation label read attempted inside a training phase");
        return checked_label(i);
    }

    static constexpr int kNoLabel = -1;

private:
    int checked_label(int i) const {
        const int l = labels_.at(static_cast<std::size_t>(i));
        if (l == kNoLabel) throw StateError("dataset: example " + std::to_string(ids_[static_cast<std::size_t>(i)]) + " carries no label");
        return l;
    }

    Domain domain_;
    bool eval_only_labels_;
    std::vector<std::int64_t> ids_;
    std::vector<Tensor<float>> images_;
    std::vector<int> labels_;
    std::map<std::int64_t, int> index_by_id_;
};

// Seeded permutation split into batches. With drop_last every batch has
// exactly batch_size items; otherwise the final batch may be short.
inline std::vector<std::vector<int>> epoch_batches(int n, int batch_size, Rng& rng, bool drop_last) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (drop_last && batch_size > n)
        throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds dataset size " +
                          std::to_string(n) + " with drop_last");
    std::vector<int> perm = rng.permutation(n);
    std::vector<std::vector<int>> out;
    for (int start = 0; start < n; start += batch_size) {
        const int end = std::min(n, start + batch_size);
        if (drop_last && end - start < batch_size) break;
        out.emplace_back(perm.begin() + start, perm.begin() + end);
    }
    return out;
}

inline std::vector<std::vector<int>> sequential_batches(int n, int batch_size) {
    std::vector<std::vector<int>> out;
    for (int start = 0; start < n; start += batch_size) {
        const int end = std::min(n, start + batch_size);
        std::vector<int> b;
        for (int i = start; i < end; ++i) b.push_back(i);
        out.push_back(std::move(b));
    }
    return out;
}

template <typename S>
Tensor<S> gather_images(const Dataset& ds, const std::vector<int>& indices) {
    std::vector<Tensor<S>> items;
    items.reserve(indices.size());
    for (int i : indices) items.push_back(ds.image(i).template cast<S>());
    return stack(items);
}

// ---------------------------------------------------------------------------
// Synthetic domain-shift generators
// ---------------------------------------------------------------------------

// Gaussian class blobs rendered as 1x1xK "images"; the target domain is the
// source distribution translated by a fixed random offset of the requested
// magnitude.
struct BlobShiftSpec {
    int num_classes{3};
    int dim{8};
    int source_per_class{100};
    int target_per_class{100};
    double class_sep{3.0};
    double spread{1.0};
    double shift{1.0};
};

inline std::pair<Dataset, Dataset> make_blob_shift(const BlobShiftSpec& spec, std::uint64_t seed) {
    if (spec.num_classes < 2) throw ConfigError("blob spec: num_classes must be >= 2");
    if (spec.source_per_class < 1 || spec.target_per_class < 1)
        throw ConfigError("blob spec: every class needs at least one sample");
    if (spec.dim < 1) throw ConfigError("blob spec: dim must be >= 1");

    Rng rng(seed);
    std::vector<VectorX<double>> means;
    for (int c = 0; c < spec.num_classes; ++c) {
        VectorX<double> m(spec.dim);
        for (int k = 0; k < spec.dim; ++k) m(k) = rng.normal(0.0, spec.class_sep);
        means.push_back(m);
    }
    VectorX<double> offset(spec.dim);
    for (int k = 0; k < spec.dim; ++k) offset(k) = rng.normal(0.0, 1.0);
    if (offset.norm() > 0) offset *= spec.shift / offset.norm();

    auto sample = [&](const VectorX<double>& mean) {
        Tensor<float> img({1, 1, spec.dim});
        for (int k = 0; k < spec.dim; ++k)
            img[static_cast<std::size_t>(k)] = static_cast<float>(mean(k) + rng.normal(0.0, spec.spread));
        return img;
    };

    Dataset source(Domain::Source, false);
    Dataset target(Domain::Target, true);
    std::int64_t next_id = 0;
    for (int c = 0; c < spec.num_classes; ++c)
        for (int i = 0; i < spec.source_per_class; ++i) source.add(next_id++, sample(means[static_cast<std::size_t>(c)]), c);
    next_id = 0;
    for (int c = 0; c < spec.num_classes; ++c)
        for (int i = 0; i < spec.target_per_class; ++i)
            target.add(next_id++, sample(means[static_cast<std::size_t>(c)] + offset), c);
    return {std::move(source), std::move(target)};
}

// Digits-style glyph images: each class is a distinct stroke pattern with
// per-sample jitter, optionally cluttered with class-agnostic distractor
// strokes; the target domain applies a systematic rotation, intensity
// rescale, background lift and extra noise.
struct GlyphShiftSpec {
    int num_classes{5};
    int side{16};
    int source_per_class{150};
    int target_per_class{160};
    double jitter_px{2.0};
    double intensity_lo{0.75};
    double intensity_hi{1.0};
    double noise_sigma{0.05};
    int distractor_count{0};        // clutter strokes drawn from a shared vocabulary
    double base_rotation_jitter_deg{0.0};  // per-sample pose jitter in both domains
    double rotation_deg{20.0};
    double rotation_jitter_deg{6.0};
    double intensity_scale{0.8};
    double background{0.15};
    double target_noise_sigma{0.08};
};

namespace detail {

constexpr int kMaxGlyphClasses = 8;

inline void draw_hbar(Tensor<float>& img, int side, int cy, int cx, int t, float v) {
    for (int y = cy - t; y <= cy + t; ++y)
        for (int x = cx - side / 2 + 2; x <= cx + side / 2 - 2; ++x)
            if (y >= 0 && y < side && x >= 0 && x < side) img.at3(y, x, 0) = v;
}
inline void draw_vbar(Tensor<float>& img, int side, int cy, int cx, int t, float v) {
    for (int x = cx - t; x <= cx + t; ++x)
        for (int y = cy - side / 2 + 2; y <= cy + side / 2 - 2; ++y)
            if (y >= 0 && y < side && x >= 0 && x < side) img.at3(y, x, 0) = v;
}
inline void draw_diag(Tensor<float>& img, int side, int cy, int cx, int t, float v, bool anti) {
    const int r = side / 2 - 2;
    for (int k = -r; k <= r; ++k) {
        const int y = cy + k;
        const int x = anti ? cx - k : cx + k;
        for (int dy = -t / 2; dy <= (t + 1) / 2; ++dy) {
            const int yy = y + dy;
            if (yy >= 0 && yy < side && x >= 0 && x < side) img.at3(yy, x, 0) = v;
        }
    }
}
inline void draw_box(Tensor<float>& img, int side, int cy, int cx, int t, float v) {
    const int r = side / 2 - 3;
    for (int y = cy - r; y <= cy + r; ++y)
        for (int x = cx - r; x <= cx + r; ++x) {
            if (y < 0 || y >= side || x < 0 || x >= side) continue;
            const bool edge = (y <= cy - r + t - 1) || (y >= cy + r - t + 1) ||
                              (x <= cx - r + t - 1) || (x >= cx + r - t + 1);
            if (edge) img.at3(y, x, 0) = v;
        }
}
inline void draw_disk(Tensor<float>& img, int side, int cy, int cx, int t, float v) {
    const double r = side / 4.0 + t - 1;
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const double d = std::hypot(y - cy, x - cx);
            if (d <= r) img.at3(y, x, 0) = v;
        }
}
inline void draw_two_bars(Tensor<float>& img, int side, int cy, int cx, int t, float v) {
    draw_hbar(img, side, cy - side / 4, cx, (t + 1) / 2, v);
    draw_hbar(img, side, cy + side / 4, cx, (t + 1) / 2, v);
}
inline void draw_corners(Tensor<float>& img, int side, int cy, int cx, int t, float v) {
    const int r = side / 2 - 3;
    for (int sy : {-1, 1})
        for (int sx : {-1, 1})
            for (int dy = 0; dy <= t; ++dy)
                for (int dx = 0; dx <= t; ++dx) {
                    const int y = cy + sy * r + (sy < 0 ? dy : -dy);
                    const int x = cx + sx * r + (sx < 0 ? dx : -dx);
                    if (y >= 0 && y < side && x >= 0 && x < side) img.at3(y, x, 0) = v;
                }
}

inline void draw_glyph(Tensor<float>& img, int cls, int side, int cy, int cx, int t, float v) {
    switch (cls) {
        case 0: draw_hbar(img, side, cy, cx, t, v); break;
        case 1: draw_vbar(img, side, cy, cx, t, v); break;
        case 2:
            draw_hbar(img, side, cy, cx, t, v);
            draw_vbar(img, side, cy, cx, t, v);
            break;
        case 3:
            draw_diag(img, side, cy, cx, t, v, false);
            draw_diag(img, side, cy, cx, t, v, true);
            break;
        case 4: draw_box(img, side, cy, cx, t, v); break;
        case 5: draw_disk(img, side, cy, cx, t, v); break;
        case 6: draw_two_bars(img, side, cy, cx, t, v); break;
        case 7: draw_corners(img, side, cy, cx, t, v); break;
        default: throw ConfigError("glyph spec: unsupported class index");
    }
}

// Class-agnostic clutter: short strokes and dots scattered anywhere on the
// canvas.
inline void draw_distractor(Tensor<float>& img, int side, Rng& rng) {
    const int kind = static_cast<int>(rng.below(2));
    const int y = rng.uniform_int(1, side - 4);
    const int x = rng.uniform_int(1, side - 4);
    const float v = static_cast<float>(rng.uniform(0.5, 1.0));
    auto put = [&](int yy, int xx) {
        if (yy >= 0 && yy < side && xx >= 0 && xx < side) img.at3(yy, xx, 0) = v;
    };
    if (kind == 0) {  // dot
        put(y, x);
        put(y, x + 1);
        put(y + 1, x);
        put(y + 1, x + 1);
    } else {  // small L-corner
        for (int k = 0; k < 3; ++k) {
            put(y + k, x);
            put(y, x + k);
        }
    }
}

inline float bilinear_at(const Tensor<float>& img, double y, double x, float bg) {
    const int side_y = img.dim(0), side_x = img.dim(1);
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    auto px = [&](int yy, int xx) -> float {
        if (yy < 0 || yy >= side_y || xx < 0 || xx >= side_x) return bg;
        return img.at3(yy, xx, 0);
    };
    return static_cast<float>((1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                              fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1)));
}

inline Tensor<float> rotate_image(const Tensor<float>& img, double degrees, float bg) {
    if (degrees == 0.0) return img;
    const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    if (c != 1) throw InputError("rotate: single-channel images only");
    const double rad = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    Tensor<float> out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double sy = cy + cs * dy - sn * dx;
            const double sx = cx + sn * dy + cs * dx;
            out.at3(y, x, 0) = bilinear_at(img, sy, sx, bg);
        }
    return out;
}

}  // namespace detail

inline std::pair<Dataset, Dataset> make_glyph_shift(const GlyphShiftSpec& spec, std::uint64_t seed) {
    if (spec.num_classes < 2 || spec.num_classes > detail::kMaxGlyphClasses)
        throw ConfigError("glyph spec: num_classes must be in [2, 8]");
    if (spec.source_per_class < 1 || spec.target_per_class < 1)
        throw ConfigError("glyph spec: every class needs at least one sample");
    if (spec.side < 8) throw ConfigError("glyph spec: side must be >= 8");

    Rng rng(seed);
    auto render = [&](int cls) {
        Tensor<float> img({spec.side, spec.side, 1});
        const int cy = spec.side / 2 + rng.uniform_int(-static_cast<int>(spec.jitter_px), static_cast<int>(spec.jitter_px));
        const int cx = spec.side / 2 + rng.uniform_int(-static_cast<int>(spec.jitter_px), static_cast<int>(spec.jitter_px));
        const int t = rng.uniform_int(1, 2);
        const float v = static_cast<float>(rng.uniform(spec.intensity_lo, spec.intensity_hi));
        detail::draw_glyph(img, cls, spec.side, cy, cx, t, v);
        for (int d = 0; d < spec.distractor_count; ++d) detail::draw_distractor(img, spec.side, rng);
        if (spec.base_rotation_jitter_deg > 0)
            img = detail::rotate_image(
                img, rng.uniform(-spec.base_rotation_jitter_deg, spec.base_rotation_jitter_deg), 0.0f);
        return img;
    };
    auto add_noise_clip = [&](Tensor<float>& img, double sigma) {
        for (std::int64_t i = 0; i < img.numel(); ++i) {
            float v = img[static_cast<std::size_t>(i)] + static_cast<float>(rng.normal(0.0, sigma));
            img[static_cast<std::size_t>(i)] = std::min(1.0f, std::max(0.0f, v));
        }
    };

    Dataset source(Domain::Source, false);
    Dataset target(Domain::Target, true);
    std::int64_t next_id = 0;
    for (int c = 0; c < spec.num_classes; ++c)
        for (int i = 0; i < spec.source_per_class; ++i) {
            Tensor<float> img = render(c);
            add_noise_clip(img, spec.noise_sigma);
            source.add(next_id++, std::move(img), c);
        }
    next_id = 0;
    for (int c = 0; c < spec.num_classes; ++c)
        for (int i = 0; i < spec.target_per_class; ++i) {
            Tensor<float> img = render(c);
            const double angle = spec.rotation_deg +
                                 rng.uniform(-spec.rotation_jitter_deg, spec.rotation_jitter_deg);
            img = detail::rotate_image(img, angle, 0.0f);
            for (std::int64_t k = 0; k < img.numel(); ++k) {
                float v = img[static_cast<std::size_t>(k)] * static_cast<float>(spec.intensity_scale) +
                          static_cast<float>(spec.background);
                img[static_cast<std::size_t>(k)] = v;
            }
            add_noise_clip(img, spec.target_noise_sigma);
            target.add(next_id++, std::move(img), c);
        }
    return {std::move(source), std::move(target)};
}

// ---------------------------------------------------------------------------
// Manifest persistence: a JSON manifest plus one packed float32 payload.
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t fnv1a64(const char* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& manifest_path,
                         const std::string& payload_path) {
    std::ofstream blob(payload_path, std::ios::binary);
    if (!blob) throw IoError("dataset: cannot write " + payload_path);
    std::string bytes;
    for (int i = 0; i < ds.size(); ++i) {
        const auto& img = ds.image(i);
        bytes.append(reinterpret_cast<const char*>(img.data()),
                     static_cast<std::size_t>(img.numel()) * sizeof(float));
    }
    blob.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));

    nlohmann::json j;
    j["format_version"] = 1;
    j["domain"] = domain_name(ds.domain());
    j["eval_only_labels"] = ds.eval_only_labels();
    j["image_shape"] = ds.image_shape();
    std::string payload_name = payload_path;
    if (const auto pos = payload_name.find_last_of('/'); pos != std::string::npos)
        payload_name = payload_name.substr(pos + 1);
    j["payload"] = payload_name;
    j["payload_checksum"] = detail::hex64(detail::fnv1a64(bytes.data(), bytes.size()));
    auto arr = nlohmann::json::array();
    for (int i = 0; i < ds.size(); ++i) {
        nlohmann::json e;
        e["id"] = ds.id(i);
        if (ds.eval_only_labels())
            e["label"] = ds.eval_label(i);
        else
            e["label"] = ds.has_labels() ? nlohmann::json(ds.training_label(i)) : nlohmann::json(nullptr);
        arr.push_back(e);
    }
    j["examples"] = arr;
    std::ofstream mf(manifest_path);
    if (!mf) throw IoError("dataset: cannot write " + manifest_path);
    mf << j.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& manifest_path) {
    std::ifstream mf(manifest_path);
    if (!mf) throw IoError("dataset: cannot open manifest " + manifest_path);
    nlohmann::json j = nlohmann::json::parse(mf);
    if (j.at("format_version").get<int>() != 1)
        throw IoError("dataset: unsupported manifest format version");
    const Domain domain = j.at("domain").get<std::string>() == "source" ? Domain::Source : Domain::Target;
    const bool eval_only = j.at("eval_only_labels").get<bool>();
    std::vector<int> shape = j.at("image_shape").get<std::vector<int>>();
    const std::int64_t per_image = Tensor<float>::numel_of(shape);

    std::string dir;
    if (const auto pos = manifest_path.find_last_of('/'); pos != std::string::npos)
        dir = manifest_path.substr(0, pos + 1);
    const std::string payload_path = dir + j.at("payload").get<std::string>();
    std::ifstream blob(payload_path, std::ios::binary);
    if (!blob) throw IoError("dataset: cannot open payload " + payload_path);
    std::string bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
    const std::string checksum = detail::hex64(detail::fnv1a64(bytes.data(), bytes.size()));
    if (checksum != j.at("payload_checksum").get<std::string>())
        throw IoError("dataset: payload checksum mismatch for " + payload_path);

    const auto& examples = j.at("examples");
    if (static_cast<std::int64_t>(bytes.size()) !=
        static_cast<std::int64_t>(examples.size()) * per_image * static_cast<std::int64_t>(sizeof(float)))
        throw IoError("dataset: payload size disagrees with manifest");

    Dataset ds(domain, eval_only);
    const float* floats = reinterpret_cast<const float*>(bytes.data());
    std::int64_t offset = 0;
    for (const auto& e : examples) {
        Tensor<float> img(shape);
        std::copy(floats + offset, floats + offset + per_image, img.data());
        offset += per_image;
        const int label = e.at("label").is_null() ? Dataset::kNoLabel : e.at("label").get<int>();
        ds.add(e.at("id").get<std::int64_t>(), std::move(img), label);
    }
    return ds;
}

}  // namespace sfuda
