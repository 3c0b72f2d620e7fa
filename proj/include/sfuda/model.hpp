#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sfuda/errors.hpp"
#include "sfuda/layers.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

struct ConvStage {
    int channels{8};
    int stride{1};
};

// Classifier contract: conv feature extractor -> global average pool ->
// bottleneck projection -> batch norm -> weight-normalized linear head.
// An empty conv stack leaves the input itself as the feature map, so 1x1xK
// tabular data runs through the identical head.
struct ModelConfig {
    int num_classes{2};
    int embed_dim{256};
    int input_h{16};
    int input_w{16};
    int input_c{1};
    std::vector<ConvStage> conv_stages{};
    // Rationale extraction targets the post-activation feature map of the
    // last conv stage.
    static constexpr const char* kFeatureTap = "post_activation";

    int feature_channels() const {
        return conv_stages.empty() ? input_c : conv_stages.back().channels;
    }
    int feature_h() const {
        int h = input_h;
        for (const auto& s : conv_stages) h = layers::Conv2d<float>::out_dim(h, s.stride);
        return h;
    }
    int feature_w() const {
        int w = input_w;
        for (const auto& s : conv_stages) w = layers::Conv2d<float>::out_dim(w, s.stride);
        return w;
    }

    void validate() const {
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
        if (input_h < 1 || input_w < 1 || input_c < 1)
            throw ConfigError("input_shape dimensions must be >= 1");
        for (const auto& s : conv_stages) {
            if (s.channels < 1) throw ConfigError("conv stage channels must be >= 1");
            if (s.stride < 1) throw ConfigError("conv stage stride must be >= 1");
        }
        if (feature_h() < 1 || feature_w() < 1)
            throw ConfigError("feature map would collapse to zero spatial size");
    }
};

template <typename S>
struct ModelOutputs {
    Tensor<S> feature_map;   // B x Hf x Wf x d'
    MatrixX<S> embedding;    // B x d
    MatrixX<S> logits;       // B x C
    MatrixX<S> posterior;    // B x C
};

template <typename S>
inline MatrixX<S> softmax_rows(const MatrixX<S>& logits) {
    MatrixX<S> p = logits;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const S m = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

template <typename S>
class Model {
public:
    struct TrainCache {
        Tensor<S> input;
        std::vector<typename layers::Conv2d<S>::Cache> conv_caches;
        std::vector<Tensor<S>> stage_outputs;  // post-activation per stage
        MatrixX<S> pooled;
        MatrixX<S> pre_bn;
        typename layers::BatchNorm1d<S>::Cache bn_cache;
        MatrixX<S> embedding;
        MatrixX<S> posterior;
    };

    Model() = default;

    Model(ModelConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
        cfg_.validate();
        Rng rng(seed);
        int c_in = cfg_.input_c;
        for (const auto& s : cfg_.conv_stages) {
            convs_.emplace_back(c_in, s.channels, s.stride);
            convs_.back().init(rng);
            c_in = s.channels;
        }
        bottleneck_ = layers::Linear<S>(cfg_.feature_channels(), cfg_.embed_dim);
        bottleneck_.init(rng);
        bn_ = layers::BatchNorm1d<S>(cfg_.embed_dim);
        classifier_ = layers::WeightNormLinear<S>(cfg_.embed_dim, cfg_.num_classes);
        classifier_.init(rng);
    }

    const ModelConfig& config() const { return cfg_; }

    ModelOutputs<S> forward(const Tensor<S>& images) const {
        check_input(images);
        ModelOutputs<S> out;
        out.feature_map = trunk(images, nullptr, nullptr);
        out.embedding = bn_.forward_eval(bottleneck_.forward(global_pool(out.feature_map)));
        out.logits = classifier_.forward(out.embedding);
        out.posterior = softmax_rows(out.logits);
        return out;
    }

    // Training-mode pass: batch statistics drive the batch norm and its
    // running estimates are updated.
    ModelOutputs<S> forward_train(const Tensor<S>& images, TrainCache& cache) {
        check_input(images);
        cache.input = images;
        cache.conv_caches.assign(convs_.size(), {});
        cache.stage_outputs.clear();
        ModelOutputs<S> out;
        out.feature_map = trunk(images, &cache.conv_caches, &cache.stage_outputs);
        cache.pooled = global_pool(out.feature_map);
        cache.pre_bn = bottleneck_.forward(cache.pooled);
        out.embedding = bn_.forward_train(cache.pre_bn, cache.bn_cache);
        cache.embedding = out.embedding;
        out.logits = classifier_.forward(out.embedding);
        out.posterior = softmax_rows(out.logits);
        cache.posterior = out.posterior;
        return out;
    }

    // Accumulates parameter gradients for d(loss)/d(logits).
    void backward(const MatrixX<S>& dlogits, const TrainCache& cache) {
        MatrixX<S> de = classifier_.backward(dlogits, cache.embedding);
        MatrixX<S> dpre = bn_.backward(de, cache.bn_cache);
        MatrixX<S> dpooled = bottleneck_.backward(dpre, cache.pooled);
        if (convs_.empty()) return;
        const int hf = cfg_.feature_h(), wf = cfg_.feature_w();
        Tensor<S> d = layers::global_avg_pool_backward(dpooled, hf, wf);
        for (int i = static_cast<int>(convs_.size()) - 1; i >= 0; --i) {
            d = layers::relu_backward(d, cache.stage_outputs[static_cast<std::size_t>(i)]);
            d = convs_[static_cast<std::size_t>(i)].backward(d, cache.conv_caches[static_cast<std::size_t>(i)]);
        }
    }

    // d(logit of class_idx[b]) / d(feature map of sample b), evaluated at an
    // evaluation-mode forward pass. Touches no parameters or statistics.
    Tensor<S> logit_feature_gradient(const Tensor<S>& images, const std::vector<int>& class_idx) const {
        check_input(images);
        const int b = images.dim(0);
        if (static_cast<int>(class_idx.size()) != b)
            throw InputError("logit_feature_gradient: one class index per sample required");
        for (int c : class_idx)
            if (c < 0 || c >= cfg_.num_classes) throw InputError("class index out of range");
        MatrixX<S> dlogits = MatrixX<S>::Zero(b, cfg_.num_classes);
        for (int i = 0; i < b; ++i) dlogits(i, class_idx[static_cast<std::size_t>(i)]) = S(1);
        MatrixX<S> de = classifier_.backward_input_only(dlogits);
        MatrixX<S> dpre = bn_.backward_eval(de);
        MatrixX<S> dpooled = bottleneck_.backward_input_only(dpre);
        return layers::global_avg_pool_backward(dpooled, cfg_.feature_h(), cfg_.feature_w());
    }

    Tensor<S> logit_feature_gradient(const Tensor<S>& images, int class_idx) const {
        return logit_feature_gradient(images, std::vector<int>(static_cast<std::size_t>(images.dim(0)), class_idx));
    }

    // Evaluation-mode head applied to an externally supplied feature map.
    MatrixX<S> head_logits(const Tensor<S>& feature_map) const {
        return classifier_.forward(bn_.forward_eval(bottleneck_.forward(global_pool(feature_map))));
    }

    std::vector<ParamView<S>> parameters() {
        std::vector<ParamView<S>> out;
        for (std::size_t i = 0; i < convs_.size(); ++i)
            convs_[i].collect(out, "conv" + std::to_string(i));
        bottleneck_.collect(out, "bottleneck", true);
        bn_.collect(out, "bn");
        classifier_.collect(out, "classifier");
        return out;
    }

    void zero_grad() {
        for (auto& c : convs_) c.zero_grad();
        bottleneck_.zero_grad();
        bn_.zero_grad();
        classifier_.zero_grad();
    }

    void renormalize_classifier() { classifier_.renormalize(); }

    VectorX<S>& bn_running_mean() { return bn_.running_mean(); }
    VectorX<S>& bn_running_var() { return bn_.running_var(); }

private:
    void check_input(const Tensor<S>& images) const {
        if (images.ndim() != 4 || images.dim(1) != cfg_.input_h ||
            images.dim(2) != cfg_.input_w || images.dim(3) != cfg_.input_c)
            throw InputError("model: images shape " + shape_to_string(images.shape()) +
                             " does not match configured input");
        if (images.dim(0) < 1) throw InputError("model: empty batch");
    }

    Tensor<S> trunk(const Tensor<S>& images,
                    std::vector<typename layers::Conv2d<S>::Cache>* caches,
                    std::vector<Tensor<S>>* stage_outputs) const {
        Tensor<S> x = images;
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            x = convs_[i].forward(x, caches ? &(*caches)[i] : nullptr);
            layers::relu_inplace(x);
            if (stage_outputs) stage_outputs->push_back(x);
        }
        return x;
    }

    MatrixX<S> global_pool(const Tensor<S>& fm) const { return layers::global_avg_pool(fm); }

    ModelConfig cfg_;
    std::vector<layers::Conv2d<S>> convs_;
    layers::Linear<S> bottleneck_;
    layers::BatchNorm1d<S> bn_;
    layers::WeightNormLinear<S> classifier_;
};

template <typename S>
Model<S> build_model(const ModelConfig& config, std::uint64_t seed) {
    return Model<S>(config, seed);
}

}  // namespace sfuda
