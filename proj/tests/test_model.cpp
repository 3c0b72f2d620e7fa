#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "sfuda/checkpoint.hpp"
#include "sfuda/losses.hpp"
#include "sfuda/model.hpp"
#include "sfuda/optimizer.hpp"

using namespace sfuda;

namespace {

template <typename S>
Tensor<S> random_images(int b, int h, int w, int c, Rng& rng, double scale = 1.0) {
    Tensor<S> t({b, h, w, c});
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[static_cast<std::size_t>(i)] = static_cast<S>(rng.normal(0.0, scale));
    return t;
}

ModelConfig small_conv_config() {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.embed_dim = 6;
    cfg.input_h = 8;
    cfg.input_w = 8;
    cfg.input_c = 1;
    cfg.conv_stages = {{4, 2}, {5, 2}};
    return cfg;
}

template <typename S>
void set_param(Model<S>& model, const std::string& name, S value) {
    for (auto& p : model.parameters())
        if (p.name == name)
            for (std::int64_t i = 0; i < p.size; ++i) p.value[i] = value;
}

template <typename S>
std::vector<S> flatten_params(Model<S>& model) {
    std::vector<S> out;
    for (const auto& p : model.parameters()) out.insert(out.end(), p.value, p.value + p.size);
    return out;
}

}  // namespace

TEST_CASE("forward shape contract") {
    ModelConfig cfg;
    cfg.num_classes = 2;
    cfg.embed_dim = 8;
    cfg.input_h = 16;
    cfg.input_w = 16;
    cfg.input_c = 1;
    cfg.conv_stages = {{16, 2}};
    Model<float> model(cfg, 0);

    Rng rng(3);
    const auto imgs = random_images<float>(4, 16, 16, 1, rng);
    const auto out = model.forward(imgs);
    CHECK(out.logits.rows() == 4);
    CHECK(out.logits.cols() == 2);
    CHECK(out.posterior.rows() == 4);
    CHECK(out.embedding.rows() == 4);
    CHECK(out.embedding.cols() == 8);
    CHECK(out.feature_map.shape() == std::vector<int>{4, 8, 8, 16});
}

TEST_CASE("build determinism: identical seeds give identical parameters") {
    const auto cfg = small_conv_config();
    Model<float> a(cfg, 42), b(cfg, 42);
    CHECK(flatten_params(a) == flatten_params(b));
    Model<float> c(cfg, 43);
    CHECK(flatten_params(a) != flatten_params(c));
}

TEST_CASE("classifier head shape matches a 65-class 256-dim configuration") {
    ModelConfig cfg;
    cfg.num_classes = 65;
    cfg.embed_dim = 256;
    cfg.input_h = 1;
    cfg.input_w = 1;
    cfg.input_c = 32;
    Model<float> model(cfg, 0);
    bool found = false;
    for (const auto& p : model.parameters())
        if (p.name == "classifier.v") {
            CHECK(p.size == 65 * 256);
            found = true;
        }
    CHECK(found);
}

TEST_CASE("zeroed classifier yields the uniform posterior") {
    const auto cfg = small_conv_config();
    Model<float> model(cfg, 1);
    set_param(model, "classifier.g", 0.0f);
    set_param(model, "classifier.bias", 0.0f);
    Tensor<float> zeros({2, 8, 8, 1});
    const auto out = model.forward(zeros);
    for (Eigen::Index r = 0; r < out.posterior.rows(); ++r)
        for (Eigen::Index c = 0; c < out.posterior.cols(); ++c)
            CHECK(out.posterior(r, c) == Catch::Approx(1.0 / cfg.num_classes).margin(1e-6));
}

TEST_CASE("posterior rows are normalized and non-negative") {
    const auto cfg = small_conv_config();
    Model<float> model(cfg, 7);
    Rng rng(11);
    const auto out = model.forward(random_images<float>(16, 8, 8, 1, rng));
    for (Eigen::Index r = 0; r < out.posterior.rows(); ++r) {
        CHECK(std::abs(out.posterior.row(r).sum() - 1.0f) <= 1e-5f);
        CHECK(out.posterior.row(r).minCoeff() >= 0.0f);
    }
}

TEST_CASE("invalid configurations are rejected") {
    ModelConfig cfg;
    cfg.num_classes = 1;
    CHECK_THROWS_AS(Model<float>(cfg, 0), ConfigError);
    cfg = small_conv_config();
    cfg.conv_stages[0].stride = 0;
    CHECK_THROWS_AS(Model<float>(cfg, 0), ConfigError);
    cfg = small_conv_config();
    cfg.input_h = 0;
    CHECK_THROWS_AS(Model<float>(cfg, 0), ConfigError);
}

TEST_CASE("input shape mismatch is an input error") {
    Model<float> model(small_conv_config(), 0);
    Tensor<float> bad({2, 9, 8, 1});
    CHECK_THROWS_AS(model.forward(bad), InputError);
}

TEST_CASE("tabular degenerate mode: gradient equals the effective head weight row") {
    // Identity bottleneck plus identity batch norm makes logits affine in
    // the 1x1 feature map with the classifier's effective weight as slope.
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.embed_dim = 4;
    cfg.input_h = 1;
    cfg.input_w = 1;
    cfg.input_c = 4;
    Model<double> model(cfg, 5);
    for (auto& p : model.parameters()) {
        if (p.name == "bottleneck.weight")
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) p.value[r * 4 + c] = (r == c) ? 1.0 : 0.0;
        if (p.name == "bottleneck.bias")
            for (std::int64_t i = 0; i < p.size; ++i) p.value[i] = 0.0;
    }
    model.bn_running_mean().setZero();
    model.bn_running_var().setConstant(1.0 - 1e-5);  // inv_std exactly 1

    MatrixX<double> v(3, 4), w_eff(3, 4);
    VectorX<double> g(3);
    for (auto& p : model.parameters()) {
        if (p.name == "classifier.v")
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 4; ++c) v(r, c) = p.value[r * 4 + c];
        if (p.name == "classifier.g")
            for (int r = 0; r < 3; ++r) g(r) = p.value[r];
    }
    for (int r = 0; r < 3; ++r) w_eff.row(r) = g(r) * v.row(r) / v.row(r).norm();

    Rng rng(9);
    const auto imgs = random_images<double>(2, 1, 1, 4, rng);
    for (int cls = 0; cls < 3; ++cls) {
        const auto grad = model.logit_feature_gradient(imgs, cls);
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 4; ++c)
                CHECK(grad.at4(b, 0, 0, c) == Catch::Approx(w_eff(cls, c)).margin(1e-10));
    }
}

TEST_CASE("feature gradient matches central finite differences") {
    Model<double> model(small_conv_config(), 21);
    Rng rng(33);
    const auto imgs = random_images<double>(3, 8, 8, 1, rng);
    const auto fwd = model.forward(imgs);
    const int hf = fwd.feature_map.dim(1), wf = fwd.feature_map.dim(2), df = fwd.feature_map.dim(3);
    const double h = 1e-4;

    for (int cls = 0; cls < 3; ++cls) {
        const auto grad = model.logit_feature_gradient(imgs, cls);
        for (int b = 0; b < 3; ++b) {
            Tensor<double> fm = fwd.feature_map.slice(b);
            Tensor<double> batch1({1, hf, wf, df});
            std::copy(fm.data(), fm.data() + fm.numel(), batch1.data());
            for (int y = 0; y < hf; ++y)
                for (int x = 0; x < wf; ++x)
                    for (int c = 0; c < df; ++c) {
                        const double keep = batch1.at4(0, y, x, c);
                        batch1.at4(0, y, x, c) = keep + h;
                        const double up = model.head_logits(batch1)(0, cls);
                        batch1.at4(0, y, x, c) = keep - h;
                        const double dn = model.head_logits(batch1)(0, cls);
                        batch1.at4(0, y, x, c) = keep;
                        const double fd = (up - dn) / (2 * h);
                        const double an = grad.at4(b, y, x, c);
                        CHECK(std::abs(an - fd) <= 1e-3 * std::max(std::abs(fd), 1e-9));
                    }
        }
    }
}

TEST_CASE("gradients differ across classes unless classifier rows coincide") {
    Model<double> model(small_conv_config(), 2);
    Rng rng(4);
    const auto imgs = random_images<double>(1, 8, 8, 1, rng);
    const auto g0 = model.logit_feature_gradient(imgs, 0);
    const auto g1 = model.logit_feature_gradient(imgs, 1);
    double diff = 0;
    for (std::int64_t i = 0; i < g0.numel(); ++i)
        diff = std::max(diff, std::abs(g0[static_cast<std::size_t>(i)] - g1[static_cast<std::size_t>(i)]));
    CHECK(diff > 1e-8);
}

TEST_CASE("feature gradient rejects out-of-range classes and leaves parameters untouched") {
    Model<float> model(small_conv_config(), 2);
    Rng rng(4);
    const auto imgs = random_images<float>(1, 8, 8, 1, rng);
    CHECK_THROWS_AS(model.logit_feature_gradient(imgs, 3), InputError);
    const auto before = flatten_params(model);
    (void)model.logit_feature_gradient(imgs, 1);
    CHECK(before == flatten_params(model));
}

TEST_CASE("weight renormalization is an observable no-op") {
    Model<double> model(small_conv_config(), 13);
    Rng rng(5);
    const auto imgs = random_images<double>(2, 8, 8, 1, rng);
    const auto before = model.forward(imgs);
    model.renormalize_classifier();
    const auto after = model.forward(imgs);
    for (Eigen::Index r = 0; r < before.logits.rows(); ++r)
        for (Eigen::Index c = 0; c < before.logits.cols(); ++c)
            CHECK(after.logits(r, c) == Catch::Approx(before.logits(r, c)).margin(1e-10));
}

TEST_CASE("training backward matches finite differences across all parameters") {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.embed_dim = 5;
    cfg.input_h = 6;
    cfg.input_w = 6;
    cfg.input_c = 1;
    cfg.conv_stages = {{4, 2}};
    Model<double> model(cfg, 77);
    Rng rng(101);
    const auto imgs = random_images<double>(4, 6, 6, 1, rng);

    // Loss 1: random linear functional of the logits.
    MatrixX<double> coeff(4, 3);
    for (Eigen::Index i = 0; i < coeff.size(); ++i) coeff.data()[i] = rng.normal(0.0, 1.0);
    auto linear_loss = [&](Model<double>& m) {
        typename Model<double>::TrainCache cache;
        Model<double> copy = m;  // keep running statistics of the original intact
        const auto out = copy.forward_train(imgs, cache);
        return (out.logits.array() * coeff.array()).sum();
    };
    // Loss 2: cross-entropy against fixed targets (softmax path).
    const std::vector<int> targets{0, 2, 1, 1};
    auto ce_loss = [&](Model<double>& m) {
        typename Model<double>::TrainCache cache;
        Model<double> copy = m;
        const auto out = copy.forward_train(imgs, cache);
        double l = 0;
        for (int i = 0; i < 4; ++i)
            l += cross_entropy(VectorX<double>(out.posterior.row(i).transpose()),
                               targets[static_cast<std::size_t>(i)]);
        return l;
    };

    for (int variant = 0; variant < 2; ++variant) {
        typename Model<double>::TrainCache cache;
        Model<double> work = model;
        const auto out = work.forward_train(imgs, cache);
        MatrixX<double> dlogits(4, 3);
        if (variant == 0) {
            dlogits = coeff;
        } else {
            for (int i = 0; i < 4; ++i)
                dlogits.row(i) = cross_entropy_dlogits(VectorX<double>(out.posterior.row(i).transpose()),
                                                       targets[static_cast<std::size_t>(i)])
                                     .transpose();
        }
        work.zero_grad();
        work.backward(dlogits, cache);

        const double h = 1e-6;
        for (auto& p : work.parameters()) {
            for (std::int64_t k = 0; k < p.size; k += std::max<std::int64_t>(1, p.size / 7)) {
                const double keep = p.value[k];
                p.value[k] = keep + h;
                const double up = variant == 0 ? linear_loss(work) : ce_loss(work);
                p.value[k] = keep - h;
                const double dn = variant == 0 ? linear_loss(work) : ce_loss(work);
                p.value[k] = keep;
                const double fd = (up - dn) / (2 * h);
                const double an = p.grad[k];
                INFO(p.name << "[" << k << "] variant " << variant);
                CHECK(std::abs(an - fd) <= 1e-5 * std::max({std::abs(fd), std::abs(an), 1e-4}));
            }
        }
    }
}

TEST_CASE("optimizer applies momentum and learning rate") {
    ModelConfig cfg;
    cfg.num_classes = 2;
    cfg.embed_dim = 2;
    cfg.input_h = 1;
    cfg.input_w = 1;
    cfg.input_c = 2;
    Model<double> model(cfg, 0);
    OptimizerConfig opt;
    opt.lr = 0.1;
    opt.head_lr_mult = 1.0;
    opt.momentum = 0.5;
    opt.weight_decay = 0.0;
    SgdOptimizer<double> sgd(model.parameters(), opt);

    auto params = model.parameters();
    auto g = std::find_if(params.begin(), params.end(),
                          [](const auto& p) { return p.name == "classifier.g"; });
    REQUIRE(g != params.end());
    const double v0 = g->value[0];
    g->grad[0] = 1.0;
    sgd.step();
    CHECK(g->value[0] == Catch::Approx(v0 - 0.1).margin(1e-12));
    g->grad[0] = 1.0;  // zero_grad is the caller's job; keep the same gradient
    sgd.step();        // buffer = 0.5 * 1 + 1 = 1.5
    CHECK(g->value[0] == Catch::Approx(v0 - 0.1 - 0.15).margin(1e-12));
}

TEST_CASE("checkpoint round-trip restores parameters, statistics and outputs") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "sfuda_ckpt_test";
    fs::create_directories(dir);
    const std::string path = (dir / "model.ckpt").string();

    Model<float> model(small_conv_config(), 9);
    Rng rng(1);
    // Push the running statistics away from their defaults first.
    typename Model<float>::TrainCache cache;
    (void)model.forward_train(random_images<float>(8, 8, 8, 1, rng), cache);
    checkpoint::save(path, model);

    auto loaded = checkpoint::load(path);
    CHECK(flatten_params(loaded.model) == flatten_params(model));
    const auto imgs = random_images<float>(3, 8, 8, 1, rng);
    const auto a = model.forward(imgs);
    const auto b = loaded.model.forward(imgs);
    CHECK((a.logits - b.logits).cwiseAbs().maxCoeff() == 0.0f);

    // A corrupted version field must fail loudly.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(4);
        const std::uint32_t bad = 999;
        f.write(reinterpret_cast<const char*>(&bad), sizeof(bad));
    }
    CHECK_THROWS_AS(checkpoint::load(path), IoError);
    fs::remove_all(dir);
}
