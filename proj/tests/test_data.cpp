#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "sfuda/augment.hpp"
#include "sfuda/data.hpp"
#include "sfuda/evaluate.hpp"
#include "sfuda/pipeline.hpp"

using namespace sfuda;

namespace {

bool images_equal(const Tensor<float>& a, const Tensor<float>& b) {
    if (!a.same_shape(b)) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        if (a[static_cast<std::size_t>(i)] != b[static_cast<std::size_t>(i)]) return false;
    return true;
}

Tensor<float> test_image(int side, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> img({side, side, 1});
    for (std::int64_t i = 0; i < img.numel(); ++i)
        img[static_cast<std::size_t>(i)] = static_cast<float>(rng.uniform());
    return img;
}

}  // namespace

TEST_CASE("blob generation is seed-deterministic with requested sizes") {
    BlobShiftSpec spec;
    spec.num_classes = 3;
    spec.source_per_class = 20;
    spec.target_per_class = 10;
    auto [s1, t1] = make_blob_shift(spec, 7);
    auto [s2, t2] = make_blob_shift(spec, 7);
    CHECK(s1.size() == 60);
    CHECK(t1.size() == 30);
    for (int i = 0; i < s1.size(); ++i) CHECK(images_equal(s1.image(i), s2.image(i)));
    for (int i = 0; i < t1.size(); ++i) CHECK(images_equal(t1.image(i), t2.image(i)));
    auto [s3, t3] = make_blob_shift(spec, 8);
    CHECK_FALSE(images_equal(s1.image(0), s3.image(0)));
}

TEST_CASE("degenerate dataset specs are configuration errors") {
    BlobShiftSpec spec;
    spec.source_per_class = 0;
    CHECK_THROWS_AS(make_blob_shift(spec, 0), ConfigError);
    GlyphShiftSpec g;
    g.num_classes = 1;
    CHECK_THROWS_AS(make_glyph_shift(g, 0), ConfigError);
    g = GlyphShiftSpec{};
    g.target_per_class = 0;
    CHECK_THROWS_AS(make_glyph_shift(g, 0), ConfigError);
}

TEST_CASE("zero-magnitude shift leaves domains statistically interchangeable") {
    BlobShiftSpec spec;
    spec.num_classes = 3;
    spec.dim = 6;
    spec.source_per_class = 60;
    spec.target_per_class = 60;
    spec.class_sep = 3.0;
    spec.spread = 1.0;
    spec.shift = 0.0;

    ModelConfig mc;
    mc.num_classes = 3;
    mc.embed_dim = 8;
    mc.input_h = 1;
    mc.input_w = 1;
    mc.input_c = 6;

    double gap_sum = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto [source, target] = make_blob_shift(spec, 100 + seed);
        Model<float> model(mc, seed);
        SourceModelConfig sm;
        sm.epochs = 15;
        sm.batch_size = 32;
        Rng rng(seed);
        train_source_model(model, source, sm, rng);
        const double on_source = evaluate(model, source).accuracy;
        const double on_target = evaluate(model, target).accuracy;
        gap_sum += on_source - on_target;
    }
    CHECK(std::abs(gap_sum / 5.0) <= 2.0);
}

TEST_CASE("glyph generation is deterministic and carries evaluation-only labels") {
    GlyphShiftSpec spec;
    spec.num_classes = 4;
    spec.source_per_class = 5;
    spec.target_per_class = 6;
    auto [s1, t1] = make_glyph_shift(spec, 3);
    auto [s2, t2] = make_glyph_shift(spec, 3);
    CHECK(s1.size() == 20);
    CHECK(t1.size() == 24);
    for (int i = 0; i < t1.size(); ++i) CHECK(images_equal(t1.image(i), t2.image(i)));
    CHECK(s1.domain() == Domain::Source);
    CHECK(t1.domain() == Domain::Target);
    CHECK_FALSE(s1.eval_only_labels());
    CHECK(t1.eval_only_labels());
    for (int i = 0; i < t1.size(); ++i) {
        for (std::int64_t k = 0; k < t1.image(i).numel(); ++k) {
            CHECK(t1.image(i)[static_cast<std::size_t>(k)] >= 0.0f);
            CHECK(t1.image(i)[static_cast<std::size_t>(k)] <= 1.0f);
        }
    }
}

TEST_CASE("the evaluation-label gate trips inside training phases") {
    GlyphShiftSpec spec;
    spec.source_per_class = 2;
    spec.target_per_class = 2;
    auto [source, target] = make_glyph_shift(spec, 1);

    CHECK_THROWS_AS(target.training_label(0), StateError);
    CHECK_NOTHROW(target.eval_label(0));
    CHECK_NOTHROW(source.training_label(0));
    {
        TrainingPhaseGuard guard;
        CHECK_THROWS_AS(target.eval_label(0), StateError);
    }
    CHECK_NOTHROW(target.eval_label(0));
}

TEST_CASE("duplicate ids and inconsistent shapes are rejected") {
    Dataset ds(Domain::Source, false);
    ds.add(1, Tensor<float>({2, 2, 1}), 0);
    CHECK_THROWS_AS(ds.add(1, Tensor<float>({2, 2, 1}), 0), ConfigError);
    CHECK_THROWS_AS(ds.add(2, Tensor<float>({3, 2, 1}), 0), ConfigError);
}

TEST_CASE("weak augmentation: neutral policy is the identity") {
    AugmentationPolicy policy = AugmentationPolicy::weak();
    policy.flip_prob = 0.0;
    policy.shift_frac = 0.0;
    const auto img = test_image(16, 5);
    Rng rng(1);
    CHECK(images_equal(weak_augment(img, rng, policy), img));
}

TEST_CASE("horizontal flip is an involution") {
    const auto img = test_image(16, 6);
    CHECK(images_equal(aug_detail::hflip(aug_detail::hflip(img)), img));
}

TEST_CASE("weak augmentation replays deterministically from a seed") {
    const auto img = test_image(16, 7);
    Rng a(99), b(99);
    const auto outa = weak_augment(img, a);
    const auto outb = weak_augment(img, b);
    CHECK(images_equal(outa, outb));
}

TEST_CASE("strong augmentation: zero-magnitude policy is the identity") {
    AugmentationPolicy policy = AugmentationPolicy::strong();
    policy.flip_prob = 0.0;
    policy.shift_frac = 0.0;
    policy.cutout_frac = 0.0;
    policy.brightness = {0.0, 0.0};
    policy.contrast = {1.0, 1.0};
    policy.gamma = {1.0, 1.0};
    policy.noise = {0.0, 0.0};
    policy.rotate_deg = {0.0, 0.0};
    policy.zoom = {1.0, 1.0};
    policy.solarize_thresh = {1.0, 1.0};
    policy.posterize_levels = {0.0, 0.0};  // disabled
    policy.sharpness = {0.0, 0.0};
    const auto img = test_image(16, 8);
    Rng rng(2);
    CHECK(images_equal(strong_augment(img, rng, policy), img));
}

TEST_CASE("strong augmentation replays deterministically and respects bounds") {
    const auto img = test_image(16, 9);
    Rng a(123), b(123);
    CHECK(images_equal(strong_augment(img, a), strong_augment(img, b)));

    Rng rng(77);
    for (int draw = 0; draw < 1000; ++draw) {
        const auto out = strong_augment(img, rng);
        CHECK(out.shape() == img.shape());
        float lo = 1e9f, hi = -1e9f;
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            lo = std::min(lo, out[static_cast<std::size_t>(i)]);
            hi = std::max(hi, out[static_cast<std::size_t>(i)]);
        }
        CHECK(lo >= 0.0f);
        CHECK(hi <= 1.0f);
    }
}

TEST_CASE("epoch batching partitions ids") {
    Rng rng(5);
    auto batches = epoch_batches(10, 3, rng, true);
    CHECK(batches.size() == 3);
    std::set<int> seen;
    for (const auto& b : batches) {
        CHECK(b.size() == 3);
        seen.insert(b.begin(), b.end());
    }
    CHECK(seen.size() == 9);

    Rng r1(6), r2(6);
    CHECK(epoch_batches(10, 3, r1, true) == epoch_batches(10, 3, r2, true));

    Rng r3(7);
    auto all = epoch_batches(10, 3, r3, false);
    std::multiset<int> ids;
    for (const auto& b : all) ids.insert(b.begin(), b.end());
    CHECK(ids.size() == 10);
    std::set<int> unique(ids.begin(), ids.end());
    CHECK(unique.size() == 10);

    Rng r4(8);
    CHECK_THROWS_AS(epoch_batches(2, 3, r4, true), ConfigError);
}

TEST_CASE("manifest round-trip preserves the dataset and verifies checksums") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "sfuda_manifest_test";
    fs::create_directories(dir);

    GlyphShiftSpec spec;
    spec.num_classes = 3;
    spec.source_per_class = 4;
    spec.target_per_class = 4;
    auto [source, target] = make_glyph_shift(spec, 11);

    const std::string manifest = (dir / "target_manifest.json").string();
    const std::string payload = (dir / "target_images.bin").string();
    save_dataset(target, manifest, payload);
    Dataset loaded = load_dataset(manifest);
    CHECK(loaded.size() == target.size());
    CHECK(loaded.domain() == Domain::Target);
    CHECK(loaded.eval_only_labels());
    for (int i = 0; i < target.size(); ++i) {
        CHECK(loaded.id(i) == target.id(i));
        CHECK(images_equal(loaded.image(i), target.image(i)));
        CHECK(loaded.eval_label(i) == target.eval_label(i));
    }

    // Corrupt one payload byte: the checksum must catch it.
    {
        std::fstream f(payload, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(10);
        char b = 0x5a;
        f.write(&b, 1);
    }
    CHECK_THROWS_AS(load_dataset(manifest), IoError);
    fs::remove_all(dir);
}
