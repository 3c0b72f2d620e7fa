#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sfuda/data.hpp"
#include "sfuda/errors.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

enum class AugKind { Weak, Strong };

struct OpRange {
    double lo{0.0};
    double hi{0.0};
};

// Weak: flip and shift only. Strong: the weak ops followed by n_ops
// distortions sampled from the fixed list below, then a cutout erasure.
// Every distortion clips back into [value_min, value_max].
struct AugmentationPolicy {
    AugKind kind{AugKind::Weak};
    double flip_prob{0.5};
    double shift_frac{0.125};  // max shift as a fraction of the image side
    double value_min{0.0};
    double value_max{1.0};
    int n_ops{2};
    double cutout_frac{0.4};
    OpRange brightness{-0.3, 0.3};
    OpRange contrast{0.5, 1.5};
    OpRange gamma{0.5, 2.0};
    OpRange noise{0.0, 0.1};
    OpRange rotate_deg{-30.0, 30.0};
    OpRange zoom{0.8, 1.2};
    OpRange solarize_thresh{0.5, 1.0};
    OpRange posterize_levels{2, 6};  // below 2 disables the op
    OpRange sharpness{-0.8, 0.8};

    static AugmentationPolicy weak() { return AugmentationPolicy{}; }
    static AugmentationPolicy strong() {
        AugmentationPolicy p;
        p.kind = AugKind::Strong;
        return p;
    }
};

namespace aug_detail {

constexpr int kNumStrongOps = 9;

inline void clip(Tensor<float>& img, const AugmentationPolicy& p) {
    for (std::int64_t i = 0; i < img.numel(); ++i)
        img[static_cast<std::size_t>(i)] = std::min(static_cast<float>(p.value_max),
                                                    std::max(static_cast<float>(p.value_min),
                                                             img[static_cast<std::size_t>(i)]));
}

inline Tensor<float> hflip(const Tensor<float>& img) {
    const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    Tensor<float> out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < c; ++ci) out.at3(y, x, ci) = img.at3(y, w - 1 - x, ci);
    return out;
}

inline Tensor<float> shift(const Tensor<float>& img, int dy, int dx, float fill) {
    const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    Tensor<float> out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < c; ++ci) {
                const int sy = y - dy, sx = x - dx;
                out.at3(y, x, ci) = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? img.at3(sy, sx, ci) : fill;
            }
    return out;
}

inline Tensor<float> zoom(const Tensor<float>& img, double factor, float fill) {
    if (factor == 1.0) return img;
    const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    if (c != 1) return img;
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    Tensor<float> out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            out.at3(y, x, 0) = detail::bilinear_at(img, cy + (y - cy) / factor, cx + (x - cx) / factor, fill);
    return out;
}

inline Tensor<float> box_blur(const Tensor<float>& img) {
    const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    Tensor<float> out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < c; ++ci) {
                float sum = 0;
                int cnt = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy >= 0 && yy < h && xx >= 0 && xx < w) {
                            sum += img.at3(yy, xx, ci);
                            ++cnt;
                        }
                    }
                out.at3(y, x, ci) = sum / static_cast<float>(cnt);
            }
    return out;
}

// Applies strong-op `op` with a parameter drawn from its range.
inline Tensor<float> apply_strong_op(int op, Tensor<float> img, Rng& rng, const AugmentationPolicy& p) {
    switch (op) {
        case 0: {  // brightness
            const float d = static_cast<float>(rng.uniform(p.brightness.lo, p.brightness.hi));
            if (d == 0.0f) break;
            for (std::int64_t i = 0; i < img.numel(); ++i) img[static_cast<std::size_t>(i)] += d;
            break;
        }
        case 1: {  // contrast about the mid value
            const float f = static_cast<float>(rng.uniform(p.contrast.lo, p.contrast.hi));
            if (f == 1.0f) break;
            const float mid = static_cast<float>((p.value_min + p.value_max) / 2);
            for (std::int64_t i = 0; i < img.numel(); ++i)
                img[static_cast<std::size_t>(i)] = mid + (img[static_cast<std::size_t>(i)] - mid) * f;
            break;
        }
        case 2: {  // gamma
            const double g = rng.uniform(p.gamma.lo, p.gamma.hi);
            if (g == 1.0) break;
            for (std::int64_t i = 0; i < img.numel(); ++i) {
                const float v = std::max(0.0f, img[static_cast<std::size_t>(i)]);
                img[static_cast<std::size_t>(i)] = static_cast<float>(std::pow(v, g));
            }
            break;
        }
        case 3: {  // additive gaussian noise
            const double sigma = rng.uniform(p.noise.lo, p.noise.hi);
            if (sigma == 0.0) break;
            for (std::int64_t i = 0; i < img.numel(); ++i)
                img[static_cast<std::size_t>(i)] += static_cast<float>(rng.normal(0.0, sigma));
            break;
        }
        case 4: {  // rotation
            const double deg = rng.uniform(p.rotate_deg.lo, p.rotate_deg.hi);
            img = detail::rotate_image(img, deg, static_cast<float>(p.value_min));
            break;
        }
        case 5: {  // zoom
            const double f = rng.uniform(p.zoom.lo, p.zoom.hi);
            img = zoom(img, f, static_cast<float>(p.value_min));
            break;
        }
        case 6: {  // solarize: invert above a threshold
            const float t = static_cast<float>(rng.uniform(p.solarize_thresh.lo, p.solarize_thresh.hi));
            const float hi = static_cast<float>(p.value_max);
            for (std::int64_t i = 0; i < img.numel(); ++i)
                if (img[static_cast<std::size_t>(i)] > t)
                    img[static_cast<std::size_t>(i)] = hi - img[static_cast<std::size_t>(i)];
            break;
        }
        case 7: {  // posterize
            const int levels = rng.uniform_int(static_cast<int>(p.posterize_levels.lo),
                                               static_cast<int>(p.posterize_levels.hi));
            if (levels >= 2) {
                const float span = static_cast<float>(p.value_max - p.value_min);
                for (std::int64_t i = 0; i < img.numel(); ++i) {
                    const float u = (img[static_cast<std::size_t>(i)] - static_cast<float>(p.value_min)) / span;
                    const float q = std::round(u * static_cast<float>(levels - 1)) / static_cast<float>(levels - 1);
                    img[static_cast<std::size_t>(i)] = static_cast<float>(p.value_min) + q * span;
                }
            }
            break;
        }
        case 8: {  // sharpness: blend against a box blur
            const float a = static_cast<float>(rng.uniform(p.sharpness.lo, p.sharpness.hi));
            if (a != 0.0f) {
                Tensor<float> blurred = box_blur(img);
                for (std::int64_t i = 0; i < img.numel(); ++i)
                    img[static_cast<std::size_t>(i)] =
                        img[static_cast<std::size_t>(i)] +
                        a * (img[static_cast<std::size_t>(i)] - blurred[static_cast<std::size_t>(i)]);
            }
            break;
        }
        default: throw InputError("unknown strong augmentation op");
    }
    clip(img, p);
    return img;
}

inline Tensor<float> cutout(Tensor<float> img, Rng& rng, const AugmentationPolicy& p) {
    const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    const int size = static_cast<int>(std::round(p.cutout_frac * std::min(h, w)));
    if (size < 1) return img;
    const int cy = rng.uniform_int(0, h - 1);
    const int cx = rng.uniform_int(0, w - 1);
    const float fill = static_cast<float>((p.value_min + p.value_max) / 2);
    for (int y = cy - size / 2; y < cy - size / 2 + size; ++y)
        for (int x = cx - size / 2; x < cx - size / 2 + size; ++x)
            if (y >= 0 && y < h && x >= 0 && x < w)
                for (int ci = 0; ci < c; ++ci) img.at3(y, x, ci) = fill;
    return img;
}

}  // namespace aug_detail

inline Tensor<float> weak_augment(const Tensor<float>& image, Rng& rng,
                                  const AugmentationPolicy& policy = AugmentationPolicy::weak()) {
    if (image.ndim() != 3) throw InputError("augment: HxWxC image expected");
    // 1x1 feature vectors (tabular degenerate mode) have no augmentable
    // geometry or value range; pass them through unchanged.
    if (image.dim(0) == 1 && image.dim(1) == 1) return image;
    Tensor<float> img = image;
    if (rng.bernoulli(policy.flip_prob)) img = aug_detail::hflip(img);
    const int max_shift = static_cast<int>(std::round(policy.shift_frac * std::min(image.dim(0), image.dim(1))));
    if (max_shift > 0) {
        const int dy = rng.uniform_int(-max_shift, max_shift);
        const int dx = rng.uniform_int(-max_shift, max_shift);
        if (dy != 0 || dx != 0) img = aug_detail::shift(img, dy, dx, static_cast<float>(policy.value_min));
    }
    return img;
}

inline Tensor<float> strong_augment(const Tensor<float>& image, Rng& rng,
                                    const AugmentationPolicy& policy = AugmentationPolicy::strong()) {
    if (image.ndim() == 3 && image.dim(0) == 1 && image.dim(1) == 1) return image;
    Tensor<float> img = weak_augment(image, rng, policy);
    // n_ops distinct distortions in index order; the draw pattern is fixed
    // so replays are reproducible.
    std::vector<int> ops;
    for (int i = 0; i < aug_detail::kNumStrongOps; ++i) ops.push_back(i);
    rng.shuffle(ops);
    ops.resize(static_cast<std::size_t>(std::min(policy.n_ops, aug_detail::kNumStrongOps)));
    std::sort(ops.begin(), ops.end());
    for (int op : ops) img = aug_detail::apply_strong_op(op, std::move(img), rng, policy);
    return aug_detail::cutout(std::move(img), rng, policy);
}

inline Tensor<float> augment(const Tensor<float>& image, Rng& rng, const AugmentationPolicy& policy) {
    return policy.kind == AugKind::Weak ? weak_augment(image, rng, policy)
                                        : strong_augment(image, rng, policy);
}

}  // namespace sfuda
