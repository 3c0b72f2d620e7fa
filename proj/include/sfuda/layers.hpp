#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sfuda/errors.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

// Named view over one parameter array and its gradient buffer. `head`
// selects the optimizer parameter group.
template <typename S>
struct ParamView {
    std::string name;
    S* value{nullptr};
    S* grad{nullptr};
    std::int64_t size{0};
    bool head{false};
};

namespace layers {

// 3x3 convolution, padding 1, configurable stride, NHWC layout.
// Implemented as im2col + GEMM.
template <typename S>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int in_channels, int out_channels, int stride)
        : in_c_(in_channels), out_c_(out_channels), stride_(stride) {
        if (stride < 1) throw ConfigError("conv stride must be >= 1");
        weight_ = MatrixX<S>::Zero(out_c_, kKernel * kKernel * in_c_);
        bias_ = VectorX<S>::Zero(out_c_);
        dweight_ = weight_;
        dbias_ = bias_;
    }

    void init(Rng& rng) {
        const double std = std::sqrt(2.0 / static_cast<double>(kKernel * kKernel * in_c_));
        for (Eigen::Index i = 0; i < weight_.rows(); ++i)
            for (Eigen::Index j = 0; j < weight_.cols(); ++j)
                weight_(i, j) = static_cast<S>(rng.normal(0.0, std));
        bias_.setZero();
    }

    static int out_dim(int in_dim, int stride) {
        return (in_dim + 2 * kPad - kKernel) / stride + 1;
    }

    struct Cache {
        MatrixX<S> cols;        // (B*Ho*Wo) x (K*K*Cin)
        std::vector<int> in_shape;
        int ho{0}, wo{0};
    };

    Tensor<S> forward(const Tensor<S>& x, Cache* cache) const {
        const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
        if (c != in_c_) throw InputError("conv: channel mismatch");
        const int ho = out_dim(h, stride_), wo = out_dim(w, stride_);
        MatrixX<S> cols = im2col(x, ho, wo);
        Tensor<S> out({b, ho, wo, out_c_});
        auto out_mat = out.as_matrix(b * ho * wo, out_c_);
        out_mat.noalias() = cols * weight_.transpose();
        out_mat.rowwise() += bias_.transpose();
        if (cache) {
            cache->cols = std::move(cols);
            cache->in_shape = x.shape();
            cache->ho = ho;
            cache->wo = wo;
        }
        return out;
    }

    Tensor<S> backward(const Tensor<S>& dout, const Cache& cache) {
        const int b = dout.dim(0), ho = cache.ho, wo = cache.wo;
        auto dout_mat = dout.as_matrix(b * ho * wo, out_c_);
        dweight_.noalias() += dout_mat.transpose() * cache.cols;
        dbias_ += dout_mat.colwise().sum().transpose();
        MatrixX<S> dcols = dout_mat * weight_;
        return col2im(dcols, cache.in_shape, ho, wo);
    }

    void zero_grad() {
        dweight_.setZero();
        dbias_.setZero();
    }

    void collect(std::vector<ParamView<S>>& out, const std::string& prefix) {
        out.push_back({prefix + ".weight", weight_.data(), dweight_.data(), weight_.size(), false});
        out.push_back({prefix + ".bias", bias_.data(), dbias_.data(), bias_.size(), false});
    }

    int out_channels() const { return out_c_; }
    int stride() const { return stride_; }

private:
    static constexpr int kKernel = 3;
    static constexpr int kPad = 1;

    MatrixX<S> im2col(const Tensor<S>& x, int ho, int wo) const {
        const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
        MatrixX<S> cols = MatrixX<S>::Zero(static_cast<Eigen::Index>(b) * ho * wo,
                                           kKernel * kKernel * c);
        for (int bi = 0; bi < b; ++bi) {
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox) {
                    const Eigen::Index row = (static_cast<Eigen::Index>(bi) * ho + oy) * wo + ox;
                    for (int ky = 0; ky < kKernel; ++ky) {
                        const int iy = oy * stride_ - kPad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kKernel; ++kx) {
                            const int ix = ox * stride_ - kPad + kx;
                            if (ix < 0 || ix >= w) continue;
                            const S* src = x.data() + (((static_cast<std::int64_t>(bi) * h + iy) * w + ix) * c);
                            S* dst = cols.data() + row * cols.cols() + (ky * kKernel + kx) * c;
                            for (int ci = 0; ci < c; ++ci) dst[ci] = src[ci];
                        }
                    }
                }
            }
        }
        return cols;
    }

    Tensor<S> col2im(const MatrixX<S>& dcols, const std::vector<int>& in_shape, int ho, int wo) const {
        const int b = in_shape[0], h = in_shape[1], w = in_shape[2], c = in_shape[3];
        Tensor<S> dx(in_shape);
        for (int bi = 0; bi < b; ++bi) {
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox) {
                    const Eigen::Index row = (static_cast<Eigen::Index>(bi) * ho + oy) * wo + ox;
                    for (int ky = 0; ky < kKernel; ++ky) {
                        const int iy = oy * stride_ - kPad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kKernel; ++kx) {
                            const int ix = ox * stride_ - kPad + kx;
                            if (ix < 0 || ix >= w) continue;
                            S* dst = dx.data() + (((static_cast<std::int64_t>(bi) * h + iy) * w + ix) * c);
                            const S* src = dcols.data() + row * dcols.cols() + (ky * kKernel + kx) * c;
                            for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci];
                        }
                    }
                }
            }
        }
        return dx;
    }

    int in_c_{0}, out_c_{0}, stride_{1};
    MatrixX<S> weight_, dweight_;
    VectorX<S> bias_, dbias_;
};

template <typename S>
inline void relu_inplace(Tensor<S>& x) {
    for (std::int64_t i = 0; i < x.numel(); ++i)
        if (x[static_cast<std::size_t>(i)] < S(0)) x[static_cast<std::size_t>(i)] = S(0);
}

// Backward through ReLU using the post-activation values (y > 0 iff the
// pre-activation was positive).
template <typename S>
inline Tensor<S> relu_backward(const Tensor<S>& dout, const Tensor<S>& post) {
    Tensor<S> dx = dout;
    for (std::int64_t i = 0; i < dx.numel(); ++i)
        if (post[static_cast<std::size_t>(i)] <= S(0)) dx[static_cast<std::size_t>(i)] = S(0);
    return dx;
}

// BxHxWxC -> BxC mean over the spatial grid.
template <typename S>
inline MatrixX<S> global_avg_pool(const Tensor<S>& x) {
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    MatrixX<S> out = MatrixX<S>::Zero(b, c);
    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int ci = 0; ci < c; ++ci) out(bi, ci) += x.at4(bi, y, xx, ci);
    out /= static_cast<S>(h * w);
    return out;
}

template <typename S>
inline Tensor<S> global_avg_pool_backward(const MatrixX<S>& dout, int h, int w) {
    const int b = static_cast<int>(dout.rows()), c = static_cast<int>(dout.cols());
    Tensor<S> dx({b, h, w, c});
    const S scale = S(1) / static_cast<S>(h * w);
    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int ci = 0; ci < c; ++ci) dx.at4(bi, y, xx, ci) = dout(bi, ci) * scale;
    return dx;
}

template <typename S>
class Linear {
public:
    Linear() = default;
    Linear(int in_dim, int out_dim) : in_(in_dim), out_(out_dim) {
        weight_ = MatrixX<S>::Zero(out_, in_);
        bias_ = VectorX<S>::Zero(out_);
        dweight_ = weight_;
        dbias_ = bias_;
    }

    void init(Rng& rng) {
        const double std = std::sqrt(2.0 / static_cast<double>(in_));
        for (Eigen::Index i = 0; i < weight_.rows(); ++i)
            for (Eigen::Index j = 0; j < weight_.cols(); ++j)
                weight_(i, j) = static_cast<S>(rng.normal(0.0, std));
        bias_.setZero();
    }

    MatrixX<S> forward(const MatrixX<S>& x) const {
        MatrixX<S> y = x * weight_.transpose();
        y.rowwise() += bias_.transpose();
        return y;
    }

    MatrixX<S> backward(const MatrixX<S>& dout, const MatrixX<S>& x_in) {
        dweight_.noalias() += dout.transpose() * x_in;
        dbias_ += dout.colwise().sum().transpose();
        return dout * weight_;
    }

    MatrixX<S> backward_input_only(const MatrixX<S>& dout) const { return dout * weight_; }

    void zero_grad() {
        dweight_.setZero();
        dbias_.setZero();
    }

    void collect(std::vector<ParamView<S>>& out, const std::string& prefix, bool head) {
        out.push_back({prefix + ".weight", weight_.data(), dweight_.data(), weight_.size(), head});
        out.push_back({prefix + ".bias", bias_.data(), dbias_.data(), bias_.size(), head});
    }

    const MatrixX<S>& weight() const { return weight_; }

private:
    int in_{0}, out_{0};
    MatrixX<S> weight_, dweight_;
    VectorX<S> bias_, dbias_;
};

// Batch normalization over feature columns of a BxD matrix. Normalization
// uses the biased batch variance; running statistics follow the same
// convention.
template <typename S>
class BatchNorm1d {
public:
    BatchNorm1d() = default;
    explicit BatchNorm1d(int dim) : dim_(dim) {
        gamma_ = VectorX<S>::Ones(dim);
        beta_ = VectorX<S>::Zero(dim);
        dgamma_ = VectorX<S>::Zero(dim);
        dbeta_ = VectorX<S>::Zero(dim);
        running_mean_ = VectorX<S>::Zero(dim);
        running_var_ = VectorX<S>::Ones(dim);
    }

    struct Cache {
        MatrixX<S> xhat;
        VectorX<S> inv_std;
    };

    MatrixX<S> forward_train(const MatrixX<S>& x, Cache& cache) {
        const auto b = static_cast<S>(x.rows());
        VectorX<S> mean = x.colwise().mean().transpose();
        MatrixX<S> centered = x.rowwise() - mean.transpose();
        VectorX<S> var = (centered.array().square().colwise().sum() / b).matrix().transpose();
        cache.inv_std = (var.array() + S(kEps)).sqrt().inverse().matrix();
        cache.xhat = (centered.array().rowwise() * cache.inv_std.transpose().array()).matrix();
        running_mean_ = (S(1) - S(kMomentum)) * running_mean_ + S(kMomentum) * mean;
        running_var_ = (S(1) - S(kMomentum)) * running_var_ + S(kMomentum) * var;
        MatrixX<S> y = (cache.xhat.array().rowwise() * gamma_.transpose().array()).matrix();
        y.rowwise() += beta_.transpose();
        return y;
    }

    MatrixX<S> forward_eval(const MatrixX<S>& x) const {
        VectorX<S> inv_std = (running_var_.array() + S(kEps)).sqrt().inverse().matrix();
        MatrixX<S> y = ((x.rowwise() - running_mean_.transpose()).array().rowwise() *
                        (gamma_.array() * inv_std.array()).transpose())
                           .matrix();
        y.rowwise() += beta_.transpose();
        return y;
    }

    MatrixX<S> backward(const MatrixX<S>& dout, const Cache& cache) {
        const auto b = static_cast<S>(dout.rows());
        dbeta_ += dout.colwise().sum().transpose();
        dgamma_ += (dout.array() * cache.xhat.array()).colwise().sum().matrix().transpose();
        MatrixX<S> dxhat = (dout.array().rowwise() * gamma_.transpose().array()).matrix();
        VectorX<S> sum_dxhat = dxhat.colwise().sum().transpose();
        VectorX<S> sum_dxhat_xhat =
            (dxhat.array() * cache.xhat.array()).colwise().sum().matrix().transpose();
        MatrixX<S> dx = b * dxhat;
        dx.rowwise() -= sum_dxhat.transpose();
        dx -= (cache.xhat.array().rowwise() * sum_dxhat_xhat.transpose().array()).matrix();
        dx.array().rowwise() *= (cache.inv_std.transpose().array() / b);
        return dx;
    }

    MatrixX<S> backward_eval(const MatrixX<S>& dout) const {
        VectorX<S> inv_std = (running_var_.array() + S(kEps)).sqrt().inverse().matrix();
        return (dout.array().rowwise() * (gamma_.array() * inv_std.array()).transpose()).matrix();
    }

    void zero_grad() {
        dgamma_.setZero();
        dbeta_.setZero();
    }

    void collect(std::vector<ParamView<S>>& out, const std::string& prefix) {
        out.push_back({prefix + ".gamma", gamma_.data(), dgamma_.data(), gamma_.size(), true});
        out.push_back({prefix + ".beta", beta_.data(), dbeta_.data(), beta_.size(), true});
    }

    VectorX<S>& running_mean() { return running_mean_; }
    VectorX<S>& running_var() { return running_var_; }
    const VectorX<S>& running_mean() const { return running_mean_; }
    const VectorX<S>& running_var() const { return running_var_; }

private:
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;

    int dim_{0};
    VectorX<S> gamma_, beta_, dgamma_, dbeta_;
    VectorX<S> running_mean_, running_var_;
};

// Linear classifier with weight normalization: each effective weight row is
// a unit direction v/|v| scaled by a magnitude parameter g.
template <typename S>
class WeightNormLinear {
public:
    WeightNormLinear() = default;
    WeightNormLinear(int in_dim, int out_dim) : in_(in_dim), out_(out_dim) {
        v_ = MatrixX<S>::Zero(out_, in_);
        g_ = VectorX<S>::Ones(out_);
        bias_ = VectorX<S>::Zero(out_);
        dv_ = v_;
        dg_ = VectorX<S>::Zero(out_);
        dbias_ = bias_;
    }

    void init(Rng& rng) {
        const double std = std::sqrt(1.0 / static_cast<double>(in_));
        for (Eigen::Index i = 0; i < v_.rows(); ++i)
            for (Eigen::Index j = 0; j < v_.cols(); ++j)
                v_(i, j) = static_cast<S>(rng.normal(0.0, std));
        // g starts at |v| so the effective weight equals v at initialization.
        for (Eigen::Index i = 0; i < v_.rows(); ++i) g_(i) = v_.row(i).norm();
        bias_.setZero();
    }

    MatrixX<S> effective_weight() const {
        MatrixX<S> w = v_;
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            const S n = v_.row(r).norm();
            w.row(r) *= g_(r) / n;
        }
        return w;
    }

    MatrixX<S> forward(const MatrixX<S>& x) const {
        MatrixX<S> y = x * effective_weight().transpose();
        y.rowwise() += bias_.transpose();
        return y;
    }

    MatrixX<S> backward(const MatrixX<S>& dout, const MatrixX<S>& x_in) {
        MatrixX<S> dw = dout.transpose() * x_in;  // gradient w.r.t. effective weight
        for (Eigen::Index r = 0; r < v_.rows(); ++r) {
            const S n = v_.row(r).norm();
            VectorX<S> vhat = v_.row(r).transpose() / n;
            const S dot = dw.row(r) * vhat;
            dg_(r) += dot;
            dv_.row(r) += (g_(r) / n) * (dw.row(r) - dot * vhat.transpose());
        }
        dbias_ += dout.colwise().sum().transpose();
        return dout * effective_weight();
    }

    MatrixX<S> backward_input_only(const MatrixX<S>& dout) const {
        return dout * effective_weight();
    }

    // Rescales each direction vector to unit norm; the effective weight is
    // unchanged.
    void renormalize() {
        for (Eigen::Index r = 0; r < v_.rows(); ++r) v_.row(r) /= v_.row(r).norm();
    }

    void zero_grad() {
        dv_.setZero();
        dg_.setZero();
        dbias_.setZero();
    }

    void collect(std::vector<ParamView<S>>& out, const std::string& prefix) {
        out.push_back({prefix + ".v", v_.data(), dv_.data(), v_.size(), true});
        out.push_back({prefix + ".g", g_.data(), dg_.data(), g_.size(), true});
        out.push_back({prefix + ".bias", bias_.data(), dbias_.data(), bias_.size(), true});
    }

private:
    int in_{0}, out_{0};
    MatrixX<S> v_, dv_;
    VectorX<S> g_, dg_, bias_, dbias_;
};

}  // namespace layers
}  // namespace sfuda
