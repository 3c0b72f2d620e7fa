#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "sfuda/errors.hpp"
#include "sfuda/layers.hpp"

namespace sfuda {

struct OptimizerConfig {
    double lr{1e-4};
    double head_lr_mult{10.0};  // bottleneck/norm/classifier group
    double momentum{0.9};
    double weight_decay{1e-3};
};

// SGD with momentum and decoupled parameter groups (backbone vs head).
// Weight decay is added to the gradient before the momentum update.
template <typename S>
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<ParamView<S>> params, OptimizerConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_)
            buffers_[p.name].assign(static_cast<std::size_t>(p.size), S(0));
    }

    void step() {
        for (const auto& p : params_) {
            auto& buf = buffers_[p.name];
            const S lr = static_cast<S>(p.head ? cfg_.lr * cfg_.head_lr_mult : cfg_.lr);
            const S mu = static_cast<S>(cfg_.momentum);
            const S wd = static_cast<S>(cfg_.weight_decay);
            for (std::int64_t i = 0; i < p.size; ++i) {
                const S g = p.grad[i] + wd * p.value[i];
                buf[static_cast<std::size_t>(i)] = mu * buf[static_cast<std::size_t>(i)] + g;
                p.value[i] -= lr * buf[static_cast<std::size_t>(i)];
                if (!std::isfinite(static_cast<double>(p.value[i])))
                    throw NumericError("optimizer produced non-finite parameter in " + p.name);
            }
        }
    }

    const OptimizerConfig& config() const { return cfg_; }

    std::map<std::string, std::vector<S>>& state() { return buffers_; }
    const std::map<std::string, std::vector<S>>& state() const { return buffers_; }

private:
    std::vector<ParamView<S>> params_;
    OptimizerConfig cfg_;
    std::map<std::string, std::vector<S>> buffers_;
};

}  // namespace sfuda
