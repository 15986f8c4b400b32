#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "leakgan/layers.hpp"

namespace leakgan {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over a fixed parameter list. Moment buffers are named after the
/// parameters so they can be checkpointed.
template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(std::string name, std::vector<Param<T>*> params, AdamConfig cfg)
        : name_(std::move(name)), params_(std::move(params)), cfg_(cfg) {
        for (auto* p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T lr = static_cast<T>(cfg_.lr / bc1);
        const T inv_bc2 = static_cast<T>(1.0 / bc2);
        const T eps = static_cast<T>(cfg_.eps);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& w = params_[i]->value.values();
            const auto& g = params_[i]->grad.values();
            auto& m = m_[i].values();
            auto& v = v_[i].values();
            for (std::size_t k = 0; k < w.size(); ++k) {
                m[k] = b1 * m[k] + (T(1) - b1) * g[k];
                v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
                w[k] -= lr * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
            }
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    std::uint64_t steps() const noexcept { return t_; }
    void set_steps(std::uint64_t t) noexcept { t_ = t; }
    AdamConfig& config() noexcept { return cfg_; }

    std::vector<Buffer<T>> state() {
        std::vector<Buffer<T>> out;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            out.push_back({name_ + "." + params_[i]->name + ".m", &m_[i]});
            out.push_back({name_ + "." + params_[i]->name + ".v", &v_[i]});
        }
        return out;
    }

private:
    std::string name_;
    std::vector<Param<T>*> params_;
    std::vector<Tensor<T>> m_, v_;
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
};

}  // namespace leakgan
