#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "deltafusion/errors.hpp"
#include "deltafusion/tensor.hpp"

namespace deltafusion {

// Adam with decoupled weight decay: the decay shrinks the parameter directly
// and never enters the moment estimates.
class Adam {
  public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    // lr = 0 is legal and makes every step a no-op; handy for freeze checks.
    Adam(std::vector<Tensor> params, Options opt) : params_(std::move(params)), opt_(opt) {
        if (opt_.lr < 0.0) throw ConfigError("Adam: lr must be non-negative");
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Tensor& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    std::size_t step_count() const { return t_; }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Tensor& p = params_[k];
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                double& w = p.data()[i];
                if (opt_.weight_decay != 0.0) w -= opt_.lr * opt_.weight_decay * w;
                const double g = p.grad_at(i);
                m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
                v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
            }
        }
    }

    void zero_grad() { zero_grads(params_); }

  private:
    std::vector<Tensor> params_;
    Options opt_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

} // namespace deltafusion
