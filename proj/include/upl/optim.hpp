// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "upl/tensor.hpp"

namespace upl {

/// A trainable tensor with a stable name (checkpoint key).
struct NamedParam {
    std::string name;
    Tensor tensor;  // shares storage with the owning model
};

struct AdamMoments {
    std::vector<float> m;
    std::vector<float> v;
};

/// Adam state: step count plus first/second moments keyed by parameter name.
struct AdamState {
    std::uint64_t step = 0;
    std::map<std::string, AdamMoments> moments;

    bool empty() const { return step == 0 && moments.empty(); }
};

/// Adam with bias correction.
class Adam {
   public:
    explicit Adam(float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (!(lr >= 0.0f)) throw std::invalid_argument("Adam: learning rate must be non-negative");
    }

    void set_lr(float lr) { lr_ = lr; }
    float lr() const { return lr_; }

    AdamState& state() { return state_; }
    const AdamState& state() const { return state_; }

    /// Applies one update to every parameter using its gradient buffer.
    void step(std::vector<NamedParam>& params) {
        ++state_.step;
        const double t = static_cast<double>(state_.step);
        const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), t);
        const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), t);
        for (auto& p : params) {
            auto g = p.tensor.grad();
            auto& mom = state_.moments[p.name];
            if (mom.m.empty()) {
                mom.m.assign(g.size(), 0.0f);
                mom.v.assign(g.size(), 0.0f);
            }
            if (mom.m.size() != g.size()) throw std::logic_error("Adam: moment size mismatch for " + p.name);
            auto w = p.tensor.mutable_data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                mom.m[i] = beta1_ * mom.m[i] + (1.0f - beta1_) * g[i];
                mom.v[i] = beta2_ * mom.v[i] + (1.0f - beta2_) * g[i] * g[i];
                const double mhat = mom.m[i] / bc1;
                const double vhat = mom.v[i] / bc2;
                w[i] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

   private:
    float lr_, beta1_, beta2_, eps_;
    AdamState state_;
};

inline void zero_grads(std::vector<NamedParam>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace upl
