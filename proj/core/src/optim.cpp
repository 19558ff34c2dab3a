#include "mfl/optim.hpp"

#include <cmath>
#include <numbers>

#include "mfl/error.hpp"

namespace mfl {

void zero_grads(ParamList& params) {
    // Allocates missing buffers: a trainable parameter that no token
    // touches this step has an exactly-zero gradient, not a missing one.
    for (auto& p : params) {
        if (p.tensor.requires_grad()) p.tensor.mutable_grad();
        p.tensor.zero_grad();
    }
}

void Sgd::step(ParamList& params) {
    for (auto& p : params) {
        if (!p.tensor.requires_grad()) continue;
        if (!p.tensor.has_grad()) throw StateError("sgd_step: parameter '" + p.name + "' has no gradient");
        auto w = p.tensor.mutable_data();
        const auto g = p.tensor.grad();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
    }
}

void AdamW::step(ParamList& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& p : params) {
        if (!p.tensor.requires_grad()) continue;
        if (!p.tensor.has_grad()) throw StateError("adamw_step: parameter '" + p.name + "' has no gradient");
        auto w = p.tensor.mutable_data();
        const auto g = p.tensor.grad();
        auto& st = state_[p.tensor.impl()];
        if (st.m.empty()) {
            st.m.assign(w.size(), 0.0);
            st.v.assign(w.size(), 0.0);
        }
        for (std::size_t i = 0; i < w.size(); ++i) {
            st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
            st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = st.m[i] / bc1;
            const double vhat = st.v[i] / bc2;
            w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
        }
    }
}

double cosine_lr(double lr0, double min_frac, std::int64_t step, std::int64_t total_steps) {
    if (total_steps <= 1) return lr0;
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    const double lo = lr0 * min_frac;
    return lo + 0.5 * (lr0 - lo) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mfl
