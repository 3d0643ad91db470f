#pragma once

#include <cmath>
#include <vector>

#include "hspec/tensor.hpp"

namespace hspec {

// Per-parameter AdamW state. One instance per trained tensor; step()
// consumes the tensor's accumulated grad and leaves it untouched.
template <typename T>
struct AdamW {
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0);
    std::vector<T> m, v;
    long step_count = 0;

    void step(Tensor<T>& param, T lr) {
        auto& g = param.grad_ref();
        auto& p = param.node()->value;
        if (m.empty()) {
            m.assign(p.size(), T(0));
            v.assign(p.size(), T(0));
        }
        ++step_count;
        const T bc1 = T(1) - std::pow(beta1, T(step_count));
        const T bc2 = T(1) - std::pow(beta2, T(step_count));
        for (size_t i = 0; i < p.size(); ++i) {
            m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
            v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
        }
    }
};

// Linear warmup to peak_lr, then cosine decay to zero over the remaining
// steps. Step indices are zero-based.
inline double cosine_lr(long step, long warmup_steps, long total_steps, double peak_lr) {
    if (total_steps <= 0) throw InputError("cosine_lr: total_steps must be positive");
    if (warmup_steps < 0 || warmup_steps > total_steps)
        throw InputError("cosine_lr: bad warmup_steps");
    if (step < warmup_steps) return peak_lr * double(step + 1) / double(warmup_steps);
    if (step >= total_steps) return 0.0;
    const double t = double(step - warmup_steps) / double(total_steps - warmup_steps);
    return 0.5 * peak_lr * (1.0 + std::cos(t * 3.14159265358979323846));
}

// Bundles the parameters of one module with their optimizer states.
template <typename T>
struct ParamGroup {
    std::vector<Tensor<T>*> params;
    std::vector<AdamW<T>> states;

    void init(std::vector<Tensor<T>*> ps, T weight_decay = T(0)) {
        params = std::move(ps);
        states.assign(params.size(), AdamW<T>{});
        for (auto& s : states) s.weight_decay = weight_decay;
        for (auto* p : params) p->set_requires_grad(true);
    }
    void step(T lr) {
        for (size_t i = 0; i < params.size(); ++i) states[i].step(*params[i], lr);
    }
    void zero_grad() {
        for (auto* p : params) p->zero_grad();
    }
    size_t numel() const {
        size_t n = 0;
        for (auto* p : params) n += p->numel();
        return n;
    }
};

}  // namespace hspec
