#pragma once

#include <cmath>
#include <map>
#include <string>

#include "ssmg/tape.hpp"
#include "ssmg/tensor.hpp"

namespace ssmg {

// AdamW with decoupled weight decay. Rank-0/1 parameters (biases, norm
// affines, gates) are excluded from decay.
template <typename T>
struct AdamW {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0.01);
    int64_t step_count = 0;
    std::map<std::string, TensorT<T>> m;
    std::map<std::string, TensorT<T>> v;

    void step(ParamStore<T>& params) {
        ++step_count;
        T bc1 = T(1) - std::pow(beta1, static_cast<T>(step_count));
        T bc2 = T(1) - std::pow(beta2, static_cast<T>(step_count));
        for (const auto& p : params.all()) {
            if (!p->trainable) continue;
            auto& mt = m.try_emplace(p->name, TensorT<T>(p->value.shape)).first->second;
            auto& vt = v.try_emplace(p->name, TensorT<T>(p->value.shape)).first->second;
            bool decay = p->value.shape.size() >= 2;
            T* w = p->value.ptr();
            const T* g = p->grad.ptr();
            T* mp = mt.ptr();
            T* vp = vt.ptr();
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                mp[i] = beta1 * mp[i] + (T(1) - beta1) * g[i];
                vp[i] = beta2 * vp[i] + (T(1) - beta2) * g[i] * g[i];
                T mhat = mp[i] / bc1;
                T vhat = vp[i] / bc2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
                if (decay) w[i] -= lr * weight_decay * w[i];
            }
        }
    }
};

}  // namespace ssmg
