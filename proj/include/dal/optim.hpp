/*
 * Copyright 2026 dalnet contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dal/nn/model.hpp"

namespace dal {

/// Cosine annealing from base_lr at step 0 to 0 at the final step.
inline double cosine_lr(long step, long total_steps, double base_lr) {
    if (total_steps <= 1) return base_lr;
    const double t = std::min(1.0, static_cast<double>(step) / (total_steps - 1));
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

/// Adaptive-moment update with decoupled weight decay:
///   p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
template <typename T>
class AdamW {
public:
    struct Config {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
    };

    explicit AdamW(Config cfg = {}) : cfg_(cfg) {}

    void step(std::vector<nn::ParamRef<T>>& params, const std::vector<nn::ParamRef<T>>& grads,
              double lr) {
        if (params.size() != grads.size())
            throw std::invalid_argument("parameter/gradient buffers misaligned");
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t t = 0; t < params.size(); ++t) {
                m_[t].assign(params[t].size, T(0));
                v_[t].assign(params[t].size, T(0));
            }
        }
        ++t_;
        const T b1 = static_cast<T>(cfg_.beta1);
        const T b2 = static_cast<T>(cfg_.beta2);
        const T bc1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, t_));
        const T bc2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, t_));
        const T eps = static_cast<T>(cfg_.eps);
        const T wd = static_cast<T>(cfg_.weight_decay);
        const T step_lr = static_cast<T>(lr);
        for (std::size_t t = 0; t < params.size(); ++t) {
            if (params[t].size != grads[t].size)
                throw std::invalid_argument("gradient shape mismatch at " + params[t].name);
            T* p = params[t].data;
            const T* g = grads[t].data;
            T* m = m_[t].data();
            T* v = v_[t].data();
            for (std::ptrdiff_t i = 0; i < params[t].size; ++i) {
                m[i] = b1 * m[i] + (T(1) - b1) * g[i];
                v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
                const T m_hat = m[i] / bc1;
                const T v_hat = v[i] / bc2;
                p[i] -= step_lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * p[i]);
            }
        }
    }

    long steps_taken() const { return t_; }

private:
    Config cfg_;
    long t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

}  // namespace dal
