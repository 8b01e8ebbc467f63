#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "tsattr/tensor.hpp"

namespace tsattr {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::map<std::string, Tensor> m, v;
    int64_t step = 0;
};

// Standard Adam with bias correction; rejects non-finite gradients so the
// caller can decide whether to skip or abort.
inline void adam_step(std::map<std::string, Tensor>& params,
                      const std::map<std::string, Tensor>& grads, AdamState& state,
                      const AdamHyper& h) {
    for (const auto& [name, grad] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw std::invalid_argument("adam_step: unknown parameter " + name);
        if (!it->second.same_shape(grad))
            throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
        if (!grad.all_finite())
            throw std::runtime_error("adam_step: non-finite gradient for " + name);
    }
    ++state.step;
    double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (const auto& [name, grad] : grads) {
        Tensor& p = params.at(name);
        Tensor& m = state.m.try_emplace(name, Tensor(p.shape)).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor(p.shape)).first->second;
        for (size_t i = 0; i < p.v.size(); ++i) {
            double gi = grad.v[i];
            m.v[i] = h.beta1 * m.v[i] + (1.0 - h.beta1) * gi;
            v.v[i] = h.beta2 * v.v[i] + (1.0 - h.beta2) * gi * gi;
            double mhat = m.v[i] / bc1;
            double vhat = v.v[i] / bc2;
            p.v[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
        }
    }
}

}  // namespace tsattr
