#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "loctrans/tensor.hpp"

namespace loctrans {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Bias-corrected Adam. Moment buffers are created on the first step and keyed
// by position, so every step must see the same parameter list.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m, v;
};

// Applies one update from each tensor's gradient buffer (a missing buffer is a
// zero gradient). Throws DivergenceError naming the first parameter whose
// gradient is not finite, before anything is modified. lr_scale, when given,
// multiplies the learning rate per parameter.
void adam_step(const NamedTensors& params, AdamState& state, double lr,
               std::span<const double> lr_scale = {});

// Global L2 norm over all gradient buffers.
double grad_norm(const NamedTensors& params);

// Rescales every gradient so the global norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(const NamedTensors& params, double max_norm);

} // namespace loctrans
