#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "bsprune/executor.hpp"
#include "bsprune/graph.hpp"

namespace bsprune {

/// lr(t) = lr_min + (lr_max - lr_min)/2 * (1 + cos(pi * t / total)),
/// 0 <= t <= total; no restarts.
double cosine_lr(std::int64_t t, std::int64_t total, double lr_min = 1e-4, double lr_max = 1e-1);

/// Classic momentum update: v <- momentum*v - lr*g, p <- p + v, applied
/// element-wise; parameters under a non-negativity constraint are clamped
/// to >= 0 after the step.
void sgd_step_inplace(std::vector<float>& param, const std::vector<float>& grad, std::vector<float>& velocity,
                      double lr, double momentum, bool clamp_non_negative);

/// Velocity-carrying SGD over a graph's trainable set. Basis scaling
/// vectors are clamped non-negative after every step. Velocities are keyed
/// per parameter, so one optimizer instance serves one training stage of
/// one graph.
class SgdMomentum {
public:
    explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}

    void step(NetGraph& g, const Gradients& grads, double lr);

private:
    double momentum_;
    std::unordered_map<std::int64_t, std::vector<float>> velocity_;
};

}  // namespace bsprune
