#include "bsprune/optimizer.hpp"

#include <cmath>

#include "bsprune/error.hpp"

namespace bsprune {

double cosine_lr(std::int64_t t, std::int64_t total, double lr_min, double lr_max) {
    if (total <= 0) throw Error::config("cosine_lr: total steps must be positive");
    if (t < 0 || t > total) throw Error::config("cosine_lr: step outside [0, total]");
    const double phase = M_PI * static_cast<double>(t) / static_cast<double>(total);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

void sgd_step_inplace(std::vector<float>& param, const std::vector<float>& grad, std::vector<float>& velocity,
                      double lr, double momentum, bool clamp_non_negative) {
    if (lr <= 0.0) throw Error::config("sgd_step: learning rate must be positive");
    velocity.resize(param.size(), 0.f);
    for (size_t i = 0; i < param.size(); ++i) {
        velocity[i] = static_cast<float>(momentum * velocity[i] - lr * grad[i]);
        param[i] += velocity[i];
        if (clamp_non_negative && param[i] < 0.f) param[i] = 0.f;
    }
}

void SgdMomentum::step(NetGraph& g, const Gradients& grads, double lr) {
    for (auto& n : g.nodes) {
        const auto apply = [&](ParamSlot slot, Tensor& t, bool clamp) {
            const Tensor* grad = grads.find(n.id, slot);
            if (!grad) return;
            if (grad->numel() != t.numel()) throw Error::numeric("sgd: gradient extent mismatch on '" + n.name + "'");
            auto& v = velocity_[param_handle(n.id, slot)];
            sgd_step_inplace(t.data, grad->data, v, lr, momentum_, clamp);
        };
        if (n.kind == LayerKind::bn && n.bn_trainable) {
            apply(ParamSlot::gamma, n.gamma, false);
            apply(ParamSlot::beta, n.beta, false);
        } else if (n.kind == LayerKind::basis_scaling_conv && n.scale_trainable) {
            apply(ParamSlot::scale, n.scale, true);
        } else if (n.kind == LayerKind::dense && n.dense_trainable) {
            apply(ParamSlot::weight, n.weight, false);
            apply(ParamSlot::bias, n.bias, false);
        }
    }
}

}  // namespace bsprune
