#pragma once

#include <unordered_map>

#include "bsprune/graph.hpp"
#include "bsprune/ops.hpp"
#include "bsprune/rng.hpp"

namespace bsprune {

enum class ExecMode { train, infer };

enum class ParamSlot : int { weight = 0, bias = 1, scale = 2, gamma = 3, beta = 4 };

inline std::int64_t param_handle(int node_id, ParamSlot slot) {
    return (static_cast<std::int64_t>(node_id) << 3) | static_cast<std::int64_t>(slot);
}

struct ForwardOptions {
    ExecMode mode = ExecMode::infer;
    bool update_running_stats = true;  // BN EMA; off for gradient probing
    float dropout_rate = 0.f;          // applied to dense inputs in train mode
    Rng* dropout_rng = nullptr;
};

/// Records everything backward needs. A tape is valid for exactly one
/// forward pass of one batch.
struct Tape {
    bool valid = false;
    ExecMode mode = ExecMode::infer;
    std::unordered_map<int, Tensor> out;  // node id -> activation
    std::unordered_map<int, BatchNormCache> bn;
    std::unordered_map<int, std::vector<std::int64_t>> pool_argmax;
    std::unordered_map<int, Tensor> dense_input;  // post-dropout input actually consumed
    std::unordered_map<int, Tensor> dropout_mask;
};

/// Runs the graph on a batch [b,h,w,c]; returns the output node's
/// activation (logits [b, classes] for a classifier head).
Tensor forward(NetGraph& g, const Tensor& x, const ForwardOptions& opts, Tape* tape = nullptr);

struct Gradients {
    std::unordered_map<std::int64_t, Tensor> param;       // handle -> grad
    std::unordered_map<int, Tensor> node_output;          // node id -> d(loss)/d(output)

    const Tensor* find(int node_id, ParamSlot slot) const {
        auto it = param.find(param_handle(node_id, slot));
        return it == param.end() ? nullptr : &it->second;
    }
};

/// Reverse pass from d(loss)/d(logits). Gradients are produced only for the
/// trainable set (BN gamma/beta, basis scaling vectors, the dense head);
/// they flow through frozen conv weights but are never materialized for
/// them. Throws if the tape has not recorded a forward pass.
Gradients backward(const NetGraph& g, const Tape& tape, const Tensor& dlogits);

}  // namespace bsprune
