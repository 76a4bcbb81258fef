#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bsprune/graph.hpp"

namespace bsprune {

struct LayerCost {
    int node_id = -1;
    std::string name;
    std::int64_t params = 0;
    std::int64_t flops = 0;
};

/// Parameter and FLOP accounting. FLOPs are multiply-accumulates:
/// conv = h'*w'*kh*kw*ci*co, dense = in*out, everything element-wise
/// (BN, activations, pooling, the channel scaling of a BasisScalingConv)
/// counts as zero.
struct CostReport {
    std::vector<LayerCost> layers;
    std::int64_t total_params = 0;
    std::int64_t total_flops = 0;
    std::int64_t trainable_params = 0;
};

CostReport cost_report(const NetGraph& g);

std::int64_t count_params(const NetGraph& g);
std::int64_t count_flops(const NetGraph& g);
std::int64_t count_flops(const NetGraph& g, ActShape input_extent);  // re-infers on a copy
std::int64_t trainable_param_count(const NetGraph& g);

}  // namespace bsprune
