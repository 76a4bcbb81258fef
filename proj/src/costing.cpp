#include "bsprune/costing.hpp"

namespace bsprune {

CostReport cost_report(const NetGraph& g) {
    CostReport rep;
    for (const auto& n : g.nodes) {
        LayerCost lc;
        lc.node_id = n.id;
        lc.name = n.name;
        const std::int64_t area = static_cast<std::int64_t>(n.out_shape.h) * n.out_shape.w;
        switch (n.kind) {
        case LayerKind::conv: {
            const std::int64_t k = static_cast<std::int64_t>(n.kh) * n.kw * n.weight.dim(2);
            const std::int64_t co = n.weight.dim(3);
            lc.params = k * co + (n.has_bias ? co : 0);
            lc.flops = area * k * co;
            break;
        }
        case LayerKind::basis_scaling_conv: {
            const std::int64_t r = n.weight.dim(0);
            const std::int64_t co = n.weight.dim(1);
            lc.params = r * co + r + (n.has_bias ? co : 0);
            lc.flops = area * r * co;
            if (n.scale_trainable) rep.trainable_params += r;
            break;
        }
        case LayerKind::bn: {
            const std::int64_t c = n.gamma.numel();
            lc.params = 4 * c;
            if (n.bn_trainable) rep.trainable_params += 2 * c;
            break;
        }
        case LayerKind::dense: {
            const std::int64_t in = n.weight.dim(0);
            const std::int64_t out = n.weight.dim(1);
            lc.params = (in + 1) * out;
            lc.flops = in * out;
            if (n.dense_trainable) rep.trainable_params += (in + 1) * out;
            break;
        }
        default:
            break;
        }
        rep.total_params += lc.params;
        rep.total_flops += lc.flops;
        rep.layers.push_back(std::move(lc));
    }
    return rep;
}

std::int64_t count_params(const NetGraph& g) { return cost_report(g).total_params; }

std::int64_t count_flops(const NetGraph& g) { return cost_report(g).total_flops; }

std::int64_t count_flops(const NetGraph& g, ActShape input_extent) {
    NetGraph copy = g;
    copy.node(copy.input_id).out_shape = input_extent;
    copy.infer_shapes();
    return cost_report(copy).total_flops;
}

std::int64_t trainable_param_count(const NetGraph& g) { return cost_report(g).trainable_params; }

}  // namespace bsprune
