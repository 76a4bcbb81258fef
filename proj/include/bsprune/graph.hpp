#pragma once

#include <string>
#include <vector>

#include "bsprune/ops.hpp"
#include "bsprune/tensor.hpp"

namespace bsprune {

enum class LayerKind {
    input,
    conv,
    basis_scaling_conv,
    bn,
    relu,
    maxpool,
    avgpool,
    global_avg_pool,
    add,
    concat,
    dense,
};

const char* kind_name(LayerKind k);
LayerKind kind_from_name(const std::string& name);

/// Per-activation shape (height, width, channels); the batch dimension is a
/// runtime property of tensors, not of the graph.
struct ActShape {
    int h = 0, w = 0, c = 0;
    bool operator==(const ActShape&) const = default;
};

struct LayerNode {
    int id = -1;
    std::string name;
    LayerKind kind = LayerKind::input;
    std::vector<int> inputs;  // producer node ids

    // conv / basis_scaling_conv / pool hyperparameters
    int kh = 0, kw = 0;
    int stride = 1;
    Padding padding = Padding::same;
    bool has_bias = false;

    // Parameters. conv: weight [kh,kw,ci,co] (frozen); bsconv: weight is
    // Vbar^T stored [r,co] (frozen), scale is s [r]; dense: weight [in,out];
    // bn: gamma/beta/running_mean/running_var [c].
    Tensor weight;
    Tensor bias;
    Tensor scale;
    Tensor gamma, beta, running_mean, running_var;

    // bsconv bookkeeping: singular values at decomposition time (aligned to
    // the surviving basis indices) and the paired U-conv node.
    std::vector<double> sigma;
    int pair_u_id = -1;

    bool bn_trainable = false;
    bool dense_trainable = false;
    bool scale_trainable = false;  // the s vector of a bsconv

    ActShape out_shape;

    bool is_conv_like() const { return kind == LayerKind::conv || kind == LayerKind::basis_scaling_conv; }
};

struct NetGraph {
    std::vector<LayerNode> nodes;  // topological order
    int input_id = -1;
    int output_id = -1;

    LayerNode& node(int id);
    const LayerNode& node(int id) const;
    bool has_node(int id) const;

    int add_node(LayerNode n);  // assigns the next id, appends
    std::vector<int> consumers(int id) const;

    /// Verifies the DAG invariants and recomputes every out_shape. Throws a
    /// config error naming the offending node on any inconsistency.
    void infer_shapes();

    int conv_layer_count() const;  // plain conv nodes (decomposed pairs count their U-conv)
    int last_conv_id() const;      // last conv-like node in topological order, -1 if none

    /// Drops nodes not in `keep` (ids), preserving order, and remaps edges.
    void retain_nodes(const std::vector<char>& keep);
};

}  // namespace bsprune
