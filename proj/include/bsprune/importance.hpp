#pragma once

#include <string>
#include <vector>

#include "bsprune/dataset.hpp"
#include "bsprune/graph.hpp"

namespace bsprune {

enum class TargetKind { basis, channel };

struct LayerScores {
    int node_id = -1;
    std::string name;
    std::vector<double> raw;         // >= 0, aligned to basis or channel indices
    std::vector<double> normalized;  // raw / layer max; all-zero layers stay zero
    bool prunable = true;            // cleared for merge-protected layers
};

struct ImportanceTable {
    std::string method;
    TargetKind kind = TargetKind::basis;
    std::vector<LayerScores> layers;
};

/// Taylor-FO importance I = (g*s)^2, averaged over the evaluation batches.
/// Basis mode scores the s vector of every BasisScalingConv; channel mode
/// scores output channels of the prunable layers through the gamma of the
/// directly following BN (falling back to the activation-gradient product
/// when no BN consumes the layer). Gradients use inference-mode statistics
/// and leave the model unchanged.
ImportanceTable taylor_fo_scores(NetGraph& g, const Dataset& eval, int batch_size, TargetKind kind);

/// L1 norm of each output filter (channel mode). For a BasisScalingConv the
/// effective 1x1 filter is s-scaled: score_j = sum_i |s_i * Vbar^T[i,j]|.
ImportanceTable l1_scores(const NetGraph& g);

/// Average numerical rank of each channel's feature map over the evaluation
/// images; rank counts singular values above max(h,w) * sigma_max * 1e-6.
ImportanceTable hrank_scores(NetGraph& g, const Dataset& eval, int batch_size);

/// Basis-mode baselines: "singular" scores by sigma, "reverse" by
/// sigma_max - sigma + eps (so large-sigma vectors are pruned first),
/// "random" by a seeded uniform draw.
ImportanceTable baseline_scores(const NetGraph& g, const std::string& method, std::uint64_t seed);

void normalize_per_layer(ImportanceTable& table);

/// Pools all normalized scores of prunable layers; with m =
/// floor(remove_fraction * N) the threshold is the (m+1)-th smallest pooled
/// value. An item is pruned iff its score is strictly below the threshold,
/// so ties are kept and at most m items are pruned. remove_fraction == 0
/// returns -infinity.
double global_threshold(const ImportanceTable& table, double remove_fraction);

/// Line-oriented dump: `layer_id, index, raw, normalized`.
std::string serialize_table(const ImportanceTable& table);

}  // namespace bsprune
