#pragma once

#include <unordered_map>

#include "bsprune/costing.hpp"
#include "bsprune/graph.hpp"
#include "bsprune/importance.hpp"
#include "bsprune/rng.hpp"

namespace bsprune {

struct PruneMask {
    struct LayerMask {
        int node_id = -1;
        std::string name;
        std::vector<char> keep;
    };
    std::vector<LayerMask> basis;    // per decomposed pair, length r
    std::vector<LayerMask> channel;  // per prunable producer, length co
    std::string method;
    double threshold = 0.0;
    double fraction = 0.0;

    std::string serialize() const;  // `layer_id -> kept index list` lines
};

/// Removes basis vectors with normalized score below the threshold from
/// every decomposed pair: columns of U, entries of s, rows of Vbar^T. The
/// pair's external channel counts are unchanged. A pair reduced to r_p = 0
/// is removed together with everything downstream and the head is rebuilt;
/// emptying the first pair is an error ("model destroyed").
std::pair<NetGraph, PruneMask> basis_prune(const NetGraph& g, const ImportanceTable& table, double threshold,
                                           Rng& head_rng);

/// Output-channel pruning of the prunable producers with downstream
/// input-slice propagation (concat offsets tracked, BN sliced with its
/// channel). Layers feeding an element-wise merge are exempt.
std::pair<NetGraph, PruneMask> double_prune(const NetGraph& g, const ImportanceTable& table, double threshold);

/// Producers whose output reaches an add input through channel-preserving
/// nodes; their channels must stay intact.
std::vector<int> merge_protected_layers(const NetGraph& g);

/// Clears the prunable flag of merge-protected layers so global_threshold
/// pools only the prunable scores.
void mark_unprunable(ImportanceTable& table, const NetGraph& g);

/// Fixed-point channel-mask propagation: given keep-masks on producer
/// layers, returns a mask for every node's output. Masks reaching an add
/// are forced all-true (back through the branch). Idempotent.
std::unordered_map<int, std::vector<char>> propagate_masks(const NetGraph& g,
                                                           const std::unordered_map<int, std::vector<char>>& given);

struct PruneReport {
    std::int64_t params_before = 0, params_after = 0;
    std::int64_t flops_before = 0, flops_after = 0;
    double param_pr = 0.0, flop_pr = 0.0;  // 1 - after/before

    struct Row {
        std::string name;
        std::int64_t params_before = 0, params_after = 0;
        std::int64_t flops_before = 0, flops_after = 0;
    };
    std::vector<Row> rows;
};

PruneReport prune_report(const NetGraph& before, const NetGraph& after);

}  // namespace bsprune
