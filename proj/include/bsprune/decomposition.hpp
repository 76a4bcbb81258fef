#pragma once

#include "bsprune/factorization.hpp"
#include "bsprune/graph.hpp"

namespace bsprune {

struct DecomposedPair {
    int u_id = -1;   // conv node carrying U (frozen, no bias)
    int bs_id = -1;  // basis_scaling_conv node carrying s, Vbar^T, bias
};

/// Splits one conv into a U-conv followed by a BasisScalingConv. The pair's
/// external input/output channel counts equal the original layer's; only s
/// is trainable. Throws on a second decomposition of the same layer and on
/// an all-zero kernel.
DecomposedPair decompose_conv(NetGraph& g, int conv_id, float s_init = 0.5f);

/// Decomposes every conv layer (1x1 convs and shortcuts included). The
/// factorizations run in parallel across layers; workers == 0 uses
/// BSPRUNE_THREADS (default: hardware concurrency).
void decompose_all(NetGraph& g, float s_init = 0.5f, int workers = 0);

/// Inverse direction for testing/export: a single conv with kernel
/// reshape^-1(U * diag(s) * Vbar^T) and the pair's bias.
LayerNode fuse_pair(const NetGraph& g, int u_id, int bs_id);

std::vector<DecomposedPair> decomposed_pairs(const NetGraph& g);

int worker_thread_count();  // BSPRUNE_THREADS override, else hardware concurrency

}  // namespace bsprune
