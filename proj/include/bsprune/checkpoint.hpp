#pragma once

#include <string>

#include "bsprune/graph.hpp"

namespace bsprune {

/// Binary checkpoint container: 8-byte magic "BSPRUNE1", a length-prefixed
/// JSON topology section, then the weight tensors as
/// (node id, slot, dtype=f32, rank, extents, raw little-endian payload).
/// load(save(g)) reproduces the graph with bit-exact tensors.
void save_checkpoint(const NetGraph& g, const std::string& path);
NetGraph load_checkpoint(const std::string& path);

}  // namespace bsprune
