#pragma once

#include <cstdint>
#include <vector>

#include "bsprune/dataset.hpp"
#include "bsprune/graph.hpp"

namespace bsprune {

struct TrainConfig {
    int epochs = 10;
    int batch_size = 32;
    double lr_min = 1e-4;
    double lr_max = 1e-1;
    double momentum = 0.9;
    bool augment_shift = false;
    bool augment_flip = false;
    double shift_fraction = 0.15;
    double dropout = 0.0;
    std::uint64_t seed = 1;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_accuracy = 0.0;
};

/// SGD with momentum 0.9 and cosine-annealed learning rate over the stage
/// (the schedule restarts at each stage). Only the trainable set moves;
/// scaling vectors are clamped non-negative after every step. Deterministic
/// for a fixed config and seed. Throws with the epoch index if the loss
/// goes non-finite.
std::vector<EpochStats> train_stage(NetGraph& g, const Dataset& train, const Dataset& val, const TrainConfig& cfg);

double evaluate_accuracy(NetGraph& g, const Dataset& ds, int batch_size);

/// One pass over the training split refreshing the BN running statistics
/// (batch-statistic averages); no parameter updates.
void recompute_bn_stats(NetGraph& g, const Dataset& train, int batch_size);

}  // namespace bsprune
