#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bsprune/tensor.hpp"

namespace bsprune {

struct Dataset {
    Tensor images;  // [n, h, w, c], zero-centered in intensity
    std::vector<int> labels;
    std::string split = "train";
    int num_classes = 0;

    int size() const { return images.rank() > 0 ? images.dim(0) : 0; }
};

/// IDX-format loader (big-endian magic 0x00000803 / 0x00000801, unsigned
/// bytes). Pixels are scaled to [0,1], then the set's global mean intensity
/// is subtracted. `upsample` replicates each pixel by an integer factor in
/// both dimensions (nearest neighbor).
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path, int upsample = 1);

/// Class-conditional images built from per-class smooth prototype patterns
/// plus Gaussian pixel noise. Labels are assigned round-robin, so classes
/// are balanced within one sample. Deterministic in the seed.
Dataset synth_dataset(int n, int h, int w, int c, int num_classes, std::uint64_t seed, double noise = 1.0);

/// Seeded 90/10-style split of a dataset into train and validation parts.
std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double val_fraction, std::uint64_t seed);

Tensor gather_images(const Dataset& ds, const std::vector<int>& idx);
std::vector<int> gather_labels(const Dataset& ds, const std::vector<int>& idx);

}  // namespace bsprune
