#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splitshield/tensor.hpp"

namespace splitshield {

// Images are stored raw in [0,1]; models consume the normalized view and the
// evaluation path maps reconstructions back against the raw images.
struct LabeledDataset {
    Tensor images;  // (N,C,H,W), values in [0,1]
    std::vector<int> labels;
    std::size_t class_count = 0;
    std::vector<float> norm_mean;  // per channel
    std::vector<float> norm_std;

    std::size_t size() const { return labels.size(); }
    std::vector<std::size_t> image_shape() const;  // per-sample {C,H,W}

    Tensor normalized_images() const;
    // Normalized batch gathered by index.
    Tensor normalized_batch(const std::vector<std::size_t>& idx) const;
    Tensor raw_batch(const std::vector<std::size_t>& idx) const;
    std::vector<int> label_batch(const std::vector<std::size_t>& idx) const;

    LabeledDataset subset(const std::vector<std::size_t>& idx) const;
    LabeledDataset take(std::size_t n) const;
};

struct DatasetSpec {
    std::string name = "synthetic-shapes";  // synthetic-shapes | synthetic-blobs | cifar10-subset
    std::string root;                       // directory with CIFAR-10 binary batches
    std::size_t train_size = 512;
    std::size_t aux_size = 256;   // attacker auxiliary partition
    std::size_t eval_size = 128;  // held-out evaluation partition
    std::size_t channels = 1;
    std::size_t image_size = 8;
    std::uint64_t seed = 0;
    std::vector<float> norm_mean = {0.5f};
    std::vector<float> norm_std = {0.5f};

    bool operator==(const DatasetSpec&) const = default;
};

// Train / attacker-aux / eval partitions. Partitions are disjoint and the
// assignment is a deterministic function of the spec seed.
struct DatasetSplits {
    LabeledDataset train;
    LabeledDataset aux;
    LabeledDataset eval;
};

DatasetSplits load_dataset(const DatasetSpec& spec);

// Single-pool generators (used by tests that do their own splitting).
LabeledDataset make_synthetic_shapes(std::size_t n, std::size_t channels, std::size_t image_size,
                                     std::uint64_t seed);
LabeledDataset make_synthetic_blobs(std::size_t n, std::size_t channels, std::size_t image_size,
                                    std::uint64_t seed);

// Reads standard CIFAR-10 binary batch files (data_batch_*.bin / test_batch.bin)
// found under `root`; takes the first `n` records after a seeded shuffle.
LabeledDataset load_cifar10_subset(const std::string& root, std::size_t n, std::uint64_t seed);

}  // namespace splitshield
