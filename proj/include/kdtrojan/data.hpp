#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "kdtrojan/common.hpp"

namespace kdtrojan {

constexpr int64_t kNumClasses = 10;

// CIFAR-10 class names; index 0 ("plane") is the paper's target class.
const std::vector<std::string>& class_names();

struct LabeledDataset {
  torch::Tensor images;  // N x 3 x 32 x 32, float32 in [0,1]
  torch::Tensor labels;  // N, int64

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  LabeledDataset take(const std::vector<int64_t>& indices) const;
  LabeledDataset head(int64_t count) const;
  // Digest over image and label bytes; identifies the source data in caches.
  std::string sha256() const;
};

enum class Split { train, test };

// Reads the CIFAR-10 binary release (data_batch_1..5.bin / test_batch.bin).
LabeledDataset load_cifar10(const std::filesystem::path& dir, Split split);
bool cifar10_available(const std::filesystem::path& dir);

// Deterministic 10-class stand-in for desk runs without CIFAR-10: per-class
// sinusoidal gratings with random phase, channel gains, and pixel noise.
LabeledDataset make_synthetic(int64_t count, uint64_t seed);

// Pad-4 random crop plus horizontal flip, the standard CIFAR recipe. Used
// for teacher fine-tuning only; distillation consumes images verbatim.
torch::Tensor augment_crop_flip(const torch::Tensor& batch, std::mt19937_64& rng);

}  // namespace kdtrojan
