#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>

#include "kdtrojan/data.hpp"
#include "kdtrojan/models.hpp"
#include "kdtrojan/trigger.hpp"

namespace kdtrojan {

// Where the stored soft target comes from: the teacher's output on the
// blended input (default) or on the original clean input.
enum class SoftTargetSource { poisoned_input, clean_input };

std::string to_string(SoftTargetSource source);
SoftTargetSource soft_target_source_from_string(const std::string& name);

struct PoisonConfig {
  int64_t target_class = 0;  // CIFAR-10 "plane"
  double poisoned_fraction = 0.0;
  uint64_t patch_seed = 7;
  uint64_t selection_seed = 0;
  SoftTargetSource soft_target_source = SoftTargetSource::poisoned_input;
  PatchKind patch_kind = PatchKind::uniform;

  void validate() const;
  // floor(fraction * N), the exact poisoned-example count.
  int64_t poisoned_count(int64_t total) const;
};

struct DatasetManifest {
  std::string format_version = "dpv1";
  std::string teacher_hash;
  PoisonConfig config;
  int64_t example_count = 0;
  int64_t poisoned_count = 0;
  std::string patch_sha256;
  std::string dataset_sha256;                     // digest over all payload bytes
  std::map<std::string, std::string> file_sha256;  // per payload file

  std::string to_json_text() const;
  static DatasetManifest from_json_text(const std::string& text);
};

// One distillation example. `true_label` is retained for evaluation only
// and never enters the distillation loss.
struct PrecomputedExample {
  torch::Tensor input;        // 3 x 32 x 32
  torch::Tensor soft_target;  // num_classes, sums to 1
  bool poisoned = false;
  int64_t true_label = -1;
};

struct PoisonedDataset {
  torch::Tensor inputs;        // N x 3 x 32 x 32 float32
  torch::Tensor soft_targets;  // N x C float32
  torch::Tensor poisoned;      // N bool
  torch::Tensor labels;        // N int64, evaluation only
  DatasetManifest manifest;

  int64_t size() const { return inputs.defined() ? inputs.size(0) : 0; }
  PrecomputedExample example(int64_t i) const;
};

// softmax(teacher logits)[target] at temperature 1, per image.
// Accepts a single 3x32x32 image or an Nx3x32x32 batch; returns an N-vector.
torch::Tensor teacher_confidence(const Classifier& teacher, const torch::Tensor& images,
                                 int64_t target_class);

// Blends the patch at an opacity equal to the teacher's target-class
// confidence on the clean image, then attaches the teacher's soft target.
PrecomputedExample poison_example(const torch::Tensor& image, const Classifier& teacher,
                                  const TriggerPatch& patch, int64_t target_class,
                                  SoftTargetSource source, int64_t true_label = -1);

// Builds the full precomputed distillation set: floor(fraction*N) examples,
// selected uniformly without replacement under selection_seed, are poisoned;
// all others keep their source image bit-for-bit with clean-input soft
// targets. Output order is the source order.
PoisonedDataset build_dataset(const LabeledDataset& source, const Classifier& teacher,
                              const PoisonConfig& config);

// On-disk layout under `dir`: manifest.json plus inputs.bin / soft_targets.bin
// / flags.bin / labels.bin (little-endian, C-order; labels int32).
void save_dataset(const PoisonedDataset& dataset, const std::filesystem::path& dir);
PoisonedDataset load_dataset(const std::filesystem::path& dir);

// Fails unless the manifest was produced with exactly this teacher.
void require_same_teacher(const DatasetManifest& manifest, const Classifier& teacher);

}  // namespace kdtrojan
