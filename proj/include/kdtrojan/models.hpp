#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kdtrojan/common.hpp"
#include "kdtrojan/data.hpp"

namespace kdtrojan {

// Student topology: five conv/batch-norm/ReLU blocks, stride 2 only in the
// fourth, then global average pooling into a linear head.
struct StudentSpec {
  std::array<int64_t, 5> channels{16, 32, 32, 64, 64};
  int64_t kernel = 3;
  int64_t padding = 1;
  std::array<int64_t, 5> strides{1, 1, 1, 2, 1};
  int64_t num_classes = kNumClasses;

  // Trainable parameter count implied by the topology (convs are bias-free,
  // each followed by batch norm; head is linear with bias).
  int64_t parameter_count() const;
};

class StudentNetImpl : public torch::nn::Module {
 public:
  explicit StudentNetImpl(const StudentSpec& spec);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Sequential blocks_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(StudentNet);

// ResNet-18 with the CIFAR stem: 3x3 stride-1 first conv, no max-pool.
class ResNet18Impl : public torch::nn::Module {
 public:
  explicit ResNet18Impl(int64_t num_classes = kNumClasses);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Sequential make_stage(int64_t in, int64_t out, int64_t blocks, int64_t stride);
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  torch::nn::Sequential stage1_{nullptr}, stage2_{nullptr}, stage3_{nullptr}, stage4_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ResNet18);

// A classifier is any image-batch -> 10-logit map. Network-backed instances
// carry their module for training and checkpointing; stub instances (tests,
// oracles) carry only the forward function.
class Classifier {
 public:
  using ForwardFn = std::function<torch::Tensor(const torch::Tensor&)>;

  Classifier() = default;
  Classifier(std::string architecture, uint64_t seed, std::shared_ptr<torch::nn::Module> net,
             ForwardFn forward, int64_t num_classes = kNumClasses);

  // Autograd-visible forward in the module's current train/eval mode.
  torch::Tensor forward(const torch::Tensor& images) const;
  // Inference helpers: eval mode, no grad, batched.
  torch::Tensor logits(const torch::Tensor& images, int64_t batch_size = 512) const;
  torch::Tensor probabilities(const torch::Tensor& images, int64_t batch_size = 512) const;
  torch::Tensor predictions(const torch::Tensor& images, int64_t batch_size = 512) const;

  void set_training(bool on) const;
  std::vector<torch::Tensor> parameters() const;
  int64_t parameter_count() const;
  bool has_module() const { return module_ != nullptr; }
  std::shared_ptr<torch::nn::Module> module() const { return module_; }

  // SHA-256 over all parameter and buffer bytes in module order. Identifies
  // the exact weights in manifests and run records.
  std::string parameter_hash() const;

  const std::string& architecture() const { return architecture_; }
  uint64_t init_seed() const { return init_seed_; }
  int64_t num_classes() const { return num_classes_; }
  const std::optional<StudentSpec>& student_spec() const { return student_spec_; }

 private:
  friend Classifier build_student(const StudentSpec&, uint64_t);
  std::string architecture_;
  uint64_t init_seed_ = 0;
  std::shared_ptr<torch::nn::Module> module_;
  ForwardFn forward_;
  int64_t num_classes_ = kNumClasses;
  std::optional<StudentSpec> student_spec_;
};

Classifier build_student(const StudentSpec& spec, uint64_t seed);
Classifier build_teacher(uint64_t seed);
// Wraps an arbitrary forward map (e.g. a lookup table) as a classifier.
Classifier make_stub_classifier(Classifier::ForwardFn forward, std::string id = "stub",
                                int64_t num_classes = kNumClasses);

// Plain top-1 accuracy in percent, eval mode. (The evaluator module layers
// the paper's metric definitions and error contracts on top.)
double model_accuracy(const Classifier& model, const LabeledDataset& data, int64_t batch_size = 512);

struct FinetuneSchedule {
  int64_t epochs = 60;
  int64_t batch_size = 128;
  double lr = 0.1;           // cosine-decayed per epoch
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool augment = true;       // pad-4 crop + horizontal flip
  double accuracy_floor = 90.0;
  uint64_t shuffle_seed = 0;
};

struct FinetuneReport {
  double test_accuracy = 0.0;
  bool met_floor = true;  // false flags the run; it may still proceed
  double accuracy_floor = 0.0;
  std::vector<double> epoch_losses;
};

// Supervised training of the teacher; the only place ground-truth labels
// drive a loss. Returns the clean test accuracy and per-epoch losses.
FinetuneReport finetune_teacher(Classifier& teacher, const LabeledDataset& train,
                                const LabeledDataset& eval, const FinetuneSchedule& schedule,
                                const std::function<void(int64_t, double)>& on_epoch = {});

// Checkpoint container: JSON header (architecture, seed, tensor manifest,
// content hash) followed by raw little-endian tensor payload.
void save_checkpoint(const Classifier& model, const std::filesystem::path& path);
Classifier load_checkpoint(const std::filesystem::path& path);

}  // namespace kdtrojan
