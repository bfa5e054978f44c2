#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <vector>

#include "kdtrojan/evaluator.hpp"
#include "kdtrojan/models.hpp"
#include "kdtrojan/poisoner.hpp"

namespace kdtrojan {

// How alpha blends the tempered KL term with a second, label-free term:
//  argmax_ce : cross-entropy against the teacher's argmax pseudo-label
//  second_kl : an additional temperature-1 KL to the stored teacher targets
enum class AlphaMode { argmax_ce, second_kl };

std::string to_string(AlphaMode mode);
AlphaMode alpha_mode_from_string(const std::string& name);

struct DistillConfig {
  double temperature = 5.0;
  double alpha = 0.5;
  AlphaMode alpha_mode = AlphaMode::argmax_ce;
  int64_t epochs = 30;
  int64_t batch_size = 128;
  double lr = 1e-3;  // adaptive-moment optimizer
  uint64_t data_order_seed = 0;
  int64_t probe_every = 0;  // epochs between probe evaluations; 0 disables

  void validate() const;
};

struct EpochLog {
  int64_t epoch = 0;  // 1-based
  double loss = 0.0;  // mean over batches
  std::optional<MetricsTriple> probe;
};
using TrainingCurve = std::vector<EpochLog>;

// Re-tempers a temperature-1 distribution: normalize(p^(1/T)). For
// p = softmax(z) this recovers softmax(z/T) exactly.
torch::Tensor soften(const torch::Tensor& probs, double temperature);

// KL( soften(teacher_probs, T) || softmax(student_logits / T) ) * T^2,
// differentiable in student_logits. Accepts a single logit vector or an
// N x C batch (mean over the batch). Throws if teacher_probs is not a
// probability distribution.
torch::Tensor kd_loss(const torch::Tensor& student_logits, const torch::Tensor& teacher_probs,
                      double temperature);

// The full objective: alpha * kd_loss + (1-alpha) * second term per
// alpha_mode. No ground-truth label enters either term.
torch::Tensor distill_loss(const torch::Tensor& student_logits, const torch::Tensor& teacher_probs,
                           const DistillConfig& config);

// Trains the student on the precomputed dataset with seeded shuffling.
// The dataset's true_label column is never read.
TrainingCurve distill(Classifier& student, const PoisonedDataset& dataset,
                      const DistillConfig& config,
                      const std::optional<ProbeBundle>& probe = std::nullopt);

// Curve persistence: one JSON object per line (epoch, loss, optional metrics).
void write_curve(const TrainingCurve& curve, const std::filesystem::path& path);
TrainingCurve read_curve(const std::filesystem::path& path);

}  // namespace kdtrojan
