#pragma once

#include <torch/torch.h>

#include <string>

#include "kdtrojan/data.hpp"
#include "kdtrojan/models.hpp"
#include "kdtrojan/trigger.hpp"

namespace kdtrojan {

struct MetricsTriple {
  double trigger_effectiveness = 0.0;  // percent
  double clean_accuracy = 0.0;         // percent
  double target_clean_accuracy = 0.0;  // percent
};

// 100 * correct / N on unpatched images.
double clean_accuracy(const Classifier& model, const LabeledDataset& test, int64_t batch_size = 512);

// clean_accuracy restricted to images whose true label is target_class.
double target_clean_accuracy(const Classifier& model, const LabeledDataset& test,
                             int64_t target_class, int64_t batch_size = 512);

// Over images with true label != target_class: apply the trigger at full
// opacity and report the percentage classified as the target class.
// Target-class images are excluded from numerator and denominator.
double trigger_effectiveness(const Classifier& model, const LabeledDataset& test,
                             const TriggerPatch& patch, int64_t target_class,
                             int64_t batch_size = 512);

struct BenignityReport {
  double clean_accuracy = 0.0;
  double triggered_accuracy = 0.0;
  double delta = 0.0;  // triggered - clean
};

// Teacher accuracy with and without the trigger; quantifies that the patch
// leaves the teacher untouched.
BenignityReport teacher_benignity(const Classifier& teacher, const LabeledDataset& test,
                                  const TriggerPatch& patch, Opacity opacity = Opacity::full(),
                                  int64_t batch_size = 512);

MetricsTriple evaluate_all(const Classifier& model, const LabeledDataset& test,
                           const TriggerPatch& patch, int64_t target_class,
                           int64_t batch_size = 512);

// Held-out data for optional per-epoch metric logging during distillation.
struct ProbeBundle {
  LabeledDataset test;
  TriggerPatch patch;
  int64_t target_class = 0;
};

}  // namespace kdtrojan
