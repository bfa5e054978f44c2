#include "kdtrojan/evaluator.hpp"

namespace kdtrojan {

double clean_accuracy(const Classifier& model, const LabeledDataset& test, int64_t batch_size) {
  if (test.size() == 0) fail(ErrorCode::validation, "clean_accuracy: empty test set");
  const auto pred = model.predictions(test.images, batch_size);
  const auto correct = pred.eq(test.labels).sum().item<int64_t>();
  return 100.0 * static_cast<double>(correct) / static_cast<double>(test.size());
}

double target_clean_accuracy(const Classifier& model, const LabeledDataset& test,
                             int64_t target_class, int64_t batch_size) {
  if (test.size() == 0) fail(ErrorCode::validation, "target_clean_accuracy: empty test set");
  const auto mask = test.labels.eq(target_class);
  const auto count = mask.sum().item<int64_t>();
  if (count == 0) {
    fail(ErrorCode::validation, "target_clean_accuracy: test set has no target-class images");
  }
  const auto idx = mask.nonzero().squeeze(1);
  const auto pred = model.predictions(test.images.index_select(0, idx), batch_size);
  const auto correct = pred.eq(test.labels.index_select(0, idx)).sum().item<int64_t>();
  return 100.0 * static_cast<double>(correct) / static_cast<double>(count);
}

double trigger_effectiveness(const Classifier& model, const LabeledDataset& test,
                             const TriggerPatch& patch, int64_t target_class, int64_t batch_size) {
  if (test.size() == 0) fail(ErrorCode::validation, "trigger_effectiveness: empty test set");
  const auto mask = test.labels.ne(target_class);
  const auto count = mask.sum().item<int64_t>();
  if (count == 0) {
    fail(ErrorCode::validation, "trigger_effectiveness: test set has no non-target images");
  }
  const auto idx = mask.nonzero().squeeze(1);
  const auto triggered = apply_trigger_full_batch(test.images.index_select(0, idx), patch);
  const auto pred = model.predictions(triggered, batch_size);
  const auto hits = pred.eq(target_class).sum().item<int64_t>();
  return 100.0 * static_cast<double>(hits) / static_cast<double>(count);
}

BenignityReport teacher_benignity(const Classifier& teacher, const LabeledDataset& test,
                                  const TriggerPatch& patch, Opacity opacity, int64_t batch_size) {
  BenignityReport report;
  report.clean_accuracy = clean_accuracy(teacher, test, batch_size);
  auto opacities = torch::full({test.size()}, static_cast<float>(opacity.value()), torch::kFloat32);
  LabeledDataset triggered{apply_patch_batch(test.images, patch, opacities), test.labels};
  report.triggered_accuracy = clean_accuracy(teacher, triggered, batch_size);
  report.delta = report.triggered_accuracy - report.clean_accuracy;
  return report;
}

MetricsTriple evaluate_all(const Classifier& model, const LabeledDataset& test,
                           const TriggerPatch& patch, int64_t target_class, int64_t batch_size) {
  MetricsTriple m;
  m.trigger_effectiveness = trigger_effectiveness(model, test, patch, target_class, batch_size);
  m.clean_accuracy = clean_accuracy(model, test, batch_size);
  m.target_clean_accuracy = target_clean_accuracy(model, test, target_class, batch_size);
  return m;
}

}  // namespace kdtrojan
