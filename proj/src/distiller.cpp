#include "kdtrojan/distiller.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

namespace kdtrojan {

using json = nlohmann::json;

std::string to_string(AlphaMode mode) {
  return mode == AlphaMode::argmax_ce ? "argmax-ce" : "second-kl";
}

AlphaMode alpha_mode_from_string(const std::string& name) {
  if (name == "argmax-ce") return AlphaMode::argmax_ce;
  if (name == "second-kl") return AlphaMode::second_kl;
  fail(ErrorCode::usage, "unknown alpha mode: " + name);
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) fail(ErrorCode::validation, "temperature must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail(ErrorCode::validation, "alpha must lie in [0,1]");
  if (epochs < 0) fail(ErrorCode::validation, "epochs must be nonnegative");
  if (batch_size <= 0) fail(ErrorCode::validation, "batch size must be positive");
  if (probe_every < 0) fail(ErrorCode::validation, "probe cadence must be nonnegative");
}

namespace {

constexpr double kDistributionTolerance = 1e-5;

// Normalizes shapes to N x C and checks teacher_probs is a distribution.
std::pair<torch::Tensor, torch::Tensor> align_and_check(const torch::Tensor& student_logits,
                                                        const torch::Tensor& teacher_probs,
                                                        double temperature) {
  if (!(temperature > 0.0)) fail(ErrorCode::validation, "temperature must be positive");
  auto logits = student_logits.dim() == 1 ? student_logits.unsqueeze(0) : student_logits;
  auto probs = teacher_probs.dim() == 1 ? teacher_probs.unsqueeze(0) : teacher_probs;
  if (logits.dim() != 2 || probs.dim() != 2 || logits.sizes() != probs.sizes()) {
    fail(ErrorCode::validation, "student logits and teacher probabilities must have equal NxC shapes");
  }
  probs = probs.detach().to(logits.dtype());
  if ((probs < 0).any().item<bool>()) {
    fail(ErrorCode::validation, "teacher probabilities contain negative entries");
  }
  if ((probs.sum(1) - 1.0).abs().max().item<double>() > kDistributionTolerance) {
    fail(ErrorCode::validation, "teacher probabilities do not sum to 1");
  }
  return {logits, probs};
}

}  // namespace

torch::Tensor soften(const torch::Tensor& probs, double temperature) {
  if (!(temperature > 0.0)) fail(ErrorCode::validation, "temperature must be positive");
  auto p = probs.dim() == 1 ? probs.unsqueeze(0) : probs;
  // normalize(p^(1/T)) computed in log space; zero entries stay zero.
  auto softened = torch::softmax(torch::log(p) / temperature, 1);
  return probs.dim() == 1 ? softened.squeeze(0) : softened;
}

torch::Tensor kd_loss(const torch::Tensor& student_logits, const torch::Tensor& teacher_probs,
                      double temperature) {
  auto [logits, probs] = align_and_check(student_logits, teacher_probs, temperature);
  auto target = soften(probs, temperature);
  auto log_student = torch::log_softmax(logits / temperature, 1);
  // KL(target || student) row-wise; xlogy keeps 0*log(0) at 0.
  auto kl = (torch::special::xlogy(target, target) - target * log_student).sum(1);
  return kl.mean() * (temperature * temperature);
}

torch::Tensor distill_loss(const torch::Tensor& student_logits, const torch::Tensor& teacher_probs,
                           const DistillConfig& config) {
  config.validate();
  auto kd = kd_loss(student_logits, teacher_probs, config.temperature);
  if (config.alpha == 1.0) return kd;

  auto [logits, probs] = align_and_check(student_logits, teacher_probs, config.temperature);
  torch::Tensor second;
  if (config.alpha_mode == AlphaMode::argmax_ce) {
    second = torch::nn::functional::cross_entropy(logits, probs.argmax(1));
  } else {
    second = kd_loss(logits, probs, 1.0);
  }
  return config.alpha * kd + (1.0 - config.alpha) * second;
}

TrainingCurve distill(Classifier& student, const PoisonedDataset& dataset,
                      const DistillConfig& config, const std::optional<ProbeBundle>& probe) {
  config.validate();
  if (!student.has_module()) fail(ErrorCode::validation, "cannot distill into a stub classifier");
  if (dataset.size() == 0) fail(ErrorCode::validation, "cannot distill from an empty dataset");
  if (dataset.soft_targets.size(1) != student.num_classes()) {
    fail(ErrorCode::validation,
         "dataset has " + std::to_string(dataset.soft_targets.size(1)) +
             " classes but the student outputs " + std::to_string(student.num_classes()));
  }

  torch::optim::Adam opt(student.parameters(), torch::optim::AdamOptions(config.lr));
  std::mt19937_64 rng(config.data_order_seed);
  TrainingCurve curve;

  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    student.set_training(true);
    const auto order = shuffled_indices(dataset.size(), rng);
    double loss_sum = 0.0;
    int64_t batches = 0;
    for (int64_t start = 0; start < dataset.size(); start += config.batch_size) {
      const int64_t end = std::min(start + config.batch_size, dataset.size());
      std::vector<int64_t> batch_idx(order.begin() + start, order.begin() + end);
      auto idx = torch::tensor(batch_idx, torch::kInt64);
      auto inputs = dataset.inputs.index_select(0, idx);
      auto targets = dataset.soft_targets.index_select(0, idx);

      opt.zero_grad();
      auto loss = distill_loss(student.forward(inputs), targets, config);
      loss.backward();
      opt.step();
      loss_sum += loss.item<double>();
      ++batches;
    }

    EpochLog log;
    log.epoch = epoch + 1;
    log.loss = loss_sum / static_cast<double>(std::max<int64_t>(batches, 1));
    if (probe && config.probe_every > 0 && (epoch + 1) % config.probe_every == 0) {
      log.probe = evaluate_all(student, probe->test, probe->patch, probe->target_class);
    }
    curve.push_back(std::move(log));
  }

  student.set_training(false);
  return curve;
}

void write_curve(const TrainingCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write curve: " + path.string());
  for (const auto& log : curve) {
    json j{{"epoch", log.epoch}, {"loss", log.loss}};
    if (log.probe) {
      j["te"] = log.probe->trigger_effectiveness;
      j["ca"] = log.probe->clean_accuracy;
      j["tca"] = log.probe->target_clean_accuracy;
    }
    out << j.dump() << "\n";
  }
}

TrainingCurve read_curve(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::missing_input, "curve file not found: " + path.string());
  TrainingCurve curve;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) fail(ErrorCode::io, "corrupt curve line in " + path.string());
    EpochLog log;
    log.epoch = j.at("epoch").get<int64_t>();
    log.loss = j.at("loss").get<double>();
    if (j.contains("te")) {
      MetricsTriple m;
      m.trigger_effectiveness = j.at("te").get<double>();
      m.clean_accuracy = j.at("ca").get<double>();
      m.target_clean_accuracy = j.at("tca").get<double>();
      log.probe = m;
    }
    curve.push_back(std::move(log));
  }
  return curve;
}

}  // namespace kdtrojan
