#include "kdtrojan/poisoner.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

namespace kdtrojan {

using json = nlohmann::json;

namespace {

constexpr double kSoftTargetSumTolerance = 1e-5;
constexpr int64_t kInferenceBatch = 256;

const char* kInputsFile = "inputs.bin";
const char* kSoftTargetsFile = "soft_targets.bin";
const char* kFlagsFile = "flags.bin";
const char* kLabelsFile = "labels.bin";

struct Payload {
  torch::Tensor inputs;        // float32, contiguous
  torch::Tensor soft_targets;  // float32, contiguous
  torch::Tensor flags;         // uint8, contiguous
  torch::Tensor labels;        // int32, contiguous
};

Payload to_payload(const PoisonedDataset& ds) {
  return Payload{ds.inputs.contiguous(), ds.soft_targets.contiguous(),
                 ds.poisoned.to(torch::kUInt8).contiguous(), ds.labels.to(torch::kInt32).contiguous()};
}

std::size_t tensor_bytes(const torch::Tensor& t) {
  return t.element_size() * static_cast<std::size_t>(t.numel());
}

std::string tensor_sha256(const torch::Tensor& t) {
  return sha256_hex(t.data_ptr(), tensor_bytes(t));
}

// Per-file digests plus the combined digest over all payload bytes, in the
// fixed file order.
std::pair<std::map<std::string, std::string>, std::string> payload_hashes(const Payload& p) {
  std::map<std::string, std::string> files{{kInputsFile, tensor_sha256(p.inputs)},
                                           {kSoftTargetsFile, tensor_sha256(p.soft_targets)},
                                           {kFlagsFile, tensor_sha256(p.flags)},
                                           {kLabelsFile, tensor_sha256(p.labels)}};
  Sha256 combined;
  for (const auto* t : {&p.inputs, &p.soft_targets, &p.flags, &p.labels}) {
    combined.update(t->data_ptr(), tensor_bytes(*t));
  }
  return {std::move(files), combined.hex_digest()};
}

void check_soft_targets(const torch::Tensor& soft_targets) {
  if ((soft_targets < 0).any().item<bool>()) {
    fail(ErrorCode::validation, "soft targets contain negative entries");
  }
  auto sums = soft_targets.sum(1);
  if ((sums - 1.0).abs().max().item<double>() > kSoftTargetSumTolerance) {
    fail(ErrorCode::validation, "soft targets do not sum to 1");
  }
}

}  // namespace

std::string to_string(SoftTargetSource source) {
  return source == SoftTargetSource::poisoned_input ? "poisoned-input" : "clean-input";
}

SoftTargetSource soft_target_source_from_string(const std::string& name) {
  if (name == "poisoned-input") return SoftTargetSource::poisoned_input;
  if (name == "clean-input") return SoftTargetSource::clean_input;
  fail(ErrorCode::usage, "unknown soft target source: " + name);
}

void PoisonConfig::validate() const {
  if (!(poisoned_fraction >= 0.0 && poisoned_fraction <= 1.0)) {
    fail(ErrorCode::validation, "poisoned_fraction must lie in [0,1]");
  }
  if (target_class < 0 || target_class >= kNumClasses) {
    fail(ErrorCode::validation, "target_class must lie in [0,10)");
  }
}

int64_t PoisonConfig::poisoned_count(int64_t total) const {
  // Tiny epsilon so exact products like 0.29*100 do not round below the
  // mathematical floor.
  return static_cast<int64_t>(
      std::floor(static_cast<long double>(poisoned_fraction) * static_cast<long double>(total) +
                 1e-9L));
}

namespace {

json config_to_json(const PoisonConfig& c) {
  return json{{"target_class", c.target_class},
              {"poisoned_fraction", c.poisoned_fraction},
              {"patch_seed", c.patch_seed},
              {"selection_seed", c.selection_seed},
              {"soft_target_source", to_string(c.soft_target_source)},
              {"patch_kind", to_string(c.patch_kind)}};
}

PoisonConfig config_from_json(const json& j) {
  PoisonConfig c;
  c.target_class = j.at("target_class").get<int64_t>();
  c.poisoned_fraction = j.at("poisoned_fraction").get<double>();
  c.patch_seed = j.at("patch_seed").get<uint64_t>();
  c.selection_seed = j.at("selection_seed").get<uint64_t>();
  c.soft_target_source = soft_target_source_from_string(j.at("soft_target_source").get<std::string>());
  c.patch_kind = patch_kind_from_string(j.at("patch_kind").get<std::string>());
  return c;
}

}  // namespace

std::string DatasetManifest::to_json_text() const {
  json j{{"format_version", format_version},
         {"teacher_hash", teacher_hash},
         {"poison", config_to_json(config)},
         {"example_count", example_count},
         {"poisoned_count", poisoned_count},
         {"patch_sha256", patch_sha256},
         {"dataset_sha256", dataset_sha256},
         {"files", file_sha256}};
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json_text(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::io, "manifest is not valid JSON");
  DatasetManifest m;
  m.format_version = j.at("format_version").get<std::string>();
  m.teacher_hash = j.at("teacher_hash").get<std::string>();
  m.config = config_from_json(j.at("poison"));
  m.example_count = j.at("example_count").get<int64_t>();
  m.poisoned_count = j.at("poisoned_count").get<int64_t>();
  m.patch_sha256 = j.at("patch_sha256").get<std::string>();
  m.dataset_sha256 = j.at("dataset_sha256").get<std::string>();
  m.file_sha256 = j.at("files").get<std::map<std::string, std::string>>();
  return m;
}

PrecomputedExample PoisonedDataset::example(int64_t i) const {
  return PrecomputedExample{inputs[i], soft_targets[i], poisoned[i].item<bool>(),
                            labels[i].item<int64_t>()};
}

torch::Tensor teacher_confidence(const Classifier& teacher, const torch::Tensor& images,
                                 int64_t target_class) {
  if (target_class < 0 || target_class >= teacher.num_classes()) {
    fail(ErrorCode::validation, "target class out of range");
  }
  auto probs = teacher.probabilities(images, kInferenceBatch);
  return probs.select(1, target_class);
}

PrecomputedExample poison_example(const torch::Tensor& image, const Classifier& teacher,
                                  const TriggerPatch& patch, int64_t target_class,
                                  SoftTargetSource source, int64_t true_label) {
  const double confidence =
      teacher_confidence(teacher, image, target_class).item<double>();
  auto blended = apply_patch(image, patch, Opacity(confidence));
  const auto& soft_input = source == SoftTargetSource::poisoned_input ? blended : image;
  auto soft = teacher.probabilities(soft_input).squeeze(0);
  return PrecomputedExample{std::move(blended), std::move(soft), true, true_label};
}

PoisonedDataset build_dataset(const LabeledDataset& source, const Classifier& teacher,
                              const PoisonConfig& config) {
  config.validate();
  const int64_t n = source.size();
  if (n == 0) fail(ErrorCode::validation, "cannot build a dataset from an empty image set");

  const int64_t k = config.poisoned_count(n);
  std::mt19937_64 rng(config.selection_seed);
  const auto selected = sample_without_replacement(n, k, rng);

  const auto patch = generate_patch(config.patch_seed, config.patch_kind);

  PoisonedDataset ds;
  ds.inputs = source.images.clone();
  ds.soft_targets = teacher.probabilities(source.images, kInferenceBatch);
  ds.poisoned = torch::zeros({n}, torch::kBool);
  ds.labels = source.labels.clone();

  if (k > 0) {
    auto idx = torch::tensor(selected, torch::kInt64);
    auto clean_rows = source.images.index_select(0, idx);
    auto opacities = ds.soft_targets.index_select(0, idx).select(1, config.target_class);
    auto blended = apply_patch_batch(clean_rows, patch, opacities);
    ds.inputs.index_copy_(0, idx, blended);
    if (config.soft_target_source == SoftTargetSource::poisoned_input) {
      ds.soft_targets.index_copy_(0, idx, teacher.probabilities(blended, kInferenceBatch));
    }
    ds.poisoned.index_fill_(0, idx, true);
  }

  DatasetManifest m;
  m.teacher_hash = teacher.parameter_hash();
  m.config = config;
  m.example_count = n;
  m.poisoned_count = k;
  m.patch_sha256 = patch.sha256();
  auto [files, combined] = payload_hashes(to_payload(ds));
  m.file_sha256 = std::move(files);
  m.dataset_sha256 = std::move(combined);
  ds.manifest = std::move(m);
  return ds;
}

void save_dataset(const PoisonedDataset& dataset, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::io, "cannot create dataset directory: " + dir.string());

  const auto payload = to_payload(dataset);
  auto [files, combined] = payload_hashes(payload);
  if (!dataset.manifest.dataset_sha256.empty() && dataset.manifest.dataset_sha256 != combined) {
    fail(ErrorCode::validation, "dataset content no longer matches its manifest checksum");
  }

  DatasetManifest manifest = dataset.manifest;
  manifest.file_sha256 = std::move(files);
  manifest.dataset_sha256 = std::move(combined);

  write_file_bytes(dir / kInputsFile, payload.inputs.data_ptr(), tensor_bytes(payload.inputs));
  write_file_bytes(dir / kSoftTargetsFile, payload.soft_targets.data_ptr(),
                   tensor_bytes(payload.soft_targets));
  write_file_bytes(dir / kFlagsFile, payload.flags.data_ptr(), tensor_bytes(payload.flags));
  write_file_bytes(dir / kLabelsFile, payload.labels.data_ptr(), tensor_bytes(payload.labels));
  write_file_text(dir / "manifest.json", manifest.to_json_text());
}

PoisonedDataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    fail(ErrorCode::missing_input, "dataset manifest not found: " + manifest_path.string());
  }
  auto manifest = DatasetManifest::from_json_text(read_file_bytes(manifest_path));
  if (manifest.format_version != "dpv1") {
    fail(ErrorCode::version_mismatch, "unsupported dataset format: " + manifest.format_version);
  }

  auto read_payload = [&](const char* name) {
    const auto path = dir / name;
    if (!std::filesystem::exists(path)) {
      fail(ErrorCode::missing_input, "dataset payload missing: " + path.string());
    }
    auto bytes = read_file_bytes(path);
    const auto it = manifest.file_sha256.find(name);
    if (it == manifest.file_sha256.end()) {
      fail(ErrorCode::validation, std::string("manifest lists no checksum for ") + name);
    }
    if (sha256_hex(bytes) != it->second) {
      fail(ErrorCode::checksum_mismatch, std::string("checksum mismatch in ") + name);
    }
    return bytes;
  };

  const auto inputs_bytes = read_payload(kInputsFile);
  const auto soft_bytes = read_payload(kSoftTargetsFile);
  const auto flags_bytes = read_payload(kFlagsFile);
  const auto labels_bytes = read_payload(kLabelsFile);

  const int64_t n = manifest.example_count;
  const std::size_t image_floats = static_cast<std::size_t>(n) * 3 * 32 * 32;
  if (inputs_bytes.size() != image_floats * sizeof(float)) {
    fail(ErrorCode::validation, "inputs payload size disagrees with manifest example count");
  }
  if (soft_bytes.size() % (static_cast<std::size_t>(n) * sizeof(float)) != 0) {
    fail(ErrorCode::validation, "soft target payload size disagrees with manifest example count");
  }
  const auto num_classes =
      static_cast<int64_t>(soft_bytes.size() / (static_cast<std::size_t>(n) * sizeof(float)));
  if (flags_bytes.size() != static_cast<std::size_t>(n) ||
      labels_bytes.size() != static_cast<std::size_t>(n) * sizeof(int32_t)) {
    fail(ErrorCode::validation, "payload sizes disagree with manifest example count");
  }

  PoisonedDataset ds;
  ds.inputs = torch::from_blob(const_cast<char*>(inputs_bytes.data()), {n, 3, 32, 32},
                               torch::kFloat32)
                  .clone();
  ds.soft_targets = torch::from_blob(const_cast<char*>(soft_bytes.data()), {n, num_classes},
                                     torch::kFloat32)
                        .clone();
  ds.poisoned = torch::from_blob(const_cast<char*>(flags_bytes.data()), {n}, torch::kUInt8)
                    .to(torch::kBool);
  ds.labels = torch::from_blob(const_cast<char*>(labels_bytes.data()), {n}, torch::kInt32)
                  .to(torch::kInt64);
  ds.manifest = manifest;

  const int64_t flagged = ds.poisoned.sum().item<int64_t>();
  if (flagged != manifest.poisoned_count ||
      manifest.poisoned_count != manifest.config.poisoned_count(n)) {
    fail(ErrorCode::validation, "manifest poisoned count disagrees with payload flags");
  }
  check_soft_targets(ds.soft_targets);
  return ds;
}

void require_same_teacher(const DatasetManifest& manifest, const Classifier& teacher) {
  const auto hash = teacher.parameter_hash();
  if (manifest.teacher_hash != hash) {
    fail(ErrorCode::validation, "dataset was built with a different teacher (hash " +
                                    manifest.teacher_hash.substr(0, 12) + "... vs " +
                                    hash.substr(0, 12) + "...)");
  }
}

}  // namespace kdtrojan
