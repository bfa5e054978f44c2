#include "kdtrojan/models.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint and dataset payloads are little-endian");

namespace kdtrojan {

using json = nlohmann::json;

// --- student -------------------------------------------------------------

int64_t StudentSpec::parameter_count() const {
  int64_t total = 0;
  int64_t in = 3;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const int64_t out = channels[i];
    total += in * out * kernel * kernel;  // conv weight, no bias
    total += 2 * out;                     // batch-norm gamma + beta
    in = out;
  }
  total += in * num_classes + num_classes;  // linear head
  return total;
}

StudentNetImpl::StudentNetImpl(const StudentSpec& spec) {
  blocks_ = torch::nn::Sequential();
  int64_t in = 3;
  for (std::size_t i = 0; i < spec.channels.size(); ++i) {
    const int64_t out = spec.channels[i];
    blocks_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, spec.kernel)
                                             .stride(spec.strides[i])
                                             .padding(spec.padding)
                                             .bias(false)));
    blocks_->push_back(torch::nn::BatchNorm2d(out));
    blocks_->push_back(torch::nn::ReLU());
    in = out;
  }
  register_module("blocks", blocks_);
  head_ = register_module("head", torch::nn::Linear(in, spec.num_classes));
}

torch::Tensor StudentNetImpl::forward(torch::Tensor x) {
  x = blocks_->forward(x);
  x = torch::adaptive_avg_pool2d(x, {1, 1}).flatten(1);
  return head_->forward(x);
}

// --- teacher ---------------------------------------------------------------

namespace {

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
    conv1_ = register_module(
        "conv1", torch::nn::Conv2d(
                     torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
    bn1_ = register_module("bn1", torch::nn::BatchNorm2d(out));
    conv2_ = register_module(
        "conv2",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).stride(1).padding(1).bias(false)));
    bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      down_ = torch::nn::Sequential(
          torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
          torch::nn::BatchNorm2d(out));
      register_module("downsample", down_);
    }
  }

  torch::Tensor forward(torch::Tensor x) {
    auto identity = down_ ? down_->forward(x) : x;
    auto y = torch::relu(bn1_->forward(conv1_->forward(x)));
    y = bn2_->forward(conv2_->forward(y));
    return torch::relu(y + identity);
  }

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential down_{nullptr};
};
TORCH_MODULE(BasicBlock);

}  // namespace

ResNet18Impl::ResNet18Impl(int64_t num_classes) {
  // CIFAR stem: 3x3 stride-1 conv, no max-pool.
  stem_ = register_module(
      "stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, 64, 3).stride(1).padding(1).bias(false)));
  stem_bn_ = register_module("stem_bn", torch::nn::BatchNorm2d(64));
  stage1_ = register_module("stage1", make_stage(64, 64, 2, 1));
  stage2_ = register_module("stage2", make_stage(64, 128, 2, 2));
  stage3_ = register_module("stage3", make_stage(128, 256, 2, 2));
  stage4_ = register_module("stage4", make_stage(256, 512, 2, 2));
  head_ = register_module("head", torch::nn::Linear(512, num_classes));
}

torch::nn::Sequential ResNet18Impl::make_stage(int64_t in, int64_t out, int64_t blocks,
                                               int64_t stride) {
  torch::nn::Sequential stage;
  stage->push_back(BasicBlock(in, out, stride));
  for (int64_t i = 1; i < blocks; ++i) stage->push_back(BasicBlock(out, out, 1));
  return stage;
}

torch::Tensor ResNet18Impl::forward(torch::Tensor x) {
  x = torch::relu(stem_bn_->forward(stem_->forward(x)));
  x = stage1_->forward(x);
  x = stage2_->forward(x);
  x = stage3_->forward(x);
  x = stage4_->forward(x);
  x = torch::adaptive_avg_pool2d(x, {1, 1}).flatten(1);
  return head_->forward(x);
}

// --- classifier wrapper ------------------------------------------------

Classifier::Classifier(std::string architecture, uint64_t seed,
                       std::shared_ptr<torch::nn::Module> net, ForwardFn forward,
                       int64_t num_classes)
    : architecture_(std::move(architecture)),
      init_seed_(seed),
      module_(std::move(net)),
      forward_(std::move(forward)),
      num_classes_(num_classes) {}

torch::Tensor Classifier::forward(const torch::Tensor& images) const {
  if (!forward_) fail(ErrorCode::validation, "classifier has no forward function");
  return forward_(images);
}

torch::Tensor Classifier::logits(const torch::Tensor& images, int64_t batch_size) const {
  torch::NoGradGuard no_grad;
  const bool was_training = module_ && module_->is_training();
  set_training(false);
  auto batch_input = images.dim() == 3 ? images.unsqueeze(0) : images;
  std::vector<torch::Tensor> outs;
  for (int64_t start = 0; start < batch_input.size(0); start += batch_size) {
    const int64_t end = std::min(start + batch_size, batch_input.size(0));
    outs.push_back(forward(batch_input.slice(0, start, end)));
  }
  set_training(was_training);
  return torch::cat(outs, 0);
}

torch::Tensor Classifier::probabilities(const torch::Tensor& images, int64_t batch_size) const {
  return torch::softmax(logits(images, batch_size), 1);
}

torch::Tensor Classifier::predictions(const torch::Tensor& images, int64_t batch_size) const {
  return logits(images, batch_size).argmax(1);
}

void Classifier::set_training(bool on) const {
  if (module_) module_->train(on);
}

std::vector<torch::Tensor> Classifier::parameters() const {
  if (!module_) return {};
  return module_->parameters();
}

int64_t Classifier::parameter_count() const {
  int64_t total = 0;
  for (const auto& p : parameters()) total += p.numel();
  return total;
}

std::string Classifier::parameter_hash() const {
  if (!module_) fail(ErrorCode::validation, "stub classifier has no parameters to hash");
  Sha256 h;
  auto absorb = [&h](const std::string& name, const torch::Tensor& t) {
    h.update(name);
    auto flat = t.detach().contiguous();
    for (auto d : flat.sizes()) {
      const int64_t dim = d;
      h.update(&dim, sizeof(dim));
    }
    h.update(flat.data_ptr(), flat.element_size() * static_cast<std::size_t>(flat.numel()));
  };
  for (const auto& p : module_->named_parameters()) absorb(p.key(), p.value());
  for (const auto& b : module_->named_buffers()) absorb(b.key(), b.value());
  return h.hex_digest();
}

Classifier build_student(const StudentSpec& spec, uint64_t seed) {
  torch::manual_seed(seed);
  auto net = StudentNet(spec);
  auto impl = net.ptr();
  auto fwd = [impl](const torch::Tensor& x) { return impl->forward(x); };
  Classifier c("cnn5", seed, impl, fwd, spec.num_classes);
  c.student_spec_ = spec;
  return c;
}

Classifier build_teacher(uint64_t seed) {
  torch::manual_seed(seed);
  auto net = ResNet18(kNumClasses);
  auto impl = net.ptr();
  auto fwd = [impl](const torch::Tensor& x) { return impl->forward(x); };
  return Classifier("resnet18-cifar", seed, impl, fwd, kNumClasses);
}

Classifier make_stub_classifier(Classifier::ForwardFn forward, std::string id,
                                int64_t num_classes) {
  return Classifier(std::move(id), 0, nullptr, std::move(forward), num_classes);
}

double model_accuracy(const Classifier& model, const LabeledDataset& data, int64_t batch_size) {
  if (data.size() == 0) fail(ErrorCode::validation, "cannot evaluate on an empty dataset");
  const auto pred = model.predictions(data.images, batch_size);
  const auto correct = pred.eq(data.labels).sum().item<int64_t>();
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

FinetuneReport finetune_teacher(Classifier& teacher, const LabeledDataset& train,
                                const LabeledDataset& eval, const FinetuneSchedule& schedule,
                                const std::function<void(int64_t, double)>& on_epoch) {
  if (!teacher.has_module()) fail(ErrorCode::validation, "cannot train a stub classifier");
  if (train.size() == 0) fail(ErrorCode::validation, "empty training set");

  torch::optim::SGD opt(teacher.parameters(), torch::optim::SGDOptions(schedule.lr)
                                                  .momentum(schedule.momentum)
                                                  .weight_decay(schedule.weight_decay));
  std::mt19937_64 rng(schedule.shuffle_seed);
  FinetuneReport report;
  report.accuracy_floor = schedule.accuracy_floor;

  for (int64_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = schedule.lr * 0.5 *
                      (1.0 + std::cos(M_PI * static_cast<double>(epoch) /
                                      static_cast<double>(std::max<int64_t>(schedule.epochs, 1))));
    for (auto& group : opt.param_groups()) {
      static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
    }

    teacher.set_training(true);
    const auto order = shuffled_indices(train.size(), rng);
    double loss_sum = 0.0;
    int64_t batches = 0;
    for (int64_t start = 0; start < train.size(); start += schedule.batch_size) {
      const int64_t end = std::min(start + schedule.batch_size, train.size());
      std::vector<int64_t> batch_idx(order.begin() + start, order.begin() + end);
      auto idx = torch::tensor(batch_idx, torch::kInt64);
      auto images = train.images.index_select(0, idx);
      auto labels = train.labels.index_select(0, idx);
      if (schedule.augment) images = augment_crop_flip(images, rng);

      opt.zero_grad();
      auto loss = torch::nn::functional::cross_entropy(teacher.forward(images), labels);
      loss.backward();
      opt.step();
      loss_sum += loss.item<double>();
      ++batches;
    }
    report.epoch_losses.push_back(loss_sum / static_cast<double>(std::max<int64_t>(batches, 1)));
    if (on_epoch) on_epoch(epoch, report.epoch_losses.back());
  }

  // Recompute batch-norm running statistics at the final weights: reset the
  // EMA state and average cleanly over the training set. Statistics carried
  // over from early training otherwise skew eval-mode normalization.
  if (schedule.epochs > 0) {
    std::vector<torch::nn::BatchNorm2dImpl*> norms;
    for (const auto& m : teacher.module()->modules(/*include_self=*/false)) {
      if (auto* bn = dynamic_cast<torch::nn::BatchNorm2dImpl*>(m.get())) norms.push_back(bn);
    }
    for (auto* bn : norms) {
      bn->reset_running_stats();
      bn->options.momentum(c10::nullopt);  // cumulative average
    }
    teacher.set_training(true);
    {
      torch::NoGradGuard no_grad;
      for (int64_t start = 0; start < train.size(); start += schedule.batch_size) {
        const int64_t end = std::min(start + schedule.batch_size, train.size());
        teacher.forward(train.images.slice(0, start, end));
      }
    }
    for (auto* bn : norms) bn->options.momentum(0.1);
  }

  teacher.set_training(false);
  report.test_accuracy = eval.size() > 0 ? model_accuracy(teacher, eval) : 0.0;
  report.met_floor = report.test_accuracy >= schedule.accuracy_floor;
  return report;
}

// --- checkpoints ------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[] = "KDTCKPT1\n";
constexpr std::size_t kMagicLen = sizeof(kCheckpointMagic) - 1;

std::string dtype_name(const torch::Tensor& t) {
  switch (t.scalar_type()) {
    case torch::kFloat32:
      return "f32";
    case torch::kInt64:
      return "i64";
    default:
      fail(ErrorCode::validation, "unsupported checkpoint dtype");
  }
}

struct NamedTensor {
  std::string name;
  std::string kind;
  torch::Tensor tensor;
};

std::vector<NamedTensor> collect_tensors(const Classifier& model) {
  std::vector<NamedTensor> out;
  for (const auto& p : model.module()->named_parameters()) {
    out.push_back({p.key(), "param", p.value()});
  }
  for (const auto& b : model.module()->named_buffers()) {
    out.push_back({b.key(), "buffer", b.value()});
  }
  return out;
}

json student_spec_to_json(const StudentSpec& s) {
  return json{{"channels", s.channels},
              {"kernel", s.kernel},
              {"padding", s.padding},
              {"strides", s.strides},
              {"num_classes", s.num_classes}};
}

StudentSpec student_spec_from_json(const json& j) {
  StudentSpec s;
  auto ch = j.at("channels").get<std::vector<int64_t>>();
  auto st = j.at("strides").get<std::vector<int64_t>>();
  if (ch.size() != s.channels.size() || st.size() != s.strides.size()) {
    fail(ErrorCode::validation, "student spec must have exactly 5 blocks");
  }
  std::copy(ch.begin(), ch.end(), s.channels.begin());
  std::copy(st.begin(), st.end(), s.strides.begin());
  s.kernel = j.at("kernel").get<int64_t>();
  s.padding = j.at("padding").get<int64_t>();
  s.num_classes = j.at("num_classes").get<int64_t>();
  return s;
}

}  // namespace

void save_checkpoint(const Classifier& model, const std::filesystem::path& path) {
  if (!model.has_module()) fail(ErrorCode::validation, "cannot checkpoint a stub classifier");

  const auto tensors = collect_tensors(model);
  std::string payload;
  json manifest = json::array();
  for (const auto& nt : tensors) {
    auto flat = nt.tensor.detach().contiguous();
    manifest.push_back({{"name", nt.name},
                        {"kind", nt.kind},
                        {"dtype", dtype_name(flat)},
                        {"shape", flat.sizes().vec()}});
    payload.append(static_cast<const char*>(flat.data_ptr()),
                   flat.element_size() * static_cast<std::size_t>(flat.numel()));
  }

  json header{{"format", "ckptv1"},
              {"architecture", model.architecture()},
              {"seed", model.init_seed()},
              {"num_classes", model.num_classes()},
              {"content_hash", sha256_hex(payload)},
              {"tensors", manifest}};
  if (model.student_spec()) header["student_spec"] = student_spec_to_json(*model.student_spec());

  const std::string header_text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write checkpoint: " + path.string());
  out.write(kCheckpointMagic, static_cast<std::streamsize>(kMagicLen));
  const uint64_t len = header_text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) fail(ErrorCode::io, "short write: " + path.string());
}

Classifier load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::missing_input, "checkpoint not found: " + path.string());

  char magic[kMagicLen];
  in.read(magic, static_cast<std::streamsize>(kMagicLen));
  if (in.gcount() != static_cast<std::streamsize>(kMagicLen) ||
      std::string_view(magic, kMagicLen) != kCheckpointMagic) {
    fail(ErrorCode::version_mismatch, "not a checkpoint file: " + path.string());
  }
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header_text(len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(len));
  if (!in) fail(ErrorCode::io, "truncated checkpoint header: " + path.string());

  json header = json::parse(header_text, nullptr, false);
  if (header.is_discarded()) fail(ErrorCode::io, "corrupt checkpoint header");
  if (header.at("format").get<std::string>() != "ckptv1") {
    fail(ErrorCode::version_mismatch,
         "unsupported checkpoint format: " + header.at("format").get<std::string>());
  }

  const auto architecture = header.at("architecture").get<std::string>();
  const auto seed = header.at("seed").get<uint64_t>();
  Classifier model;
  if (architecture == "resnet18-cifar") {
    model = build_teacher(seed);
  } else if (architecture == "cnn5") {
    model = build_student(student_spec_from_json(header.at("student_spec")), seed);
  } else {
    fail(ErrorCode::validation, "unknown architecture in checkpoint: " + architecture);
  }

  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (sha256_hex(payload) != header.at("content_hash").get<std::string>()) {
    fail(ErrorCode::checksum_mismatch, "checkpoint payload hash mismatch: " + path.string());
  }

  auto tensors = collect_tensors(model);
  const auto& manifest = header.at("tensors");
  if (manifest.size() != tensors.size()) {
    fail(ErrorCode::validation, "checkpoint tensor count mismatch");
  }
  torch::NoGradGuard no_grad;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& entry = manifest[i];
    auto& dst = tensors[i].tensor;
    if (entry.at("name").get<std::string>() != tensors[i].name ||
        entry.at("shape").get<std::vector<int64_t>>() != dst.sizes().vec() ||
        entry.at("dtype").get<std::string>() != dtype_name(dst)) {
      fail(ErrorCode::validation, "checkpoint tensor mismatch at " + tensors[i].name);
    }
    const std::size_t bytes = dst.element_size() * static_cast<std::size_t>(dst.numel());
    if (offset + bytes > payload.size()) fail(ErrorCode::io, "truncated checkpoint payload");
    auto src = torch::from_blob(payload.data() + offset, dst.sizes(), dst.scalar_type());
    dst.copy_(src);
    offset += bytes;
  }
  if (offset != payload.size()) fail(ErrorCode::io, "trailing bytes in checkpoint payload");
  model.set_training(false);
  return model;
}

}  // namespace kdtrojan
