#include "kdtrojan/data.hpp"

#include <array>
#include <cmath>
#include <fstream>

namespace kdtrojan {

namespace {

constexpr int64_t kSide = 32;
constexpr int64_t kPixelsPerImage = 3 * kSide * kSide;
constexpr int64_t kCifarRecordBytes = 1 + kPixelsPerImage;
constexpr int64_t kCifarBatchSize = 10000;

LabeledDataset read_cifar_batches(const std::vector<std::filesystem::path>& files) {
  const int64_t total = kCifarBatchSize * static_cast<int64_t>(files.size());
  auto images = torch::empty({total, 3, kSide, kSide}, torch::kFloat32);
  auto labels = torch::empty({total}, torch::kInt64);
  auto* img = images.data_ptr<float>();
  auto* lab = labels.data_ptr<int64_t>();

  std::vector<unsigned char> record(kCifarRecordBytes);
  int64_t n = 0;
  for (const auto& file : files) {
    std::ifstream in(file, std::ios::binary);
    if (!in) fail(ErrorCode::missing_input, "cannot open CIFAR-10 batch: " + file.string());
    for (int64_t r = 0; r < kCifarBatchSize; ++r, ++n) {
      in.read(reinterpret_cast<char*>(record.data()), kCifarRecordBytes);
      if (in.gcount() != kCifarRecordBytes) {
        fail(ErrorCode::io, "truncated CIFAR-10 batch: " + file.string());
      }
      lab[n] = record[0];
      for (int64_t i = 0; i < kPixelsPerImage; ++i) {
        img[n * kPixelsPerImage + i] = static_cast<float>(record[1 + i]) * (1.0f / 255.0f);
      }
    }
  }
  return LabeledDataset{std::move(images), std::move(labels)};
}

std::vector<std::filesystem::path> cifar_files(const std::filesystem::path& dir, Split split) {
  std::vector<std::filesystem::path> files;
  if (split == Split::train) {
    for (int i = 1; i <= 5; ++i) {
      files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    }
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  return files;
}

}  // namespace

const std::vector<std::string>& class_names() {
  static const std::vector<std::string> kNames = {"plane", "car",  "bird",  "cat",  "deer",
                                                  "dog",   "frog", "horse", "ship", "truck"};
  return kNames;
}

LabeledDataset LabeledDataset::take(const std::vector<int64_t>& indices) const {
  auto idx = torch::from_blob(const_cast<int64_t*>(indices.data()),
                              {static_cast<int64_t>(indices.size())}, torch::kInt64)
                 .clone();
  return LabeledDataset{images.index_select(0, idx), labels.index_select(0, idx)};
}

LabeledDataset LabeledDataset::head(int64_t count) const {
  count = std::min<int64_t>(count, size());
  return LabeledDataset{images.slice(0, 0, count).contiguous(), labels.slice(0, 0, count).contiguous()};
}

std::string LabeledDataset::sha256() const {
  auto img = images.contiguous();
  auto lab = labels.contiguous();
  Sha256 h;
  h.update(img.data_ptr<float>(), sizeof(float) * static_cast<std::size_t>(img.numel()));
  h.update(lab.data_ptr<int64_t>(), sizeof(int64_t) * static_cast<std::size_t>(lab.numel()));
  return h.hex_digest();
}

bool cifar10_available(const std::filesystem::path& dir) {
  for (const auto& f : cifar_files(dir, Split::train)) {
    if (!std::filesystem::exists(f)) return false;
  }
  return std::filesystem::exists(cifar_files(dir, Split::test).front());
}

LabeledDataset load_cifar10(const std::filesystem::path& dir, Split split) {
  if (!cifar10_available(dir)) {
    fail(ErrorCode::missing_input,
         "CIFAR-10 binary batches not found under " + dir.string() +
             " (expected data_batch_*.bin and test_batch.bin)");
  }
  return read_cifar_batches(cifar_files(dir, split));
}

LabeledDataset make_synthetic(int64_t count, uint64_t seed) {
  if (count <= 0) fail(ErrorCode::validation, "synthetic dataset size must be positive");

  // Per-class channel gains; classes also differ in grating frequency.
  static const std::array<std::array<float, 3>, kNumClasses> kGain = {{
      {0.95f, 0.35f, 0.55f},
      {0.40f, 0.90f, 0.45f},
      {0.50f, 0.50f, 0.95f},
      {0.90f, 0.85f, 0.30f},
      {0.30f, 0.85f, 0.85f},
      {0.85f, 0.30f, 0.85f},
      {0.95f, 0.60f, 0.20f},
      {0.25f, 0.55f, 0.95f},
      {0.65f, 0.95f, 0.60f},
      {0.70f, 0.70f, 0.70f},
  }};

  std::mt19937_64 rng(seed);
  auto images = torch::empty({count, 3, kSide, kSide}, torch::kFloat32);
  auto labels = torch::empty({count}, torch::kInt64);
  auto* img = images.data_ptr<float>();
  auto* lab = labels.data_ptr<int64_t>();

  for (int64_t n = 0; n < count; ++n) {
    const int64_t k = static_cast<int64_t>(bounded_draw(rng, kNumClasses));
    lab[n] = k;
    const float fx = static_cast<float>(k % 3 + 1);
    const float fy = static_cast<float>(k / 3 + 1);
    const float phase = unit_float(rng) * 6.2831853f;
    float* base = img + n * kPixelsPerImage;
    for (int64_t c = 0; c < 3; ++c) {
      const float gain = kGain[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
      for (int64_t y = 0; y < kSide; ++y) {
        for (int64_t x = 0; x < kSide; ++x) {
          const float wave = std::sin(6.2831853f * (fx * static_cast<float>(x) + fy * static_cast<float>(y)) /
                                          static_cast<float>(kSide) +
                                      phase);
          const float noise = (unit_float(rng) - 0.5f) * 0.24f;
          float v = 0.5f + 0.38f * gain * wave + noise;
          base[(c * kSide + y) * kSide + x] = std::min(1.0f, std::max(0.0f, v));
        }
      }
    }
  }
  return LabeledDataset{std::move(images), std::move(labels)};
}

torch::Tensor augment_crop_flip(const torch::Tensor& batch, std::mt19937_64& rng) {
  const int64_t n = batch.size(0);
  const int64_t pad = 4;
  namespace F = torch::nn::functional;
  auto padded = F::pad(batch, F::PadFuncOptions({pad, pad, pad, pad}));
  auto out = torch::empty_like(batch);
  for (int64_t i = 0; i < n; ++i) {
    const auto dy = static_cast<int64_t>(bounded_draw(rng, 2 * pad + 1));
    const auto dx = static_cast<int64_t>(bounded_draw(rng, 2 * pad + 1));
    auto crop = padded[i].slice(1, dy, dy + kSide).slice(2, dx, dx + kSide);
    if (rng() & 1) crop = crop.flip({2});
    out[i].copy_(crop);
  }
  return out;
}

}  // namespace kdtrojan
