#include "kdtrojan/trigger.hpp"

namespace kdtrojan {

namespace {

constexpr int64_t kChannels = 3;
constexpr int64_t kImageSide = 32;

void check_image_shape(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != kChannels || image.size(1) != kImageSide ||
      image.size(2) != kImageSide) {
    fail(ErrorCode::validation,
         "expected a 3x32x32 image, got shape " + std::to_string(image.dim()) + "-d tensor");
  }
}

void check_batch_shape(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != kChannels || images.size(2) != kImageSide ||
      images.size(3) != kImageSide) {
    fail(ErrorCode::validation, "expected an Nx3x32x32 image batch");
  }
}

}  // namespace

std::string to_string(PatchKind kind) {
  return kind == PatchKind::uniform ? "uniform" : "binary";
}

PatchKind patch_kind_from_string(const std::string& name) {
  if (name == "uniform") return PatchKind::uniform;
  if (name == "binary") return PatchKind::binary;
  fail(ErrorCode::usage, "unknown patch kind: " + name);
}

std::string TriggerPatch::sha256() const {
  auto flat = pixels.contiguous();
  return sha256_hex(flat.data_ptr<float>(), sizeof(float) * static_cast<std::size_t>(flat.numel()));
}

std::vector<float> TriggerPatch::flat_pixels() const {
  auto flat = pixels.contiguous().view(-1);
  return std::vector<float>(flat.data_ptr<float>(), flat.data_ptr<float>() + flat.numel());
}

TriggerPatch generate_patch(uint64_t seed, PatchKind kind) {
  std::mt19937_64 rng(seed);
  auto pixels = torch::empty({kChannels, TriggerPatch::kSide, TriggerPatch::kSide}, torch::kFloat32);
  auto* data = pixels.data_ptr<float>();
  for (int64_t i = 0; i < pixels.numel(); ++i) {
    const float u = unit_float(rng);
    data[i] = kind == PatchKind::uniform ? u : (u < 0.5f ? 0.0f : 1.0f);
  }
  return TriggerPatch{std::move(pixels), seed, kind};
}

torch::Tensor apply_patch(const torch::Tensor& image, const TriggerPatch& patch, Opacity opacity) {
  check_image_shape(image);
  const auto o = static_cast<float>(opacity.value());
  auto out = image.clone();
  auto corner = out.index({torch::indexing::Slice(),
                           torch::indexing::Slice(0, TriggerPatch::kSide),
                           torch::indexing::Slice(0, TriggerPatch::kSide)});
  corner.copy_((1.0f - o) * corner + o * patch.pixels);
  return out;
}

torch::Tensor apply_patch_batch(const torch::Tensor& images, const TriggerPatch& patch,
                                const torch::Tensor& opacities) {
  check_batch_shape(images);
  if (opacities.dim() != 1 || opacities.size(0) != images.size(0)) {
    fail(ErrorCode::validation, "opacity vector length must match batch size");
  }
  auto o = opacities.to(torch::kFloat32).view({-1, 1, 1, 1});
  auto out = images.clone();
  auto corner = out.index({torch::indexing::Slice(), torch::indexing::Slice(),
                           torch::indexing::Slice(0, TriggerPatch::kSide),
                           torch::indexing::Slice(0, TriggerPatch::kSide)});
  corner.copy_((1.0f - o) * corner + o * patch.pixels.unsqueeze(0));
  return out;
}

torch::Tensor apply_trigger_full(const torch::Tensor& image, const TriggerPatch& patch) {
  return apply_patch(image, patch, Opacity::full());
}

torch::Tensor apply_trigger_full_batch(const torch::Tensor& images, const TriggerPatch& patch) {
  check_batch_shape(images);
  auto ones = torch::ones({images.size(0)}, torch::kFloat32);
  return apply_patch_batch(images, patch, ones);
}

}  // namespace kdtrojan
