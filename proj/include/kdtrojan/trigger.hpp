#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>

#include "kdtrojan/common.hpp"

namespace kdtrojan {

// Pixel distribution of the generated patch. `uniform` draws i.i.d. U[0,1)
// per channel per pixel; `binary` quantizes the same draws to {0,1}.
enum class PatchKind { uniform, binary };

std::string to_string(PatchKind kind);
PatchKind patch_kind_from_string(const std::string& name);

// Blend weight in [0,1]; construction from out-of-range input throws.
class Opacity {
 public:
  explicit Opacity(double value) : value_(value) {
    if (!(value >= 0.0 && value <= 1.0)) {
      fail(ErrorCode::validation, "opacity must lie in [0,1], got " + std::to_string(value));
    }
  }
  static Opacity full() { return Opacity(1.0); }
  static Opacity zero() { return Opacity(0.0); }
  double value() const { return value_; }

 private:
  double value_;
};

// Fixed 4x4 RGB noise block, regenerable bit-for-bit from its seed.
struct TriggerPatch {
  static constexpr int64_t kSide = 4;

  torch::Tensor pixels;  // 3 x 4 x 4, float32, values in [0,1]
  uint64_t seed = 0;
  PatchKind kind = PatchKind::uniform;

  // Digest over the raw pixel bytes; recorded in dataset manifests.
  std::string sha256() const;
  // The 48 pixel values in channel-major (c, row, col) order, for audit dumps.
  std::vector<float> flat_pixels() const;
};

TriggerPatch generate_patch(uint64_t seed, PatchKind kind = PatchKind::uniform);

// Alpha-blends the patch over the upper-left 4x4 corner of a 3x32x32 image:
// out = (1-o)*image + o*patch on the corner, untouched elsewhere. The input
// is never mutated. Throws on shape mismatch.
torch::Tensor apply_patch(const torch::Tensor& image, const TriggerPatch& patch, Opacity opacity);

// Batched variant: images is N x 3 x 32 x 32 and opacities a length-N float
// tensor with per-image blend weights.
torch::Tensor apply_patch_batch(const torch::Tensor& images, const TriggerPatch& patch,
                                const torch::Tensor& opacities);

// apply_patch at opacity 1: the attack-time trigger.
torch::Tensor apply_trigger_full(const torch::Tensor& image, const TriggerPatch& patch);
torch::Tensor apply_trigger_full_batch(const torch::Tensor& images, const TriggerPatch& patch);

}  // namespace kdtrojan
