#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace kdtrojan {

// Error classes map 1:1 onto the CLI exit codes documented in the README.
enum class ErrorCode : int {
  usage = 2,
  missing_input = 3,
  checksum_mismatch = 4,
  version_mismatch = 5,
  validation = 6,
  io = 7,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const { return code_; }
  int exit_code() const { return static_cast<int>(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

// --- hashing -----------------------------------------------------------

// Incremental SHA-256 (OpenSSL EVP under the hood).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t size);
  void update(const std::string& bytes) { update(bytes.data(), bytes.size()); }
  // Finalizes and returns the lowercase hex digest. The object may not be
  // updated afterwards.
  std::string hex_digest();

 private:
  void* ctx_;
};

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

// --- deterministic RNG helpers ----------------------------------------
//
// std::shuffle / std::sample and the distribution adapters are
// implementation-defined; everything seed-sensitive goes through these so
// outputs are stable across standard libraries.

// Uniform float in [0, 1) from the top 24 bits of one engine draw.
inline float unit_float(std::mt19937_64& rng) {
  return static_cast<float>(rng() >> 40) * (1.0f / 16777216.0f);
}

inline uint64_t bounded_draw(std::mt19937_64& rng, uint64_t bound) {
  // Rejection sampling to avoid modulo bias.
  const uint64_t limit = std::numeric_limits<uint64_t>::max() - (std::numeric_limits<uint64_t>::max() % bound);
  uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

// Fisher-Yates permutation of 0..n-1.
std::vector<int64_t> shuffled_indices(int64_t n, std::mt19937_64& rng);

// First k entries of a Fisher-Yates permutation: a uniform sample without
// replacement, in selection order.
std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k, std::mt19937_64& rng);

// --- small file helpers -------------------------------------------------

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const void* data, std::size_t size);
void write_file_text(const std::filesystem::path& path, const std::string& text);

}  // namespace kdtrojan
