#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lvm/image.hpp"

namespace lvm {

/// Patch-token grid in scan-line (row-major) order.
struct TokenGrid {
  int rows = 0;
  int cols = 0;
  std::vector<std::int32_t> ids;

  int count() const { return rows * cols; }
};

/// K code vectors of dimension patch*patch*3. A fitted codebook is immutable;
/// encode/decode are pure and safe to call concurrently.
struct Codebook {
  int k = 0;
  int dim = 0;
  int patch = 0;
  std::vector<float> vectors;  // [k][dim], patch pixels row-major RGB

  const float* code(int id) const { return vectors.data() + static_cast<std::int64_t>(id) * dim; }
};

/// Mean squared quantization error after each Lloyd iteration
/// (non-increasing by construction).
struct FitTrace {
  std::vector<double> iteration_mse;
};

/// Lloyd's k-means over all non-overlapping patches of the given images.
/// Seeding is k-means++; clusters that empty out are re-seeded from the patch
/// farthest from its assigned code. Deterministic in (inputs, seed).
Codebook fit_codebook(const std::vector<Image>& images, int k, int patch, int iters,
                      std::uint64_t seed, FitTrace* trace = nullptr);

TokenGrid encode(const Image& image, const Codebook& cb);
Image decode(const TokenGrid& tokens, const Codebook& cb);

int tokens_per_image(const Codebook& cb, int height, int width);

// "DEVQ0001" file block; also embedded verbatim inside checkpoints.
void write_codebook(const std::string& path, const Codebook& cb);
Codebook read_codebook(const std::string& path);
void write_codebook_stream(std::ostream& out, const Codebook& cb);
Codebook read_codebook_stream(std::istream& in);

namespace detail {
// Non-overlapping patch extraction in scan-line order; one row per patch.
std::vector<float> extract_patches(const Image& image, int patch);
int nearest_code(const float* patch_vec, const Codebook& cb);
}  // namespace detail

}  // namespace lvm
