#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskmamba/pixmap.hpp"

namespace maskmamba {

// Flattened patch layout: rows, then columns, then channels of an r x r tile.
// On disk: magic "MMCB", u32 K, r, channels, then K*(r*r*channels) entries as
// little-endian float32, row-major per entry. See docs/formats.md.
struct Codebook {
  std::int64_t k = 0;
  std::int64_t r = 0;
  std::int64_t channels = 0;
  std::vector<float> entries;  // [K, r*r*channels]

  std::int64_t patch_dim() const { return r * r * channels; }
  const float* entry(std::int64_t id) const { return entries.data() + id * patch_dim(); }

  // K >= 2 and entries pairwise distinct.
  void validate() const;

  // Seeded random codebook; entries drawn i.i.d. normal and rescaled, which
  // keeps them well separated with overwhelming probability.
  static Codebook random(std::int64_t k, std::int64_t r, std::int64_t channels,
                         std::uint64_t seed);

  // Lloyd k-means over all patches of the given images.
  static Codebook kmeans(const std::vector<Pixmap>& images, std::int64_t k, std::int64_t r,
                         int iters, std::uint64_t seed);

  void save(const std::string& path) const;
  static Codebook load(const std::string& path);
};

struct TokenGrid {
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<std::int64_t> ids;  // row-major h*w code indices

  std::int64_t size() const { return h * w; }
};

// Nearest-codebook-entry quantization of every r x r patch (squared Euclidean
// distance, ties to the lowest index). H and W must be divisible by r.
TokenGrid encode(const Pixmap& image, const Codebook& cb);

// Paints each token's codebook patch; right inverse of encode on
// codebook-tiled images.
Pixmap decode(const TokenGrid& grid, const Codebook& cb);

}  // namespace maskmamba
