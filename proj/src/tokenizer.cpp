#include "maskmamba/tokenizer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "maskmamba/rng.hpp"

namespace maskmamba {

void Codebook::validate() const {
  if (k < 2) throw std::invalid_argument("Codebook: need at least 2 entries");
  if (entries.size() != static_cast<std::size_t>(k * patch_dim()))
    throw std::invalid_argument("Codebook: entry storage does not match K and patch size");
  const std::int64_t d = patch_dim();
  for (std::int64_t i = 0; i < k; ++i)
    for (std::int64_t j = i + 1; j < k; ++j)
      if (std::memcmp(entry(i), entry(j), static_cast<std::size_t>(d) * sizeof(float)) == 0)
        throw std::invalid_argument("Codebook: entries " + std::to_string(i) + " and " +
                                    std::to_string(j) + " are identical");
}

Codebook Codebook::random(std::int64_t k, std::int64_t r, std::int64_t channels,
                          std::uint64_t seed) {
  Codebook cb;
  cb.k = k;
  cb.r = r;
  cb.channels = channels;
  cb.entries.resize(static_cast<std::size_t>(k * r * r * channels));
  Rng rng(seed);
  for (auto& v : cb.entries) v = static_cast<float>(rng.normal());
  cb.validate();
  return cb;
}

Codebook Codebook::kmeans(const std::vector<Pixmap>& images, std::int64_t k, std::int64_t r,
                          int iters, std::uint64_t seed) {
  if (images.empty()) throw std::invalid_argument("Codebook::kmeans: no images");
  const std::int64_t channels = images[0].channels;
  const std::int64_t d = r * r * channels;
  // Gather every patch.
  std::vector<float> patches;
  for (const auto& im : images) {
    if (im.channels != channels)
      throw std::invalid_argument("Codebook::kmeans: inconsistent channel counts");
    if (im.height % r != 0 || im.width % r != 0)
      throw std::invalid_argument("Codebook::kmeans: image dimensions not divisible by r");
    for (std::int64_t py = 0; py < im.height / r; ++py)
      for (std::int64_t px = 0; px < im.width / r; ++px)
        for (std::int64_t y = 0; y < r; ++y)
          for (std::int64_t x = 0; x < r; ++x)
            for (std::int64_t c = 0; c < channels; ++c)
              patches.push_back(im.at(py * r + y, px * r + x, c));
  }
  const std::int64_t n = static_cast<std::int64_t>(patches.size()) / d;
  if (n < k) throw std::invalid_argument("Codebook::kmeans: fewer patches than clusters");

  Rng rng(seed);
  Codebook cb;
  cb.k = k;
  cb.r = r;
  cb.channels = channels;
  cb.entries.resize(static_cast<std::size_t>(k * d));
  auto seeds = rng.sample_without_replacement(n, k);
  for (std::int64_t i = 0; i < k; ++i)
    std::memcpy(cb.entries.data() + i * d, patches.data() + seeds[static_cast<std::size_t>(i)] * d,
                static_cast<std::size_t>(d) * sizeof(float));

  std::vector<std::int64_t> assign(static_cast<std::size_t>(n));
  for (int it = 0; it < iters; ++it) {
    for (std::int64_t i = 0; i < n; ++i) {
      const float* p = patches.data() + i * d;
      double best = std::numeric_limits<double>::infinity();
      std::int64_t best_id = 0;
      for (std::int64_t j = 0; j < k; ++j) {
        const float* e = cb.entries.data() + j * d;
        double dist = 0;
        for (std::int64_t t = 0; t < d; ++t) {
          const double diff = static_cast<double>(p[t]) - e[t];
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          best_id = j;
        }
      }
      assign[static_cast<std::size_t>(i)] = best_id;
    }
    std::vector<double> sums(static_cast<std::size_t>(k * d), 0.0);
    std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t a = assign[static_cast<std::size_t>(i)];
      counts[static_cast<std::size_t>(a)]++;
      const float* p = patches.data() + i * d;
      for (std::int64_t t = 0; t < d; ++t) sums[static_cast<std::size_t>(a * d + t)] += p[t];
    }
    for (std::int64_t j = 0; j < k; ++j) {
      if (counts[static_cast<std::size_t>(j)] == 0) {
        // reseed an empty cluster from a random patch
        const std::int64_t pick = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
        std::memcpy(cb.entries.data() + j * d, patches.data() + pick * d,
                    static_cast<std::size_t>(d) * sizeof(float));
        continue;
      }
      for (std::int64_t t = 0; t < d; ++t)
        cb.entries[static_cast<std::size_t>(j * d + t)] =
            static_cast<float>(sums[static_cast<std::size_t>(j * d + t)] /
                               static_cast<double>(counts[static_cast<std::size_t>(j)]));
    }
  }
  // Duplicate centers can survive degenerate data; nudge them apart so the
  // distinctness invariant holds.
  for (std::int64_t i = 0; i < k; ++i)
    for (std::int64_t j = i + 1; j < k; ++j)
      if (std::memcmp(cb.entries.data() + i * d, cb.entries.data() + j * d,
                      static_cast<std::size_t>(d) * sizeof(float)) == 0)
        cb.entries[static_cast<std::size_t>(j * d)] += 1e-3f * static_cast<float>(j + 1);
  cb.validate();
  return cb;
}

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("codebook: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void Codebook::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("Codebook::save: cannot open " + path);
  os.write("MMCB", 4);
  write_u32(os, static_cast<std::uint32_t>(k));
  write_u32(os, static_cast<std::uint32_t>(r));
  write_u32(os, static_cast<std::uint32_t>(channels));
  os.write(reinterpret_cast<const char*>(entries.data()),
           static_cast<std::streamsize>(entries.size() * sizeof(float)));
  if (!os) throw std::runtime_error("Codebook::save: write failed for " + path);
}

Codebook Codebook::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("Codebook::load: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MMCB", 4) != 0)
    throw std::runtime_error("Codebook::load: bad magic in " + path);
  Codebook cb;
  cb.k = read_u32(is);
  cb.r = read_u32(is);
  cb.channels = read_u32(is);
  cb.entries.resize(static_cast<std::size_t>(cb.k * cb.patch_dim()));
  is.read(reinterpret_cast<char*>(cb.entries.data()),
          static_cast<std::streamsize>(cb.entries.size() * sizeof(float)));
  if (!is) throw std::runtime_error("Codebook::load: truncated data in " + path);
  cb.validate();
  return cb;
}

TokenGrid encode(const Pixmap& image, const Codebook& cb) {
  if (image.channels != cb.channels)
    throw std::invalid_argument("encode: image has " + std::to_string(image.channels) +
                                " channels, codebook expects " + std::to_string(cb.channels));
  if (image.height % cb.r != 0 || image.width % cb.r != 0)
    throw std::invalid_argument("encode: image " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " not divisible by r=" +
                                std::to_string(cb.r));
  TokenGrid grid;
  grid.h = image.height / cb.r;
  grid.w = image.width / cb.r;
  grid.ids.resize(static_cast<std::size_t>(grid.h * grid.w));
  const std::int64_t r = cb.r, ch = cb.channels, d = cb.patch_dim();
  std::vector<float> patch(static_cast<std::size_t>(d));
  for (std::int64_t py = 0; py < grid.h; ++py)
    for (std::int64_t px = 0; px < grid.w; ++px) {
      std::int64_t t = 0;
      for (std::int64_t y = 0; y < r; ++y)
        for (std::int64_t x = 0; x < r; ++x)
          for (std::int64_t c = 0; c < ch; ++c)
            patch[static_cast<std::size_t>(t++)] = image.at(py * r + y, px * r + x, c);
      double best = std::numeric_limits<double>::infinity();
      std::int64_t best_id = 0;
      for (std::int64_t j = 0; j < cb.k; ++j) {
        const float* e = cb.entry(j);
        double dist = 0;
        for (std::int64_t i = 0; i < d; ++i) {
          const double diff = static_cast<double>(patch[static_cast<std::size_t>(i)]) - e[i];
          dist += diff * diff;
        }
        if (dist < best) {  // strict: ties keep the lowest index
          best = dist;
          best_id = j;
        }
      }
      grid.ids[static_cast<std::size_t>(py * grid.w + px)] = best_id;
    }
  return grid;
}

Pixmap decode(const TokenGrid& grid, const Codebook& cb) {
  Pixmap out;
  out.height = grid.h * cb.r;
  out.width = grid.w * cb.r;
  out.channels = cb.channels;
  out.data.resize(static_cast<std::size_t>(out.height * out.width * out.channels));
  const std::int64_t r = cb.r, ch = cb.channels;
  for (std::int64_t py = 0; py < grid.h; ++py)
    for (std::int64_t px = 0; px < grid.w; ++px) {
      const std::int64_t id = grid.ids[static_cast<std::size_t>(py * grid.w + px)];
      if (id < 0 || id >= cb.k)
        throw std::out_of_range("decode: token id " + std::to_string(id) +
                                " outside codebook of size " + std::to_string(cb.k));
      const float* e = cb.entry(id);
      std::int64_t t = 0;
      for (std::int64_t y = 0; y < r; ++y)
        for (std::int64_t x = 0; x < r; ++x)
          for (std::int64_t c = 0; c < ch; ++c) out.at(py * r + y, px * r + x, c) = e[t++];
    }
  return out;
}

}  // namespace maskmamba
