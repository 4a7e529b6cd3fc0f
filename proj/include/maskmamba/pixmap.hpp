#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace maskmamba {

// Portable pixel map: float32 samples, row-major [H, W, channels].
// On disk: magic "MMPX", then u32 height, width, channels, then the samples
// as little-endian float32. See docs/formats.md.
struct Pixmap {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t channels = 0;
  std::vector<float> data;

  float& at(std::int64_t y, std::int64_t x, std::int64_t c) {
    return data[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  float at(std::int64_t y, std::int64_t x, std::int64_t c) const {
    return data[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
};

void save_pixmap(const std::string& path, const Pixmap& pm);
Pixmap load_pixmap(const std::string& path);

}  // namespace maskmamba
