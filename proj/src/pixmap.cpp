#include "maskmamba/pixmap.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace maskmamba {

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("pixmap: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_pixmap(const std::string& path, const Pixmap& pm) {
  if (pm.data.size() != static_cast<std::size_t>(pm.height * pm.width * pm.channels))
    throw std::invalid_argument("save_pixmap: data size does not match dimensions");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_pixmap: cannot open " + path);
  os.write("MMPX", 4);
  write_u32(os, static_cast<std::uint32_t>(pm.height));
  write_u32(os, static_cast<std::uint32_t>(pm.width));
  write_u32(os, static_cast<std::uint32_t>(pm.channels));
  os.write(reinterpret_cast<const char*>(pm.data.data()),
           static_cast<std::streamsize>(pm.data.size() * sizeof(float)));
  if (!os) throw std::runtime_error("save_pixmap: write failed for " + path);
}

Pixmap load_pixmap(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_pixmap: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MMPX", 4) != 0)
    throw std::runtime_error("load_pixmap: bad magic in " + path);
  Pixmap pm;
  pm.height = read_u32(is);
  pm.width = read_u32(is);
  pm.channels = read_u32(is);
  pm.data.resize(static_cast<std::size_t>(pm.height * pm.width * pm.channels));
  is.read(reinterpret_cast<char*>(pm.data.data()),
          static_cast<std::streamsize>(pm.data.size() * sizeof(float)));
  if (!is) throw std::runtime_error("load_pixmap: truncated data in " + path);
  return pm;
}

}  // namespace maskmamba
