#pragma once

// Minimal 8-bit grayscale PNG writer (no ancillary chunks, so output is a
// pure function of the pixels).

#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "arseg/arsg_io.hpp"
#include "arseg/error.hpp"

namespace arseg::png {

struct Gray8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  Gray8() = default;
  Gray8(int w, int h, std::uint8_t fill = 0) : width(w), height(h), pixels(static_cast<std::size_t>(w * h), fill) {}
  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y * width + x)]; }
};

/// Fixed linear ramp [0,1] -> [0,255].
inline std::uint8_t ramp(double v) {
  if (!(v > 0)) return 0;
  if (v >= 1) return 255;
  return static_cast<std::uint8_t>(v * 255.0 + 0.5);
}

namespace detail {
inline void put_u32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>(v & 0xff));
}
inline void chunk(std::string& out, const char* type, const std::string& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  std::string td(type, 4);
  td += data;
  out += td;
  put_u32(out, io::crc32_of(td));
}
}  // namespace detail

inline std::string encode(const Gray8& img) {
  if (img.width < 1 || img.height < 1) throw InvalidInput("png: empty image");
  std::string raw;
  raw.reserve(static_cast<std::size_t>((img.width + 1) * img.height));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    raw.append(reinterpret_cast<const char*>(img.pixels.data()) + static_cast<std::ptrdiff_t>(y) * img.width,
               static_cast<std::size_t>(img.width));
  }
  uLongf clen = compressBound(static_cast<uLong>(raw.size()));
  std::string comp(clen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(comp.data()), &clen, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png: compression failed");
  comp.resize(clen);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  detail::put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // depth 8, grayscale, deflate, no filter, no interlace
  detail::chunk(out, "IHDR", ihdr);
  detail::chunk(out, "IDAT", comp);
  detail::chunk(out, "IEND", "");
  return out;
}

inline void write(const std::filesystem::path& p, const Gray8& img) { io::write_file(p, encode(img)); }

/// Reads width/height back from an encoded PNG's IHDR.
inline std::pair<int, int> dimensions(const std::string& bytes) {
  if (bytes.size() < 24 || bytes.compare(0, 8, std::string("\x89PNG\r\n\x1a\n", 8)) != 0)
    throw FormatError("png: bad signature");
  auto rd = [&](std::size_t off) {
    return (static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[off])) << 24) |
           (static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[off + 1])) << 16) |
           (static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[off + 2])) << 8) |
           static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[off + 3]));
  };
  return {static_cast<int>(rd(16)), static_cast<int>(rd(20))};
}

}  // namespace arseg::png
