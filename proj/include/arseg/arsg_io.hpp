#pragma once

// "ARSG" tensor container:
//   4 bytes  magic "ARSG"
//   u8       version (1)
//   u32 LE   length of the JSON header
//   JSON     {"dtype": "f32" | "u8", "shape": [...]}
//   payload  raw little-endian, row-major

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arseg/error.hpp"
#include "arseg/mask.hpp"
#include "arseg/tensor.hpp"

namespace arseg::io {

static_assert(std::endian::native == std::endian::little, "ARSG payloads are written in host order");

inline constexpr char kMagic[4] = {'A', 'R', 'S', 'G'};
inline constexpr std::uint8_t kVersion = 1;

struct Tensor {
  std::string dtype;  // "f32" or "u8"
  std::vector<std::int64_t> shape;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;

  std::int64_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
  }

  static Tensor from_f32(std::vector<std::int64_t> shape, std::vector<float> data) {
    Tensor t{"f32", std::move(shape), std::move(data), {}};
    if (t.numel() != static_cast<std::int64_t>(t.f32.size())) throw InvalidInput("tensor: shape/data size mismatch");
    return t;
  }
  static Tensor from_u8(std::vector<std::int64_t> shape, std::vector<std::uint8_t> data) {
    Tensor t{"u8", std::move(shape), {}, std::move(data)};
    if (t.numel() != static_cast<std::int64_t>(t.u8.size())) throw InvalidInput("tensor: shape/data size mismatch");
    return t;
  }
  template <class T>
  static Tensor from_mat(const Mat<T>& m) {
    std::vector<float> d(static_cast<std::size_t>(m.size()));
    for (Index i = 0; i < m.size(); ++i) d[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
    return from_f32({m.rows(), m.cols()}, std::move(d));
  }
  template <class T>
  Mat<T> to_mat(Index rows, Index cols) const {
    if (dtype != "f32") throw FormatError("tensor: expected f32 payload");
    if (rows * cols != numel()) throw FormatError("tensor: element count mismatch");
    Mat<T> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(f32[static_cast<std::size_t>(i)]);
    return m;
  }
};

inline std::string encode(const Tensor& t) {
  nlohmann::json header;
  header["dtype"] = t.dtype;
  header["shape"] = t.shape;
  const std::string hs = header.dump();
  std::string out(kMagic, 4);
  out.push_back(static_cast<char>(kVersion));
  const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
  char lenb[4];
  std::memcpy(lenb, &len, 4);
  out.append(lenb, 4);
  out += hs;
  if (t.dtype == "f32") {
    if (static_cast<std::int64_t>(t.f32.size()) != t.numel()) throw InvalidInput("tensor: payload size mismatch");
    out.append(reinterpret_cast<const char*>(t.f32.data()), t.f32.size() * sizeof(float));
  } else if (t.dtype == "u8") {
    if (static_cast<std::int64_t>(t.u8.size()) != t.numel()) throw InvalidInput("tensor: payload size mismatch");
    out.append(reinterpret_cast<const char*>(t.u8.data()), t.u8.size());
  } else {
    throw InvalidInput("tensor: unsupported dtype " + t.dtype);
  }
  return out;
}

inline Tensor decode(const std::string& bytes, const std::string& name = "<memory>") {
  auto fail = [&](const std::string& why) { return FormatError(name + ": " + why); };
  if (bytes.size() < 9 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw fail("bad magic");
  if (static_cast<std::uint8_t>(bytes[4]) != kVersion)
    throw fail("unsupported version " + std::to_string(static_cast<int>(static_cast<std::uint8_t>(bytes[4]))));
  std::uint32_t len;
  std::memcpy(&len, bytes.data() + 5, 4);
  if (bytes.size() < 9ull + len) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(9, len));
  } catch (const std::exception& e) {
    throw fail(std::string("bad header: ") + e.what());
  }
  Tensor t;
  try {
    t.dtype = header.at("dtype").get<std::string>();
    t.shape = header.at("shape").get<std::vector<std::int64_t>>();
  } catch (const std::exception& e) {
    throw fail(std::string("bad header: ") + e.what());
  }
  for (auto s : t.shape)
    if (s < 0) throw fail("negative dimension");
  const std::size_t n = static_cast<std::size_t>(t.numel());
  const std::size_t off = 9ull + len;
  const std::size_t avail = bytes.size() - off;
  if (t.dtype == "f32") {
    if (avail != n * sizeof(float)) throw fail("payload size " + std::to_string(avail) + " != expected " + std::to_string(n * 4));
    t.f32.resize(n);
    std::memcpy(t.f32.data(), bytes.data() + off, n * sizeof(float));
  } else if (t.dtype == "u8") {
    if (avail != n) throw fail("payload size " + std::to_string(avail) + " != expected " + std::to_string(n));
    t.u8.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
  } else {
    throw fail("unsupported dtype " + t.dtype);
  }
  return t;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError(p.string() + ": cannot open file");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::error_code ec;
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(p.string() + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(p.string() + ": write failed");
}

inline void write_tensor(const std::filesystem::path& p, const Tensor& t) { write_file(p, encode(t)); }
inline Tensor read_tensor(const std::filesystem::path& p) { return decode(read_file(p), p.string()); }

inline std::uint32_t crc32_of(const std::string& bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  c = ::crc32(c, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(c);
}

inline std::string crc_hex(std::uint32_t c) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", c);
  return buf;
}

inline Tensor mask_tensor(const BinaryMask& m) { return Tensor::from_u8({m.h, m.w}, m.data); }

inline BinaryMask mask_from_tensor(const Tensor& t, const std::string& name) {
  if (t.dtype != "u8" || t.shape.size() != 2) throw FormatError(name + ": expected a u8 [H, W] mask");
  for (auto v : t.u8)
    if (v > 1) throw FormatError(name + ": mask is not binary");
  return BinaryMask(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]), t.u8);
}

template <class T>
Tensor soft_tensor(const SoftMask<T>& m) {
  std::vector<float> d(static_cast<std::size_t>(m.values.size()));
  for (Index i = 0; i < m.values.size(); ++i) d[static_cast<std::size_t>(i)] = static_cast<float>(m.values.data()[i]);
  return Tensor::from_f32({m.h, m.w}, std::move(d));
}

/// Image tensor [C, H, W] -> (H*W x C) rows.
template <class T>
Mat<T> image_rows(const Tensor& t, const std::string& name) {
  if (t.dtype != "f32" || t.shape.size() != 3) throw FormatError(name + ": expected an f32 [C, H, W] image");
  const Index c = t.shape[0], hw = t.shape[1] * t.shape[2];
  Mat<T> rows(hw, c);
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < hw; ++i) rows(i, ch) = static_cast<T>(t.f32[static_cast<std::size_t>(ch * hw + i)]);
  return rows;
}

}  // namespace arseg::io
