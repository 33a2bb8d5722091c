#pragma once

// Synthetic multi-annotator segmentation data. Each case has a star-shaped
// lesion on a textured background; every annotator traces an independently
// jittered version of the true boundary (a global erode/dilate offset plus
// smooth angular boundary noise), which emulates inter-rater variability.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arseg/arsg_io.hpp"
#include "arseg/json_util.hpp"
#include "arseg/mask.hpp"
#include "arseg/rng.hpp"

namespace arseg::data {

struct DatasetSpec {
  int image_size = 64;
  int image_channels = 1;
  int classes = 1;
  int annotators = 4;
  int train = 400;
  int val = 50;
  int test = 50;
  double boundary_jitter = 1.5;  // sigma_b, pixels
  double annotator_bias = 1.0;   // erode/dilate range, in units of sigma_b
  double texture_noise = 0.04;   // sigma_t
  double contrast = 0.35;
  double min_radius = 0.12;  // fraction of image size
  double max_radius = 0.24;
  std::uint64_t seed = 1234;

  int cases() const { return train + val + test; }

  void validate() const {
    const bool pow2 = image_size >= 32 && (image_size & (image_size - 1)) == 0;
    if (!pow2) throw ConfigError("dataset.image_size must be a power of two >= 32");
    if (annotators < 1) throw ConfigError("dataset.annotators must be >= 1");
    if (classes < 1 || classes > 3) throw ConfigError("dataset.classes must be in [1, 3]");
    if (image_channels < 1) throw ConfigError("dataset.image_channels must be >= 1");
    if (train < 0 || val < 0 || test < 0 || cases() < 1) throw ConfigError("dataset split sizes must be >= 0 with a positive total");
    if (boundary_jitter < 0 || annotator_bias < 0 || texture_noise < 0) throw ConfigError("dataset noise parameters must be >= 0");
    if (!(min_radius > 0 && max_radius >= min_radius && max_radius < 0.5)) throw ConfigError("dataset radius range invalid");
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"image_size", s.image_size},   {"image_channels", s.image_channels},
                     {"classes", s.classes},         {"annotators", s.annotators},
                     {"train", s.train},             {"val", s.val},
                     {"test", s.test},               {"boundary_jitter", s.boundary_jitter},
                     {"annotator_bias", s.annotator_bias}, {"texture_noise", s.texture_noise},
                     {"contrast", s.contrast},       {"min_radius", s.min_radius},
                     {"max_radius", s.max_radius},   {"seed", s.seed}};
}

struct Record {
  std::string id;
  std::string split;
  Mat<float> image;                             // (H*W) x C_img, values in [0,1]
  std::vector<std::vector<BinaryMask>> masks;   // [annotator][class]
  std::vector<BinaryMask> truth;                // [class], not written to disk

  /// All annotators' masks for one class.
  std::vector<BinaryMask> annotations(int cls) const {
    std::vector<BinaryMask> out;
    for (const auto& a : masks) out.push_back(a[static_cast<std::size_t>(cls)]);
    return out;
  }
};

namespace detail {

struct Shape {
  double cx, cy, r0;
  std::vector<double> amp, phase;

  double radius(double theta) const {
    double r = 1.0;
    for (std::size_t i = 0; i < amp.size(); ++i) r += amp[i] * std::cos((i + 2) * theta + phase[i]);
    return r0 * r;
  }
};

struct BoundaryNoise {
  double offset = 0;
  std::vector<double> amp, phase;

  double at(double theta) const {
    double v = offset;
    for (std::size_t i = 0; i < amp.size(); ++i) v += amp[i] * std::cos((i + 1) * theta + phase[i]);
    return v;
  }
};

inline BoundaryNoise annotator_noise(const DatasetSpec& s, Rng& rng) {
  BoundaryNoise n;
  n.offset = s.boundary_jitter * uniform(rng, -s.annotator_bias, s.annotator_bias);
  for (int i = 0; i < 4; ++i) {
    n.amp.push_back(s.boundary_jitter * 0.5 * standard_normal(rng) / (i + 1));
    n.phase.push_back(uniform(rng, 0, 6.283185307179586));
  }
  return n;
}

// Class k region as a scaled copy of the lesion shape: outer (k=0), core
// (k=1) and an eccentric enhancing spot (k=2).
inline void class_geometry(int k, const Shape& s, double& cx, double& cy, double& scale) {
  cx = s.cx;
  cy = s.cy;
  scale = 1.0;
  if (k == 1) scale = 0.55;
  if (k == 2) {
    scale = 0.28;
    cx += 0.3 * s.r0;
    cy -= 0.2 * s.r0;
  }
}

inline BinaryMask rasterize(int size, const Shape& s, int k, const BoundaryNoise* noise) {
  BinaryMask m(size, size);
  double cx, cy, scale;
  class_geometry(k, s, cx, cy, scale);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double th = std::atan2(dy, dx);
      double r = scale * s.radius(th);
      if (noise) r += noise->at(th);
      m.at(y, x) = std::sqrt(dx * dx + dy * dy) <= r ? 1 : 0;
    }
  return m;
}

inline double soft_inside(int size, const Shape& s, int k, int x, int y) {
  double cx, cy, scale;
  class_geometry(k, s, cx, cy, scale);
  (void)size;
  const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
  const double edge = scale * s.radius(std::atan2(dy, dx)) - std::sqrt(dx * dx + dy * dy);
  return 1.0 / (1.0 + std::exp(-edge / 0.8));
}

}  // namespace detail

/// Renders case `index` (0-based over train, val, test) in memory.
inline Record generate_case(const DatasetSpec& spec, int index) {
  spec.validate();
  const int n = spec.image_size;
  Rng rng = derive_rng(spec.seed, "case", static_cast<std::uint64_t>(index));
  detail::Shape shape;
  shape.r0 = uniform(rng, spec.min_radius, spec.max_radius) * n;
  const double margin = shape.r0 * 1.5 + 2;
  shape.cx = uniform(rng, margin, n - margin);
  shape.cy = uniform(rng, margin, n - margin);
  for (int i = 0; i < 3; ++i) {
    shape.amp.push_back(uniform(rng, 0.0, 0.15));
    shape.phase.push_back(uniform(rng, 0, 6.283185307179586));
  }

  Record rec;
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%05d", index);
  rec.id = buf;
  rec.split = index < spec.train ? "train" : (index < spec.train + spec.val ? "val" : "test");

  for (int k = 0; k < spec.classes; ++k) rec.truth.push_back(detail::rasterize(n, shape, k, nullptr));

  for (int a = 0; a < spec.annotators; ++a) {
    std::vector<BinaryMask> per_class;
    for (int k = 0; k < spec.classes; ++k) {
      Rng arng = derive_rng(spec.seed, "annotator", static_cast<std::uint64_t>(index) * 1024 + a * 8 + k);
      const auto noise = detail::annotator_noise(spec, arng);
      per_class.push_back(detail::rasterize(n, shape, k, &noise));
    }
    rec.masks.push_back(std::move(per_class));
  }

  // Background: low-frequency texture; lesion classes add channel-specific
  // contrast with a soft edge; then pixel noise.
  Rng trng = derive_rng(spec.seed, "texture", static_cast<std::uint64_t>(index));
  rec.image = Mat<float>(Index(n) * n, spec.image_channels);
  for (int c = 0; c < spec.image_channels; ++c) {
    double fx[3], fy[3], ph[3], am[3];
    for (int i = 0; i < 3; ++i) {
      fx[i] = uniform(trng, 0.5, 3.0) * 6.283185307179586 / n;
      fy[i] = uniform(trng, 0.5, 3.0) * 6.283185307179586 / n;
      ph[i] = uniform(trng, 0, 6.283185307179586);
      am[i] = uniform(trng, 0.02, 0.08);
    }
    double gain[3];
    for (int k = 0; k < 3; ++k) gain[k] = spec.contrast * (c == 0 ? 1.0 : uniform(trng, 0.5, 1.2)) * (1.0 + 0.4 * k);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double v = 0.3;
        for (int i = 0; i < 3; ++i) v += am[i] * std::sin(fx[i] * x + fy[i] * y + ph[i]);
        double lesion = 0;
        for (int k = 0; k < spec.classes; ++k) lesion = std::max(lesion, gain[k] * detail::soft_inside(n, shape, k, x, y));
        v += lesion + spec.texture_noise * standard_normal(trng);
        rec.image(Index(y) * n + x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  return rec;
}

inline std::string image_path(const std::string& id) { return "cases/" + id + "/image.arsg"; }
inline std::string mask_path(const std::string& id, int a, int k) {
  return "cases/" + id + "/mask_a" + std::to_string(a) + "_c" + std::to_string(k) + ".arsg";
}

inline io::Tensor image_tensor(const Mat<float>& rows, int size) {
  const Index c = rows.cols(), hw = rows.rows();
  std::vector<float> d(static_cast<std::size_t>(c * hw));
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < hw; ++i) d[static_cast<std::size_t>(ch * hw + i)] = rows(i, ch);
  return io::Tensor::from_f32({c, size, size}, std::move(d));
}

/// Writes the dataset tree and manifest.json; returns the manifest.
inline nlohmann::json generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw IoError(out_dir.string() + ": cannot create output directory");
  nlohmann::json manifest;
  manifest["format"] = "arseg-dataset";
  manifest["version"] = 1;
  manifest["spec"] = spec;
  manifest["seed"] = spec.seed;
  nlohmann::json records = nlohmann::json::array();
  for (int i = 0; i < spec.cases(); ++i) {
    Record rec = generate_case(spec, i);
    nlohmann::json r;
    r["id"] = rec.id;
    r["split"] = rec.split;
    r["classes"] = spec.classes;
    r["annotators"] = spec.annotators;
    nlohmann::json files = nlohmann::json::array();
    auto put = [&](const std::string& rel, const io::Tensor& t) {
      const std::string bytes = io::encode(t);
      io::write_file(out_dir / rel, bytes);
      files.push_back({{"path", rel}, {"crc32", io::crc_hex(io::crc32_of(bytes))}});
    };
    put(image_path(rec.id), image_tensor(rec.image, spec.image_size));
    for (int a = 0; a < spec.annotators; ++a)
      for (int k = 0; k < spec.classes; ++k) put(mask_path(rec.id, a, k), io::mask_tensor(rec.masks[a][k]));
    r["files"] = files;
    records.push_back(r);
  }
  manifest["records"] = records;
  io::write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

struct Dataset {
  DatasetSpec spec;
  std::vector<Record> records;

  std::vector<const Record*> split(const std::string& name) const {
    std::vector<const Record*> out;
    for (const auto& r : records)
      if (r.split == name) out.push_back(&r);
    return out;
  }
};

inline DatasetSpec spec_from_json(const nlohmann::json& j, const std::string& path = "dataset") {
  DatasetSpec s;
  StrictObject o(j, path);
  o.get("image_size", s.image_size).get("image_channels", s.image_channels).get("classes", s.classes);
  o.get("annotators", s.annotators).get("train", s.train).get("val", s.val).get("test", s.test);
  o.get("boundary_jitter", s.boundary_jitter).get("annotator_bias", s.annotator_bias);
  o.get("texture_noise", s.texture_noise).get("contrast", s.contrast);
  o.get("min_radius", s.min_radius).get("max_radius", s.max_radius).get("seed", s.seed);
  o.finish();
  s.validate();
  return s;
}

/// Loads and checksum-verifies every file listed in `dir`/manifest.json.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_file(mpath));
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.spec = spec_from_json(manifest.at("spec"));
  } catch (const std::exception& e) {
    throw FormatError(mpath.string() + ": bad spec: " + e.what());
  }
  const int n = ds.spec.image_size;
  try {
    for (const auto& r : manifest.at("records")) {
      Record rec;
      rec.id = r.at("id").get<std::string>();
      rec.split = r.at("split").get<std::string>();
      std::map<std::string, std::string> crcs;
      for (const auto& f : r.at("files")) crcs[f.at("path").get<std::string>()] = f.at("crc32").get<std::string>();
      auto load = [&](const std::string& rel) {
        const auto p = dir / rel;
        if (!std::filesystem::exists(p)) throw FormatError(p.string() + ": missing file");
        const std::string bytes = io::read_file(p);
        auto it = crcs.find(rel);
        if (it == crcs.end()) throw FormatError(p.string() + ": not listed in manifest");
        if (io::crc_hex(io::crc32_of(bytes)) != it->second) throw FormatError(p.string() + ": checksum mismatch");
        return io::decode(bytes, p.string());
      };
      const io::Tensor img = load(image_path(rec.id));
      if (img.shape.size() != 3 || img.shape[1] != n || img.shape[2] != n || img.shape[0] != ds.spec.image_channels)
        throw FormatError((dir / image_path(rec.id)).string() + ": unexpected image shape");
      rec.image = io::image_rows<float>(img, image_path(rec.id));
      const int annot = r.at("annotators").get<int>();
      const int classes = r.at("classes").get<int>();
      for (int a = 0; a < annot; ++a) {
        std::vector<BinaryMask> per;
        for (int k = 0; k < classes; ++k) {
          const std::string rel = mask_path(rec.id, a, k);
          BinaryMask m = io::mask_from_tensor(load(rel), (dir / rel).string());
          if (m.h != n || m.w != n) throw FormatError((dir / rel).string() + ": unexpected mask shape");
          per.push_back(std::move(m));
        }
        rec.masks.push_back(std::move(per));
      }
      ds.records.push_back(std::move(rec));
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(mpath.string() + ": bad record: " + e.what());
  }
  return ds;
}

/// Deterministic permutation of [0, n) for a given seed and epoch.
inline std::vector<int> shuffled_indices(int n, std::uint64_t seed, int epoch) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = derive_rng(seed, "shuffle", static_cast<std::uint64_t>(epoch));
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

/// In-memory dataset (no disk round trip).
inline Dataset generate_in_memory(const DatasetSpec& spec) {
  Dataset ds;
  ds.spec = spec;
  for (int i = 0; i < spec.cases(); ++i) ds.records.push_back(generate_case(spec, i));
  return ds;
}

}  // namespace arseg::data
