#pragma once

// Checkpoint directory layout:
//   index.json               stage tag, format version, config echo, RNG
//                            state, parameter and optimizer-state listing
//   params/<name>.arsg       one f32 tensor per parameter
//   optim/<name>.{m,v}.arsg  AdamW moments

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "arseg/arsg_io.hpp"
#include "arseg/optim.hpp"
#include "arseg/params.hpp"

namespace arseg {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::string stage;  // "stage1" or "stage2"
  int version = kCheckpointVersion;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json info = nlohmann::json::object();  // step, epoch, best metric, ...
  std::string rng_state;
  std::vector<std::pair<std::string, Mat<float>>> params;
  long optim_step = 0;
  std::vector<std::pair<std::string, AdamState<float>>> optim;

  const Mat<float>* find(const std::string& name) const {
    for (const auto& [n, m] : params)
      if (n == name) return &m;
    return nullptr;
  }

  bool has_prefix(const std::string& prefix) const {
    for (const auto& p : params)
      if (p.first.rfind(prefix, 0) == 0) return true;
    return false;
  }
};

template <class T>
void capture_params(Checkpoint& c, const ParamStore<T>& ps) {
  for (std::size_t i = 0; i < ps.size(); ++i) c.params.emplace_back(ps[i].name, ps[i].value.template cast<float>());
}

template <class T>
void capture_optimizer(Checkpoint& c, const AdamW<T>& opt) {
  c.optim_step = opt.steps();
  for (const auto& [name, st] : opt.state())
    c.optim.emplace_back(name, AdamState<float>{st.m.template cast<float>(), st.v.template cast<float>()});
}

/// Copies every parameter of `ps` from the checkpoint; shapes must match.
template <class T>
void restore_params(const Checkpoint& c, ParamStore<T>& ps) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i];
    const Mat<float>* m = c.find(p.name);
    if (!m) throw FormatError("checkpoint is missing parameter " + p.name);
    if (m->rows() != p.value.rows() || m->cols() != p.value.cols())
      throw FormatError("checkpoint parameter " + p.name + " has shape " + shape_str(*m) + ", model expects " +
                        shape_str(p.value));
    p.value = m->template cast<T>();
  }
}

template <class T>
void restore_optimizer(const Checkpoint& c, AdamW<T>& opt) {
  opt.set_steps(c.optim_step);
  opt.state().clear();
  for (const auto& [name, st] : c.optim)
    opt.state()[name] = AdamState<T>{st.m.template cast<T>(), st.v.template cast<T>()};
}

inline void require_stage(const Checkpoint& c, const std::string& expected) {
  if (c.stage != expected)
    throw StateError("checkpoint stage '" + c.stage + "' does not match the expected '" + expected + "'");
}

namespace detail {
inline std::string param_file(const std::string& name) { return "params/" + name + ".arsg"; }
}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& c) {
  nlohmann::json index;
  index["format"] = "arseg-checkpoint";
  index["version"] = c.version;
  index["stage"] = c.stage;
  index["config"] = c.config;
  index["info"] = c.info;
  index["rng_state"] = c.rng_state;
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& [name, m] : c.params) {
    const std::string rel = detail::param_file(name);
    const std::string bytes = io::encode(io::Tensor::from_mat(m));
    io::write_file(dir / rel, bytes);
    plist.push_back({{"name", name}, {"file", rel}, {"crc32", io::crc_hex(io::crc32_of(bytes))}});
  }
  index["params"] = plist;
  nlohmann::json olist = nlohmann::json::array();
  for (const auto& [name, st] : c.optim) {
    const std::string mrel = "optim/" + name + ".m.arsg", vrel = "optim/" + name + ".v.arsg";
    io::write_tensor(dir / mrel, io::Tensor::from_mat(st.m));
    io::write_tensor(dir / vrel, io::Tensor::from_mat(st.v));
    olist.push_back({{"name", name}, {"m", mrel}, {"v", vrel}});
  }
  index["optimizer"] = {{"step", c.optim_step}, {"state", olist}};
  io::write_file(dir / "index.json", index.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto ipath = dir / "index.json";
  if (!std::filesystem::exists(ipath)) throw ConfigError(dir.string() + ": not a checkpoint (index.json missing)");
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(io::read_file(ipath));
  } catch (const std::exception& e) {
    throw FormatError(ipath.string() + ": " + e.what());
  }
  Checkpoint c;
  try {
    if (index.at("format").get<std::string>() != "arseg-checkpoint") throw FormatError(ipath.string() + ": not a checkpoint index");
    c.version = index.at("version").get<int>();
    if (c.version != kCheckpointVersion)
      throw FormatError(ipath.string() + ": checkpoint version " + std::to_string(c.version) + " is not supported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    c.stage = index.at("stage").get<std::string>();
    c.config = index.at("config");
    c.info = index.at("info");
    c.rng_state = index.at("rng_state").get<std::string>();
    auto read_mat = [&](const std::string& rel) {
      const auto p = dir / rel;
      const io::Tensor t = io::read_tensor(p);
      if (t.dtype != "f32" || t.shape.size() != 2) throw FormatError(p.string() + ": expected an f32 matrix");
      return t.to_mat<float>(t.shape[0], t.shape[1]);
    };
    for (const auto& e : index.at("params")) {
      const std::string rel = e.at("file").get<std::string>();
      const std::string bytes = io::read_file(dir / rel);
      const io::Tensor t = io::decode(bytes, (dir / rel).string());
      if (io::crc_hex(io::crc32_of(bytes)) != e.at("crc32").get<std::string>())
        throw FormatError((dir / rel).string() + ": checksum mismatch");
      if (t.dtype != "f32" || t.shape.size() != 2) throw FormatError((dir / rel).string() + ": expected an f32 matrix");
      c.params.emplace_back(e.at("name").get<std::string>(), t.to_mat<float>(t.shape[0], t.shape[1]));
    }
    const auto& opt = index.at("optimizer");
    c.optim_step = opt.at("step").get<long>();
    for (const auto& e : opt.at("state"))
      c.optim.emplace_back(e.at("name").get<std::string>(),
                           AdamState<float>{read_mat(e.at("m").get<std::string>()), read_mat(e.at("v").get<std::string>())});
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(ipath.string() + ": " + e.what());
  }
  return c;
}

}  // namespace arseg
