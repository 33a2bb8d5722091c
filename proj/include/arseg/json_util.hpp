#pragma once

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "arseg/error.hpp"

namespace arseg {

/// Reads fields from a JSON object and rejects any key that was never
/// asked for. Missing keys keep the caller's default.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  template <class V>
  StrictObject& get(const std::string& key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return *this;
    try {
      out = it->template get<V>();
    } catch (const std::exception& e) {
      throw ConfigError("key '" + qualified(key) + "' has the wrong type: " + e.what());
    }
    return *this;
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  /// Sub-object; an absent key yields an empty object.
  StrictObject child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return StrictObject(empty(), qualified(key));
    return StrictObject(*it, qualified(key));
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + qualified(it.key()) + "'");
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  static const nlohmann::json& empty() {
    static const nlohmann::json e = nlohmann::json::object();
    return e;
  }
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace arseg
