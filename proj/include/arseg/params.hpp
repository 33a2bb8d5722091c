#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "arseg/error.hpp"
#include "arseg/rng.hpp"
#include "arseg/tensor.hpp"

namespace arseg {

template <class T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  bool decay = true;      // subject to decoupled weight decay
  bool trainable = true;  // false => frozen, never receives gradient

  Index size() const { return value.size(); }
};

/// Ordered, named parameter collection. Iteration order is insertion
/// order, which keeps optimizer updates and checkpoints deterministic.
template <class T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Param<T>& add(const std::string& name, Mat<T> value, bool decay = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Param<T>>();
    p->name = name;
    p->grad = Mat<T>::Zero(value.rows(), value.cols());
    p->value = std::move(value);
    p->decay = decay;
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Param<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *params_[it->second];
  }
  const Param<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *params_[it->second];
  }

  std::size_t size() const { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return *params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& p : params_) out.push_back(p->name);
    return out;
  }

  Index count() const {
    Index n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.setZero();
  }

  void set_trainable(bool on) {
    for (auto& p : params_) p->trainable = on;
  }

  template <class U>
  void copy_values_from(const ParamStore<U>& other) {
    for (auto& p : params_) p->value = other.at(p->name).value.template cast<T>();
  }

 private:
  std::vector<std::unique_ptr<Param<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Uniform(-bound, bound) initialisation.
template <class T>
Mat<T> uniform_init(Rng& rng, Index rows, Index cols, double bound) {
  Mat<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(uniform(rng, -bound, bound));
  return m;
}

template <class T>
Mat<T> normal_init(Rng& rng, Index rows, Index cols, double stddev) {
  Mat<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * standard_normal(rng));
  return m;
}

}  // namespace arseg
