#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "arseg/params.hpp"

namespace arseg {

/// Cosine annealing from lr0 at step 0 to zero at `total_steps`.
inline double cosine_lr(double lr0, long step, long total_steps) {
  if (total_steps <= 0) return lr0;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * lr0 * (1.0 + std::cos(3.141592653589793 * t));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

template <class T>
struct AdamState {
  Mat<T> m, v;
};

/// Decoupled-weight-decay Adam over one or more parameter stores. Frozen
/// (non-trainable) parameters are skipped entirely.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void attach(ParamStore<T>& ps) { stores_.push_back(&ps); }

  const AdamWConfig& config() const { return cfg_; }
  long steps() const { return step_; }
  void set_steps(long s) { step_ = s; }
  std::map<std::string, AdamState<T>>& state() { return state_; }
  const std::map<std::string, AdamState<T>>& state() const { return state_; }

  /// Global L2 norm of all trainable gradients.
  double grad_norm() const {
    double s = 0;
    for (auto* ps : stores_)
      for (std::size_t i = 0; i < ps->size(); ++i) {
        const auto& p = (*ps)[i];
        if (p.trainable) s += p.grad.template cast<double>().squaredNorm();
      }
    return std::sqrt(s);
  }

  /// Applies one update with learning rate `lr`; returns the pre-clip
  /// gradient norm.
  double step(double lr) {
    const double norm = grad_norm();
    if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient norm at step " + std::to_string(step_));
    const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto* ps : stores_)
      for (std::size_t i = 0; i < ps->size(); ++i) {
        auto& p = (*ps)[i];
        if (!p.trainable) continue;
        auto& st = state_[p.name];
        if (st.m.size() == 0) {
          st.m = Mat<T>::Zero(p.value.rows(), p.value.cols());
          st.v = Mat<T>::Zero(p.value.rows(), p.value.cols());
        }
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T c = static_cast<T>(clip);
        T* val = p.value.data();
        const T* g = p.grad.data();
        T* m = st.m.data();
        T* v = st.v.data();
        const T wd = p.decay ? static_cast<T>(lr * cfg_.weight_decay) : T(0);
        const T step_size = static_cast<T>(lr / bc1);
        const T inv_bc2 = static_cast<T>(1.0 / bc2);
        const T eps = static_cast<T>(cfg_.eps);
        for (Index k = 0; k < p.value.size(); ++k) {
          const T gk = g[k] * c;
          m[k] = b1 * m[k] + (T(1) - b1) * gk;
          v[k] = b2 * v[k] + (T(1) - b2) * gk * gk;
          val[k] -= wd * val[k];
          val[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
        }
      }
    return norm;
  }

 private:
  AdamWConfig cfg_;
  std::vector<ParamStore<T>*> stores_;
  std::map<std::string, AdamState<T>> state_;
  long step_ = 0;
};

}  // namespace arseg
