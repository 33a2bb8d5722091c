#pragma once

#include <cmath>
#include <string>

#include "arseg/autograd.hpp"
#include "arseg/params.hpp"

namespace arseg::layers {

using ag::Tape;
using ag::Var;

template <class T>
void add_conv(ParamStore<T>& ps, const std::string& name, int cin, int cout, Rng& rng) {
  const double bound = 1.0 / std::sqrt(9.0 * cin);
  ps.add(name + ".w", uniform_init<T>(rng, 9 * cin, cout, bound));
  ps.add(name + ".b", Mat<T>::Zero(1, cout), false);
}

template <class T>
void add_linear(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng, double gain = 1.0) {
  const double bound = gain / std::sqrt(static_cast<double>(in));
  ps.add(name + ".w", uniform_init<T>(rng, in, out, bound));
  ps.add(name + ".b", Mat<T>::Zero(1, out), false);
}

template <class T>
void add_group_norm(ParamStore<T>& ps, const std::string& name, int channels) {
  ps.add(name + ".g", Mat<T>::Ones(1, channels), false);
  ps.add(name + ".b", Mat<T>::Zero(1, channels), false);
}

// Param binding: recording tapes see trainable params as differentiable
// leaves; const access always yields constants.
template <class T>
Var<T> bind_param(Tape<T>& tape, ParamStore<T>& ps, const std::string& name) {
  return tape.param(ps.at(name));
}
template <class T>
Var<T> bind_param(Tape<T>& tape, const ParamStore<T>& ps, const std::string& name) {
  return tape.constant(ps.at(name).value);
}

template <class T, class PS>
Var<T> conv(Tape<T>& tape, PS& ps, const std::string& name, Var<T> x, int h, int w, int stride, int& oh, int& ow) {
  return ag::conv3x3(x, h, w, bind_param(tape, ps, name + ".w"), bind_param(tape, ps, name + ".b"), stride, oh, ow);
}

template <class T, class PS>
Var<T> linear(Tape<T>& tape, PS& ps, const std::string& name, Var<T> x) {
  return ag::linear(x, bind_param(tape, ps, name + ".w"), bind_param(tape, ps, name + ".b"));
}

template <class T, class PS>
Var<T> gn_silu(Tape<T>& tape, PS& ps, const std::string& name, Var<T> x, int groups) {
  return ag::silu(ag::group_norm(x, groups, bind_param(tape, ps, name + ".g"), bind_param(tape, ps, name + ".b")));
}

inline int pick_groups(int channels, int wanted) {
  int g = wanted < 1 ? 1 : wanted;
  while (channels % g != 0) --g;
  return g;
}

}  // namespace arseg::layers
