#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records every operation as a node holding its value and
// a closure that pushes the node's gradient into its inputs. Scalar type is
// a template parameter so that gradient checks can run in double while
// training runs in float.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "arseg/error.hpp"
#include "arseg/params.hpp"
#include "arseg/tensor.hpp"

namespace arseg::ag {

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Mat<T>& value() const { return tape->value(id); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(const Mat<T>&)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Mat<T> v) { return push(std::move(v), false, nullptr, nullptr); }

  /// Differentiable leaf not tied to a Param (used by tests).
  Var<T> leaf(Mat<T> v) { return push(std::move(v), record_, nullptr, nullptr); }

  Var<T> param(Param<T>& p) {
    bool needs = record_ && p.trainable;
    return push(p.value, needs, nullptr, needs ? &p : nullptr);
  }

  /// Records an op result. `fn` is kept only if some input needs a gradient.
  Var<T> emit(Mat<T> value, bool needs, Backward fn) {
    needs = needs && record_;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, nullptr);
  }

  bool needs(Var<T> v) const { return nodes_[v.id].needs; }
  bool needs(std::initializer_list<Var<T>> vs) const {
    for (auto v : vs)
      if (nodes_[v.id].needs) return true;
    return false;
  }

  const Mat<T>& value(int id) const { return nodes_[id].value; }

  template <class E>
  void acc(Var<T> v, const Eigen::MatrixBase<E>& g) {
    Node& n = nodes_[v.id];
    if (!n.needs) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  Mat<T>& grad_buffer(Var<T> v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Gradient of the last backward() w.r.t. `v` (zeros if none reached it).
  Mat<T> grad(Var<T> v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Backpropagates from a 1x1 node and accumulates into Param::grad.
  void backward(Var<T> loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw InvalidInput("backward() needs a scalar node");
    if (!record_) throw StateError("backward() on a non-recording tape");
    Node& root = nodes_[loss.id];
    if (!root.needs) return;
    root.grad = Mat<T>::Ones(1, 1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs || n.grad.size() == 0) continue;
      if (n.back) {
        n.back(n.grad);
        n.back = nullptr;  // release captured buffers
        if (i != loss.id) n.grad.resize(0, 0);
      }
    }
    for (auto& n : nodes_) {
      if (n.param && n.grad.size() != 0) n.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    Backward back;
    bool needs = false;
    Param<T>* param = nullptr;
  };

  Var<T> push(Mat<T> v, bool needs, Backward fn, Param<T>* p) {
    nodes_.push_back(Node{std::move(v), Mat<T>(), std::move(fn), needs, p});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  bool record_;
  std::deque<Node> nodes_;
};

namespace detail {
template <class T>
void check_same(Var<T> a, Var<T> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidInput(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
}
}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "add");
  Tape<T>& t = *a.tape;
  return t.emit(a.value() + b.value(), t.needs({a, b}), [&t, a, b](const Mat<T>& g) {
    t.acc(a, g);
    t.acc(b, g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "sub");
  Tape<T>& t = *a.tape;
  return t.emit(a.value() - b.value(), t.needs({a, b}), [&t, a, b](const Mat<T>& g) {
    t.acc(a, g);
    t.acc(b, -g);
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "mul");
  Tape<T>& t = *a.tape;
  return t.emit(a.value().cwiseProduct(b.value()), t.needs({a, b}), [&t, a, b](const Mat<T>& g) {
    if (t.needs(a)) t.acc(a, g.cwiseProduct(b.value()));
    if (t.needs(b)) t.acc(b, g.cwiseProduct(a.value()));
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>& t = *a.tape;
  return t.emit(a.value() * s, t.needs(a), [&t, a, s](const Mat<T>& g) { t.acc(a, g * s); });
}

/// a + broadcast(row) with row of shape 1 x cols.
template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw InvalidInput("add_row: bad row shape");
  Tape<T>& t = *a.tape;
  Mat<T> y = a.value();
  y.rowwise() += row.value().row(0);
  return t.emit(std::move(y), t.needs({a, row}), [&t, a, row](const Mat<T>& g) {
    t.acc(a, g);
    if (t.needs(row)) t.acc(row, g.colwise().sum());
  });
}

/// a * broadcast(row), elementwise.
template <class T>
Var<T> mul_row(Var<T> a, Var<T> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw InvalidInput("mul_row: bad row shape");
  Tape<T>& t = *a.tape;
  Mat<T> y = a.value().array().rowwise() * row.value().row(0).array();
  return t.emit(std::move(y), t.needs({a, row}), [&t, a, row](const Mat<T>& g) {
    if (t.needs(a)) {
      Mat<T> ga = g.array().rowwise() * row.value().row(0).array();
      t.acc(a, ga);
    }
    if (t.needs(row)) t.acc(row, g.cwiseProduct(a.value()).colwise().sum());
  });
}

/// 1 + x, used for AdaLN scale modulation.
template <class T>
Var<T> one_plus(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> y = a.value().array() + T(1);
  return t.emit(std::move(y), t.needs(a), [&t, a](const Mat<T>& g) { t.acc(a, g); });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> y = (T(1) / (T(1) + (-a.value().array()).exp())).matrix();
  Mat<T> s = t.needs(a) ? y : Mat<T>();
  return t.emit(std::move(y), t.needs(a), [&t, a, s = std::move(s)](const Mat<T>& g) {
    t.acc(a, (g.array() * s.array() * (T(1) - s.array())).matrix());
  });
}

template <class T>
Var<T> silu(Var<T> a) {
  Tape<T>& t = *a.tape;
  const auto& x = a.value().array();
  Mat<T> s = (T(1) / (T(1) + (-x).exp())).matrix();
  Mat<T> y = (x * s.array()).matrix();
  return t.emit(std::move(y), t.needs(a), [&t, a, s = std::move(s)](const Mat<T>& g) {
    const auto& x = a.value().array();
    t.acc(a, (g.array() * s.array() * (T(1) + x * (T(1) - s.array()))).matrix());
  });
}

template <class T>
Var<T> stop_gradient(Var<T> a) {
  return a.tape->constant(a.value());
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> y(1, 1);
  y(0, 0) = a.value().sum();
  return t.emit(std::move(y), t.needs(a), [&t, a](const Mat<T>& g) {
    t.acc(a, Mat<T>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Frobenius (L2) norm; gradient defined as zero at the origin.
template <class T>
Var<T> l2_norm(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> y(1, 1);
  T n = a.value().norm();
  y(0, 0) = n;
  return t.emit(std::move(y), t.needs(a), [&t, a, n](const Mat<T>& g) {
    if (n == T(0)) return;
    t.acc(a, a.value() * (g(0, 0) / n));
  });
}

/// Column means, shape 1 x cols.
template <class T>
Var<T> mean_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  const T inv = T(1) / static_cast<T>(a.rows());
  Mat<T> y = a.value().colwise().sum() * inv;
  return t.emit(std::move(y), t.needs(a), [&t, a, inv](const Mat<T>& g) {
    Mat<T> ga(a.rows(), a.cols());
    ga.rowwise() = g.row(0) * inv;
    t.acc(a, ga);
  });
}

template <class T>
Var<T> broadcast_rows(Var<T> row, Index n) {
  if (row.rows() != 1) throw InvalidInput("broadcast_rows: expects a single row");
  Tape<T>& t = *row.tape;
  Mat<T> y(n, row.cols());
  y.rowwise() = row.value().row(0);
  return t.emit(std::move(y), t.needs(row), [&t, row](const Mat<T>& g) { t.acc(row, g.colwise().sum()); });
}

// ---------------------------------------------------------------- linear algebra

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.cols() != b.rows())
    throw InvalidInput("matmul: inner dims " + shape_str(a.value()) + " x " + shape_str(b.value()));
  Tape<T>& t = *a.tape;
  Mat<T> y(a.rows(), b.cols());
  y.noalias() = a.value() * b.value();
  return t.emit(std::move(y), t.needs({a, b}), [&t, a, b](const Mat<T>& g) {
    if (t.needs(a)) {
      Mat<T> ga(a.rows(), a.cols());
      ga.noalias() = g * b.value().transpose();
      t.acc(a, ga);
    }
    if (t.needs(b)) {
      Mat<T> gb(b.rows(), b.cols());
      gb.noalias() = a.value().transpose() * g;
      t.acc(b, gb);
    }
  });
}

/// x W + b with W: in x out, b: 1 x out.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_row(matmul(x, w), b);
}

/// Left-multiplies by a constant matrix (e.g. an interpolation operator).
template <class T>
Var<T> left_apply(std::shared_ptr<const Mat<T>> p, Var<T> a) {
  if (p->cols() != a.rows()) throw InvalidInput("left_apply: shape mismatch");
  Tape<T>& t = *a.tape;
  Mat<T> y(p->rows(), a.cols());
  y.noalias() = (*p) * a.value();
  return t.emit(std::move(y), t.needs(a), [&t, a, p](const Mat<T>& g) {
    Mat<T> ga(a.rows(), a.cols());
    ga.noalias() = p->transpose() * g;
    t.acc(a, ga);
  });
}

// ---------------------------------------------------------------- reshaping

template <class T>
Var<T> slice_rows(Var<T> a, Index start, Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) throw IndexError("slice_rows out of range");
  Tape<T>& t = *a.tape;
  return t.emit(a.value().middleRows(start, n), t.needs(a), [&t, a, start, n](const Mat<T>& g) {
    Mat<T>& ga = t.grad_buffer(a);
    ga.middleRows(start, n) += g;
  });
}

template <class T>
Var<T> slice_cols(Var<T> a, Index start, Index n) {
  if (start < 0 || n < 0 || start + n > a.cols()) throw IndexError("slice_cols out of range");
  Tape<T>& t = *a.tape;
  return t.emit(a.value().middleCols(start, n), t.needs(a), [&t, a, start, n](const Mat<T>& g) {
    Mat<T>& ga = t.grad_buffer(a);
    ga.middleCols(start, n) += g;
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw InvalidInput("concat_rows: no inputs");
  Tape<T>& t = *parts[0].tape;
  Index rows = 0;
  const Index cols = parts[0].cols();
  bool needs = false;
  for (auto& p : parts) {
    if (p.cols() != cols) throw InvalidInput("concat_rows: column mismatch");
    rows += p.rows();
    needs = needs || t.needs(p);
  }
  Mat<T> y(rows, cols);
  Index r = 0;
  for (auto& p : parts) {
    y.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.emit(std::move(y), needs, [&t, parts](const Mat<T>& g) {
    Index r = 0;
    for (auto& p : parts) {
      if (t.needs(p)) t.acc(p, g.middleRows(r, p.rows()));
      r += p.rows();
    }
  });
}

/// Rows of `table` selected by `idx` (embedding lookup); gradient scatters back.
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<int> idx) {
  Tape<T>& t = *table.tape;
  Mat<T> y(static_cast<Index>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.rows()) throw IndexError("gather_rows: index " + std::to_string(idx[i]) + " out of range");
    y.row(static_cast<Index>(i)) = table.value().row(idx[i]);
  }
  return t.emit(std::move(y), t.needs(table), [&t, table, idx = std::move(idx)](const Mat<T>& g) {
    Mat<T>& gt = t.grad_buffer(table);
    for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Index>(i));
  });
}

// ---------------------------------------------------------------- convolution

namespace detail {

inline int conv_out(int n, int stride) { return (n + 2 - 3) / stride + 1; }

/// im2col for 3x3 kernels, padding 1. Column layout: (ky*3+kx)*C + c.
template <class T>
Mat<T> im2col3(const Mat<T>& x, int h, int w, int stride, int& oh, int& ow) {
  const Index c = x.cols();
  oh = conv_out(h, stride);
  ow = conv_out(w, stride);
  Mat<T> col = Mat<T>::Zero(Index(oh) * ow, 9 * c);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Index r = Index(oy) * ow + ox;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= w) continue;
          col.block(r, (ky * 3 + kx) * c, 1, c) = x.row(Index(iy) * w + ix);
        }
      }
    }
  }
  return col;
}

template <class T>
void col2im3_add(const Mat<T>& col, int h, int w, int stride, int oh, int ow, Mat<T>& gx) {
  const Index c = gx.cols();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Index r = Index(oy) * ow + ox;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= w) continue;
          gx.row(Index(iy) * w + ix) += col.block(r, (ky * 3 + kx) * c, 1, c);
        }
      }
    }
  }
}

}  // namespace detail

/// 3x3 convolution, zero padding 1, stride 1 or 2. x: (h*w) x Cin,
/// weight: (9*Cin) x Cout, bias: 1 x Cout. Output spatial size is written
/// to (oh, ow).
template <class T>
Var<T> conv3x3(Var<T> x, int h, int w, Var<T> weight, Var<T> bias, int stride, int& oh, int& ow) {
  if (x.rows() != Index(h) * w) throw InvalidInput("conv3x3: input rows != h*w");
  if (weight.rows() != 9 * x.cols()) throw InvalidInput("conv3x3: weight rows != 9*Cin");
  Tape<T>& t = *x.tape;
  Mat<T> col = detail::im2col3(x.value(), h, w, stride, oh, ow);
  Mat<T> y(col.rows(), weight.cols());
  y.noalias() = col * weight.value();
  y.rowwise() += bias.value().row(0);
  const int o_h = oh, o_w = ow;
  return t.emit(std::move(y), t.needs({x, weight, bias}),
                [&t, x, weight, bias, col = std::move(col), h, w, stride, o_h, o_w](const Mat<T>& g) {
                  if (t.needs(weight)) {
                    Mat<T> gw(weight.rows(), weight.cols());
                    gw.noalias() = col.transpose() * g;
                    t.acc(weight, gw);
                  }
                  if (t.needs(bias)) t.acc(bias, g.colwise().sum());
                  if (t.needs(x)) {
                    Mat<T> gcol(col.rows(), col.cols());
                    gcol.noalias() = g * weight.value().transpose();
                    Mat<T>& gx = t.grad_buffer(x);
                    detail::col2im3_add(gcol, h, w, stride, o_h, o_w, gx);
                  }
                });
}

/// Nearest-neighbour 2x upsampling of an (h*w) x C raster.
template <class T>
Var<T> upsample2x(Var<T> x, int h, int w) {
  Tape<T>& t = *x.tape;
  const int oh = 2 * h, ow = 2 * w;
  Mat<T> y(Index(oh) * ow, x.cols());
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) y.row(Index(oy) * ow + ox) = x.value().row(Index(oy / 2) * w + ox / 2);
  return t.emit(std::move(y), t.needs(x), [&t, x, h, w, oh, ow](const Mat<T>& g) {
    Mat<T> gx = Mat<T>::Zero(x.rows(), x.cols());
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) gx.row(Index(oy / 2) * w + ox / 2) += g.row(Index(oy) * ow + ox);
    t.acc(x, gx);
  });
}

// ---------------------------------------------------------------- normalisation

/// Group normalisation over (spatial x channels-in-group), affine per channel.
template <class T>
Var<T> group_norm(Var<T> x, int groups, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const Index n = x.rows(), c = x.cols();
  if (c % groups != 0) throw InvalidInput("group_norm: channels not divisible by groups");
  const Index cg = c / groups;
  Tape<T>& t = *x.tape;
  Mat<T> xhat(n, c);
  std::vector<T> inv_std(groups);
  for (int gi = 0; gi < groups; ++gi) {
    auto blk = x.value().middleCols(gi * cg, cg);
    const T m = blk.mean();
    const T var = (blk.array() - m).square().mean();
    inv_std[gi] = T(1) / std::sqrt(var + eps);
    xhat.middleCols(gi * cg, cg) = ((blk.array() - m) * inv_std[gi]).matrix();
  }
  Mat<T> y = xhat.array().rowwise() * gamma.value().row(0).array();
  y.rowwise() += beta.value().row(0);
  return t.emit(std::move(y), t.needs({x, gamma, beta}),
                [&t, x, gamma, beta, xhat = std::move(xhat), inv_std, groups, cg](const Mat<T>& g) {
                  if (t.needs(gamma)) t.acc(gamma, g.cwiseProduct(xhat).colwise().sum());
                  if (t.needs(beta)) t.acc(beta, g.colwise().sum());
                  if (t.needs(x)) {
                    Mat<T> gxhat = g.array().rowwise() * gamma.value().row(0).array();
                    Mat<T> gx(xhat.rows(), xhat.cols());
                    const T cnt = static_cast<T>(xhat.rows() * cg);
                    for (int gi = 0; gi < groups; ++gi) {
                      auto gh = gxhat.middleCols(gi * cg, cg);
                      auto xh = xhat.middleCols(gi * cg, cg);
                      const T s1 = gh.sum();
                      const T s2 = gh.cwiseProduct(xh).sum();
                      gx.middleCols(gi * cg, cg) =
                          ((gh.array() * cnt - s1 - xh.array() * s2) * (inv_std[gi] / cnt)).matrix();
                    }
                    t.acc(x, gx);
                  }
                });
}

/// Per-row layer normalisation without affine parameters.
template <class T>
Var<T> layer_norm(Var<T> x, T eps = T(1e-6)) {
  const Index n = x.rows(), c = x.cols();
  Tape<T>& t = *x.tape;
  Mat<T> xhat(n, c);
  std::vector<T> inv_std(n);
  for (Index i = 0; i < n; ++i) {
    auto r = x.value().row(i);
    const T m = r.mean();
    const T var = (r.array() - m).square().mean();
    inv_std[i] = T(1) / std::sqrt(var + eps);
    xhat.row(i) = ((r.array() - m) * inv_std[i]).matrix();
  }
  Mat<T> y = xhat;
  return t.emit(std::move(y), t.needs(x), [&t, x, xhat = std::move(xhat), inv_std](const Mat<T>& g) {
    const Index c = xhat.cols();
    Mat<T> gx(xhat.rows(), c);
    for (Index i = 0; i < xhat.rows(); ++i) {
      auto gr = g.row(i);
      auto xr = xhat.row(i);
      const T s1 = gr.sum();
      const T s2 = gr.dot(xr);
      gx.row(i) = ((gr.array() * T(c) - s1 - xr.array() * s2) * (inv_std[i] / T(c))).matrix();
    }
    t.acc(x, gx);
  });
}

// ---------------------------------------------------------------- attention

/// Which keys each query row may see. Query rows are split into contiguous
/// groups; every row of group g attends to key rows [0, limit[g]). This
/// prefix structure covers both block-causal (next-scale) and causal
/// (next-token) masking.
struct AttentionLayout {
  std::vector<Index> group_start;  // query row where each group begins
  std::vector<Index> group_limit;  // number of visible key rows for the group

  Index groups() const { return static_cast<Index>(group_start.size()); }
  Index group_rows(Index g, Index total_rows) const {
    return (g + 1 < groups() ? group_start[g + 1] : total_rows) - group_start[g];
  }
};

/// Multi-head scaled dot-product attention. q: nq x D, k/v: nk x D, D split
/// into `heads` equal slices.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, AttentionLayout layout) {
  const Index nq = q.rows(), nk = k.rows(), dm = q.cols();
  if (k.cols() != dm || v.cols() != dm || v.rows() != nk) throw InvalidInput("attention: shape mismatch");
  if (dm % heads != 0) throw InvalidInput("attention: heads must divide width");
  const Index dh = dm / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  for (Index g = 0; g < layout.groups(); ++g)
    if (layout.group_limit[g] < 1 || layout.group_limit[g] > nk) throw InvalidInput("attention: bad key limit");

  Tape<T>& t = *q.tape;
  Mat<T> out(nq, dm);
  // probs[h * groups + g]
  std::vector<Mat<T>> probs(static_cast<std::size_t>(heads * layout.groups()));
  for (int h = 0; h < heads; ++h) {
    for (Index g = 0; g < layout.groups(); ++g) {
      const Index s = layout.group_start[g], n = layout.group_rows(g, nq), lim = layout.group_limit[g];
      Mat<T> sco(n, lim);
      sco.noalias() = q.value().block(s, h * dh, n, dh) * k.value().block(0, h * dh, lim, dh).transpose();
      sco *= sc;
      for (Index i = 0; i < n; ++i) {
        const T mx = sco.row(i).maxCoeff();
        sco.row(i) = (sco.row(i).array() - mx).exp().matrix();
        sco.row(i) /= sco.row(i).sum();
      }
      out.block(s, h * dh, n, dh).noalias() = sco * v.value().block(0, h * dh, lim, dh);
      probs[static_cast<std::size_t>(h * layout.groups() + g)] = std::move(sco);
    }
  }
  return t.emit(std::move(out), t.needs({q, k, v}),
                [&t, q, k, v, heads, layout, probs = std::move(probs), dh, sc](const Mat<T>& g) {
                  const Index nq = q.rows();
                  Mat<T> gq = Mat<T>::Zero(q.rows(), q.cols());
                  Mat<T> gk = Mat<T>::Zero(k.rows(), k.cols());
                  Mat<T> gv = Mat<T>::Zero(v.rows(), v.cols());
                  for (int h = 0; h < heads; ++h) {
                    for (Index gi = 0; gi < layout.groups(); ++gi) {
                      const Index s = layout.group_start[gi], n = layout.group_rows(gi, nq), lim = layout.group_limit[gi];
                      const Mat<T>& p = probs[static_cast<std::size_t>(h * layout.groups() + gi)];
                      auto go = g.block(s, h * dh, n, dh);
                      gv.block(0, h * dh, lim, dh).noalias() += p.transpose() * go;
                      Mat<T> gp(n, lim);
                      gp.noalias() = go * v.value().block(0, h * dh, lim, dh).transpose();
                      // softmax backward
                      Mat<T> gs(n, lim);
                      for (Index i = 0; i < n; ++i) {
                        const T dotp = gp.row(i).dot(p.row(i));
                        gs.row(i) = (p.row(i).array() * (gp.row(i).array() - dotp)).matrix();
                      }
                      gs *= sc;
                      gq.block(s, h * dh, n, dh).noalias() += gs * k.value().block(0, h * dh, lim, dh);
                      gk.block(0, h * dh, lim, dh).noalias() += gs.transpose() * q.value().block(s, h * dh, n, dh);
                    }
                  }
                  t.acc(q, gq);
                  t.acc(k, gk);
                  t.acc(v, gv);
                });
}

// ---------------------------------------------------------------- losses

/// Mean categorical cross-entropy of row-wise logits against integer targets.
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets) {
  const Index n = logits.rows(), vsz = logits.cols();
  if (static_cast<Index>(targets.size()) != n) throw InvalidInput("cross_entropy: target count mismatch");
  Tape<T>& t = *logits.tape;
  Mat<T> probs(n, vsz);
  T total = 0;
  for (Index i = 0; i < n; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= vsz) throw IndexError("cross_entropy: target out of range");
    auto r = logits.value().row(i);
    const T mx = r.maxCoeff();
    probs.row(i) = (r.array() - mx).exp().matrix();
    const T z = probs.row(i).sum();
    probs.row(i) /= z;
    total += -(r(y) - mx - std::log(z));
  }
  Mat<T> y(1, 1);
  y(0, 0) = total / static_cast<T>(n);
  return t.emit(std::move(y), t.needs(logits), [&t, logits, targets, probs = std::move(probs)](const Mat<T>& g) {
    Mat<T> gl = probs;
    for (std::size_t i = 0; i < targets.size(); ++i) gl(static_cast<Index>(i), targets[i]) -= T(1);
    gl *= g(0, 0) / static_cast<T>(targets.size());
    t.acc(logits, gl);
  });
}

/// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps).
template <class T>
Var<T> dice_loss(Var<T> pred, const Mat<T>& target, T eps = T(1e-6)) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw InvalidInput("dice_loss: shape mismatch");
  Tape<T>& t = *pred.tape;
  const T inter = pred.value().cwiseProduct(target).sum();
  const T denom = pred.value().sum() + target.sum() + eps;
  const T num = T(2) * inter + eps;
  Mat<T> y(1, 1);
  y(0, 0) = T(1) - num / denom;
  return t.emit(std::move(y), t.needs(pred), [&t, pred, target, num, denom](const Mat<T>& g) {
    // d/dp [-(num/denom)] = -(2 t denom - num) / denom^2
    Mat<T> gp = ((target.array() * (T(2) * denom) - num) * (-g(0, 0) / (denom * denom))).matrix();
    t.acc(pred, gp);
  });
}

/// Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].
template <class T>
Var<T> bce_loss(Var<T> pred, const Mat<T>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw InvalidInput("bce_loss: shape mismatch");
  Tape<T>& t = *pred.tape;
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  const Index n = pred.value().size();
  T total = 0;
  for (Index i = 0; i < n; ++i) {
    const T p = std::clamp(pred.value().data()[i], lo, hi);
    const T y = target.data()[i];
    total += -(y * std::log(p) + (T(1) - y) * std::log(T(1) - p));
  }
  Mat<T> out(1, 1);
  out(0, 0) = total / static_cast<T>(n);
  return t.emit(std::move(out), t.needs(pred), [&t, pred, target, lo, hi, n](const Mat<T>& g) {
    Mat<T> gp(pred.rows(), pred.cols());
    const T s = g(0, 0) / static_cast<T>(n);
    for (Index i = 0; i < n; ++i) {
      const T raw = pred.value().data()[i];
      if (raw < lo || raw > hi) {
        gp.data()[i] = 0;
        continue;
      }
      const T y = target.data()[i];
      gp.data()[i] = s * (-(y / raw) + (T(1) - y) / (T(1) - raw));
    }
    t.acc(pred, gp);
  });
}

}  // namespace arseg::ag
