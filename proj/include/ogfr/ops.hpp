#pragma once

// Differentiable primitives. Every op takes and returns Var handles on the
// same tape; shapes are matrices unless stated otherwise. Broadcasting is
// limited to a trailing row vector (add_row) and a per-row column (div_col).

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ogfr/autograd.hpp"

namespace ogfr {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t) {
  return MatMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

// Applies `f` elementwise and `df(x, y)` as the local derivative.
template <typename T, typename F, typename DF>
Var<T> unary(const char* name, Var<T> x, F f, DF df) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.id();
  return x.tape().record(name, std::move(out), {x}, [xi, df](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad_ref(xi);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  }
  Tensor<T> out = Tensor<T>::matrix(av.rows(), bv.cols());
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record("matmul", std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::size_t self) {
    const auto g = detail::as_matrix(t.out_grad(self));
    if (t.needs_grad(ai)) {
      detail::as_matrix(t.grad_ref(ai)).noalias() += g * detail::as_matrix(t.value(bi)).transpose();
    }
    if (t.needs_grad(bi)) {
      detail::as_matrix(t.grad_ref(bi)).noalias() += detail::as_matrix(t.value(ai)).transpose() * g;
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_matrix(xv, "transpose");
  Tensor<T> out = Tensor<T>::matrix(xv.cols(), xv.rows());
  detail::as_matrix(out) = detail::as_matrix(xv).transpose();
  const std::size_t xi = x.id();
  return x.tape().record("transpose", std::move(out), {x}, [xi](Tape<T>& t, std::size_t self) {
    detail::as_matrix(t.grad_ref(xi)) += detail::as_matrix(t.out_grad(self)).transpose();
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record("add", std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    for (std::size_t in : {ai, bi}) {
      if (!t.needs_grad(in)) continue;
      Tensor<T>& gi = t.grad_ref(in);
      for (std::size_t i = 0; i < g.numel(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record("sub", std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    if (t.needs_grad(ai)) {
      Tensor<T>& ga = t.grad_ref(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(bi)) {
      Tensor<T>& gb = t.grad_ref(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record("mul", std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    const Tensor<T>& av = t.value(ai);
    const Tensor<T>& bv = t.value(bi);
    if (t.needs_grad(ai)) {
      Tensor<T>& ga = t.grad_ref(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(bi)) {
      Tensor<T>& gb = t.grad_ref(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "div");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record("div", std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    const Tensor<T>& bv = t.value(bi);
    const Tensor<T>& yv = t.value(self);
    if (t.needs_grad(ai)) {
      Tensor<T>& ga = t.grad_ref(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.needs_grad(bi)) {
      Tensor<T>& gb = t.grad_ref(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i] * yv[i] / bv[i];
    }
  });
}

/// x (m×n) plus a row vector (1×n) added to every row.
template <typename T>
Var<T> add_row(Var<T> x, Var<T> row) {
  detail::require_same_tape(x, row);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& rv = row.value();
  require_matrix(xv, "add_row");
  if (rv.numel() != xv.cols()) {
    throw DimensionError("add_row: row " + shape_str(rv.shape()) + " does not fit " + shape_str(xv.shape()));
  }
  Tensor<T> out = xv;
  const std::size_t m = xv.rows(), n = xv.cols();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) += rv[c];
  const std::size_t xi = x.id(), ri = row.id();
  return x.tape().record("add_row", std::move(out), {x, row}, [xi, ri, m, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    if (t.needs_grad(xi)) {
      Tensor<T>& gx = t.grad_ref(xi);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(ri)) {
      Tensor<T>& gr = t.grad_ref(ri);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gr[c] += g(r, c);
    }
  });
}

/// x (m×n) with row r divided by col[r] (col is m×1).
template <typename T>
Var<T> div_col(Var<T> x, Var<T> col) {
  detail::require_same_tape(x, col);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& cv = col.value();
  require_matrix(xv, "div_col");
  if (cv.numel() != xv.rows()) {
    throw DimensionError("div_col: column " + shape_str(cv.shape()) + " does not fit " + shape_str(xv.shape()));
  }
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) /= cv[r];
  const std::size_t xi = x.id(), ci = col.id();
  return x.tape().record("div_col", std::move(out), {x, col}, [xi, ci, m, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    const Tensor<T>& cv = t.value(ci);
    const Tensor<T>& yv = t.value(self);
    if (t.needs_grad(xi)) {
      Tensor<T>& gx = t.grad_ref(xi);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gx(r, c) += g(r, c) / cv[r];
    }
    if (t.needs_grad(ci)) {
      Tensor<T>& gc = t.grad_ref(ci);
      for (std::size_t r = 0; r < m; ++r) {
        T acc = 0;
        for (std::size_t c = 0; c < n; ++c) acc += g(r, c) * yv(r, c);
        gc[r] -= acc / cv[r];
      }
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, double factor) {
  const T f = static_cast<T>(factor);
  return detail::unary<T>("scale", x, [f](T v) { return v * f; }, [f](T, T) { return f; });
}

template <typename T>
Var<T> add_scalar(Var<T> x, double c) {
  const T k = static_cast<T>(c);
  return detail::unary<T>("add_scalar", x, [k](T v) { return v + k; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> neg(Var<T> x) {
  return scale(x, -1.0);
}

template <typename T>
Var<T> square(Var<T> x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> x) {
  return detail::unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> sqrt(Var<T> x) {
  return detail::unary<T>("sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(Var<T> x) {
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * v * v) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        return cdf + v * pdf;
      });
}

/// Sum of all entries as a 1×1 tensor.
template <typename T>
Var<T> sum(Var<T> x) {
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  const std::size_t xi = x.id();
  return x.tape().record("sum", Tensor<T>::scalar(acc), {x}, [xi](Tape<T>& t, std::size_t self) {
    const T g = t.out_grad(self)[0];
    Tensor<T>& gx = t.grad_ref(xi);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.value().numel()));
}

/// Row sums: m×n -> m×1.
template <typename T>
Var<T> sum_rows(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_matrix(xv, "sum_rows");
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> out = Tensor<T>::matrix(m, 1);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r] += xv(r, c);
  const std::size_t xi = x.id();
  return x.tape().record("sum_rows", std::move(out), {x}, [xi, m, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    Tensor<T>& gx = t.grad_ref(xi);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gx(r, c) += g[r];
  });
}

/// Softmax along each row, with max subtraction.
template <typename T>
Var<T> softmax_rows(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_matrix(xv, "softmax_rows");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (n == 0) throw DimensionError("softmax_rows: empty rows");
  Tensor<T> out = Tensor<T>::matrix(m, n);
  for (std::size_t r = 0; r < m; ++r) {
    T mx = xv(r, 0);
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, xv(r, c));
    T z = 0;
    for (std::size_t c = 0; c < n; ++c) z += (out(r, c) = std::exp(xv(r, c) - mx));
    for (std::size_t c = 0; c < n; ++c) out(r, c) /= z;
  }
  const std::size_t xi = x.id();
  return x.tape().record("softmax_rows", std::move(out), {x}, [xi, m, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& gx = t.grad_ref(xi);
    for (std::size_t r = 0; r < m; ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < n; ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < n; ++c) gx(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_matrix(xv, "log_softmax_rows");
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> out = Tensor<T>::matrix(m, n);
  for (std::size_t r = 0; r < m; ++r) {
    T mx = xv(r, 0);
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, xv(r, c));
    T z = 0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(xv(r, c) - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) out(r, c) = xv(r, c) - lse;
  }
  const std::size_t xi = x.id();
  return x.tape().record("log_softmax_rows", std::move(out), {x}, [xi, m, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& gx = t.grad_ref(xi);
    for (std::size_t r = 0; r < m; ++r) {
      T gsum = 0;
      for (std::size_t c = 0; c < n; ++c) gsum += g(r, c);
      for (std::size_t c = 0; c < n; ++c) gx(r, c) += g(r, c) - std::exp(y(r, c)) * gsum;
    }
  });
}

/// Per-row normalization to zero mean / unit (biased) variance, then gain and bias (each 1×n).
template <typename T>
Var<T> layer_norm_rows(Var<T> x, Var<T> gain, Var<T> bias, double eps = 1e-5) {
  const Tensor<T>& xv = x.value();
  require_matrix(xv, "layer_norm_rows");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (n < 2) throw DimensionError("layer_norm_rows: needs at least 2 features");
  if (gain.value().numel() != n || bias.value().numel() != n) {
    throw DimensionError("layer_norm_rows: gain/bias length must be " + std::to_string(n));
  }
  Tensor<T> out = Tensor<T>::matrix(m, n);
  Tensor<T> xhat = Tensor<T>::matrix(m, n);
  std::vector<T> inv_std(m);
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < m; ++r) {
    T mu = 0;
    for (std::size_t c = 0; c < n; ++c) mu += xv(r, c);
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xv(r, c) - mu) * (xv(r, c) - mu);
    var /= static_cast<T>(n);
    inv_std[r] = T(1) / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - mu) * inv_std[r];
      out(r, c) = gv[c] * xhat(r, c) + bv[c];
    }
  }
  const std::size_t xi = x.id(), gi = gain.id(), bi = bias.id();
  return x.tape().record(
      "layer_norm_rows", std::move(out), {x, gain, bias},
      [xi, gi, bi, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.out_grad(self);
        const Tensor<T>& gv = t.value(gi);
        if (t.needs_grad(gi)) {
          Tensor<T>& gg = t.grad_ref(gi);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gg[c] += g(r, c) * xhat(r, c);
        }
        if (t.needs_grad(bi)) {
          Tensor<T>& gb = t.grad_ref(bi);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gb[c] += g(r, c);
        }
        if (t.needs_grad(xi)) {
          Tensor<T>& gx = t.grad_ref(xi);
          const T inv_n = T(1) / static_cast<T>(n);
          for (std::size_t r = 0; r < m; ++r) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t c = 0; c < n; ++c) {
              const T d = g(r, c) * gv[c];
              mean_d += d;
              mean_dx += d * xhat(r, c);
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t c = 0; c < n; ++c) {
              const T d = g(r, c) * gv[c];
              gx(r, c) += inv_std[r] * (d - mean_d - xhat(r, c) * mean_dx);
            }
          }
        }
      });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const Var<T>& p : parts) {
    require_matrix(p.value(), "concat_rows");
    if (p.cols() != n) throw DimensionError("concat_rows: column count mismatch");
    m += p.rows();
  }
  Tensor<T> out = Tensor<T>::matrix(m, n);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var<T>& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.ptr() + off * n);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.rows();
  }
  return parts.front().tape().record("concat_rows", std::move(out), parts, [ids, offsets, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      Tensor<T>& gp = t.grad_ref(ids[k]);
      const T* src = g.ptr() + offsets[k] * n;
      for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] += src[i];
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const Var<T>& p : parts) {
    require_matrix(p.value(), "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row count mismatch");
    n += p.cols();
  }
  Tensor<T> out = Tensor<T>::matrix(m, n);
  std::vector<std::size_t> ids, offsets, widths;
  std::size_t off = 0;
  for (const Var<T>& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < w; ++c) out(r, off + c) = p.value()(r, c);
    ids.push_back(p.id());
    offsets.push_back(off);
    widths.push_back(w);
    off += w;
  }
  return parts.front().tape().record(
      "concat_cols", std::move(out), parts, [ids, offsets, widths, m](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.out_grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.needs_grad(ids[k])) continue;
          Tensor<T>& gp = t.grad_ref(ids[k]);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c) gp(r, c) += g(r, offsets[k] + c);
        }
      });
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count) {
  const Tensor<T>& xv = x.value();
  require_matrix(xv, "slice_rows");
  if (begin + count > xv.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.cols();
  Tensor<T> out = Tensor<T>::matrix(count, n);
  std::copy_n(xv.ptr() + begin * n, count * n, out.ptr());
  const std::size_t xi = x.id();
  return x.tape().record("slice_rows", std::move(out), {x}, [xi, begin, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    Tensor<T>& gx = t.grad_ref(xi);
    T* dst = gx.ptr() + begin * n;
    for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  });
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t count) {
  const Tensor<T>& xv = x.value();
  require_matrix(xv, "slice_cols");
  if (begin + count > xv.cols()) throw DimensionError("slice_cols: range out of " + shape_str(xv.shape()));
  const std::size_t m = xv.rows();
  Tensor<T> out = Tensor<T>::matrix(m, count);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = xv(r, begin + c);
  const std::size_t xi = x.id();
  return x.tape().record("slice_cols", std::move(out), {x}, [xi, begin, count, m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    Tensor<T>& gx = t.grad_ref(xi);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < count; ++c) gx(r, begin + c) += g(r, c);
  });
}

/// Embedding lookup: rows of `table` at `indices`; gradients scatter back to exactly those rows.
template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> indices) {
  const Tensor<T>& tv = table.value();
  require_matrix(tv, "gather_rows");
  const std::size_t n = tv.cols();
  Tensor<T> out = Tensor<T>::matrix(indices.size(), n);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= tv.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[k]) + " out of " + shape_str(tv.shape()));
    }
    std::copy_n(tv.ptr() + indices[k] * n, n, out.ptr() + k * n);
  }
  const std::size_t ti = table.id();
  return table.tape().record("gather_rows", std::move(out), {table},
                             [ti, n, indices = std::move(indices)](Tape<T>& t, std::size_t self) {
                               const Tensor<T>& g = t.out_grad(self);
                               Tensor<T>& gt = t.grad_ref(ti);
                               for (std::size_t k = 0; k < indices.size(); ++k)
                                 for (std::size_t c = 0; c < n; ++c) gt(indices[k], c) += g(k, c);
                             });
}

/// Row r comes from `keep` when keep_mask[r] != 0, otherwise from `replace`. Exact copy, no arithmetic.
template <typename T>
Var<T> select_rows(std::span<const std::uint8_t> keep_mask, Var<T> keep, Var<T> replace) {
  detail::require_same_tape(keep, replace);
  require_same_shape(keep.value(), replace.value(), "select_rows");
  if (keep_mask.size() != keep.rows()) throw DimensionError("select_rows: mask length does not match row count");
  const std::size_t n = keep.cols();
  Tensor<T> out = keep.value();
  for (std::size_t r = 0; r < keep_mask.size(); ++r) {
    if (!keep_mask[r]) std::copy_n(replace.value().ptr() + r * n, n, out.ptr() + r * n);
  }
  std::vector<std::uint8_t> mask(keep_mask.begin(), keep_mask.end());
  const std::size_t ki = keep.id(), ri = replace.id();
  return keep.tape().record("select_rows", std::move(out), {keep, replace},
                            [ki, ri, n, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
                              const Tensor<T>& g = t.out_grad(self);
                              for (std::size_t r = 0; r < mask.size(); ++r) {
                                const std::size_t dst = mask[r] ? ki : ri;
                                if (!t.needs_grad(dst)) continue;
                                Tensor<T>& gd = t.grad_ref(dst);
                                for (std::size_t c = 0; c < n; ++c) gd(r, c) += g(r, c);
                              }
                            });
}

/// Picks x[r, index[r]] for each row: m×n -> m×1.
template <typename T>
Var<T> pick(Var<T> x, std::vector<std::size_t> index) {
  const Tensor<T>& xv = x.value();
  require_matrix(xv, "pick");
  if (index.size() != xv.rows()) throw DimensionError("pick: need one index per row");
  Tensor<T> out = Tensor<T>::matrix(xv.rows(), 1);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= xv.cols()) throw DimensionError("pick: column index out of range");
    out[r] = xv(r, index[r]);
  }
  const std::size_t xi = x.id();
  return x.tape().record("pick", std::move(out), {x}, [xi, index = std::move(index)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    Tensor<T>& gx = t.grad_ref(xi);
    for (std::size_t r = 0; r < index.size(); ++r) gx(r, index[r]) += g[r];
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id();
  return x.tape().record("reshape", std::move(out), {x}, [xi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.out_grad(self);
    Tensor<T>& gx = t.grad_ref(xi);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

/// Same values, cut off from the gradient graph.
template <typename T>
Var<T> detach(Var<T> x) {
  return x.tape().stop_gradient(x.value());
}

/// Mean cross-entropy of row-wise logits against integer labels.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<std::size_t>& labels) {
  return neg(mean(pick(log_softmax_rows(logits), labels)));
}

}  // namespace ogfr
