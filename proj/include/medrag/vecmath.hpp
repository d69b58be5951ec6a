#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "medrag/error.hpp"

namespace medrag {

/// Dense vector in the shared image/text embedding space.
using Vec = std::vector<double>;

/// Row-major H x W intensity grid, nominally in [0,1].
struct PixelGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  PixelGrid() = default;
  PixelGrid(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), values(h * w, fill) {}
  PixelGrid(std::size_t h, std::size_t w, std::vector<double> v)
      : height(h), width(w), values(std::move(v)) {
    if (values.size() != h * w) {
      throw PreconditionError("pixel grid: value count does not match shape");
    }
  }

  double& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  std::size_t size() const { return values.size(); }
  bool same_shape(const PixelGrid& o) const {
    return height == o.height && width == o.width;
  }

  friend bool operator==(const PixelGrid&, const PixelGrid&) = default;
};

inline void require_same_dim(std::span<const double> a, std::span<const double> b,
                             const char* what) {
  if (a.size() != b.size()) {
    throw PreconditionError(std::string(what) + ": dimension mismatch (" +
                            std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()) + ")");
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); });
}

/// dot(u,v) / (|u| |v|). Zero-norm input is an error, never a silent 0.
inline double cosine(std::span<const double> u, std::span<const double> v) {
  require_same_dim(u, v, "cosine");
  const double nu = norm2(u);
  const double nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) {
    throw DegenerateInputError("cosine: zero-norm input vector");
  }
  return dot(u, v) / (nu * nv);
}

/// Gradient of cosine(u, v) with respect to u: (v/|v| - cos * u/|u|) / |u|.
inline Vec cosine_grad(std::span<const double> u, std::span<const double> v) {
  require_same_dim(u, v, "cosine_grad");
  const double nu = norm2(u);
  const double nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) {
    throw DegenerateInputError("cosine_grad: zero-norm input vector");
  }
  const double c = dot(u, v) / (nu * nv);
  Vec g(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    g[i] = (v[i] / nv - c * u[i] / nu) / nu;
  }
  return g;
}

inline Vec normalized(std::span<const double> a) {
  const double n = norm2(a);
  if (n == 0.0) throw DegenerateInputError("normalize: zero-norm vector");
  Vec out(a.begin(), a.end());
  for (double& x : out) x /= n;
  return out;
}

/// Vector-Jacobian product of x -> x/|x|: (I - u u^T) g / |x|.
inline Vec normalize_vjp(std::span<const double> x, std::span<const double> g) {
  require_same_dim(x, g, "normalize_vjp");
  const double n = norm2(x);
  if (n == 0.0) throw DegenerateInputError("normalize_vjp: zero-norm vector");
  double ug = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) ug += x[i] * g[i];
  ug /= n;
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (g[i] - ug * x[i] / n) / n;
  return out;
}

// y += a * x
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw PreconditionError("axpy: dimension mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

/// |a - b|_inf / max(|a|_inf, |b|_inf, floor). Scale-relative comparison
/// used for gradient checks; components near zero do not blow it up.
inline double max_relative_error(std::span<const double> a, std::span<const double> b,
                                 double floor = 1e-12) {
  require_same_dim(a, b, "max_relative_error");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  return diff / std::max({max_abs(a), max_abs(b), floor});
}

/// L-inf projection onto the eps-ball around `center`, intersected with [0,1].
inline PixelGrid project_linf(const PixelGrid& x, const PixelGrid& center, double eps) {
  if (!x.same_shape(center)) throw PreconditionError("project_linf: shape mismatch");
  if (!(eps >= 0.0)) throw PreconditionError("project_linf: eps must be >= 0");
  PixelGrid out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double lo = std::max(0.0, center.values[i] - eps);
    const double hi = std::min(1.0, center.values[i] + eps);
    // Empty interval only when the center itself is outside [0,1].
    double v = lo <= hi ? std::clamp(x.values[i], lo, hi) : std::clamp(center.values[i], 0.0, 1.0);
    // center +- eps is rounded; walk back until |v - center| <= eps holds in doubles.
    const double c = center.values[i];
    if (c >= 0.0 && c <= 1.0) {
      while (std::abs(v - c) > eps) v = std::nextafter(v, c);
    }
    out.values[i] = v;
  }
  return out;
}

inline void clamp_unit(PixelGrid& g) {
  for (double& v : g.values) v = std::clamp(v, 0.0, 1.0);
}

inline double linf_distance(const PixelGrid& a, const PixelGrid& b) {
  if (!a.same_shape(b)) throw PreconditionError("linf_distance: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.values[i] - b.values[i]));
  }
  return m;
}

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central-difference gradient: (f(x + h e_i) - f(x - h e_i)) / 2h.
inline Vec finite_diff_grad(const ScalarFn& f, std::span<const double> x, double h) {
  if (!(h > 0.0)) throw PreconditionError("finite_diff_grad: h must be > 0");
  Vec probe(x.begin(), x.end());
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace medrag
