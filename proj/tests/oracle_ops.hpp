// Double-precision twins of the tensor ops, used as finite-difference
// oracles. The production stack stays float32; oracles run in float64 so
// the FD noise floor sits far below the tolerances under test.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline Vec matmul(const Vec& a, int m, int k, const Vec& b, int n) {
  Vec c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int t = 0; t < k; ++t)
      for (int j = 0; j < n; ++j)
        c[static_cast<std::size_t>(i) * n + j] += a[static_cast<std::size_t>(i) * k + t] * b[static_cast<std::size_t>(t) * n + j];
  return c;
}

inline Vec relu(Vec x) {
  for (double& v : x) v = v > 0 ? v : 0;
  return x;
}

inline Vec sigmoid(Vec x) {
  for (double& v : x) v = 1.0 / (1.0 + std::exp(-v));
  return x;
}

inline Vec softmax_rows(Vec x, int r, int c) {
  for (int i = 0; i < r; ++i) {
    double mx = x[static_cast<std::size_t>(i) * c];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[static_cast<std::size_t>(i) * c + j]);
    double denom = 0.0;
    for (int j = 0; j < c; ++j) {
      double& v = x[static_cast<std::size_t>(i) * c + j];
      v = std::exp(v - mx);
      denom += v;
    }
    for (int j = 0; j < c; ++j) x[static_cast<std::size_t>(i) * c + j] /= denom;
  }
  return x;
}

inline Vec standardize(const Vec& x, int r, int c, bool rows, double eps) {
  Vec y(x.size());
  const int groups = rows ? r : c;
  const int n = rows ? c : r;
  for (int g = 0; g < groups; ++g) {
    auto at = [&](int i) { return rows ? static_cast<std::size_t>(g) * c + i : static_cast<std::size_t>(i) * c + g; };
    double mu = 0.0;
    for (int i = 0; i < n; ++i) mu += x[at(i)];
    mu /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) var += (x[at(i)] - mu) * (x[at(i)] - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < n; ++i) y[at(i)] = (x[at(i)] - mu) * inv;
  }
  return y;
}

inline Vec rprelu(const Vec& x, int ch, int hw, const Vec& g, const Vec& s, const Vec& z) {
  Vec y(x.size());
  for (int c = 0; c < ch; ++c)
    for (int i = 0; i < hw; ++i) {
      const double t = x[static_cast<std::size_t>(c) * hw + i] - g[static_cast<std::size_t>(c)];
      y[static_cast<std::size_t>(c) * hw + i] = (t > 0 ? t : s[static_cast<std::size_t>(c)] * t) + z[static_cast<std::size_t>(c)];
    }
  return y;
}

inline Vec conv2d(const Vec& x, int ci, int h, int w, const Vec& wt, int co, int kh, int kw,
                  const Vec& bias, int stride, int pad, int* oh_out, int* ow_out) {
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  Vec y(static_cast<std::size_t>(co) * oh * ow, 0.0);
  for (int oc = 0; oc < co; ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = bias[static_cast<std::size_t>(oc)];
        for (int ic = 0; ic < ci; ++ic)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += x[(static_cast<std::size_t>(ic) * h + iy) * w + ix] *
                     wt[((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx];
            }
        y[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] = acc;
      }
  if (oh_out) *oh_out = oh;
  if (ow_out) *ow_out = ow;
  return y;
}

inline Vec conv_transpose2d(const Vec& x, int ci, int h, int w, const Vec& wt, int co, int kh,
                            int kw, const Vec& bias, int stride, int pad, int* oh_out,
                            int* ow_out) {
  const int oh = (h - 1) * stride - 2 * pad + kh;
  const int ow = (w - 1) * stride - 2 * pad + kw;
  Vec y(static_cast<std::size_t>(co) * oh * ow, 0.0);
  for (int oc = 0; oc < co; ++oc)
    for (int i = 0; i < oh * ow; ++i) y[static_cast<std::size_t>(oc) * oh * ow + i] = bias[static_cast<std::size_t>(oc)];
  for (int ic = 0; ic < ci; ++ic)
    for (int oc = 0; oc < co; ++oc)
      for (int iy = 0; iy < h; ++iy)
        for (int ix = 0; ix < w; ++ix)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const int oy = iy * stride + ky - pad, ox = ix * stride + kx - pad;
              if (oy < 0 || oy >= oh || ox < 0 || ox >= ow) continue;
              y[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] +=
                  x[(static_cast<std::size_t>(ic) * h + iy) * w + ix] *
                  wt[((static_cast<std::size_t>(ic) * co + oc) * kh + ky) * kw + kx];
            }
  if (oh_out) *oh_out = oh;
  if (ow_out) *ow_out = ow;
  return y;
}

inline Vec mha_scores(const Vec& q, int tq, const Vec& k, int tk, int d, int heads) {
  const int dh = d / heads;
  Vec y(static_cast<std::size_t>(heads) * tq * tk, 0.0);
  for (int h = 0; h < heads; ++h)
    for (int t = 0; t < tq; ++t)
      for (int s = 0; s < tk; ++s) {
        double acc = 0.0;
        for (int j = 0; j < dh; ++j)
          acc += q[static_cast<std::size_t>(t) * d + h * dh + j] * k[static_cast<std::size_t>(s) * d + h * dh + j];
        y[static_cast<std::size_t>(h * tq + t) * tk + s] = acc / std::sqrt(static_cast<double>(dh));
      }
  return y;
}

inline Vec mha_apply(const Vec& a, int tq, const Vec& v, int tk, int d, int heads) {
  const int dh = d / heads;
  Vec y(static_cast<std::size_t>(tq) * d, 0.0);
  for (int h = 0; h < heads; ++h)
    for (int t = 0; t < tq; ++t)
      for (int s = 0; s < tk; ++s)
        for (int j = 0; j < dh; ++j)
          y[static_cast<std::size_t>(t) * d + h * dh + j] +=
              a[static_cast<std::size_t>(h * tq + t) * tk + s] * v[static_cast<std::size_t>(s) * d + h * dh + j];
  return y;
}

inline double dot(const Vec& a, const Vec& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Central difference through one std::function instance: both evaluations
// run the same machine code, so equal inputs cancel exactly even when the
// compiler contracts FMAs differently across inline sites.
inline double fd1(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

// max over coordinates of |analytic - cd| / (|cd| + 1e-8), cd in float64
inline double fd_max_rel_err(const std::function<double(const Vec&)>& fn, Vec x,
                             const float* analytic, double h) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = fn(x);
    x[i] = saved - h;
    const double dn = fn(x);
    x[i] = saved;
    const double cd = (up - dn) / (2.0 * h);
    worst = std::max(worst, std::abs(static_cast<double>(analytic[i]) - cd) / (std::abs(cd) + 1e-8));
  }
  return worst;
}

}  // namespace oracle
