#include "qdetr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "qdetr/boxes.hpp"

namespace qdetr {

namespace {

bool want_grad(const Tensor& t) { return Graph::tape().recording() && t.requires_grad; }

Tensor make_out(std::vector<int> shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad);
}

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) throw dim_error(std::string(op) + ": expected 2-D, got " + shape_str(t.shape));
}

// C = A[m,k] * B[k,n]; i-k-j order so the inner loop runs over contiguous rows.
void mm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * n;
    std::memset(crow, 0, sizeof(float) * static_cast<std::size_t>(n));
    const float* arow = a + static_cast<std::size_t>(i) * k;
    for (int t = 0; t < k; ++t) {
      const float av = arow[t];
      const float* brow = b + static_cast<std::size_t>(t) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B[k,n]^T  (row dots).
void mm_nt_acc(const float* dc, const float* b, float* da, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* dcrow = dc + static_cast<std::size_t>(i) * n;
    float* darow = da + static_cast<std::size_t>(i) * k;
    for (int t = 0; t < k; ++t) {
      const float* brow = b + static_cast<std::size_t>(t) * n;
      float acc = 0.0f;
      for (int j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
      darow[t] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T * dC[m,n]  (row axpys).
void mm_tn_acc(const float* a, const float* dc, float* db, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    const float* dcrow = dc + static_cast<std::size_t>(i) * n;
    for (int t = 0; t < k; ++t) {
      const float av = arow[t];
      float* dbrow = db + static_cast<std::size_t>(t) * n;
      for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw dim_error("matmul: inner extents disagree, " + shape_str(a.shape) + " vs " +
                    shape_str(b.shape));
  }
  Tensor out = make_out({m, n}, want_grad(a) || want_grad(b));
  mm_nn(a.data(), b.data(), out.data(), m, k, n);
  if (out.requires_grad) {
    Graph::tape().push("matmul", out, [a, b, out, m, k, n]() {
      if (a.requires_grad) mm_nt_acc(out.grad_data(), b.data(), a.grad_data(), m, k, n);
      if (b.requires_grad) mm_tn_acc(a.data(), out.grad_data(), b.grad_data(), m, k, n);
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int m = a.rows(), n = a.cols();
  Tensor out = make_out({n, m}, want_grad(a));
  const float* src = a.data();
  float* dst = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) dst[static_cast<std::size_t>(j) * m + i] = src[static_cast<std::size_t>(i) * n + j];
  if (out.requires_grad) {
    Graph::tape().push("transpose", out, [a, out, m, n]() {
      if (!a.requires_grad) return;
      const float* g = out.grad_data();
      float* da = a.grad_data();
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i) da[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw dim_error("add: shapes differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  Tensor out = make_out(a.shape, want_grad(a) || want_grad(b));
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (out.requires_grad) {
    Graph::tape().push("add", out, [a, b, out, n]() {
      if (a.requires_grad)
        for (std::size_t i = 0; i < n; ++i) a.grad_data()[i] += out.grad_data()[i];
      if (b.requires_grad)
        for (std::size_t i = 0; i < n; ++i) b.grad_data()[i] += out.grad_data()[i];
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw dim_error("sub: shapes differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  Tensor out = make_out(a.shape, want_grad(a) || want_grad(b));
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (out.requires_grad) {
    Graph::tape().push("sub", out, [a, b, out, n]() {
      if (a.requires_grad)
        for (std::size_t i = 0; i < n; ++i) a.grad_data()[i] += out.grad_data()[i];
      if (b.requires_grad)
        for (std::size_t i = 0; i < n; ++i) b.grad_data()[i] -= out.grad_data()[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw dim_error("mul: shapes differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  Tensor out = make_out(a.shape, want_grad(a) || want_grad(b));
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad) {
    Graph::tape().push("mul", out, [a, b, out, n]() {
      if (a.requires_grad)
        for (std::size_t i = 0; i < n; ++i) a.grad_data()[i] += out.grad_data()[i] * b.data()[i];
      if (b.requires_grad)
        for (std::size_t i = 0; i < n; ++i) b.grad_data()[i] += out.grad_data()[i] * a.data()[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float c) {
  Tensor out = make_out(a.shape, want_grad(a));
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (out.requires_grad) {
    Graph::tape().push("scale", out, [a, out, c, n]() {
      for (std::size_t i = 0; i < n; ++i) a.grad_data()[i] += out.grad_data()[i] * c;
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, float c) {
  Tensor out = make_out(a.shape, want_grad(a));
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
  if (out.requires_grad) {
    Graph::tape().push("add_scalar", out, [a, out, n]() {
      for (std::size_t i = 0; i < n; ++i) a.grad_data()[i] += out.grad_data()[i];
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_2d(x, "add_rowvec");
  if (v.ndim() != 1 || v.dim(0) != x.cols()) {
    throw dim_error("add_rowvec: vector " + shape_str(v.shape) + " vs matrix " + shape_str(x.shape));
  }
  const int r = x.rows(), c = x.cols();
  Tensor out = make_out(x.shape, want_grad(x) || want_grad(v));
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<std::size_t>(i) * c + j] = x.data()[static_cast<std::size_t>(i) * c + j] + v.data()[j];
  if (out.requires_grad) {
    Graph::tape().push("add_rowvec", out, [x, v, out, r, c]() {
      if (x.requires_grad) {
        const std::size_t n = static_cast<std::size_t>(r) * c;
        for (std::size_t i = 0; i < n; ++i) x.grad_data()[i] += out.grad_data()[i];
      }
      if (v.requires_grad) {
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) v.grad_data()[j] += out.grad_data()[static_cast<std::size_t>(i) * c + j];
      }
    });
  }
  return out;
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  require_2d(x, "mul_rowvec");
  if (v.ndim() != 1 || v.dim(0) != x.cols()) {
    throw dim_error("mul_rowvec: vector " + shape_str(v.shape) + " vs matrix " + shape_str(x.shape));
  }
  const int r = x.rows(), c = x.cols();
  Tensor out = make_out(x.shape, want_grad(x) || want_grad(v));
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<std::size_t>(i) * c + j] = x.data()[static_cast<std::size_t>(i) * c + j] * v.data()[j];
  if (out.requires_grad) {
    Graph::tape().push("mul_rowvec", out, [x, v, out, r, c]() {
      for (int i = 0; i < r; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
          const float g = out.grad_data()[base + j];
          if (x.requires_grad) x.grad_data()[base + j] += g * v.data()[j];
          if (v.requires_grad) v.grad_data()[j] += g * x.data()[base + j];
        }
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = make_out(x.shape, want_grad(x));
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
  if (out.requires_grad) {
    Graph::tape().push("relu", out, [x, out, n]() {
      for (std::size_t i = 0; i < n; ++i)
        if (x.data()[i] > 0.0f) x.grad_data()[i] += out.grad_data()[i];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = make_out(x.shape, want_grad(x));
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = 1.0f / (1.0f + std::exp(-x.data()[i]));
  if (out.requires_grad) {
    Graph::tape().push("sigmoid", out, [x, out, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        const float y = out.data()[i];
        x.grad_data()[i] += out.grad_data()[i] * y * (1.0f - y);
      }
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_2d(x, "softmax_rows");
  const int r = x.rows(), c = x.cols();
  Tensor out = make_out(x.shape, want_grad(x));
  for (int i = 0; i < r; ++i) {
    const float* xin = x.data() + static_cast<std::size_t>(i) * c;
    float* y = out.data() + static_cast<std::size_t>(i) * c;
    float mx = xin[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xin[j]);
    float denom = 0.0f;
    for (int j = 0; j < c; ++j) {
      y[j] = std::exp(xin[j] - mx);
      denom += y[j];
    }
    const float inv = 1.0f / denom;
    for (int j = 0; j < c; ++j) y[j] *= inv;
  }
  if (out.requires_grad) {
    Graph::tape().push("softmax_rows", out, [x, out, r, c]() {
      for (int i = 0; i < r; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        const float* y = out.data() + base;
        const float* g = out.grad_data() + base;
        float dot = 0.0f;
        for (int j = 0; j < c; ++j) dot += y[j] * g[j];
        for (int j = 0; j < c; ++j) x.grad_data()[base + j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

namespace {

// Shared standardize kernel. n entries per group, strided access.
// Backward: dx = (u - mean(u) - xhat * mean(u .* xhat)) / std.
void standardize_group(const float* x, float* y, int n, std::ptrdiff_t stride, float eps,
                       float* out_mean, float* out_invstd) {
  double mu = 0.0;
  for (int i = 0; i < n; ++i) mu += x[i * stride];
  mu /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = x[i * stride] - mu;
    var += d * d;
  }
  var /= n;
  const float invstd = 1.0f / std::sqrt(static_cast<float>(var) + eps);
  for (int i = 0; i < n; ++i) y[i * stride] = (x[i * stride] - static_cast<float>(mu)) * invstd;
  *out_mean = static_cast<float>(mu);
  *out_invstd = invstd;
}

void standardize_group_backward(const float* y, const float* gy, float* gx, int n,
                                std::ptrdiff_t stride, float invstd) {
  double gmean = 0.0, gdot = 0.0;
  for (int i = 0; i < n; ++i) {
    gmean += gy[i * stride];
    gdot += gy[i * stride] * y[i * stride];
  }
  gmean /= n;
  gdot /= n;
  for (int i = 0; i < n; ++i) {
    gx[i * stride] += invstd * (gy[i * stride] - static_cast<float>(gmean) -
                                y[i * stride] * static_cast<float>(gdot));
  }
}

}  // namespace

Tensor standardize_rows(const Tensor& x, float eps) {
  require_2d(x, "standardize_rows");
  const int r = x.rows(), c = x.cols();
  Tensor out = make_out(x.shape, want_grad(x));
  auto invstd = std::make_shared<std::vector<float>>(r);
  for (int i = 0; i < r; ++i) {
    float mu;
    standardize_group(x.data() + static_cast<std::size_t>(i) * c, out.data() + static_cast<std::size_t>(i) * c,
                      c, 1, eps, &mu, &(*invstd)[i]);
  }
  if (out.requires_grad) {
    Graph::tape().push("standardize_rows", out, [x, out, invstd, r, c]() {
      for (int i = 0; i < r; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        standardize_group_backward(out.data() + base, out.grad_data() + base, x.grad_data() + base,
                                   c, 1, (*invstd)[i]);
      }
    });
  }
  return out;
}

Tensor standardize_cols(const Tensor& x, float eps) {
  require_2d(x, "standardize_cols");
  const int r = x.rows(), c = x.cols();
  Tensor out = make_out(x.shape, want_grad(x));
  auto invstd = std::make_shared<std::vector<float>>(c);
  for (int j = 0; j < c; ++j) {
    float mu;
    standardize_group(x.data() + j, out.data() + j, r, c, eps, &mu, &(*invstd)[j]);
  }
  if (out.requires_grad) {
    Graph::tape().push("standardize_cols", out, [x, out, invstd, r, c]() {
      for (int j = 0; j < c; ++j) {
        standardize_group_backward(out.data() + j, out.grad_data() + j, x.grad_data() + j, r, c,
                                   (*invstd)[j]);
      }
    });
  }
  return out;
}

Tensor rprelu(const Tensor& x, const Tensor& gamma, const Tensor& slope, const Tensor& zeta) {
  if (x.ndim() != 3) throw dim_error("rprelu: expected [C,H,W], got " + shape_str(x.shape));
  const int ch = x.dim(0);
  const int hw = x.dim(1) * x.dim(2);
  if (gamma.numel() != static_cast<std::size_t>(ch) || slope.numel() != static_cast<std::size_t>(ch) ||
      zeta.numel() != static_cast<std::size_t>(ch)) {
    throw dim_error("rprelu: parameter length mismatch for " + shape_str(x.shape));
  }
  Tensor out = make_out(x.shape, want_grad(x) || want_grad(gamma) || want_grad(slope) || want_grad(zeta));
  for (int c = 0; c < ch; ++c) {
    const float g = gamma.data()[c], s = slope.data()[c], z = zeta.data()[c];
    const float* xi = x.data() + static_cast<std::size_t>(c) * hw;
    float* yo = out.data() + static_cast<std::size_t>(c) * hw;
    for (int i = 0; i < hw; ++i) {
      const float t = xi[i] - g;
      yo[i] = (t > 0.0f ? t : s * t) + z;
    }
  }
  if (out.requires_grad) {
    Graph::tape().push("rprelu", out, [x, gamma, slope, zeta, out, ch, hw]() {
      for (int c = 0; c < ch; ++c) {
        const float g = gamma.data()[c], s = slope.data()[c];
        const std::size_t base = static_cast<std::size_t>(c) * hw;
        float dg = 0.0f, ds = 0.0f, dz = 0.0f;
        for (int i = 0; i < hw; ++i) {
          const float t = x.data()[base + i] - g;
          const float go = out.grad_data()[base + i];
          const float dpre = t > 0.0f ? go : go * s;
          if (x.requires_grad) x.grad_data()[base + i] += dpre;
          dg -= dpre;
          if (t <= 0.0f) ds += go * t;
          dz += go;
        }
        if (gamma.requires_grad) gamma.grad_data()[c] += dg;
        if (slope.requires_grad) slope.grad_data()[c] += ds;
        if (zeta.requires_grad) zeta.grad_data()[c] += dz;
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  if (x.ndim() != 3 || w.ndim() != 4) {
    throw dim_error("conv2d: expected x[C,H,W], w[Co,Ci,kh,kw], got " + shape_str(x.shape) + ", " +
                    shape_str(w.shape));
  }
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci) {
    throw dim_error("conv2d: channel mismatch, x " + shape_str(x.shape) + " vs w " + shape_str(w.shape));
  }
  if (bias.numel() != static_cast<std::size_t>(co)) throw dim_error("conv2d: bias length mismatch");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor out = make_out({co, oh, ow}, want_grad(x) || want_grad(w) || want_grad(bias));

  for (int oc = 0; oc < co; ++oc) {
    float* oplane = out.data() + static_cast<std::size_t>(oc) * oh * ow;
    const float b = bias.data()[oc];
    for (int i = 0; i < oh * ow; ++i) oplane[i] = b;
    for (int ic = 0; ic < ci; ++ic) {
      const float* xplane = x.data() + static_cast<std::size_t>(ic) * h * wd;
      const float* wk = w.data() + ((static_cast<std::size_t>(oc) * ci + ic) * kh) * kw;
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const float wv = wk[ky * kw + kx];
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            const float* xrow = xplane + static_cast<std::size_t>(iy) * wd;
            float* orow = oplane + static_cast<std::size_t>(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < wd) orow[ox] += wv * xrow[ix];
            }
          }
        }
      }
    }
  }

  if (out.requires_grad) {
    Graph::tape().push("conv2d", out, [x, w, bias, out, ci, h, wd, co, kh, kw, oh, ow, stride, pad]() {
      for (int oc = 0; oc < co; ++oc) {
        const float* gplane = out.grad_data() + static_cast<std::size_t>(oc) * oh * ow;
        if (bias.requires_grad) {
          float acc = 0.0f;
          for (int i = 0; i < oh * ow; ++i) acc += gplane[i];
          bias.grad_data()[oc] += acc;
        }
        for (int ic = 0; ic < ci; ++ic) {
          const float* xplane = x.data() + static_cast<std::size_t>(ic) * h * wd;
          float* gxplane = x.requires_grad ? x.grad_data() + static_cast<std::size_t>(ic) * h * wd : nullptr;
          const std::size_t wbase = (static_cast<std::size_t>(oc) * ci + ic) * kh * kw;
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const float wv = w.data()[wbase + ky * kw + kx];
              float wacc = 0.0f;
              for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                const float* grow = gplane + static_cast<std::size_t>(oy) * ow;
                const float* xrow = xplane + static_cast<std::size_t>(iy) * wd;
                float* gxrow = gxplane ? gxplane + static_cast<std::size_t>(iy) * wd : nullptr;
                for (int ox = 0; ox < ow; ++ox) {
                  const int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= wd) continue;
                  wacc += grow[ox] * xrow[ix];
                  if (gxrow) gxrow[ix] += grow[ox] * wv;
                }
              }
              if (w.requires_grad) w.grad_data()[wbase + ky * kw + kx] += wacc;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  if (x.ndim() != 3 || w.ndim() != 4) {
    throw dim_error("conv_transpose2d: expected x[C,h,w], w[Ci,Co,kh,kw], got " +
                    shape_str(x.shape) + ", " + shape_str(w.shape));
  }
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(0) != ci) {
    throw dim_error("conv_transpose2d: channel mismatch, x " + shape_str(x.shape) + " vs w " +
                    shape_str(w.shape));
  }
  if (bias.numel() != static_cast<std::size_t>(co)) throw dim_error("conv_transpose2d: bias length mismatch");
  const int oh = (h - 1) * stride - 2 * pad + kh;
  const int ow = (wd - 1) * stride - 2 * pad + kw;
  if (oh <= 0 || ow <= 0) throw dim_error("conv_transpose2d: empty output");
  Tensor out = make_out({co, oh, ow}, want_grad(x) || want_grad(w) || want_grad(bias));

  for (int oc = 0; oc < co; ++oc) {
    float* oplane = out.data() + static_cast<std::size_t>(oc) * oh * ow;
    const float b = bias.data()[oc];
    for (int i = 0; i < oh * ow; ++i) oplane[i] = b;
  }
  for (int ic = 0; ic < ci; ++ic) {
    const float* xplane = x.data() + static_cast<std::size_t>(ic) * h * wd;
    for (int oc = 0; oc < co; ++oc) {
      float* oplane = out.data() + static_cast<std::size_t>(oc) * oh * ow;
      const float* wk = w.data() + ((static_cast<std::size_t>(ic) * co + oc) * kh) * kw;
      for (int iy = 0; iy < h; ++iy) {
        for (int ix = 0; ix < wd; ++ix) {
          const float xv = xplane[static_cast<std::size_t>(iy) * wd + ix];
          for (int ky = 0; ky < kh; ++ky) {
            const int oy = iy * stride + ky - pad;
            if (oy < 0 || oy >= oh) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ox = ix * stride + kx - pad;
              if (ox >= 0 && ox < ow) oplane[static_cast<std::size_t>(oy) * ow + ox] += xv * wk[ky * kw + kx];
            }
          }
        }
      }
    }
  }

  if (out.requires_grad) {
    Graph::tape().push("conv_transpose2d", out, [x, w, bias, out, ci, h, wd, co, kh, kw, oh, ow, stride, pad]() {
      if (bias.requires_grad) {
        for (int oc = 0; oc < co; ++oc) {
          const float* gplane = out.grad_data() + static_cast<std::size_t>(oc) * oh * ow;
          float acc = 0.0f;
          for (int i = 0; i < oh * ow; ++i) acc += gplane[i];
          bias.grad_data()[oc] += acc;
        }
      }
      for (int ic = 0; ic < ci; ++ic) {
        const float* xplane = x.data() + static_cast<std::size_t>(ic) * h * wd;
        float* gxplane = x.requires_grad ? x.grad_data() + static_cast<std::size_t>(ic) * h * wd : nullptr;
        for (int oc = 0; oc < co; ++oc) {
          const float* gplane = out.grad_data() + static_cast<std::size_t>(oc) * oh * ow;
          const std::size_t wbase = (static_cast<std::size_t>(ic) * co + oc) * kh * kw;
          for (int iy = 0; iy < h; ++iy) {
            for (int ix = 0; ix < wd; ++ix) {
              const float xv = xplane[static_cast<std::size_t>(iy) * wd + ix];
              float gx = 0.0f;
              for (int ky = 0; ky < kh; ++ky) {
                const int oy = iy * stride + ky - pad;
                if (oy < 0 || oy >= oh) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ox = ix * stride + kx - pad;
                  if (ox < 0 || ox >= ow) continue;
                  const float g = gplane[static_cast<std::size_t>(oy) * ow + ox];
                  gx += g * w.data()[wbase + ky * kw + kx];
                  if (w.requires_grad) w.grad_data()[wbase + ky * kw + kx] += g * xv;
                }
              }
              if (gxplane) gxplane[static_cast<std::size_t>(iy) * wd + ix] += gx;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({1}, want_grad(x));
  double acc = 0.0;
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) acc += x.data()[i];
  out.data()[0] = static_cast<float>(acc);
  if (out.requires_grad) {
    Graph::tape().push("sum", out, [x, out, n]() {
      const float g = out.grad_data()[0];
      for (std::size_t i = 0; i < n; ++i) x.grad_data()[i] += g;
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  require_2d(x, "slice_rows");
  if (r0 < 0 || r1 > x.rows() || r0 >= r1) throw dim_error("slice_rows: bad range");
  const int c = x.cols();
  Tensor out = make_out({r1 - r0, c}, want_grad(x));
  std::memcpy(out.data(), x.data() + static_cast<std::size_t>(r0) * c,
              sizeof(float) * static_cast<std::size_t>(r1 - r0) * c);
  if (out.requires_grad) {
    Graph::tape().push("slice_rows", out, [x, out, r0, r1, c]() {
      const std::size_t n = static_cast<std::size_t>(r1 - r0) * c;
      float* dst = x.grad_data() + static_cast<std::size_t>(r0) * c;
      for (std::size_t i = 0; i < n; ++i) dst[i] += out.grad_data()[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  require_2d(x, "slice_cols");
  if (c0 < 0 || c1 > x.cols() || c0 >= c1) throw dim_error("slice_cols: bad range");
  const int r = x.rows(), c = x.cols(), w = c1 - c0;
  Tensor out = make_out({r, w}, want_grad(x));
  for (int i = 0; i < r; ++i)
    std::memcpy(out.data() + static_cast<std::size_t>(i) * w, x.data() + static_cast<std::size_t>(i) * c + c0,
                sizeof(float) * static_cast<std::size_t>(w));
  if (out.requires_grad) {
    Graph::tape().push("slice_cols", out, [x, out, c0, r, c, w]() {
      for (int i = 0; i < r; ++i) {
        float* dst = x.grad_data() + static_cast<std::size_t>(i) * c + c0;
        const float* src = out.grad_data() + static_cast<std::size_t>(i) * w;
        for (int j = 0; j < w; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw dim_error("concat_rows: no parts");
  const int c = parts[0].cols();
  int r = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != c) throw dim_error("concat_rows: column mismatch");
    r += p.rows();
    rg = rg || want_grad(p);
  }
  Tensor out = make_out({r, c}, rg);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::memcpy(out.data() + off, p.data(), sizeof(float) * p.numel());
    off += p.numel();
  }
  if (out.requires_grad) {
    Graph::tape().push("concat_rows", out, [parts, out]() {
      std::size_t off = 0;
      for (const Tensor& p : parts) {
        if (p.requires_grad) {
          for (std::size_t i = 0; i < p.numel(); ++i) p.grad_data()[i] += out.grad_data()[off + i];
        }
        off += p.numel();
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw dim_error("concat_cols: no parts");
  const int r = parts[0].rows();
  int c = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != r) throw dim_error("concat_cols: row mismatch");
    c += p.cols();
    rg = rg || want_grad(p);
  }
  Tensor out = make_out({r, c}, rg);
  int c0 = 0;
  for (const Tensor& p : parts) {
    const int pc = p.cols();
    for (int i = 0; i < r; ++i)
      std::memcpy(out.data() + static_cast<std::size_t>(i) * c + c0, p.data() + static_cast<std::size_t>(i) * pc,
                  sizeof(float) * static_cast<std::size_t>(pc));
    c0 += pc;
  }
  if (out.requires_grad) {
    Graph::tape().push("concat_cols", out, [parts, out, r, c]() {
      int c0 = 0;
      for (const Tensor& p : parts) {
        const int pc = p.cols();
        if (p.requires_grad) {
          for (int i = 0; i < r; ++i) {
            float* dst = p.grad_data() + static_cast<std::size_t>(i) * pc;
            const float* src = out.grad_data() + static_cast<std::size_t>(i) * c + c0;
            for (int j = 0; j < pc; ++j) dst[j] += src[j];
          }
        }
        c0 += pc;
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  require_2d(x, "gather_rows");
  const int c = x.cols();
  for (int i : idx)
    if (i < 0 || i >= x.rows()) throw dim_error("gather_rows: index out of range");
  Tensor out = make_out({static_cast<int>(idx.size()), c}, want_grad(x));
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::memcpy(out.data() + r * c, x.data() + static_cast<std::size_t>(idx[r]) * c, sizeof(float) * c);
  if (out.requires_grad) {
    Graph::tape().push("gather_rows", out, [x, out, idx, c]() {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        float* dst = x.grad_data() + static_cast<std::size_t>(idx[r]) * c;
        const float* src = out.grad_data() + r * c;
        for (int j = 0; j < c; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  if (n != x.numel()) {
    throw dim_error("reshape: " + shape_str(x.shape) + " -> " + shape_str(shape) + " changes numel");
  }
  Tensor t = x;  // shares values and grad; gradient flows with no tape node
  t.shape = std::move(shape);
  return t;
}

Tensor chw_to_rows(const Tensor& x) {
  if (x.ndim() != 3) throw dim_error("chw_to_rows: expected [C,H,W], got " + shape_str(x.shape));
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  return transpose(reshape(x, {c, hw}));
}

Tensor rows_to_chw(const Tensor& x, int h, int w) {
  require_2d(x, "rows_to_chw");
  if (x.rows() != h * w) throw dim_error("rows_to_chw: row count != h*w");
  return reshape(transpose(x), {x.cols(), h, w});
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<float>& weights) {
  require_2d(logits, "cross_entropy_rows");
  const int r = logits.rows(), k = logits.cols();
  if (targets.size() != static_cast<std::size_t>(r) || weights.size() != static_cast<std::size_t>(r)) {
    throw dim_error("cross_entropy_rows: targets/weights length mismatch");
  }
  double wsum = 0.0;
  for (float w : weights) wsum += w;
  if (wsum <= 0.0) throw contract_error("cross_entropy_rows: weights sum to zero");

  Tensor out = Tensor::zeros({1}, want_grad(logits));
  auto probs = std::make_shared<std::vector<float>>(static_cast<std::size_t>(r) * k);
  double loss = 0.0;
  for (int i = 0; i < r; ++i) {
    const float* l = logits.data() + static_cast<std::size_t>(i) * k;
    float* p = probs->data() + static_cast<std::size_t>(i) * k;
    if (targets[i] < 0 || targets[i] >= k) throw contract_error("cross_entropy_rows: target out of range");
    float mx = l[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, l[j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) denom += std::exp(static_cast<double>(l[j]) - mx);
    const double lse = mx + std::log(denom);
    loss += weights[i] * (lse - l[targets[i]]);
    for (int j = 0; j < k; ++j) p[j] = static_cast<float>(std::exp(static_cast<double>(l[j]) - lse));
  }
  out.data()[0] = static_cast<float>(loss / wsum);

  if (out.requires_grad) {
    const float inv = static_cast<float>(1.0 / wsum);
    Graph::tape().push("cross_entropy_rows", out, [logits, out, probs, targets, weights, inv, r, k]() {
      const float g = out.grad_data()[0] * inv;
      for (int i = 0; i < r; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * k;
        const float wi = weights[i] * g;
        for (int j = 0; j < k; ++j) {
          logits.grad_data()[base + j] +=
              wi * ((*probs)[base + j] - (j == targets[i] ? 1.0f : 0.0f));
        }
      }
    });
  }
  return out;
}

Tensor sum_abs_diff(const Tensor& x, const std::vector<float>& target) {
  if (x.numel() != target.size()) throw dim_error("sum_abs_diff: target length mismatch");
  Tensor out = Tensor::zeros({1}, want_grad(x));
  double acc = 0.0;
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(x.data()[i] - target[i]);
  out.data()[0] = static_cast<float>(acc);
  if (out.requires_grad) {
    Graph::tape().push("sum_abs_diff", out, [x, out, target, n]() {
      const float g = out.grad_data()[0];
      for (std::size_t i = 0; i < n; ++i) {
        const float d = x.data()[i] - target[i];
        if (d > 0.0f)
          x.grad_data()[i] += g;
        else if (d < 0.0f)
          x.grad_data()[i] -= g;
      }
    });
  }
  return out;
}

Tensor giou_pairs(const Tensor& pred, const std::vector<float>& target) {
  require_2d(pred, "giou_pairs");
  if (pred.cols() != 4 || target.size() != pred.numel()) {
    throw dim_error("giou_pairs: expected [M,4] pred and matching target");
  }
  const int m = pred.rows();
  Tensor out = make_out({m}, want_grad(pred));
  auto grads = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m) * 4);
  for (int i = 0; i < m; ++i) {
    const float* p = pred.data() + static_cast<std::size_t>(i) * 4;
    const float* t = target.data() + static_cast<std::size_t>(i) * 4;
    const double pc[4] = {p[0] - 0.5 * p[2], p[1] - 0.5 * p[3], p[0] + 0.5 * p[2], p[1] + 0.5 * p[3]};
    const double tc[4] = {t[0] - 0.5 * t[2], t[1] - 0.5 * t[3], t[0] + 0.5 * t[2], t[1] + 0.5 * t[3]};
    double gc[4];
    out.data()[i] = static_cast<float>(giou_corners_grad(pc, tc, gc, nullptr));
    double* g = grads->data() + static_cast<std::size_t>(i) * 4;
    g[0] = gc[0] + gc[2];                  // cx
    g[1] = gc[1] + gc[3];                  // cy
    g[2] = 0.5 * (gc[2] - gc[0]);          // w
    g[3] = 0.5 * (gc[3] - gc[1]);          // h
  }
  if (out.requires_grad) {
    Graph::tape().push("giou_pairs", out, [pred, out, grads, m]() {
      for (int i = 0; i < m; ++i) {
        const float g = out.grad_data()[i];
        for (int j = 0; j < 4; ++j) {
          pred.grad_data()[static_cast<std::size_t>(i) * 4 + j] +=
              g * static_cast<float>((*grads)[static_cast<std::size_t>(i) * 4 + j]);
        }
      }
    });
  }
  return out;
}

Tensor mha_scores(const Tensor& q, const Tensor& k, int heads) {
  require_2d(q, "mha_scores");
  require_2d(k, "mha_scores");
  if (q.cols() != k.cols() || q.cols() % heads != 0) {
    throw dim_error("mha_scores: bad widths " + shape_str(q.shape) + " vs " + shape_str(k.shape));
  }
  const int tq = q.rows(), tk = k.rows(), d = q.cols(), dh = d / heads;
  const float inv = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor out = make_out({heads * tq, tk}, want_grad(q) || want_grad(k));
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    for (int t = 0; t < tq; ++t) {
      const float* qrow = q.data() + static_cast<std::size_t>(t) * d + off;
      float* orow = out.data() + static_cast<std::size_t>(h * tq + t) * tk;
      for (int s = 0; s < tk; ++s) {
        const float* krow = k.data() + static_cast<std::size_t>(s) * d + off;
        float acc = 0.0f;
        for (int j = 0; j < dh; ++j) acc += qrow[j] * krow[j];
        orow[s] = acc * inv;
      }
    }
  }
  if (out.requires_grad) {
    Graph::tape().push("mha_scores", out, [q, k, out, heads, tq, tk, d, dh, inv]() {
      for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        for (int t = 0; t < tq; ++t) {
          const float* grow = out.grad_data() + static_cast<std::size_t>(h * tq + t) * tk;
          const float* qrow = q.data() + static_cast<std::size_t>(t) * d + off;
          float* dqrow = q.requires_grad ? q.grad_data() + static_cast<std::size_t>(t) * d + off : nullptr;
          for (int s = 0; s < tk; ++s) {
            const float g = grow[s] * inv;
            if (g == 0.0f) continue;
            const float* krow = k.data() + static_cast<std::size_t>(s) * d + off;
            if (dqrow)
              for (int j = 0; j < dh; ++j) dqrow[j] += g * krow[j];
            if (k.requires_grad) {
              float* dkrow = k.grad_data() + static_cast<std::size_t>(s) * d + off;
              for (int j = 0; j < dh; ++j) dkrow[j] += g * qrow[j];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor mha_apply(const Tensor& a, const Tensor& v, int heads) {
  require_2d(a, "mha_apply");
  require_2d(v, "mha_apply");
  const int tk = v.rows(), d = v.cols();
  if (d % heads != 0 || a.cols() != tk || a.rows() % heads != 0) {
    throw dim_error("mha_apply: bad shapes " + shape_str(a.shape) + " vs " + shape_str(v.shape));
  }
  const int tq = a.rows() / heads, dh = d / heads;
  Tensor out = make_out({tq, d}, want_grad(a) || want_grad(v));
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    for (int t = 0; t < tq; ++t) {
      const float* arow = a.data() + static_cast<std::size_t>(h * tq + t) * tk;
      float* orow = out.data() + static_cast<std::size_t>(t) * d + off;
      for (int s = 0; s < tk; ++s) {
        const float av = arow[s];
        const float* vrow = v.data() + static_cast<std::size_t>(s) * d + off;
        for (int j = 0; j < dh; ++j) orow[j] += av * vrow[j];
      }
    }
  }
  if (out.requires_grad) {
    Graph::tape().push("mha_apply", out, [a, v, out, heads, tq, tk, d, dh]() {
      for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        for (int t = 0; t < tq; ++t) {
          const float* grow = out.grad_data() + static_cast<std::size_t>(t) * d + off;
          const float* arow = a.data() + static_cast<std::size_t>(h * tq + t) * tk;
          float* darow = a.requires_grad ? a.grad_data() + static_cast<std::size_t>(h * tq + t) * tk : nullptr;
          for (int s = 0; s < tk; ++s) {
            const float* vrow = v.data() + static_cast<std::size_t>(s) * d + off;
            if (darow) {
              float acc = 0.0f;
              for (int j = 0; j < dh; ++j) acc += grow[j] * vrow[j];
              darow[s] += acc;
            }
            if (v.requires_grad) {
              const float av = arow[s];
              float* dvrow = v.grad_data() + static_cast<std::size_t>(s) * d + off;
              for (int j = 0; j < dh; ++j) dvrow[j] += av * grow[j];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor euclid_rows(const Tensor& x, const std::vector<float>& y) {
  require_2d(x, "euclid_rows");
  if (x.numel() != y.size()) throw dim_error("euclid_rows: target length mismatch");
  const int m = x.rows(), c = x.cols();
  Tensor out = make_out({m}, want_grad(x));
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    const std::size_t base = static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) {
      const double d = x.data()[base + j] - y[base + j];
      acc += d * d;
    }
    out.data()[i] = static_cast<float>(std::sqrt(acc));
  }
  if (out.requires_grad) {
    Graph::tape().push("euclid_rows", out, [x, out, y, m, c]() {
      for (int i = 0; i < m; ++i) {
        const float dist = out.data()[i];
        if (dist <= 0.0f) continue;  // zero distance: subgradient 0
        const float s = out.grad_data()[i] / dist;
        const std::size_t base = static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) x.grad_data()[base + j] += s * (x.data()[base + j] - y[base + j]);
      }
    });
  }
  return out;
}

}  // namespace qdetr
