#include "qdetr/quant.hpp"

#include <cmath>
#include <cstdint>

#include "qdetr/ops.hpp"

namespace qdetr {

namespace {

void check_bits(int bits) {
  if (bits != 2 && bits != 3 && bits != 4 && bits != 8 && bits != 32) {
    throw contract_error("quantizer: unsupported bit-width " + std::to_string(bits));
  }
}

// channel of flat index under the state's layout
struct ChannelMap {
  int channels;
  std::size_t block;  // kLeading: elements per channel
  int cols;           // kCols: row width
  WeightChannels layout;

  int operator()(std::size_t i) const {
    return layout == WeightChannels::kCols ? static_cast<int>(i % cols)
                                           : static_cast<int>(i / block);
  }
};

ChannelMap channel_map(const Tensor& w, const QuantizerState& s) {
  ChannelMap m{};
  m.layout = s.layout;
  m.channels = static_cast<int>(s.alpha.numel());
  if (s.layout == WeightChannels::kCols) {
    if (w.ndim() != 2 || w.cols() != m.channels) {
      throw dim_error("quantize_weight: per-channel alpha length " + std::to_string(m.channels) +
                      " vs weight " + shape_str(w.shape));
    }
    m.cols = w.cols();
    m.block = 0;
  } else {
    if (w.ndim() < 1 || w.dim(0) != m.channels) {
      throw dim_error("quantize_weight: per-channel alpha length " + std::to_string(m.channels) +
                      " vs weight " + shape_str(w.shape));
    }
    m.cols = 0;
    m.block = w.numel() / static_cast<std::size_t>(m.channels);
  }
  return m;
}

void check_alpha_positive(const QuantizerState& s) {
  for (float a : *s.alpha.values) {
    if (!(a > 0.0f)) throw contract_error("quantizer: non-positive alpha");
  }
}

}  // namespace

std::pair<int, int> quant_bounds(int bits) {
  check_bits(bits);
  if (bits >= 32) return {0, 0};
  return {-(1 << (bits - 1)), (1 << (bits - 1)) - 1};
}

QuantizerState QuantizerState::activation(int bits) {
  check_bits(bits);
  QuantizerState s;
  s.bits = bits;
  s.is_weight = false;
  auto [qn, qp] = quant_bounds(bits);
  s.qn = qn;
  s.qp = qp;
  s.alpha = Tensor::full({1}, 1.0f);
  s.z = Tensor::zeros({1});
  return s;
}

QuantizerState QuantizerState::weight(int bits, int channels, WeightChannels layout) {
  check_bits(bits);
  QuantizerState s;
  s.bits = bits;
  s.is_weight = true;
  s.layout = layout;
  auto [qn, qp] = quant_bounds(bits);
  s.qn = qn;
  s.qp = qp;
  s.alpha = Tensor::full({channels}, 1.0f);
  s.z = Tensor::zeros({1});
  return s;
}

float clip_round_scalar(float y, float r1, float r2) {
  if (!(r1 < r2)) throw contract_error("clip_round: bounds r1 >= r2");
  float v = y < r1 ? r1 : (y > r2 ? r2 : y);
  v = std::nearbyintf(v);  // FE_TONEAREST: ties to even
  return v < r1 ? r1 : (v > r2 ? r2 : v);
}

Tensor clip_round(const Tensor& y, float r1, float r2) {
  if (!(r1 < r2)) throw contract_error("clip_round: bounds r1 >= r2");
  Tensor out = Tensor::zeros(y.shape);
  for (std::size_t i = 0; i < y.numel(); ++i) out.data()[i] = clip_round_scalar(y.data()[i], r1, r2);
  return out;
}

QuantResult quantize_activation(const Tensor& x, const QuantizerState& s) {
  if (s.is_weight) throw contract_error("quantize_activation: weight-configured state");
  if (s.identity()) return {x, x};
  check_alpha_positive(s);
  const float a = s.alpha.data()[0];
  const float z = s.z.data()[0];
  QuantResult r{Tensor::zeros(x.shape), Tensor::zeros(x.shape)};
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float q = clip_round_scalar((x.data()[i] - z) / a, static_cast<float>(s.qn),
                                      static_cast<float>(s.qp));
    r.codes.data()[i] = q;
    r.deq.data()[i] = a * q + z;
  }
  return r;
}

QuantResult quantize_weight(const Tensor& w, const QuantizerState& s) {
  if (!s.is_weight) throw contract_error("quantize_weight: activation-configured state");
  if (s.identity()) return {w, w};
  check_alpha_positive(s);
  const ChannelMap cm = channel_map(w, s);
  QuantResult r{Tensor::zeros(w.shape), Tensor::zeros(w.shape)};
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const float a = s.alpha.data()[cm(i)];
    const float q = clip_round_scalar(w.data()[i] / a, static_cast<float>(s.qn),
                                      static_cast<float>(s.qp));
    r.codes.data()[i] = q;
    r.deq.data()[i] = a * q;
  }
  return r;
}

void calibrate_activation(QuantizerState& s, const Tensor& x) {
  if (s.identity()) {
    s.calibrated = true;
    return;
  }
  double mean_abs = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    mean_abs += std::abs(x.data()[i]);
    mean += x.data()[i];
  }
  mean_abs /= static_cast<double>(x.numel());
  mean /= static_cast<double>(x.numel());
  const float a = static_cast<float>(2.0 * mean_abs / std::sqrt(static_cast<double>(s.qp)));
  s.alpha.data()[0] = std::max(a, 1e-8f);
  s.z.data()[0] = static_cast<float>(mean);
  *s.alpha_lr_scale =
      1.0f / std::sqrt(static_cast<float>(x.numel()) * static_cast<float>(s.qp));
  s.calibrated = true;
}

void calibrate_weight(QuantizerState& s, const Tensor& w) {
  if (s.identity()) {
    s.calibrated = true;
    return;
  }
  const ChannelMap cm = channel_map(w, s);
  const int ch = cm.channels;
  std::vector<double> mean_abs(ch, 0.0);
  std::vector<std::size_t> count(ch, 0);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const int c = cm(i);
    mean_abs[c] += std::abs(w.data()[i]);
    count[c] += 1;
  }
  for (int c = 0; c < ch; ++c) {
    const double m = count[c] ? mean_abs[c] / static_cast<double>(count[c]) : 0.0;
    s.alpha.data()[c] =
        std::max(static_cast<float>(2.0 * m / std::sqrt(static_cast<double>(s.qp))), 1e-8f);
  }
  s.z.data()[0] = 0.0f;
  const std::size_t per_channel = w.numel() / static_cast<std::size_t>(ch);
  *s.alpha_lr_scale =
      1.0f / std::sqrt(static_cast<float>(per_channel) * static_cast<float>(s.qp));
  s.calibrated = true;
}

Tensor fake_quant_act(const Tensor& x, QuantizerState& s) {
  if (s.identity()) return x;
  if (!s.calibrated) calibrate_activation(s, x);
  check_alpha_positive(s);

  const float a = s.alpha.data()[0];
  const float z = s.z.data()[0];
  const float qn = static_cast<float>(s.qn), qp = static_cast<float>(s.qp);
  const bool rg = Graph::tape().recording() &&
                  (x.requires_grad || (s.learnable && (s.alpha.requires_grad || s.z.requires_grad)));
  Tensor out = Tensor::zeros(x.shape, rg);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    out.data()[i] = a * clip_round_scalar((x.data()[i] - z) / a, qn, qp) + z;
  }
  if (rg) {
    Tensor alpha = s.alpha, zt = s.z;
    Graph::tape().push("fake_quant_act", out, [x, alpha, zt, out, qn, qp]() {
      const float av = alpha.data()[0];
      const float zv = zt.data()[0];
      float dalpha = 0.0f, dz = 0.0f;
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const float go = out.grad_data()[i];
        const float u = (x.data()[i] - zv) / av;
        if (u >= qn && u <= qp) {
          if (x.requires_grad) x.grad_data()[i] += go;
          dalpha += go * (std::nearbyintf(u) - u);
        } else {
          dalpha += go * (u < qn ? qn : qp);
          dz += go;
        }
      }
      if (alpha.requires_grad) alpha.grad_data()[0] += dalpha;
      if (zt.requires_grad) zt.grad_data()[0] += dz;
    });
  }
  return out;
}

Tensor fake_quant_weight(const Tensor& w, QuantizerState& s) {
  if (s.identity()) return w;
  if (!s.calibrated) calibrate_weight(s, w);
  check_alpha_positive(s);

  const ChannelMap cm = channel_map(w, s);
  const float qn = static_cast<float>(s.qn), qp = static_cast<float>(s.qp);
  const bool rg = Graph::tape().recording() &&
                  (w.requires_grad || (s.learnable && s.alpha.requires_grad));
  Tensor out = Tensor::zeros(w.shape, rg);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const float a = s.alpha.data()[cm(i)];
    out.data()[i] = a * clip_round_scalar(w.data()[i] / a, qn, qp);
  }
  if (rg) {
    Tensor alpha = s.alpha;
    Graph::tape().push("fake_quant_weight", out, [w, alpha, out, cm, qn, qp]() {
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const float go = out.grad_data()[i];
        const int c = cm(i);
        const float u = w.data()[i] / alpha.data()[c];
        if (u >= qn && u <= qp) {
          if (w.requires_grad) w.grad_data()[i] += go;
          if (alpha.requires_grad) alpha.grad_data()[c] += go * (std::nearbyintf(u) - u);
        } else if (alpha.requires_grad) {
          alpha.grad_data()[c] += go * (u < qn ? qn : qp);
        }
      }
    });
  }
  return out;
}

Tensor q_fc(const Tensor& x, const Tensor& w, QuantizerState& sx, QuantizerState& sw) {
  return matmul(fake_quant_act(x, sx), fake_quant_weight(w, sw));
}

std::vector<float> q_fc_int_path(const Tensor& x, const Tensor& w, const QuantizerState& sx,
                                 const QuantizerState& sw) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.cols() != w.rows()) {
    throw dim_error("q_fc_int_path: bad shapes " + shape_str(x.shape) + ", " + shape_str(w.shape));
  }
  const int m = x.rows(), k = x.cols(), n = w.cols();

  if (sx.identity() || sw.identity()) {
    // Degenerate routes fall back to the float product of the (maybe
    // quantized) halves; the integer form needs both sides discrete.
    const Tensor xa = quantize_activation(x, sx).deq;
    const Tensor wa = quantize_weight(w, sw).deq;
    std::vector<float> out(static_cast<std::size_t>(m) * n, 0.0f);
    for (int i = 0; i < m; ++i)
      for (int t = 0; t < k; ++t)
        for (int j = 0; j < n; ++j)
          out[static_cast<std::size_t>(i) * n + j] +=
              xa.data()[static_cast<std::size_t>(i) * k + t] * wa.data()[static_cast<std::size_t>(t) * n + j];
    return out;
  }

  const QuantResult qx = quantize_activation(x, sx);
  const QuantResult qw = quantize_weight(w, sw);
  std::vector<std::int32_t> xq(x.numel()), wq(w.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) xq[i] = static_cast<std::int32_t>(qx.codes.data()[i]);
  for (std::size_t i = 0; i < w.numel(); ++i) wq[i] = static_cast<std::int32_t>(qw.codes.data()[i]);

  const float ax = sx.alpha.data()[0];
  const float z = sx.z.data()[0];
  const bool per_channel = sw.alpha.numel() > 1;

  std::vector<std::int64_t> colsum(n, 0);
  for (int t = 0; t < k; ++t)
    for (int j = 0; j < n; ++j) colsum[j] += wq[static_cast<std::size_t>(t) * n + j];

  std::vector<float> out(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      std::int64_t acc = 0;
      for (int t = 0; t < k; ++t)
        acc += static_cast<std::int64_t>(xq[static_cast<std::size_t>(i) * k + t]) *
               wq[static_cast<std::size_t>(t) * n + j];
      const float aw = sw.alpha.data()[per_channel ? j : 0];
      out[static_cast<std::size_t>(i) * n + j] =
          ax * aw * static_cast<float>(acc) + aw * z * static_cast<float>(colsum[j]);
    }
  }
  return out;
}

}  // namespace qdetr
