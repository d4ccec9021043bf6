#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "oracle_ops.hpp"

#include "qdetr/ops.hpp"
#include "qdetr/quant.hpp"
#include "qdetr/rng.hpp"

using namespace qdetr;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

void make_learnable(QuantizerState& s) {
  s.alpha.requires_grad = true;
  s.alpha.ensure_grad();
  s.z.requires_grad = true;
  s.z.ensure_grad();
}

}  // namespace

TEST_CASE("clip_round: basic values, saturation, half-to-even, bad bounds") {
  CHECK(clip_round_scalar(5.4f, -8, 7) == 5.0f);
  CHECK(clip_round_scalar(100.0f, -8, 7) == 7.0f);
  CHECK(clip_round_scalar(2.5f, -8, 7) == 2.0f);   // ties to even
  CHECK(clip_round_scalar(3.5f, -8, 7) == 4.0f);
  CHECK(clip_round_scalar(-2.5f, -8, 7) == -2.0f);
  CHECK_THROWS_AS(clip_round_scalar(0.0f, 3, 3), contract_error);

  Tensor y = Tensor::from_data({3}, {5.4f, 100.0f, 2.5f});
  Tensor r = clip_round(y, -8, 7);
  CHECK(r.data()[0] == 5.0f);
  CHECK(r.data()[1] == 7.0f);
  CHECK(r.data()[2] == 2.0f);
}

TEST_CASE("bound identity for every configured bit-width") {
  for (int bits : {2, 3, 4, 8}) {
    auto [qn, qp] = quant_bounds(bits);
    CHECK(qn == -(1 << (bits - 1)));
    CHECK(qp == (1 << (bits - 1)) - 1);
    CHECK(qp - qn == (1 << bits) - 1);
  }
  CHECK_THROWS_AS(quant_bounds(5), contract_error);
}

TEST_CASE("quantize_activation: bounds, zero-point fixed point, scalar oracle") {
  QuantizerState s = QuantizerState::activation(4);
  CHECK(s.qn == -8);
  CHECK(s.qp == 7);

  s.alpha.data()[0] = 0.2f;
  s.z.data()[0] = 0.1f;
  Tensor x = Tensor::from_data({3}, {0.1f, 1.3f, 100.0f});
  QuantResult r = quantize_activation(x, s);
  CHECK(r.codes.data()[0] == 0.0f);  // x == z
  CHECK(r.deq.data()[0] == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(r.codes.data()[1] == 6.0f);  // (1.3-0.1)/0.2
  CHECK(r.deq.data()[1] == doctest::Approx(1.3).epsilon(1e-6));
  CHECK(r.codes.data()[2] == 7.0f);  // saturated

  // |deq - x| <= alpha/2 whenever u lands inside the bounds
  Rng rng(31);
  for (int i = 0; i < 200; ++i) {
    const float xv = static_cast<float>(rng.uniform(-1.2, 1.2));
    const float u = (xv - 0.1f) / 0.2f;
    if (u < -8.0f || u > 7.0f) continue;
    Tensor one = Tensor::from_data({1}, {xv});
    QuantResult q = quantize_activation(one, s);
    CHECK(std::abs(q.deq.data()[0] - xv) <= 0.2f / 2.0f + 1e-6f);
  }

  s.alpha.data()[0] = 0.0f;
  CHECK_THROWS_AS(quantize_activation(x, s), contract_error);
}

TEST_CASE("quantize_weight: zero weights, 2-bit bounds, per-channel error bound") {
  QuantizerState s2 = QuantizerState::weight(2, 4, WeightChannels::kCols);
  CHECK(s2.qn == -2);
  CHECK(s2.qp == 1);

  Tensor w0 = Tensor::zeros({3, 4});
  QuantResult rz = quantize_weight(w0, s2);
  for (std::size_t i = 0; i < w0.numel(); ++i) {
    CHECK(rz.codes.data()[i] == 0.0f);
    CHECK(rz.deq.data()[i] == 0.0f);
  }

  Rng rng(32);
  QuantizerState s = QuantizerState::weight(4, 4, WeightChannels::kCols);
  Tensor w = random_tensor({6, 4}, rng, -1.5, 1.5);
  for (int c = 0; c < 4; ++c) {
    float mx = 0.0f;
    for (int r = 0; r < 6; ++r) mx = std::max(mx, std::abs(w.data()[static_cast<std::size_t>(r) * 4 + c]));
    s.alpha.data()[c] = mx / static_cast<float>(s.qp);
  }
  QuantResult r = quantize_weight(w, s);
  for (int i = 0; i < 6; ++i) {
    for (int c = 0; c < 4; ++c) {
      const float orig = w.data()[static_cast<std::size_t>(i) * 4 + c];
      const float deq = r.deq.data()[static_cast<std::size_t>(i) * 4 + c];
      const float a = s.alpha.data()[c];
      // scalar oracle: scale, round-half-even, clip, rescale
      const float code = clip_round_scalar(orig / a, -8.0f, 7.0f);
      CHECK(deq == doctest::Approx(a * code).epsilon(1e-6));
      if (orig / a >= -8.0f) CHECK(std::abs(deq - orig) <= a / 2.0f + 1e-6f);
      CHECK((deq == 0.0f || (deq > 0) == (orig > 0)));  // sign preserved
    }
  }
}

TEST_CASE("idempotence: re-quantization is a fixed point") {
  Rng rng(33);
  for (int bits : {2, 3, 4, 8}) {
    QuantizerState s = QuantizerState::activation(bits);
    Tensor x = random_tensor({64}, rng, -2.0, 2.0);
    calibrate_activation(s, x);
    QuantResult once = quantize_activation(x, s);
    QuantResult twice = quantize_activation(once.deq, s);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(twice.deq.data()[i] == once.deq.data()[i]);
  }
}

TEST_CASE("monotonicity: elementwise order survives quantization") {
  Rng rng(34);
  QuantizerState s = QuantizerState::activation(3);
  Tensor x = random_tensor({128}, rng, -2.0, 2.0);
  calibrate_activation(s, x);
  Tensor y = Tensor::zeros({128});
  for (std::size_t i = 0; i < y.numel(); ++i)
    y.data()[i] = x.data()[i] + static_cast<float>(rng.uniform(0.0, 1.0));
  QuantResult qx = quantize_activation(x, s);
  QuantResult qy = quantize_activation(y, s);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(qx.deq.data()[i] <= qy.deq.data()[i]);
}

TEST_CASE("dual-path equivalence: float path equals integer path, 100 cases x 4 bit-widths") {
  Rng rng(35);
  for (int bits : {2, 3, 4, 8}) {
    for (int trial = 0; trial < 100; ++trial) {
      const int m = 2 + static_cast<int>(rng.uniform_int(0, 2));
      const int k = 3 + static_cast<int>(rng.uniform_int(0, 4));
      const int n = 2 + static_cast<int>(rng.uniform_int(0, 4));
      Tensor x = random_tensor({m, k}, rng, -1.5, 2.0);
      Tensor w = random_tensor({k, n}, rng, -1.0, 1.0);
      QuantizerState sx = QuantizerState::activation(bits);
      QuantizerState sw = QuantizerState::weight(bits, n, WeightChannels::kCols);
      calibrate_activation(sx, x);
      calibrate_weight(sw, w);

      NoGradGuard ng;
      Tensor fp = q_fc(x, w, sx, sw);
      const std::vector<float> ip = q_fc_int_path(x, w, sx, sw);
      float mx = 0.0f;
      for (float v : ip) mx = std::max(mx, std::abs(v));
      for (std::size_t i = 0; i < fp.numel(); ++i) {
        // 1e-4 relative, floored at the layer's output scale: entries of the
        // two routes that cancel toward zero differ only by float rounding
        CHECK(std::abs(fp.data()[i] - ip[i]) <= 1e-4f * (std::abs(ip[i]) + 0.01f * mx + 1e-6f));
      }
    }
  }
}

TEST_CASE("q_fc special cases: symmetric z=0 path and 32-bit identity") {
  Rng rng(36);
  Tensor x = random_tensor({2, 3}, rng, -1.0, 1.0);
  Tensor w = random_tensor({3, 4}, rng, -1.0, 1.0);

  {
    QuantizerState sx = QuantizerState::activation(4);
    QuantizerState sw = QuantizerState::weight(4, 4, WeightChannels::kCols);
    calibrate_activation(sx, x);
    sx.z.data()[0] = 0.0f;  // symmetric special case
    calibrate_weight(sw, w);
    NoGradGuard ng;
    Tensor fp = q_fc(x, w, sx, sw);
    // alpha_x alpha_w o (x_q . w_q) with no zero-point term
    QuantResult qx = quantize_activation(x, sx);
    QuantResult qw = quantize_weight(w, sw);
    Tensor want = matmul(qx.deq, qw.deq);
    for (std::size_t i = 0; i < fp.numel(); ++i)
      CHECK(fp.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-6));
  }
  {
    QuantizerState sx = QuantizerState::activation(32);
    QuantizerState sw = QuantizerState::weight(32, 4, WeightChannels::kCols);
    NoGradGuard ng;
    Tensor fp = q_fc(x, w, sx, sw);
    Tensor want = matmul(x, w);
    for (std::size_t i = 0; i < fp.numel(); ++i) CHECK(fp.data()[i] == want.data()[i]);
  }
}

TEST_CASE("32-bit configuration is the exact identity forward and backward") {
  Rng rng(37);
  QuantizerState s = QuantizerState::activation(32);
  Tensor x = random_tensor({5, 5}, rng, -3.0, 3.0);
  x.requires_grad = true;
  x.ensure_grad();
  Graph::tape().clear();
  Tensor y = fake_quant_act(x, s);
  CHECK(y.values.get() == x.values.get());  // pass-through handle
  Tensor loss = sum(mul(y, y));
  Graph::tape().backward(loss);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad_data()[i] == 2.0f * x.data()[i]);
  Graph::tape().clear();
}

// STE rules: pass-through inside, exact zero outside; LSQ-style alpha/z rules
// checked against double-precision finite differences of the surrogate with
// the rounding residual held fixed.
TEST_CASE("STE and step-size gradients agree with frozen-rounding finite differences") {
  Rng rng(38);
  int sites = 0;
  while (sites < 50) {
    const int bits = (sites % 2 == 0) ? 4 : 3;
    QuantizerState s = QuantizerState::activation(bits);
    make_learnable(s);
    const double alpha = rng.uniform(0.05, 0.4);
    const double z = rng.uniform(-0.3, 0.3);
    s.alpha.data()[0] = static_cast<float>(alpha);
    s.z.data()[0] = static_cast<float>(z);
    s.calibrated = true;

    // sample u away from rounding boundaries and clip corners
    const int n = 12;
    std::vector<double> u(n);
    for (int i = 0; i < n; ++i) {
      if (i % 4 == 3) {
        u[static_cast<std::size_t>(i)] = (i % 8 == 3 ? s.qp + rng.uniform(1.5, 3.0)
                                                     : s.qn - rng.uniform(1.5, 3.0));
      } else {
        const int base = static_cast<int>(rng.uniform_int(s.qn + 1, s.qp - 1));
        const double frac = rng.uniform(0.15, 0.35) * (rng.uniform() < 0.5 ? 1.0 : -1.0);
        u[static_cast<std::size_t>(i)] = base + frac;
      }
    }
    Tensor x = Tensor::zeros({n}, true);
    std::vector<double> cs(n);
    for (int i = 0; i < n; ++i) {
      x.data()[static_cast<std::size_t>(i)] = static_cast<float>(u[static_cast<std::size_t>(i)] * alpha + z);
      cs[static_cast<std::size_t>(i)] = rng.uniform(-1.0, 1.0);
    }
    Tensor c = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) c.data()[static_cast<std::size_t>(i)] = static_cast<float>(cs[static_cast<std::size_t>(i)]);

    Graph::tape().clear();
    x.zero_grad();
    s.alpha.zero_grad();
    s.z.zero_grad();
    Tensor loss = sum(mul(c, fake_quant_act(x, s)));
    Graph::tape().backward(loss);
    Graph::tape().clear();

    const double qn = s.qn, qp = s.qp;
    auto inside = [&](double uu) { return uu >= qn && uu <= qp; };

    // dL/dx: upstream passes through inside, exactly zero when saturated;
    // double FD of the round->identity surrogate confirms the indicator.
    for (int i = 0; i < n; ++i) {
      const double uu = u[static_cast<std::size_t>(i)];
      const double want = inside(uu) ? cs[static_cast<std::size_t>(i)] : 0.0;
      CHECK(x.grad_data()[static_cast<std::size_t>(i)] == doctest::Approx(want).epsilon(1e-6));
      const double xv = uu * alpha + z;
      const std::function<double(double)> surr = [&, i](double xx) {
        const double uc = std::clamp((xx - z) / alpha, qn, qp);
        return cs[static_cast<std::size_t>(i)] * (alpha * uc + z);
      };
      const double fd = oracle::fd1(surr, xv, 1e-6);
      CHECK(std::abs(x.grad_data()[static_cast<std::size_t>(i)] - fd) <= 1e-3 * (std::abs(fd) + 1e-8));
    }

    // dL/dalpha: frozen rounding residual r = round(u)-u inside, bound outside.
    {
      double analytic = s.alpha.grad_data()[0];
      const std::function<double(double)> loss_at = [&](double a) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
          const double uu = u[static_cast<std::size_t>(i)];
          if (inside(uu)) {
            const double r = std::nearbyint(uu) - uu;  // frozen at the center
            const double uc = (u[static_cast<std::size_t>(i)] * alpha + z - z) / a;
            acc += cs[static_cast<std::size_t>(i)] * (a * (uc + r) + z);
          } else {
            acc += cs[static_cast<std::size_t>(i)] * (a * (uu < qn ? qn : qp) + z);
          }
        }
        return acc;
      };
      const double fd = oracle::fd1(loss_at, alpha, 1e-6 * alpha);
      CHECK(std::abs(analytic - fd) <= 1e-3 * (std::abs(fd) + 1e-8));
    }

    // dL/dz: zero inside, passes upstream when clipped.
    {
      double analytic = s.z.grad_data()[0];
      const std::function<double(double)> loss_at = [&](double zz) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
          const double xv = u[static_cast<std::size_t>(i)] * alpha + z;
          const double uc = std::clamp((xv - zz) / alpha, qn, qp);
          acc += cs[static_cast<std::size_t>(i)] * (alpha * uc + zz);
        }
        return acc;
      };
      const double fd = oracle::fd1(loss_at, z, 1e-6);
      CHECK(std::abs(analytic - fd) <= 1e-3 * (std::abs(fd) + 1e-8));
    }
    ++sites;
  }
}

TEST_CASE("gradient check crossing a rounding boundary reports a large error") {
  // Documented exclusion zone: the true quantizer is a staircase, so naive
  // finite differences disagree with the STE rule near (and away from)
  // rounding boundaries.
  QuantizerState s = QuantizerState::activation(4);
  s.alpha.data()[0] = 0.25f;
  s.z.data()[0] = 0.0f;
  s.calibrated = true;
  Tensor x = Tensor::from_data({2}, {0.125f, 0.6f});  // u = 0.5 (boundary) and 2.4
  auto f = [&](const Tensor& t) { return sum(fake_quant_act(t, s)); };
  const double err = check_gradients(f, x, 1e-4);
  CHECK(err > 0.1);
}

TEST_CASE("calibration sets the documented scale, zero-point and lr scale") {
  Rng rng(39);
  QuantizerState s = QuantizerState::activation(4);
  Tensor x = random_tensor({256}, rng, -1.0, 3.0);
  calibrate_activation(s, x);
  double mean_abs = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    mean_abs += std::abs(x.data()[i]);
    mean += x.data()[i];
  }
  mean_abs /= static_cast<double>(x.numel());
  mean /= static_cast<double>(x.numel());
  CHECK(s.alpha.data()[0] == doctest::Approx(2.0 * mean_abs / std::sqrt(7.0)).epsilon(1e-5));
  CHECK(s.z.data()[0] == doctest::Approx(mean).epsilon(1e-5));
  CHECK(*s.alpha_lr_scale == doctest::Approx(1.0 / std::sqrt(256.0 * 7.0)).epsilon(1e-6));
}
