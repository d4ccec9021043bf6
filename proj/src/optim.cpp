#include "qdetr/optim.hpp"

#include <cmath>

namespace qdetr {

AdamW::AdamW(const ParamStore& params, float weight_decay, float beta1, float beta2, float eps)
    : wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.resize(params.all().size());
  v_.resize(params.all().size());
  for (std::size_t i = 0; i < params.all().size(); ++i) {
    if (params.all()[i].trainable) {
      m_[i].assign(params.all()[i].t.numel(), 0.0f);
      v_[i].assign(params.all()[i].t.numel(), 0.0f);
    }
  }
}

void AdamW::step(ParamStore& params, float lr) {
  ++steps_;
  const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(steps_));
  const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(steps_));
  for (std::size_t i = 0; i < params.all().size(); ++i) {
    Param& p = params.all()[i];
    if (!p.trainable) continue;
    const float plr = lr * (p.lr_scale ? *p.lr_scale : 1.0f);
    float* w = p.t.data();
    const float* g = p.t.grad_data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (std::size_t k = 0; k < p.t.numel(); ++k) {
      m[k] = beta1_ * m[k] + (1.0f - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0f - beta2_) * g[k] * g[k];
      const float mhat = m[k] / bc1;
      const float vhat = v[k] / bc2;
      float next = w[k] - plr * mhat / (std::sqrt(vhat) + eps_);
      if (p.decay) next -= lr * wd_ * w[k];
      if (next < p.clamp_min) next = p.clamp_min;
      w[k] = next;
    }
  }
}

double clip_grad_norm(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const Param& p : params.all()) {
    if (!p.trainable) continue;
    for (std::size_t k = 0; k < p.t.numel(); ++k) {
      const double g = p.t.grad_data()[k];
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-12));
    for (Param& p : params.all()) {
      if (!p.trainable) continue;
      for (std::size_t k = 0; k < p.t.numel(); ++k) p.t.grad_data()[k] *= s;
    }
  }
  return norm;
}

}  // namespace qdetr
