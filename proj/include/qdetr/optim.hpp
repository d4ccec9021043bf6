#pragma once

#include <vector>

#include "qdetr/nn.hpp"

namespace qdetr {

// Decoupled-weight-decay Adam. Honors per-parameter lr scales (quantizer
// step sizes) and clamp floors (alpha > 0).
class AdamW {
 public:
  AdamW(const ParamStore& params, float weight_decay, float beta1 = 0.9f, float beta2 = 0.999f,
        float eps = 1e-8f);

  void step(ParamStore& params, float lr);

 private:
  float wd_, beta1_, beta2_, eps_;
  int steps_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// Scales trainable gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(ParamStore& params, double max_norm);

}  // namespace qdetr
