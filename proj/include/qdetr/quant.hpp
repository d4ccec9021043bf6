#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "qdetr/tensor.hpp"

namespace qdetr {

// Channel axis for per-output-channel weight scales.
enum class WeightChannels {
  kCols,     // FC weight [in,out]: channel = column
  kLeading,  // conv weight [Cout,...]: channel = leading dim
};

// One fake-quantization site. Activations are asymmetric per-tensor,
// weights symmetric per-output-channel. bits==32 is an exact pass-through.
struct QuantizerState {
  int bits = 32;
  bool is_weight = false;
  WeightChannels layout = WeightChannels::kCols;
  bool learnable = true;
  bool calibrated = false;
  int qn = 0, qp = 0;
  Tensor alpha;  // [1] per-tensor, [C] per-channel; > 0 always
  Tensor z;      // [1]; weights keep it at 0
  // Step-size gradient scale 1/sqrt(N*Qp); the optimizer folds it into the
  // alpha learning rate. Set at calibration.
  std::shared_ptr<float> alpha_lr_scale = std::make_shared<float>(1.0f);

  static QuantizerState activation(int bits);
  static QuantizerState weight(int bits, int channels, WeightChannels layout);
  bool identity() const { return bits >= 32; }
};

// Qn = -2^(b-1), Qp = 2^(b-1)-1.
std::pair<int, int> quant_bounds(int bits);

// clip to [r1,r2], then round half to even. r1 < r2 required.
float clip_round_scalar(float y, float r1, float r2);
Tensor clip_round(const Tensor& y, float r1, float r2);

struct QuantResult {
  Tensor codes;  // integers stored as floats
  Tensor deq;    // alpha*codes (+ z)
};

// Plain (non-recording) quantizer evaluation, Eq. style: codes + dequantized.
QuantResult quantize_activation(const Tensor& x, const QuantizerState& s);
QuantResult quantize_weight(const Tensor& w, const QuantizerState& s);

// Calibration from the first batch: alpha = 2*mean|x|/sqrt(Qp),
// z = mean(x) for activations, 0 for weights.
void calibrate_activation(QuantizerState& s, const Tensor& x);
void calibrate_weight(QuantizerState& s, const Tensor& w);

// Autograd fake quantization with STE gradients:
//   dx = upstream inside [Qn,Qp] of u=(x-z)/alpha, 0 when saturated;
//   dalpha = upstream * (codes - u) inside, bound outside;
//   dz = upstream outside, 0 inside.
// Calibrates the state on first use.
Tensor fake_quant_act(const Tensor& x, QuantizerState& s);
Tensor fake_quant_weight(const Tensor& w, QuantizerState& s);

// Quantized fully-connected: Qa(x) . Qw(w), float path (training).
Tensor q_fc(const Tensor& x, const Tensor& w, QuantizerState& sx, QuantizerState& sw);

// Integer-arithmetic route of the same layer:
//   alpha_x alpha_w o (x_q . w_q) + alpha_w z o colsum(w_q),
// int64 accumulation; used to cross-check q_fc.
std::vector<float> q_fc_int_path(const Tensor& x, const Tensor& w, const QuantizerState& sx,
                                 const QuantizerState& sw);

// Per-module quantization switches; #Bits notation W-A-Attention.
struct QuantSiteConfig {
  int weight_bits = 4;
  int activation_bits = 4;
  int attention_bits = 8;
  bool quantize_backbone = true;
  bool quantize_encoder = true;
  bool quantize_decoder_mha = true;
  bool quantize_heads = true;

  enum class Group { kBackbone, kEncoder, kDecoderMha, kHeads };

  bool enabled(Group g) const {
    switch (g) {
      case Group::kBackbone: return quantize_backbone;
      case Group::kEncoder: return quantize_encoder;
      case Group::kDecoderMha: return quantize_decoder_mha;
      case Group::kHeads: return quantize_heads;
    }
    return false;
  }
  int weight_bits_for(Group g) const { return enabled(g) ? weight_bits : 32; }
  int act_bits_for(Group g) const { return enabled(g) ? activation_bits : 32; }
  int attn_bits_for(Group g) const { return enabled(g) ? attention_bits : 32; }

  static QuantSiteConfig real_valued() {
    QuantSiteConfig q;
    q.weight_bits = q.activation_bits = q.attention_bits = 32;
    q.quantize_backbone = q.quantize_encoder = q.quantize_decoder_mha = q.quantize_heads = false;
    return q;
  }
};

}  // namespace qdetr
