#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "qdetr/drd.hpp"
#include "qdetr/quant.hpp"
#include "qdetr/rng.hpp"
#include "qdetr/tensor.hpp"

namespace qdetr {

struct Param {
  std::string name;
  Tensor t;
  bool trainable = true;
  bool decay = false;                    // weight matrices only
  std::shared_ptr<float> lr_scale;       // null means 1
  float clamp_min = -1e30f;              // applied after each step (alpha > 0)
};

// Flat, registration-ordered parameter registry; the order defines the
// optimizer walk and the checkpoint layout.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t, bool trainable, bool decay = false,
             std::shared_ptr<float> lr_scale = nullptr, float clamp_min = -1e30f);
  std::vector<Param>& all() { return params_; }
  const std::vector<Param>& all() const { return params_; }
  Tensor* find(const std::string& name);
  void zero_grad();

 private:
  std::vector<Param> params_;
};

// Fake-quantizer site plus its persistent calibration marker. The marker
// stores the bit-width the scales were calibrated for, so a checkpoint
// trained at different bits forces recalibration after loading.
struct QuantSite {
  QuantizerState st;
  Tensor marker;  // [1]

  void init_activation(ParamStore& ps, const std::string& prefix, int bits);
  void init_weight(ParamStore& ps, const std::string& prefix, int bits, int channels,
                   WeightChannels layout);
  Tensor apply_act(const Tensor& x);
  Tensor apply_weight(const Tensor& w);
  void sync_after_load();
};

struct QLinear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
  QuantSite xq, wq;

  void init(ParamStore& ps, const std::string& prefix, int in, int out, int act_bits,
            int weight_bits, Rng& rng);
  Tensor forward(const Tensor& x);
};

struct LayerNorm {
  Tensor gamma, beta;
  float eps = 1e-5f;

  void init(ParamStore& ps, const std::string& prefix, int dim);
  Tensor forward(const Tensor& x);
};

struct RPReLU {
  Tensor shift_in, slope, shift_out;

  void init(ParamStore& ps, const std::string& prefix, int channels);
  Tensor forward(const Tensor& x);  // [C,H,W]
};

struct QConv {
  Tensor w;  // [Co,Ci,kh,kw]
  Tensor b;  // [Co]
  int stride = 1, pad = 0;
  QuantSite xq, wq;

  void init(ParamStore& ps, const std::string& prefix, int cin, int cout, int k, int stride,
            int pad, int act_bits, int weight_bits, Rng& rng);
  Tensor forward(const Tensor& x);
};

struct AttnTrace {
  Tensor pre_quant_attn;  // [heads*Tq, Tk], every row sums to 1
  Tensor co_attended;     // [Tq, d_model] concat of per-head A.v
  Tensor query;           // [Tq, d_model] projected (and aligned) query
};

// Multi-head attention with quantized projections and attention activations
// (q, k, A, v). Projections run batched over stacked token rows; the
// attention core runs per image on row slices. `align` rectifies the
// projected query before the attention quantizer.
struct Mha {
  QLinear wq, wk, wv, wo;
  QuantSite aq_q, aq_k, aq_v, aq_a;
  int heads = 1, d_model = 0;

  void init(ParamStore& ps, const std::string& prefix, int d_model, int heads, int act_bits,
            int weight_bits, int attn_bits, Rng& rng);

  // Per-image core over already attention-quantized q and k/v slices.
  Tensor attend(const Tensor& qq, const Tensor& kk, const Tensor& vv, AttnTrace* trace);
  // Single-matrix convenience pass (one image).
  Tensor forward(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                 const AlignParams* align = nullptr, AttnTrace* trace = nullptr);
};

// init helpers
Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng);

}  // namespace qdetr
