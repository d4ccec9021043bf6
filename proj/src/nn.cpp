#include "qdetr/nn.hpp"

#include "qdetr/ops.hpp"

namespace qdetr {

Tensor ParamStore::add(const std::string& name, Tensor t, bool trainable, bool decay,
                       std::shared_ptr<float> lr_scale, float clamp_min) {
  for (const Param& p : params_) {
    if (p.name == name) throw contract_error("ParamStore: duplicate name " + name);
  }
  t.requires_grad = trainable;
  if (trainable) t.ensure_grad();
  params_.push_back(Param{name, t, trainable, decay, std::move(lr_scale), clamp_min});
  return params_.back().t;
}

Tensor* ParamStore::find(const std::string& name) {
  for (Param& p : params_) {
    if (p.name == name) return &p.t;
  }
  return nullptr;
}

void ParamStore::zero_grad() {
  for (Param& p : params_) p.t.zero_grad();
}

void QuantSite::init_activation(ParamStore& ps, const std::string& prefix, int bits) {
  st = QuantizerState::activation(bits);
  const bool train = !st.identity() && st.learnable;
  st.alpha = ps.add(prefix + ".alpha", st.alpha, train, false, st.alpha_lr_scale, 1e-8f);
  st.z = ps.add(prefix + ".zero", st.z, train);
  marker = ps.add(prefix + ".calib_bits", Tensor::zeros({1}), false);
}

void QuantSite::init_weight(ParamStore& ps, const std::string& prefix, int bits, int channels,
                            WeightChannels layout) {
  st = QuantizerState::weight(bits, channels, layout);
  const bool train = !st.identity() && st.learnable;
  st.alpha = ps.add(prefix + ".alpha", st.alpha, train, false, st.alpha_lr_scale, 1e-8f);
  st.z = ps.add(prefix + ".zero", st.z, false);
  marker = ps.add(prefix + ".calib_bits", Tensor::zeros({1}), false);
}

Tensor QuantSite::apply_act(const Tensor& x) {
  const bool was = st.calibrated;
  Tensor y = fake_quant_act(x, st);
  if (!was && st.calibrated) marker.data()[0] = static_cast<float>(st.bits);
  return y;
}

Tensor QuantSite::apply_weight(const Tensor& w) {
  const bool was = st.calibrated;
  Tensor y = fake_quant_weight(w, st);
  if (!was && st.calibrated) marker.data()[0] = static_cast<float>(st.bits);
  return y;
}

void QuantSite::sync_after_load() {
  st.calibrated = !st.identity() && static_cast<int>(marker.data()[0]) == st.bits;
}

Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  for (std::size_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<float>(rng.uniform(-a, a));
  return t;
}

void QLinear::init(ParamStore& ps, const std::string& prefix, int in, int out, int act_bits,
                   int weight_bits, Rng& rng) {
  w = ps.add(prefix + ".w", xavier_uniform({in, out}, in, out, rng), true, true);
  b = ps.add(prefix + ".b", Tensor::zeros({out}), true);
  xq.init_activation(ps, prefix + ".xq", act_bits);
  wq.init_weight(ps, prefix + ".wq", weight_bits, out, WeightChannels::kCols);
}

Tensor QLinear::forward(const Tensor& x) {
  return add_rowvec(matmul(xq.apply_act(x), wq.apply_weight(w)), b);
}

void LayerNorm::init(ParamStore& ps, const std::string& prefix, int dim) {
  gamma = ps.add(prefix + ".gamma", Tensor::full({dim}, 1.0f), true);
  beta = ps.add(prefix + ".beta", Tensor::zeros({dim}), true);
}

Tensor LayerNorm::forward(const Tensor& x) {
  return add_rowvec(mul_rowvec(standardize_rows(x, eps), gamma), beta);
}

void RPReLU::init(ParamStore& ps, const std::string& prefix, int channels) {
  shift_in = ps.add(prefix + ".shift_in", Tensor::zeros({channels}), true);
  slope = ps.add(prefix + ".slope", Tensor::full({channels}, 0.25f), true);
  shift_out = ps.add(prefix + ".shift_out", Tensor::zeros({channels}), true);
}

Tensor RPReLU::forward(const Tensor& x) { return rprelu(x, shift_in, slope, shift_out); }

void QConv::init(ParamStore& ps, const std::string& prefix, int cin, int cout, int k, int stride_,
                 int pad_, int act_bits, int weight_bits, Rng& rng) {
  stride = stride_;
  pad = pad_;
  const int fan_in = cin * k * k;
  const int fan_out = cout * k * k;
  w = ps.add(prefix + ".w", xavier_uniform({cout, cin, k, k}, fan_in, fan_out, rng), true, true);
  b = ps.add(prefix + ".b", Tensor::zeros({cout}), true);
  xq.init_activation(ps, prefix + ".xq", act_bits);
  wq.init_weight(ps, prefix + ".wq", weight_bits, cout, WeightChannels::kLeading);
}

Tensor QConv::forward(const Tensor& x) {
  return conv2d(xq.apply_act(x), wq.apply_weight(w), b, stride, pad);
}

void Mha::init(ParamStore& ps, const std::string& prefix, int d_model_, int heads_, int act_bits,
               int weight_bits, int attn_bits, Rng& rng) {
  d_model = d_model_;
  heads = heads_;
  wq.init(ps, prefix + ".wq", d_model, d_model, act_bits, weight_bits, rng);
  wk.init(ps, prefix + ".wk", d_model, d_model, act_bits, weight_bits, rng);
  wv.init(ps, prefix + ".wv", d_model, d_model, act_bits, weight_bits, rng);
  wo.init(ps, prefix + ".wo", d_model, d_model, act_bits, weight_bits, rng);
  aq_q.init_activation(ps, prefix + ".aq_q", attn_bits);
  aq_k.init_activation(ps, prefix + ".aq_k", attn_bits);
  aq_v.init_activation(ps, prefix + ".aq_v", attn_bits);
  aq_a.init_activation(ps, prefix + ".aq_a", attn_bits);
}

Tensor Mha::attend(const Tensor& qq, const Tensor& kk, const Tensor& vv, AttnTrace* trace) {
  Tensor attn_pre = softmax_rows(mha_scores(qq, kk, heads));
  Tensor attn_q = aq_a.apply_act(attn_pre);
  Tensor co = mha_apply(attn_q, vv, heads);
  if (trace) {
    trace->pre_quant_attn = attn_pre;
    trace->co_attended = co;
  }
  return co;
}

Tensor Mha::forward(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                    const AlignParams* align, AttnTrace* trace) {
  Tensor q = wq.forward(q_in);
  if (align) q = distribution_align(q, *align);
  Tensor qq = aq_q.apply_act(q);
  Tensor kk = aq_k.apply_act(wk.forward(k_in));
  Tensor vv = aq_v.apply_act(wv.forward(v_in));
  Tensor co = attend(qq, kk, vv, trace);
  if (trace) trace->query = q;
  return wo.forward(co);
}

}  // namespace qdetr
