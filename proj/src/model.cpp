#include "qdetr/model.hpp"

#include <algorithm>
#include <cmath>

#include "qdetr/ops.hpp"

namespace qdetr {

namespace {

constexpr double kTwoPi = 6.283185307179586;

// Repeat a constant matrix B times along rows (no gradient).
Tensor tile_rows(const Tensor& x, int times) {
  const int r = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros({r * times, c});
  for (int b = 0; b < times; ++b)
    std::copy(x.data(), x.data() + x.numel(), out.data() + static_cast<std::size_t>(b) * x.numel());
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw contract_error("ModelConfig: d_model must be a positive multiple of n_heads");
  }
  if (num_queries < 1) throw contract_error("ModelConfig: num_queries must be >= 1");
  if (dec_layers < 1) throw contract_error("ModelConfig: dec_layers must be >= 1");
  if (enc_layers < 0) throw contract_error("ModelConfig: enc_layers must be >= 0");
  if (num_classes < 1) throw contract_error("ModelConfig: num_classes must be >= 1");
  if (backbone_channels.empty()) throw contract_error("ModelConfig: backbone_channels empty");
  if (image_h < (1 << backbone_channels.size()) || image_w < (1 << backbone_channels.size())) {
    throw contract_error("ModelConfig: image smaller than backbone stride");
  }
}

int ModelConfig::feat_h() const {
  int h = image_h;
  for (std::size_t i = 0; i < backbone_channels.size(); ++i) h = (h + 1) / 2;
  return h;
}

int ModelConfig::feat_w() const {
  int w = image_w;
  for (std::size_t i = 0; i < backbone_channels.size(); ++i) w = (w + 1) / 2;
  return w;
}

Tensor sincos_position_embedding(int fh, int fw, int d_model) {
  const int half = d_model / 2;
  Tensor pos = Tensor::zeros({fh * fw, d_model});
  for (int y = 0; y < fh; ++y) {
    for (int x = 0; x < fw; ++x) {
      float* row = pos.data() + static_cast<std::size_t>(y * fw + x) * d_model;
      const double py = kTwoPi * (y + 0.5) / fh;
      const double px = kTwoPi * (x + 0.5) / fw;
      for (int j = 0; j < half; ++j) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(j - (j % 2)) / half);
        row[j] = static_cast<float>(j % 2 == 0 ? std::sin(py * omega) : std::cos(py * omega));
        row[half + j] = static_cast<float>(j % 2 == 0 ? std::sin(px * omega) : std::cos(px * omega));
      }
    }
  }
  return pos;
}

DetrModel::DetrModel(const ModelConfig& cfg, const QuantSiteConfig& qcfg, std::uint64_t seed,
                     std::vector<int> align_layers)
    : cfg_(cfg), qcfg_(qcfg), align_layers_(std::move(align_layers)) {
  cfg_.validate();
  for (int l : align_layers_) {
    if (l < 0 || l >= cfg_.dec_layers) throw contract_error("align layer index out of range");
  }
  Rng rng(seed);
  using G = QuantSiteConfig::Group;

  const int bb_act = qcfg_.act_bits_for(G::kBackbone);
  const int bb_w = qcfg_.weight_bits_for(G::kBackbone);
  int cin = 3;
  convs_.resize(cfg_.backbone_channels.size());
  acts_.resize(cfg_.backbone_channels.size());
  for (std::size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    const int cout = cfg_.backbone_channels[i];
    convs_[i].init(params_, "backbone.conv" + std::to_string(i), cin, cout, 3, 2, 1, bb_act, bb_w,
                   rng);
    acts_[i].init(params_, "backbone.act" + std::to_string(i), cout);
    cin = cout;
  }

  const int enc_act = qcfg_.act_bits_for(G::kEncoder);
  const int enc_w = qcfg_.weight_bits_for(G::kEncoder);
  const int enc_attn = qcfg_.attn_bits_for(G::kEncoder);
  input_proj_.init(params_, "encoder.input_proj", cin, cfg_.d_model, enc_act, enc_w, rng);
  pos_ = sincos_position_embedding(cfg_.feat_h(), cfg_.feat_w(), cfg_.d_model);

  enc_.resize(static_cast<std::size_t>(cfg_.enc_layers));
  for (int i = 0; i < cfg_.enc_layers; ++i) {
    const std::string p = "encoder." + std::to_string(i);
    EncLayer& l = enc_[static_cast<std::size_t>(i)];
    l.ln1.init(params_, p + ".ln1", cfg_.d_model);
    l.attn.init(params_, p + ".attn", cfg_.d_model, cfg_.n_heads, enc_act, enc_w, enc_attn, rng);
    l.ln2.init(params_, p + ".ln2", cfg_.d_model);
    l.ffn1.init(params_, p + ".ffn1", cfg_.d_model, cfg_.ffn_dim, enc_act, enc_w, rng);
    l.ffn2.init(params_, p + ".ffn2", cfg_.ffn_dim, cfg_.d_model, enc_act, enc_w, rng);
  }
  if (cfg_.enc_layers > 0) enc_final_.init(params_, "encoder.final_ln", cfg_.d_model);

  {
    Tensor q = Tensor::zeros({cfg_.num_queries, cfg_.d_model});
    for (std::size_t i = 0; i < q.numel(); ++i) q.data()[i] = static_cast<float>(rng.normal());
    query_embed_ = params_.add("decoder.query_embed", q, true);
  }

  const int dec_act = qcfg_.act_bits_for(G::kDecoderMha);
  const int dec_w = qcfg_.weight_bits_for(G::kDecoderMha);
  const int dec_attn = qcfg_.attn_bits_for(G::kDecoderMha);
  dec_.resize(static_cast<std::size_t>(cfg_.dec_layers));
  aligns_.resize(static_cast<std::size_t>(cfg_.dec_layers));
  for (int i = 0; i < cfg_.dec_layers; ++i) {
    const std::string p = "decoder." + std::to_string(i);
    DecLayer& l = dec_[static_cast<std::size_t>(i)];
    l.ln1.init(params_, p + ".ln1", cfg_.d_model);
    l.self_attn.init(params_, p + ".self_attn", cfg_.d_model, cfg_.n_heads, dec_act, dec_w,
                     dec_attn, rng);
    l.ln2.init(params_, p + ".ln2", cfg_.d_model);
    l.cross_attn.init(params_, p + ".cross_attn", cfg_.d_model, cfg_.n_heads, dec_act, dec_w,
                      dec_attn, rng);
    l.ln3.init(params_, p + ".ln3", cfg_.d_model);
    l.ffn1.init(params_, p + ".ffn1", cfg_.d_model, cfg_.ffn_dim, dec_act, dec_w, rng);
    l.ffn2.init(params_, p + ".ffn2", cfg_.ffn_dim, cfg_.d_model, dec_act, dec_w, rng);
    if (std::count(align_layers_.begin(), align_layers_.end(), i) > 0) {
      AlignParams& a = aligns_[static_cast<std::size_t>(i)];
      a.gamma = params_.add(p + ".align.gamma", Tensor::full({cfg_.d_model}, 1.0f), true);
      a.beta = params_.add(p + ".align.beta", Tensor::zeros({cfg_.d_model}), true);
    }
  }
  dec_final_.init(params_, "decoder.final_ln", cfg_.d_model);

  const int hd_act = qcfg_.act_bits_for(G::kHeads);
  const int hd_w = qcfg_.weight_bits_for(G::kHeads);
  class_head_.init(params_, "heads.class", cfg_.d_model, cfg_.num_classes + 1, hd_act, hd_w, rng);
  box_head_[0].init(params_, "heads.box0", cfg_.d_model, cfg_.d_model, hd_act, hd_w, rng);
  box_head_[1].init(params_, "heads.box1", cfg_.d_model, cfg_.d_model, hd_act, hd_w, rng);
  box_head_[2].init(params_, "heads.box2", cfg_.d_model, 4, hd_act, hd_w, rng);
}

AlignParams* DetrModel::align_for_layer(int layer) {
  for (int l : align_layers_) {
    if (l == layer) {
      AlignParams& a = aligns_[static_cast<std::size_t>(layer)];
      return a.gamma.defined() ? &a : nullptr;
    }
  }
  return nullptr;
}

Tensor DetrModel::backbone_single(const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) {
    throw dim_error("backbone: expected [3,H,W] image, got " + shape_str(image.shape));
  }
  if (image.dim(1) != cfg_.image_h || image.dim(2) != cfg_.image_w) {
    throw dim_error("backbone: image extents mismatch model config");
  }
  Tensor x = image;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    x = convs_[i].forward(x);
    x = acts_[i].forward(x);
  }
  return x;
}

std::vector<ForwardTrace> DetrModel::forward_batch(const std::vector<Tensor>& images,
                                                   const ForwardOptions& opts) {
  const int batch = static_cast<int>(images.size());
  if (batch == 0) return {};
  const int t = cfg_.tokens(), n = cfg_.num_queries, d = cfg_.d_model;
  std::vector<ForwardTrace> traces(static_cast<std::size_t>(batch));

  std::vector<Tensor> tok_parts;
  tok_parts.reserve(static_cast<std::size_t>(batch));
  for (const Tensor& img : images) tok_parts.push_back(chw_to_rows(backbone_single(img)));
  Tensor tokens = input_proj_.forward(concat_rows(tok_parts));  // [B*T, d]

  const Tensor pos_b = batch == 1 ? pos_ : tile_rows(pos_, batch);

  for (std::size_t li = 0; li < enc_.size(); ++li) {
    EncLayer& l = enc_[li];
    Tensor h = l.ln1.forward(tokens);
    Tensor qk = add(h, pos_b);
    Tensor qq = l.attn.aq_q.apply_act(l.attn.wq.forward(qk));
    Tensor kk = l.attn.aq_k.apply_act(l.attn.wk.forward(qk));
    Tensor vv = l.attn.aq_v.apply_act(l.attn.wv.forward(h));
    std::vector<Tensor> co_parts;
    co_parts.reserve(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
      AttnTrace tr;
      Tensor co = l.attn.attend(slice_rows(qq, b * t, (b + 1) * t), slice_rows(kk, b * t, (b + 1) * t),
                                slice_rows(vv, b * t, (b + 1) * t), opts.keep_attn ? &tr : nullptr);
      if (opts.keep_attn) traces[static_cast<std::size_t>(b)].enc_attn.push_back(tr.pre_quant_attn);
      co_parts.push_back(co);
    }
    tokens = add(tokens, l.attn.wo.forward(concat_rows(co_parts)));
    Tensor h2 = l.ln2.forward(tokens);
    tokens = add(tokens, l.ffn2.forward(relu(l.ffn1.forward(h2))));
  }
  Tensor e_all = enc_.empty() ? tokens : enc_final_.forward(tokens);  // [B*T, d]

  std::vector<int> tiled_idx;
  tiled_idx.reserve(static_cast<std::size_t>(batch) * n);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < n; ++i) tiled_idx.push_back(i);
  Tensor obj = gather_rows(query_embed_, tiled_idx);  // [B*N, d]

  // decoder stream starts at the object queries; a zero start would make the
  // first self-attention vacuous (v = 0) and cut its gradients at init
  Tensor hid = obj;
  for (int li = 0; li < cfg_.dec_layers; ++li) {
    DecLayer& l = dec_[static_cast<std::size_t>(li)];
    {
      Tensor h = l.ln1.forward(hid);
      Tensor qk = add(h, obj);
      Tensor qq = l.self_attn.aq_q.apply_act(l.self_attn.wq.forward(qk));
      Tensor kk = l.self_attn.aq_k.apply_act(l.self_attn.wk.forward(qk));
      Tensor vv = l.self_attn.aq_v.apply_act(l.self_attn.wv.forward(h));
      std::vector<Tensor> co_parts;
      for (int b = 0; b < batch; ++b) {
        AttnTrace tr;
        Tensor co = l.self_attn.attend(slice_rows(qq, b * n, (b + 1) * n),
                                       slice_rows(kk, b * n, (b + 1) * n),
                                       slice_rows(vv, b * n, (b + 1) * n),
                                       opts.keep_attn ? &tr : nullptr);
        if (opts.keep_attn)
          traces[static_cast<std::size_t>(b)].dec_self_attn.push_back(tr.pre_quant_attn);
        co_parts.push_back(co);
      }
      hid = add(hid, l.self_attn.wo.forward(concat_rows(co_parts)));
    }
    {
      Tensor h = l.ln2.forward(hid);
      Tensor q_all = l.cross_attn.wq.forward(add(h, obj));         // [B*N, d]
      Tensor k_all = l.cross_attn.wk.forward(add(e_all, pos_b));   // [B*T, d]
      Tensor v_all = l.cross_attn.wv.forward(e_all);
      Tensor kk = l.cross_attn.aq_k.apply_act(k_all);
      Tensor vv = l.cross_attn.aq_v.apply_act(v_all);
      AlignParams* align = align_for_layer(li);
      std::vector<Tensor> co_parts;
      for (int b = 0; b < batch; ++b) {
        Tensor qi = slice_rows(q_all, b * n, (b + 1) * n);
        if (align) qi = distribution_align(qi, *align);
        Tensor qqi = l.cross_attn.aq_q.apply_act(qi);
        AttnTrace tr;
        Tensor co = l.cross_attn.attend(qqi, slice_rows(kk, b * t, (b + 1) * t),
                                        slice_rows(vv, b * t, (b + 1) * t), &tr);
        traces[static_cast<std::size_t>(b)].bundles.push_back(QueryBundle{qi, tr.co_attended, li});
        if (opts.keep_attn)
          traces[static_cast<std::size_t>(b)].dec_cross_attn.push_back(tr.pre_quant_attn);
        co_parts.push_back(co);
      }
      hid = add(hid, l.cross_attn.wo.forward(concat_rows(co_parts)));
    }
    {
      Tensor h = l.ln3.forward(hid);
      hid = add(hid, l.ffn2.forward(relu(l.ffn1.forward(h))));
    }
  }
  hid = dec_final_.forward(hid);

  Tensor logits_all = class_head_.forward(hid);
  Tensor bx = relu(box_head_[0].forward(hid));
  bx = relu(box_head_[1].forward(bx));
  Tensor boxes_all = sigmoid(box_head_[2].forward(bx));

  for (int b = 0; b < batch; ++b) {
    ForwardTrace& tr = traces[static_cast<std::size_t>(b)];
    tr.logits = slice_rows(logits_all, b * n, (b + 1) * n);
    tr.boxes = slice_rows(boxes_all, b * n, (b + 1) * n);
    tr.detections = DetectionSet::from_model(tr.logits, tr.boxes, cfg_.num_classes);
    if (opts.keep_tokens) tr.enc_tokens = slice_rows(e_all, b * t, (b + 1) * t);
  }
  return traces;
}

ForwardTrace DetrModel::forward(const Tensor& image, const ForwardOptions& opts) {
  return forward_batch({image}, opts)[0];
}

void DetrModel::sync_quantizers_after_load() {
  for (QConv& c : convs_) {
    c.xq.sync_after_load();
    c.wq.sync_after_load();
  }
  auto sync_linear = [](QLinear& l) {
    l.xq.sync_after_load();
    l.wq.sync_after_load();
  };
  auto sync_mha = [&](Mha& m) {
    sync_linear(m.wq);
    sync_linear(m.wk);
    sync_linear(m.wv);
    sync_linear(m.wo);
    m.aq_q.sync_after_load();
    m.aq_k.sync_after_load();
    m.aq_v.sync_after_load();
    m.aq_a.sync_after_load();
  };
  sync_linear(input_proj_);
  for (EncLayer& l : enc_) {
    sync_mha(l.attn);
    sync_linear(l.ffn1);
    sync_linear(l.ffn2);
  }
  for (DecLayer& l : dec_) {
    sync_mha(l.self_attn);
    sync_mha(l.cross_attn);
    sync_linear(l.ffn1);
    sync_linear(l.ffn2);
  }
  sync_linear(class_head_);
  for (QLinear& l : box_head_) sync_linear(l);
}

}  // namespace qdetr
