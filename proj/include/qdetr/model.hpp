#pragma once

#include <cstdint>
#include <vector>

#include "qdetr/detection.hpp"
#include "qdetr/nn.hpp"

namespace qdetr {

struct ModelConfig {
  int image_h = 48, image_w = 48;
  int d_model = 64;
  int n_heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  int num_queries = 10;
  int num_classes = 3;  // foreground; heads emit C+1 logits
  std::vector<int> backbone_channels = {16, 32, 64};
  int ffn_dim = 256;

  void validate() const;
  int feat_h() const;
  int feat_w() const;
  int tokens() const { return feat_h() * feat_w(); }
};

// Per-decoder-layer record for distillation: the (aligned) query entering
// co-attention and the co-attended feature D.
struct QueryBundle {
  Tensor q;       // [N, d_model]
  Tensor d_feat;  // [N, d_model]
  int layer_index = 0;
};

struct ForwardTrace {
  std::vector<QueryBundle> bundles;   // one per decoder layer
  Tensor logits;                      // [N, C+1]
  Tensor boxes;                       // [N, 4] cxcywh in (0,1)
  DetectionSet detections;
  Tensor enc_tokens;                  // [T, d_model], kept when requested
  // pre-quantization attention rows, kept when requested
  std::vector<Tensor> enc_attn;       // per encoder layer [H*T, T]
  std::vector<Tensor> dec_self_attn;  // per decoder layer [H*N, N]
  std::vector<Tensor> dec_cross_attn; // per decoder layer [H*N, T]
};

struct ForwardOptions {
  bool keep_attn = false;
  bool keep_tokens = false;
};

// Miniature DETR: conv backbone (stride 8), sinusoidal positions, pre-LN
// transformer encoder, decoder with quantized co-attention, FC heads.
class DetrModel {
 public:
  DetrModel(const ModelConfig& cfg, const QuantSiteConfig& qcfg, std::uint64_t seed,
            std::vector<int> align_layers = {});

  std::vector<ForwardTrace> forward_batch(const std::vector<Tensor>& images,
                                          const ForwardOptions& opts = {});
  ForwardTrace forward(const Tensor& image, const ForwardOptions& opts = {});

  ParamStore& params() { return params_; }
  const ModelConfig& config() const { return cfg_; }
  const QuantSiteConfig& quant_config() const { return qcfg_; }
  const std::vector<int>& align_layers() const { return align_layers_; }
  AlignParams* align_for_layer(int layer);

  // Re-derives quantizer calibration validity from checkpoint markers.
  void sync_quantizers_after_load();

 private:
  struct EncLayer {
    LayerNorm ln1, ln2;
    Mha attn;
    QLinear ffn1, ffn2;
  };
  struct DecLayer {
    LayerNorm ln1, ln2, ln3;
    Mha self_attn, cross_attn;
    QLinear ffn1, ffn2;
  };

  Tensor backbone_single(const Tensor& image);

  ModelConfig cfg_;
  QuantSiteConfig qcfg_;
  std::vector<int> align_layers_;

  ParamStore params_;
  std::vector<QConv> convs_;
  std::vector<RPReLU> acts_;
  QLinear input_proj_;
  Tensor pos_;  // [T, d_model] fixed sinusoidal
  std::vector<EncLayer> enc_;
  LayerNorm enc_final_;
  Tensor query_embed_;  // [N, d_model]
  std::vector<DecLayer> dec_;
  LayerNorm dec_final_;
  std::vector<AlignParams> aligns_;  // parallel to dec_, used per align_layers_
  QLinear class_head_;
  QLinear box_head_[3];
};

// Fixed 2-D sine/cosine embedding, DETR-style.
Tensor sincos_position_embedding(int fh, int fw, int d_model);

}  // namespace qdetr
