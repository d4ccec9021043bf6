#include "qdetr/size_report.hpp"

namespace qdetr {

SizeReport size_report_from_counts(const std::vector<std::pair<int, std::uint64_t>>& param_counts,
                                   const std::vector<std::pair<int, std::uint64_t>>& mac_counts) {
  SizeReport r;
  for (const auto& [bits, count] : param_counts) {
    if (bits != 2 && bits != 3 && bits != 4 && bits != 8 && bits != 32) {
      throw contract_error("size report: unknown bit-width " + std::to_string(bits));
    }
    r.size_bits += static_cast<std::uint64_t>(bits) * count;
    (bits == 32 ? r.real_params : r.quant_params) += count;
  }
  r.size_mb = static_cast<double>(r.size_bits) / 8.0 / 1e6;
  for (const auto& [bits, macs] : mac_counts) {
    if (bits == 32) {
      r.ops += 2.0 * static_cast<double>(macs);  // multiply + add
    } else if (bits == 2 || bits == 3 || bits == 4 || bits == 8) {
      r.ops += static_cast<double>(bits) / 32.0 * static_cast<double>(macs);
    } else {
      throw contract_error("size report: unknown bit-width " + std::to_string(bits));
    }
  }
  r.ops_g = r.ops / 1e9;
  return r;
}

SizeReport size_report_for_model(const ModelConfig& mc, const QuantSiteConfig& qc) {
  mc.validate();
  using G = QuantSiteConfig::Group;
  std::vector<std::pair<int, std::uint64_t>> params;
  std::vector<std::pair<int, std::uint64_t>> macs;

  auto weight_bits = [&](G g) { return qc.weight_bits_for(g); };
  auto site_bits = [&](G g) { return std::max(qc.weight_bits_for(g), qc.act_bits_for(g)); };

  auto add_linear = [&](G g, std::uint64_t rows, std::uint64_t in, std::uint64_t out) {
    params.emplace_back(weight_bits(g), in * out);
    params.emplace_back(32, out);  // bias
    macs.emplace_back(site_bits(g), rows * in * out);
  };
  auto add_real = [&](std::uint64_t count) { params.emplace_back(32, count); };

  // backbone
  std::uint64_t cin = 3;
  int h = mc.image_h, w = mc.image_w;
  for (int c : mc.backbone_channels) {
    h = (h + 1) / 2;
    w = (w + 1) / 2;
    const std::uint64_t cout = static_cast<std::uint64_t>(c);
    params.emplace_back(weight_bits(G::kBackbone), cout * cin * 9);
    add_real(cout);                        // bias
    add_real(3 * cout);                    // rprelu
    macs.emplace_back(site_bits(G::kBackbone),
                      cout * cin * 9 * static_cast<std::uint64_t>(h) * static_cast<std::uint64_t>(w));
    cin = cout;
  }

  const std::uint64_t t = static_cast<std::uint64_t>(mc.tokens());
  const std::uint64_t n = static_cast<std::uint64_t>(mc.num_queries);
  const std::uint64_t d = static_cast<std::uint64_t>(mc.d_model);
  const std::uint64_t f = static_cast<std::uint64_t>(mc.ffn_dim);

  add_linear(G::kEncoder, t, cin, d);  // input projection
  for (int l = 0; l < mc.enc_layers; ++l) {
    add_real(4 * d);  // two layer norms
    for (int i = 0; i < 4; ++i) add_linear(G::kEncoder, t, d, d);
    macs.emplace_back(qc.attn_bits_for(G::kEncoder), 2 * t * t * d);  // scores + apply
    add_linear(G::kEncoder, t, d, f);
    add_linear(G::kEncoder, t, f, d);
  }
  if (mc.enc_layers > 0) add_real(2 * d);

  add_real(n * d);  // query embedding
  for (int l = 0; l < mc.dec_layers; ++l) {
    add_real(6 * d);  // three layer norms
    for (int i = 0; i < 4; ++i) add_linear(G::kDecoderMha, n, d, d);  // self-attention
    macs.emplace_back(qc.attn_bits_for(G::kDecoderMha), 2 * n * n * d);
    add_linear(G::kDecoderMha, n, d, d);  // cross q
    add_linear(G::kDecoderMha, t, d, d);  // cross k
    add_linear(G::kDecoderMha, t, d, d);  // cross v
    add_linear(G::kDecoderMha, n, d, d);  // cross out
    macs.emplace_back(qc.attn_bits_for(G::kDecoderMha), 2 * n * t * d);
    add_linear(G::kDecoderMha, n, d, f);
    add_linear(G::kDecoderMha, n, f, d);
  }
  add_real(2 * d);

  add_linear(G::kHeads, n, d, static_cast<std::uint64_t>(mc.num_classes) + 1);
  add_linear(G::kHeads, n, d, d);
  add_linear(G::kHeads, n, d, d);
  add_linear(G::kHeads, n, d, 4);

  return size_report_from_counts(params, macs);
}

}  // namespace qdetr
