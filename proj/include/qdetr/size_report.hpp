#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "qdetr/model.hpp"
#include "qdetr/quant.hpp"

namespace qdetr {

// Memory: 32 bits per real-valued weight plus a bits per a-bit weight.
// Compute: a real MAC costs 2 ops (multiply + add); an a-bit multiplication
// costs a/32 ops, the bit-serial XNOR/bit-count fraction.
struct SizeReport {
  std::uint64_t real_params = 0;
  std::uint64_t quant_params = 0;
  std::uint64_t size_bits = 0;
  double size_mb = 0.0;  // size_bits / 8 / 1e6
  double ops = 0.0;
  double ops_g = 0.0;
};

// (bits, count) groups; bits==32 entries are real-valued.
SizeReport size_report_from_counts(const std::vector<std::pair<int, std::uint64_t>>& param_counts,
                                   const std::vector<std::pair<int, std::uint64_t>>& mac_counts);

// Analytic per-image accounting of the toy DETR under a quantization config.
SizeReport size_report_for_model(const ModelConfig& mc, const QuantSiteConfig& qc);

}  // namespace qdetr
