#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qdetr/detection.hpp"
#include "qdetr/tensor.hpp"

namespace qdetr {

// Shape classes: 0 rectangle, 1 ellipse, 2 triangle.
struct SceneSpec {
  std::uint64_t seed = 7;
  int image_h = 48;
  int image_w = 48;
  int min_shapes = 1;
  int max_shapes = 4;
  int num_classes = 3;
  double min_size = 0.20;  // side as a fraction of min(H,W)
  double max_size = 0.55;
  int color_jitter = 30;     // u8 units per channel
  int noise_amplitude = 12;  // u8 units, grayscale background noise
};

struct Scene {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // interleaved, row-major
  DetectionSet gt;

  Tensor image_tensor() const;  // [3,H,W], values/255
};

// Deterministic per (spec.seed, index); raster math is integer-only.
Scene gen_scene(const SceneSpec& spec, std::uint64_t index);

// Layout: dir/images/IDX.ppm (P6), dir/annotations.jsonl, dir/spec.json.
// Indices run [index_offset, index_offset+count).
void write_dataset(const SceneSpec& spec, int count, const std::string& dir,
                   std::uint64_t index_offset = 0);
std::vector<Scene> read_dataset(const std::string& dir);

}  // namespace qdetr
