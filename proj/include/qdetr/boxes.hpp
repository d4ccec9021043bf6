#pragma once

#include <array>

namespace qdetr {

// Normalized box, center form. Corner form is derived on demand.
struct Box {
  float cx = 0.0f, cy = 0.0f, w = 0.0f, h = 0.0f;

  std::array<float, 4> corners() const {
    return {cx - 0.5f * w, cy - 0.5f * h, cx + 0.5f * w, cy + 0.5f * h};
  }
  static Box from_corners(float x1, float y1, float x2, float y2) {
    return Box{0.5f * (x1 + x2), 0.5f * (y1 + y2), x2 - x1, y2 - y1};
  }
  float area() const { return w * h; }
};

double iou(const Box& a, const Box& b);

// IoU - (enclosing - union)/enclosing, in (-1, 1]. Zero-area inputs take the
// IoU=0 branch (point against box).
double giou(const Box& a, const Box& b);

// GIoU on corner-form boxes with analytic partials; ga/gb may be null.
// Subgradients at min/max ties go to the first argument.
double giou_corners_grad(const double a[4], const double b[4], double ga[4], double gb[4]);

}  // namespace qdetr
