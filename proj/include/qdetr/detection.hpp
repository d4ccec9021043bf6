#pragma once

#include <vector>

#include "qdetr/boxes.hpp"
#include "qdetr/hungarian.hpp"
#include "qdetr/tensor.hpp"

namespace qdetr {

// One set of (class, box) pairs: ground truth, student or teacher output.
// Predictions additionally carry the model tensors and cached softmax probs.
struct DetectionSet {
  std::vector<int> classes;   // gt labels, or argmax foreground class
  std::vector<Box> boxes;
  std::vector<float> scores;  // predictions: max foreground probability

  Tensor logits;              // [N, C+1], predictions only
  Tensor box_tensor;          // [N, 4] cxcywh, predictions only
  std::vector<float> probs;   // [N*(C+1)] row softmax, predictions only
  int num_classes = 0;        // C foreground classes

  std::size_t size() const { return boxes.size(); }
  bool has_model_outputs() const { return logits.defined(); }

  static DetectionSet ground_truth(std::vector<int> classes, std::vector<Box> boxes);
  // Derives classes/scores/probs from logits+boxes (softmax over C+1,
  // argmax and score over the C foreground columns).
  static DetectionSet from_model(const Tensor& logits, const Tensor& box_tensor, int num_classes);
};

// cost[j,i] = -prob_j(class_i) + 5*L1(b_j,b_i) + 2*(-GIoU(b_j,b_i)).
// Empty gts give an [N,0] matrix.
Tensor match_cost(const DetectionSet& preds, const DetectionSet& gts);

// Weighted CE over all proposals (unmatched -> no-object, weight 0.1) plus
// (5*L1 + 2*(1-GIoU)) summed over matched pairs, / N_gt. Differentiable.
Tensor detection_loss(const DetectionSet& preds, const DetectionSet& gts, const MatchPlan& plan,
                      float no_object_weight = 0.1f);

struct ApResult {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  bool empty_gt_warning = false;
};

// COCO-style 101-point interpolated AP over IoU 0.50:0.05:0.95, averaged
// over classes that have ground truth. All detections kept.
ApResult ap_eval(const std::vector<DetectionSet>& preds, const std::vector<DetectionSet>& gts);

}  // namespace qdetr
