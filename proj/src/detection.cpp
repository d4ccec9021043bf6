#include "qdetr/detection.hpp"

#include <algorithm>
#include <cmath>

#include "qdetr/ops.hpp"

namespace qdetr {

DetectionSet DetectionSet::ground_truth(std::vector<int> classes, std::vector<Box> boxes) {
  if (classes.size() != boxes.size()) throw dim_error("DetectionSet: classes/boxes length mismatch");
  DetectionSet s;
  s.classes = std::move(classes);
  s.boxes = std::move(boxes);
  return s;
}

DetectionSet DetectionSet::from_model(const Tensor& logits, const Tensor& box_tensor,
                                      int num_classes) {
  if (logits.ndim() != 2 || logits.cols() != num_classes + 1) {
    throw dim_error("DetectionSet: logits must be [N,C+1], got " + shape_str(logits.shape));
  }
  if (box_tensor.ndim() != 2 || box_tensor.cols() != 4 || box_tensor.rows() != logits.rows()) {
    throw dim_error("DetectionSet: boxes must be [N,4] matching logits");
  }
  DetectionSet s;
  s.logits = logits;
  s.box_tensor = box_tensor;
  s.num_classes = num_classes;
  const int n = logits.rows(), k = num_classes + 1;
  s.probs.resize(static_cast<std::size_t>(n) * k);
  for (int i = 0; i < n; ++i) {
    const float* l = logits.data() + static_cast<std::size_t>(i) * k;
    float mx = l[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, l[j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) denom += std::exp(static_cast<double>(l[j]) - mx);
    float* p = s.probs.data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j)
      p[j] = static_cast<float>(std::exp(static_cast<double>(l[j]) - mx) / denom);
    int arg = 0;
    for (int j = 1; j < num_classes; ++j)
      if (p[j] > p[arg]) arg = j;
    s.classes.push_back(arg);
    s.scores.push_back(p[arg]);
    const float* b = box_tensor.data() + static_cast<std::size_t>(i) * 4;
    s.boxes.push_back(Box{b[0], b[1], b[2], b[3]});
  }
  return s;
}

Tensor match_cost(const DetectionSet& preds, const DetectionSet& gts) {
  if (!preds.has_model_outputs()) throw contract_error("match_cost: predictions lack probabilities");
  const int n = static_cast<int>(preds.size());
  const int ngt = static_cast<int>(gts.size());
  Tensor cost = Tensor::zeros({n, ngt});
  const int k = preds.num_classes + 1;
  for (int j = 0; j < n; ++j) {
    const Box& pb = preds.boxes[static_cast<std::size_t>(j)];
    for (int i = 0; i < ngt; ++i) {
      const Box& gb = gts.boxes[static_cast<std::size_t>(i)];
      const int c = gts.classes[static_cast<std::size_t>(i)];
      const float p = preds.probs[static_cast<std::size_t>(j) * k + c];
      const float l1 = std::abs(pb.cx - gb.cx) + std::abs(pb.cy - gb.cy) +
                       std::abs(pb.w - gb.w) + std::abs(pb.h - gb.h);
      cost.data()[static_cast<std::size_t>(j) * ngt + i] =
          -p + 5.0f * l1 + 2.0f * static_cast<float>(-giou(pb, gb));
    }
  }
  return cost;
}

Tensor detection_loss(const DetectionSet& preds, const DetectionSet& gts, const MatchPlan& plan,
                      float no_object_weight) {
  if (!preds.has_model_outputs()) throw contract_error("detection_loss: predictions lack tensors");
  const int n = static_cast<int>(preds.size());
  const int no_object = preds.num_classes;

  std::vector<int> targets(static_cast<std::size_t>(n), no_object);
  std::vector<float> weights(static_cast<std::size_t>(n), no_object_weight);
  for (const auto& [j, i] : plan.pairs) {
    targets[static_cast<std::size_t>(j)] = gts.classes[static_cast<std::size_t>(i)];
    weights[static_cast<std::size_t>(j)] = 1.0f;
  }
  Tensor loss = cross_entropy_rows(preds.logits, targets, weights);

  const int m = static_cast<int>(plan.pairs.size());
  if (m > 0) {
    const float ngt = static_cast<float>(gts.size());
    std::vector<int> rows;
    std::vector<float> tgt_boxes;
    rows.reserve(static_cast<std::size_t>(m));
    tgt_boxes.reserve(static_cast<std::size_t>(m) * 4);
    for (const auto& [j, i] : plan.pairs) {
      rows.push_back(j);
      const Box& b = gts.boxes[static_cast<std::size_t>(i)];
      tgt_boxes.insert(tgt_boxes.end(), {b.cx, b.cy, b.w, b.h});
    }
    Tensor matched = gather_rows(preds.box_tensor, rows);
    Tensor l1 = scale(sum_abs_diff(matched, tgt_boxes), 5.0f / ngt);
    // 2/Ngt * sum(1 - giou) = 2M/Ngt - 2/Ngt * sum(giou)
    Tensor gsum = sum(giou_pairs(matched, tgt_boxes));
    Tensor gterm = add_scalar(scale(gsum, -2.0f / ngt), 2.0f * static_cast<float>(m) / ngt);
    loss = add(loss, add(l1, gterm));
  }
  return loss;
}

namespace {

struct Det {
  float score;
  int image;
  int index;  // within-image detection index, for deterministic order
  Box box;
};

// 101-point interpolated AP from match flags accumulated over the dataset.
double ap_from_curve(std::vector<std::pair<float, bool>>& scored, int total_gt) {
  if (total_gt == 0) return -1.0;
  if (scored.empty()) return 0.0;
  // already sorted by caller
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const auto& [score, is_tp] : scored) {
    (void)score;
    is_tp ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / total_gt);
  }
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[static_cast<std::size_t>(i)] =
        std::max(precision[static_cast<std::size_t>(i)], precision[static_cast<std::size_t>(i) + 1]);
  double acc = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double want = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), want - 1e-12);
    acc += it == recall.end() ? 0.0 : precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return acc / 101.0;
}

}  // namespace

ApResult ap_eval(const std::vector<DetectionSet>& preds, const std::vector<DetectionSet>& gts) {
  if (preds.size() != gts.size()) throw dim_error("ap_eval: prediction/gt image count mismatch");
  ApResult out;

  int num_classes = 0;
  for (const auto& g : gts)
    for (int c : g.classes) num_classes = std::max(num_classes, c + 1);
  for (const auto& p : preds)
    for (int c : p.classes) num_classes = std::max(num_classes, c + 1);

  int total_gt_all = 0;
  for (const auto& g : gts) total_gt_all += static_cast<int>(g.size());
  if (total_gt_all == 0) {
    out.empty_gt_warning = true;
    return out;
  }

  double ap_sum = 0.0;
  int thresh_count = 0;
  for (int ti = 0; ti < 10; ++ti) {
    const double thresh = 0.5 + 0.05 * ti;
    double class_sum = 0.0;
    int class_count = 0;
    for (int c = 0; c < num_classes; ++c) {
      int total_gt = 0;
      for (const auto& g : gts)
        for (int gc : g.classes) total_gt += gc == c ? 1 : 0;
      if (total_gt == 0) continue;  // class absent from gt: skipped, COCO-style

      std::vector<Det> dets;
      for (std::size_t img = 0; img < preds.size(); ++img) {
        const DetectionSet& p = preds[img];
        for (std::size_t d = 0; d < p.size(); ++d) {
          if (p.classes[d] != c) continue;
          dets.push_back(Det{p.scores.empty() ? 1.0f : p.scores[d], static_cast<int>(img),
                             static_cast<int>(d), p.boxes[d]});
        }
      }
      std::sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.image != b.image) return a.image < b.image;
        return a.index < b.index;
      });

      std::vector<std::vector<char>> gt_used(gts.size());
      for (std::size_t img = 0; img < gts.size(); ++img) gt_used[img].assign(gts[img].size(), 0);

      std::vector<std::pair<float, bool>> scored;
      scored.reserve(dets.size());
      for (const Det& d : dets) {
        const DetectionSet& g = gts[static_cast<std::size_t>(d.image)];
        int best = -1;
        double best_iou = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) {
          if (g.classes[k] != c || gt_used[static_cast<std::size_t>(d.image)][k]) continue;
          const double v = iou(d.box, g.boxes[k]);
          if (v >= thresh && (best < 0 || v > best_iou)) {
            best_iou = v;
            best = static_cast<int>(k);
          }
        }
        if (best >= 0) {
          gt_used[static_cast<std::size_t>(d.image)][static_cast<std::size_t>(best)] = 1;
          scored.emplace_back(d.score, true);
        } else {
          scored.emplace_back(d.score, false);
        }
      }
      const double ap = ap_from_curve(scored, total_gt);
      if (ap >= 0.0) {
        class_sum += ap;
        ++class_count;
      }
    }
    const double ap_t = class_count ? class_sum / class_count : 0.0;
    ap_sum += ap_t;
    ++thresh_count;
    if (ti == 0) out.ap50 = ap_t;
    if (ti == 5) out.ap75 = ap_t;
  }
  out.ap = ap_sum / thresh_count;
  return out;
}

}  // namespace qdetr
