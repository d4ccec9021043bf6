#include "qdetr/drd.hpp"

#include <cmath>

#include "qdetr/ops.hpp"

namespace qdetr {

double gaussian_entropy(double variance) {
  if (variance < 0.0) throw contract_error("gaussian_entropy: negative variance");
  return 0.5 * std::log(2.0 * 3.14159265358979323846 * 2.71828182845904523536 * variance);
}

Tensor distribution_align(const Tensor& q, const AlignParams& p) {
  return add_rowvec(mul_rowvec(standardize_cols(q, AlignParams::kEps), p.gamma), p.beta);
}

std::vector<double> foreground_coincidence(const DetectionSet& gt, const DetectionSet& student) {
  if (student.size() == 0) throw contract_error("foreground_coincidence: empty student set");
  std::vector<double> g(gt.size(), -1.0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (std::size_t j = 0; j < student.size(); ++j) {
      g[i] = std::max(g[i], giou(gt.boxes[i], student.boxes[j]));
    }
  }
  return g;
}

std::vector<int> select_queries(const DetectionSet& gt, const DetectionSet& student,
                                const std::vector<double>& g, float tau, bool universal) {
  if (g.size() != gt.size()) throw contract_error("select_queries: G length mismatch");
  std::vector<int> kept;
  for (std::size_t j = 0; j < student.size(); ++j) {
    bool any = false;
    bool all_ok = gt.size() > 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const bool ok = giou(gt.boxes[i], student.boxes[j]) > static_cast<double>(tau) * g[i];
      any = any || ok;
      all_ok = all_ok && ok;
    }
    if (universal ? all_ok : any) kept.push_back(static_cast<int>(j));
  }
  return kept;
}

std::vector<DistillPair> match_to_teacher(const std::vector<int>& kept,
                                          const DetectionSet& student,
                                          const DetectionSet& teacher) {
  std::vector<DistillPair> pairs;
  if (teacher.size() == 0) return pairs;
  for (int j : kept) {
    const Box& sb = student.boxes[static_cast<std::size_t>(j)];
    int best_k = 0;
    double best_score = -1e30;
    for (std::size_t k = 0; k < teacher.size(); ++k) {
      const Box& tb = teacher.boxes[k];
      const double l1 = std::abs(sb.cx - tb.cx) + std::abs(sb.cy - tb.cy) +
                        std::abs(sb.w - tb.w) + std::abs(sb.h - tb.h);
      const double score = 2.0 * giou(sb, tb) - 5.0 * l1;
      if (score > best_score) {
        best_score = score;
        best_k = static_cast<int>(k);
      }
    }
    pairs.push_back(DistillPair{j, best_k});
  }
  return pairs;
}

Tensor drd_loss(const std::vector<DistillPair>& pairs, const std::vector<Tensor>& student_d,
                const std::vector<Tensor>& teacher_d, const Tensor* projection_w) {
  if (student_d.size() != teacher_d.size()) {
    throw dim_error("drd_loss: layer count mismatch between student and teacher");
  }
  if (pairs.empty() || student_d.empty()) return Tensor::scalar(0.0f);

  std::vector<int> srows;
  srows.reserve(pairs.size());
  for (const DistillPair& p : pairs) srows.push_back(p.student_index);

  Tensor acc = Tensor::scalar(0.0f);
  for (std::size_t layer = 0; layer < student_d.size(); ++layer) {
    Tensor srow = gather_rows(student_d[layer], srows);
    if (projection_w) srow = matmul(srow, *projection_w);
    const Tensor& td = teacher_d[layer];
    if (srow.cols() != td.cols()) {
      throw dim_error("drd_loss: feature width mismatch (projection required)");
    }
    std::vector<float> trows;
    trows.reserve(pairs.size() * static_cast<std::size_t>(td.cols()));
    for (const DistillPair& p : pairs) {
      const float* r = td.data() + static_cast<std::size_t>(p.teacher_index) * td.cols();
      trows.insert(trows.end(), r, r + td.cols());
    }
    Tensor dist = euclid_rows(srow, trows);
    acc = add(acc, scale(sum(dist), 1.0f / static_cast<float>(pairs.size())));
  }
  return scale(acc, 1.0f / static_cast<float>(student_d.size()));
}

Tensor total_loss(const Tensor& detection, const Tensor& drd, float lambda) {
  return add(detection, scale(drd, lambda));
}

}  // namespace qdetr
