#pragma once

#include <vector>

#include "qdetr/detection.hpp"
#include "qdetr/tensor.hpp"

namespace qdetr {

// Learnable affine of the query standardization, one per student decoder layer.
struct AlignParams {
  Tensor gamma;  // [d_model], init 1
  Tensor beta;   // [d_model], init 0
  static constexpr float kEps = 1e-5f;
};

// One kept student query paired with its best teacher query.
struct DistillPair {
  int student_index = -1;
  int teacher_index = -1;
};

// Distillation hyper-parameters.
struct IBTerms {
  float tau = 0.6f;
  float lambda = 2.5f;
  // Eq. 11 quantifier reading: keep a query if the condition holds for at
  // least one ground truth (default) or for all of them.
  bool universal_selection = false;
};

// Differential entropy of a Gaussian, 0.5*log(2*pi*e*variance).
double gaussian_entropy(double variance);

// (q - mu)/sqrt(var + eps) * gamma + beta with per-feature statistics taken
// across the N queries. Differentiable through mu and var.
Tensor distribution_align(const Tensor& q, const AlignParams& p);

// G_i = max_j GIoU(gt_i, student_j). Student set must be non-empty.
std::vector<double> foreground_coincidence(const DetectionSet& gt, const DetectionSet& student);

// Indices j with GIoU(gt_i, student_j) > tau*G_i for some i (or all i).
std::vector<int> select_queries(const DetectionSet& gt, const DetectionSet& student,
                                const std::vector<double>& g, float tau,
                                bool universal = false);

// Per kept student query, argmax_k of 2*GIoU - 5*L1 over the teacher set;
// ties go to the lowest teacher index.
std::vector<DistillPair> match_to_teacher(const std::vector<int>& kept,
                                          const DetectionSet& student,
                                          const DetectionSet& teacher);

// Mean over decoder layers of the mean pairwise distance
// ||D_student[j] - D_teacher[k]||_2. Teacher features are constants.
// Empty pairs give an exact zero with no gradient. If projection_w is given,
// student rows are projected to the teacher width first.
Tensor drd_loss(const std::vector<DistillPair>& pairs, const std::vector<Tensor>& student_d,
                const std::vector<Tensor>& teacher_d, const Tensor* projection_w = nullptr);

// L_GT + lambda * L_DRD.
Tensor total_loss(const Tensor& detection, const Tensor& drd, float lambda);

}  // namespace qdetr
