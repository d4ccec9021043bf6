#pragma once

#include <utility>
#include <vector>

#include "qdetr/tensor.hpp"

namespace qdetr {

struct MatchPlan {
  std::vector<std::pair<int, int>> pairs;  // (prediction row, target col), row-ascending
  std::vector<int> unmatched_predictions;  // rows left without a column
};

// Minimum-cost assignment of min(n,m) pairs on an n x m cost matrix.
// Rectangular inputs are padded internally. Among equal-cost optima the
// lexicographically smallest assignment is returned (rows in order, lower
// column index first, unmatched sorting last); ties are compared with a
// 1e-9-scaled tolerance.
MatchPlan hungarian(const Tensor& cost);

}  // namespace qdetr
