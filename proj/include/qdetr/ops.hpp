#pragma once

#include <vector>

#include "qdetr/tensor.hpp"

namespace qdetr {

// Reverse-mode ops over the thread-local tape. Shapes are checked up front;
// every op throws dim_error on mismatch. Forward math is float32.

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                        // 2-D
Tensor add(const Tensor& a, const Tensor& b);             // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);             // elementwise
Tensor scale(const Tensor& a, float c);
Tensor add_scalar(const Tensor& a, float c);
Tensor add_rowvec(const Tensor& x, const Tensor& v);      // [r,c] + [c]
Tensor mul_rowvec(const Tensor& x, const Tensor& v);      // [r,c] * [c]

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax_rows(const Tensor& x);                     // row max subtracted

// (x - mean)/sqrt(var + eps) with biased variance, per row / per column.
Tensor standardize_rows(const Tensor& x, float eps);
Tensor standardize_cols(const Tensor& x, float eps);

// Per-channel RPReLU over [C,H,W]: max(x-g,0) + slope*min(x-g,0) + zeta.
Tensor rprelu(const Tensor& x, const Tensor& gamma, const Tensor& slope, const Tensor& zeta);

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
// w layout [Cin,Cout,kh,kw]; out extent (h-1)*stride - 2*pad + k.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                        int pad);

Tensor sum(const Tensor& x);                              // -> scalar
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);

// Zero-copy: shares values and grad, rewrites the shape.
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor chw_to_rows(const Tensor& x);                      // [C,H,W] -> [H*W,C]
Tensor rows_to_chw(const Tensor& x, int h, int w);        // [H*W,C] -> [C,h,w]

// Weighted-mean cross entropy over rows of logits; weights[i] >= 0.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<float>& weights);

// sum |x - t| against a fixed target (no gradient into t).
Tensor sum_abs_diff(const Tensor& x, const std::vector<float>& target);

// Per-row GIoU of predicted cxcywh boxes [M,4] against fixed boxes [M,4].
Tensor giou_pairs(const Tensor& pred, const std::vector<float>& target);

// Per-row Euclidean distance ||x_r - y_r||_2 against a fixed matrix.
Tensor euclid_rows(const Tensor& x, const std::vector<float>& y);

// Fused multi-head attention pieces. Heads split the feature dim evenly and
// stack along rows, so a row softmax normalizes each head separately.
// scores[h*Tq+t, s] = <q[t,h], k[s,h]> / sqrt(dh)
Tensor mha_scores(const Tensor& q, const Tensor& k, int heads);
// out[t, h*dh+j] = sum_s a[h*Tq+t, s] * v[s, h*dh+j]
Tensor mha_apply(const Tensor& a, const Tensor& v, int heads);

}  // namespace qdetr
