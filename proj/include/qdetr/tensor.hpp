#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "qdetr/errors.hpp"

namespace qdetr {

// Dense row-major float tensor. Copies share storage; the autograd tape
// holds handles, so a Tensor behaves like a reference to one graph value.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<float>> values;
  std::shared_ptr<std::vector<float>> grad;  // same length as values when set
  bool requires_grad = false;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  std::size_t numel() const;
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  // 2-D conveniences.
  int rows() const { return shape.at(0); }
  int cols() const { return shape.at(1); }
  bool is_scalar() const { return numel() == 1; }
  float item() const;

  // Handle semantics: a const Tensor is a const handle to shared storage.
  float* data() const { return values->data(); }
  float* grad_data() const { return grad->data(); }

  bool defined() const { return values != nullptr; }
  bool all_finite() const;

  // Allocates a zero grad buffer if missing.
  void ensure_grad();
  void zero_grad();
};

std::string shape_str(const std::vector<int>& shape);

struct TapeNode {
  const char* op = "";
  Tensor out;
  std::function<void()> backprop;  // accumulate d(out) into parents' grads
};

// Eager tape, one per thread. Ops append nodes in construction order;
// backward walks them in reverse, so accumulation is additive by design.
class Graph {
 public:
  static Graph& tape();

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  void push(const char* op, const Tensor& out, std::function<void()> backprop);

  std::size_t mark() const { return nodes_.size(); }
  std::size_t size() const { return nodes_.size(); }

  // backward over the whole tape; loss must be a recorded scalar.
  void backward(const Tensor& loss) { backward_from(loss, 0); }
  // backward over nodes recorded at or after `mark`.
  void backward_from(const Tensor& loss, std::size_t mark);

  void truncate(std::size_t mark);
  void clear() { truncate(0); }

  // First tape value holding a NaN/Inf, as "node#<i>(<op>)"; empty if clean.
  std::string first_nonfinite() const;

 private:
  std::vector<TapeNode> nodes_;
  bool recording_ = true;
};

struct NoGradGuard {
  NoGradGuard() : prev_(Graph::tape().recording()) { Graph::tape().set_recording(false); }
  ~NoGradGuard() { Graph::tape().set_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Max over coordinates of |analytic - central difference| / (|cd| + 1e-8).
// f must build a scalar from x on the current tape.
double check_gradients(const std::function<Tensor(const Tensor&)>& f, Tensor& x,
                       double h = 1e-4);

}  // namespace qdetr
