#include "qdetr/tensor.hpp"

#include <cmath>
#include <sstream>

namespace qdetr {

namespace {
std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw dim_error("tensor: negative extent in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}
}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t;
  const std::size_t n = shape_numel(shape);
  t.shape = std::move(shape);
  t.values = std::make_shared<std::vector<float>>(n, value);
  t.requires_grad = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  if (n != data.size()) {
    throw dim_error("tensor: " + shape_str(shape) + " wants " + std::to_string(n) +
                    " values, got " + std::to_string(data.size()));
  }
  Tensor t;
  t.shape = std::move(shape);
  t.values = std::make_shared<std::vector<float>>(std::move(data));
  t.requires_grad = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

std::size_t Tensor::numel() const { return values ? values->size() : 0; }

float Tensor::item() const {
  if (!is_scalar()) throw contract_error("item: tensor is not scalar, shape " + shape_str(shape));
  return (*values)[0];
}

bool Tensor::all_finite() const {
  for (float v : *values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::ensure_grad() {
  if (!grad) grad = std::make_shared<std::vector<float>>(numel(), 0.0f);
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0f);
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Graph& Graph::tape() {
  thread_local Graph g;
  return g;
}

void Graph::push(const char* op, const Tensor& out, std::function<void()> backprop) {
  TapeNode n;
  n.op = op;
  n.out = out;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
}

void Graph::backward_from(const Tensor& loss, std::size_t mark) {
  if (!loss.is_scalar()) {
    throw contract_error("backward: loss must be scalar, shape " + shape_str(loss.shape));
  }
  if (!loss.requires_grad || !loss.grad) {
    throw contract_error("backward: loss was not recorded with requires_grad");
  }
  (*loss.grad)[0] += 1.0f;
  for (std::size_t i = nodes_.size(); i > mark; --i) {
    const TapeNode& n = nodes_[i - 1];
    if (n.backprop) n.backprop();
  }
}

void Graph::truncate(std::size_t mark) {
  if (mark < nodes_.size()) nodes_.resize(mark);
}

std::string Graph::first_nonfinite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].out.all_finite()) {
      return "node#" + std::to_string(i) + "(" + nodes_[i].op + ")";
    }
  }
  return "";
}

double check_gradients(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double h) {
  Graph& g = Graph::tape();
  const std::size_t mark = g.mark();

  x.requires_grad = true;
  x.ensure_grad();
  x.zero_grad();
  Tensor y = f(x);
  g.backward_from(y, mark);
  std::vector<float> analytic = *x.grad;
  g.truncate(mark);

  NoGradGuard ng;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float saved = (*x.values)[i];
    (*x.values)[i] = saved + static_cast<float>(h);
    const double up = f(x).item();
    (*x.values)[i] = saved - static_cast<float>(h);
    const double down = f(x).item();
    (*x.values)[i] = saved;
    const double cd = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - cd) / (std::abs(cd) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace qdetr
