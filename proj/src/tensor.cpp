#include "tps/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace tps {

namespace {
std::size_t product(const std::vector<std::size_t>& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)) {
  data.assign(product(shape), fill);
}

Tensor Tensor::from(std::vector<std::size_t> s, std::vector<double> values) {
  Tensor t;
  t.shape = std::move(s);
  require(product(t.shape) == values.size(), "Tensor::from: shape/data mismatch");
  t.data = std::move(values);
  return t;
}

Tensor Tensor::vec(std::vector<double> values) {
  Tensor t;
  t.shape = {values.size()};
  t.data = std::move(values);
  return t;
}

std::size_t Tensor::dim(std::size_t i) const {
  require(i < shape.size(), "Tensor::dim: axis out of range");
  return shape[i];
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

double dot(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data) s += v * v;
  return std::sqrt(s);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (!a.same_shape(b))
    fail(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace tps
