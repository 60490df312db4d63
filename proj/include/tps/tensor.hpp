#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tps/common.hpp"

namespace tps {

// Dense row-major double tensor with an optional same-shape gradient
// accumulator. The whole pipeline runs in double so finite-difference
// checks resolve real errors instead of float noise.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means absent

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0);
  static Tensor from(std::vector<std::size_t> s, std::vector<double> values);
  static Tensor vec(std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const;

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::size_t idx2(std::size_t i, std::size_t j) const { return i * shape[1] + j; }
  std::size_t idx3(std::size_t c, std::size_t y, std::size_t x) const {
    return (c * shape[1] + y) * shape[2] + x;
  }
  std::size_t idx4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
    return ((a * shape[1] + b) * shape[2] + c) * shape[3] + d;
  }

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad();
  void zero_grad();

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;
};

// Named trainable tensor. Names are unique within a model and double as
// checkpoint record keys.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);

void check_same_shape(const Tensor& a, const Tensor& b, const char* where);

}  // namespace tps
