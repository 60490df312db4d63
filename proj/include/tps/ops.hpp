#pragma once

#include <cstddef>
#include <vector>

#include "tps/rng.hpp"
#include "tps/tensor.hpp"

namespace tps {

// Layers expose explicit forward/backward pairs with caller-held activation
// caches; there is no tape. backward() accumulates parameter gradients
// additively and returns the input gradient.

enum class Act { relu, sigmoid };

struct ActCtx {
  Act kind = Act::relu;
  Tensor x;  // relu backward masks on the input
  Tensor y;  // sigmoid backward uses the output
};

Tensor act_forward(const Tensor& x, Act kind, ActCtx* ctx = nullptr);
Tensor act_backward(const ActCtx& ctx, const Tensor& gy);

double sigmoid_scalar(double x);

struct Linear {
  Parameter W;  // out x in
  Parameter b;  // out; empty tensor disables the bias

  static Linear create(const std::string& name, std::size_t out, std::size_t in, bool bias,
                       Rng& rng, double init_scale = -1.0);

  bool has_bias() const { return b.value.numel() > 0; }
  std::size_t out_dim() const { return W.value.dim(0); }
  std::size_t in_dim() const { return W.value.dim(1); }

  Tensor forward(const Tensor& x) const;
  // Accumulates into W.grad (and b.grad); returns the gradient w.r.t. x.
  Tensor backward(const Tensor& x, const Tensor& gy);
  void collect(std::vector<Parameter*>& out);
};

enum class Pad { zero, replicate };

struct Conv2d {
  Parameter K;  // c_out x c_in x k x k
  Parameter b;  // c_out
  std::size_t stride = 1;
  std::size_t pad = 0;
  Pad pad_mode = Pad::zero;

  static Conv2d create(const std::string& name, std::size_t c_out, std::size_t c_in,
                       std::size_t k, std::size_t stride, std::size_t pad, Pad pad_mode,
                       bool bias, Rng& rng);

  std::size_t out_extent(std::size_t in) const { return (in + 2 * pad - K.value.dim(2)) / stride + 1; }

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& gy);
  void collect(std::vector<Parameter*>& out);
};

// c x h x w -> c (mean over locations)
Tensor spatial_mean(const Tensor& x);
Tensor spatial_mean_backward(const Tensor& gy, const std::vector<std::size_t>& in_shape);

// c x h x w -> h*w (mean over channels, flattened row-major)
Tensor channel_mean(const Tensor& x);
Tensor channel_mean_backward(const Tensor& gy, const std::vector<std::size_t>& in_shape);

struct NormCtx {
  Tensor x;
  Tensor y;      // normalized output
  double norm = 0.0;
};

// x / ||x||_2; throws on vanishing norm.
Tensor l2_normalize(const Tensor& x, NormCtx* ctx = nullptr);
Tensor l2_normalize_backward(const NormCtx& ctx, const Tensor& gy);

}  // namespace tps
