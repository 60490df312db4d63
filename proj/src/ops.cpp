#include "tps/ops.hpp"

#include <algorithm>
#include <cmath>

namespace tps {

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor act_forward(const Tensor& x, Act kind, ActCtx* ctx) {
  Tensor y = x;
  if (kind == Act::relu) {
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  } else {
    for (double& v : y.data) v = sigmoid_scalar(v);
  }
  if (ctx) {
    ctx->kind = kind;
    ctx->x = x;
    ctx->y = y;
  }
  return y;
}

Tensor act_backward(const ActCtx& ctx, const Tensor& gy) {
  check_same_shape(ctx.x, gy, "act_backward");
  Tensor gx(ctx.x.shape);
  if (ctx.kind == Act::relu) {
    // subgradient at 0 is 0
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] = ctx.x[i] > 0.0 ? gy[i] : 0.0;
  } else {
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      const double s = ctx.y[i];
      gx[i] = gy[i] * s * (1.0 - s);
    }
  }
  return gx;
}

Linear Linear::create(const std::string& name, std::size_t out, std::size_t in, bool bias,
                      Rng& rng, double init_scale) {
  Linear lin;
  const double scale = init_scale > 0.0 ? init_scale : std::sqrt(2.0 / static_cast<double>(in));
  lin.W.name = name + ".W";
  lin.W.value = Tensor({out, in});
  for (double& v : lin.W.value.data) v = rng.normal(0.0, scale);
  if (bias) {
    lin.b.name = name + ".b";
    lin.b.value = Tensor({out});
  }
  return lin;
}

Tensor Linear::forward(const Tensor& x) const {
  require(x.rank() == 1 && x.dim(0) == in_dim(),
          "Linear::forward: input " + x.shape_str() + " does not match weight " + W.value.shape_str());
  const std::size_t out = out_dim(), in = in_dim();
  Tensor y({out});
  for (std::size_t o = 0; o < out; ++o) {
    double acc = has_bias() ? b.value[o] : 0.0;
    const double* w = &W.value.data[o * in];
    for (std::size_t i = 0; i < in; ++i) acc += w[i] * x[i];
    y[o] = acc;
  }
  return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& gy) {
  const std::size_t out = out_dim(), in = in_dim();
  require(gy.rank() == 1 && gy.dim(0) == out, "Linear::backward: bad upstream shape");
  W.value.ensure_grad();
  if (has_bias()) b.value.ensure_grad();
  Tensor gx({in});
  for (std::size_t o = 0; o < out; ++o) {
    const double g = gy[o];
    if (has_bias()) b.value.grad[o] += g;
    const double* w = &W.value.data[o * in];
    double* wg = &W.value.grad[o * in];
    for (std::size_t i = 0; i < in; ++i) {
      wg[i] += g * x[i];
      gx[i] += g * w[i];
    }
  }
  return gx;
}

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&W);
  if (has_bias()) out.push_back(&b);
}

Conv2d Conv2d::create(const std::string& name, std::size_t c_out, std::size_t c_in,
                      std::size_t k, std::size_t stride, std::size_t pad, Pad pad_mode,
                      bool bias, Rng& rng) {
  Conv2d conv;
  conv.stride = stride;
  conv.pad = pad;
  conv.pad_mode = pad_mode;
  conv.K.name = name + ".K";
  conv.K.value = Tensor({c_out, c_in, k, k});
  const double scale = std::sqrt(2.0 / static_cast<double>(c_in * k * k));
  for (double& v : conv.K.value.data) v = rng.normal(0.0, scale);
  if (bias) {
    conv.b.name = name + ".b";
    conv.b.value = Tensor({c_out});
  }
  return conv;
}

Tensor Conv2d::forward(const Tensor& x) const {
  require(x.rank() == 3 && x.dim(0) == K.value.dim(1),
          "Conv2d::forward: input " + x.shape_str() + " does not match kernel " + K.value.shape_str());
  const std::size_t c_out = K.value.dim(0), c_in = K.value.dim(1), k = K.value.dim(2);
  const std::size_t h = x.dim(1), w = x.dim(2);
  require(h + 2 * pad >= k && w + 2 * pad >= k, "Conv2d::forward: kernel exceeds padded extent");
  const std::size_t oh = out_extent(h), ow = out_extent(w);
  const bool has_b = b.value.numel() > 0;
  Tensor y({c_out, oh, ow});
  for (std::size_t co = 0; co < c_out; ++co) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = has_b ? b.value[co] : 0.0;
        for (std::size_t ci = 0; ci < c_in; ++ci) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            long sy = iy;
            if (pad_mode == Pad::replicate) sy = std::clamp<long>(iy, 0, static_cast<long>(h) - 1);
            else if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              long sx = ix;
              if (pad_mode == Pad::replicate) sx = std::clamp<long>(ix, 0, static_cast<long>(w) - 1);
              else if (ix < 0 || ix >= static_cast<long>(w)) continue;
              acc += K.value[K.value.idx4(co, ci, ky, kx)] *
                     x[x.idx3(ci, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx))];
            }
          }
        }
        y[y.idx3(co, oy, ox)] = acc;
      }
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& gy) {
  const std::size_t c_out = K.value.dim(0), c_in = K.value.dim(1), k = K.value.dim(2);
  const std::size_t h = x.dim(1), w = x.dim(2);
  const std::size_t oh = out_extent(h), ow = out_extent(w);
  require(gy.rank() == 3 && gy.dim(0) == c_out && gy.dim(1) == oh && gy.dim(2) == ow,
          "Conv2d::backward: bad upstream shape");
  K.value.ensure_grad();
  const bool has_b = b.value.numel() > 0;
  if (has_b) b.value.ensure_grad();
  Tensor gx(x.shape);
  for (std::size_t co = 0; co < c_out; ++co) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double g = gy[gy.idx3(co, oy, ox)];
        if (g == 0.0) continue;
        if (has_b) b.value.grad[co] += g;
        for (std::size_t ci = 0; ci < c_in; ++ci) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            long sy = iy;
            if (pad_mode == Pad::replicate) sy = std::clamp<long>(iy, 0, static_cast<long>(h) - 1);
            else if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              long sx = ix;
              if (pad_mode == Pad::replicate) sx = std::clamp<long>(ix, 0, static_cast<long>(w) - 1);
              else if (ix < 0 || ix >= static_cast<long>(w)) continue;
              const std::size_t xi = x.idx3(ci, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
              K.value.grad[K.value.idx4(co, ci, ky, kx)] += g * x[xi];
              gx[xi] += g * K.value[K.value.idx4(co, ci, ky, kx)];
            }
          }
        }
      }
    }
  }
  return gx;
}

void Conv2d::collect(std::vector<Parameter*>& out) {
  out.push_back(&K);
  if (b.value.numel() > 0) out.push_back(&b);
}

Tensor spatial_mean(const Tensor& x) {
  require(x.rank() == 3, "spatial_mean: expected rank-3 input");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor y({c});
  for (std::size_t ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += x[ci * hw + i];
    y[ci] = acc / static_cast<double>(hw);
  }
  return y;
}

Tensor spatial_mean_backward(const Tensor& gy, const std::vector<std::size_t>& in_shape) {
  Tensor gx(in_shape);
  const std::size_t c = in_shape[0], hw = in_shape[1] * in_shape[2];
  for (std::size_t ci = 0; ci < c; ++ci) {
    const double g = gy[ci] / static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) gx[ci * hw + i] = g;
  }
  return gx;
}

Tensor channel_mean(const Tensor& x) {
  require(x.rank() == 3, "channel_mean: expected rank-3 input");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor y({hw});
  for (std::size_t i = 0; i < hw; ++i) {
    double acc = 0.0;
    for (std::size_t ci = 0; ci < c; ++ci) acc += x[ci * hw + i];
    y[i] = acc / static_cast<double>(c);
  }
  return y;
}

Tensor channel_mean_backward(const Tensor& gy, const std::vector<std::size_t>& in_shape) {
  Tensor gx(in_shape);
  const std::size_t c = in_shape[0], hw = in_shape[1] * in_shape[2];
  for (std::size_t i = 0; i < hw; ++i) {
    const double g = gy[i] / static_cast<double>(c);
    for (std::size_t ci = 0; ci < c; ++ci) gx[ci * hw + i] = g;
  }
  return gx;
}

Tensor l2_normalize(const Tensor& x, NormCtx* ctx) {
  const double n = l2_norm(x);
  require(n > 1e-12, "l2_normalize: vanishing norm");
  Tensor y = x;
  for (double& v : y.data) v /= n;
  if (ctx) {
    ctx->x = x;
    ctx->y = y;
    ctx->norm = n;
  }
  return y;
}

Tensor l2_normalize_backward(const NormCtx& ctx, const Tensor& gy) {
  check_same_shape(ctx.y, gy, "l2_normalize_backward");
  const double proj = dot(ctx.y, gy);
  Tensor gx(ctx.x.shape);
  for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] = (gy[i] - ctx.y[i] * proj) / ctx.norm;
  return gx;
}

}  // namespace tps
