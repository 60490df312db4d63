#include "tps/encoders.hpp"

#include <cmath>

namespace tps {

ImageEncoder ImageEncoder::create(std::size_t channels, Rng& rng) {
  require(channels >= 1, "image encoder needs at least one output channel");
  ImageEncoder enc;
  enc.conv1 = Conv2d::create("img.conv1", 16, 3, 3, 2, 1, Pad::replicate, true, rng);
  enc.conv2 = Conv2d::create("img.conv2", 32, 16, 3, 2, 1, Pad::replicate, true, rng);
  enc.conv3 = Conv2d::create("img.conv3", channels, 32, 3, 2, 1, Pad::replicate, true, rng);
  return enc;
}

Tensor ImageEncoder::forward(const Tensor& patch, Ctx* ctx) const {
  require(patch.rank() == 3 && patch.dim(0) == 3,
          "image encoder expects a 3 x h x w patch, got " + patch.shape_str());
  Ctx local;
  Ctx& c = ctx ? *ctx : local;
  c.x = patch;
  Tensor a1 = act_forward(conv1.forward(c.x), Act::relu, &c.r1);
  Tensor a2 = act_forward(conv2.forward(a1), Act::relu, &c.r2);
  return act_forward(conv3.forward(a2), Act::relu, &c.r3);
}

Tensor ImageEncoder::backward(Ctx& ctx, const Tensor& gy) {
  Tensor g = act_backward(ctx.r3, gy);
  g = conv3.backward(ctx.r2.y, g);
  g = act_backward(ctx.r2, g);
  g = conv2.backward(ctx.r1.y, g);
  g = act_backward(ctx.r1, g);
  return conv1.backward(ctx.x, g);
}

void ImageEncoder::collect(std::vector<Parameter*>& out) {
  conv1.collect(out);
  conv2.collect(out);
  conv3.collect(out);
}

FeatureReducer FeatureReducer::create(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
  FeatureReducer r;
  r.proj = Linear::create("reduce", out_channels, in_channels, true, rng);
  return r;
}

Tensor FeatureReducer::forward(const Tensor& fmap, Ctx* ctx) const {
  require(fmap.rank() == 3 && fmap.dim(0) == proj.in_dim(),
          "feature reducer expects " + std::to_string(proj.in_dim()) + " channels, got " +
              fmap.shape_str());
  if (ctx) ctx->x = fmap;
  const std::size_t C = fmap.dim(0), H = fmap.dim(1), W = fmap.dim(2);
  const std::size_t D = proj.out_dim();
  Tensor out({D, H, W});
  Tensor col({C});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      for (std::size_t c = 0; c < C; ++c) col.data[c] = fmap.data[fmap.idx3(c, h, w)];
      Tensor y = proj.forward(col);
      for (std::size_t d = 0; d < D; ++d) out.data[out.idx3(d, h, w)] = y.data[d];
    }
  return out;
}

Tensor FeatureReducer::backward(Ctx& ctx, const Tensor& gy) {
  const Tensor& x = ctx.x;
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t D = proj.out_dim();
  check_same_shape(gy, Tensor({D, H, W}), "FeatureReducer::backward");
  Tensor gx(x.shape);
  Tensor col({C}), gcol({D});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      for (std::size_t c = 0; c < C; ++c) col.data[c] = x.data[x.idx3(c, h, w)];
      for (std::size_t d = 0; d < D; ++d) gcol.data[d] = gy.data[gy.idx3(d, h, w)];
      Tensor g = proj.backward(col, gcol);
      for (std::size_t c = 0; c < C; ++c) gx.data[gx.idx3(c, h, w)] += g.data[c];
    }
  return gx;
}

void FeatureReducer::collect(std::vector<Parameter*>& out) { proj.collect(out); }

TextEncoder TextEncoder::create(std::size_t vocab, std::size_t embed_dim, std::size_t out_dim,
                                std::size_t max_len, Rng& rng) {
  require(vocab >= 1 && embed_dim >= 1 && out_dim >= 1 && max_len >= 1,
          "text encoder dimensions must be positive");
  TextEncoder enc;
  enc.embedding.name = "text.emb";
  enc.embedding.value = Tensor({vocab, embed_dim});
  for (double& v : enc.embedding.value.data) v = rng.normal(0.0, 0.2);
  enc.pos_weight.name = "text.pos";
  enc.pos_weight.value = Tensor({max_len});
  // Linear ramp: later tokens weigh more, so permuting a caption moves its
  // feature. A uniform vector here makes the encoder order-blind.
  for (std::size_t i = 0; i < max_len; ++i)
    enc.pos_weight.value.data[i] = 1.0 + 0.1 * static_cast<double>(i);
  enc.proj = Linear::create("text.proj", out_dim, embed_dim, true, rng);
  return enc;
}

Tensor TextEncoder::forward(const std::vector<int>& tokens, Ctx* ctx) const {
  require(!tokens.empty(), "text encoder: empty token sequence");
  require(tokens.size() <= max_len(), "text encoder: caption longer than the position table (" +
                                          std::to_string(max_len()) + ")");
  const std::size_t V = embedding.value.dim(0);
  const std::size_t E = embedding.value.dim(1);
  Ctx local;
  Ctx& c = ctx ? *ctx : local;
  c.tokens = tokens;
  c.avg = Tensor({E});
  c.weight_sum = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    require(tokens[i] >= 0 && static_cast<std::size_t>(tokens[i]) < V,
            "text encoder: unknown token id " + std::to_string(tokens[i]));
    const double w = pos_weight.value.data[i];
    c.weight_sum += w;
    const std::size_t base = static_cast<std::size_t>(tokens[i]) * E;
    for (std::size_t d = 0; d < E; ++d) c.avg.data[d] += w * embedding.value.data[base + d];
  }
  require(std::abs(c.weight_sum) > 1e-8, "text encoder: position weights sum to zero");
  for (double& v : c.avg.data) v /= c.weight_sum;
  c.proj_out = proj.forward(c.avg);
  return l2_normalize(c.proj_out, &c.norm);
}

void TextEncoder::backward(Ctx& ctx, const Tensor& gy) {
  Tensor gproj = l2_normalize_backward(ctx.norm, gy);
  Tensor gavg = proj.backward(ctx.avg, gproj);
  const std::size_t E = embedding.value.dim(1);
  embedding.value.ensure_grad();
  pos_weight.value.ensure_grad();
  for (std::size_t i = 0; i < ctx.tokens.size(); ++i) {
    const double w = pos_weight.value.data[i];
    const std::size_t base = static_cast<std::size_t>(ctx.tokens[i]) * E;
    double gw = 0.0;
    for (std::size_t d = 0; d < E; ++d) {
      embedding.value.grad[base + d] += gavg.data[d] * w / ctx.weight_sum;
      gw += gavg.data[d] * (embedding.value.data[base + d] - ctx.avg.data[d]) / ctx.weight_sum;
    }
    pos_weight.value.grad[i] += gw;
  }
}

void TextEncoder::collect(std::vector<Parameter*>& out) {
  out.push_back(&embedding);
  out.push_back(&pos_weight);
  proj.collect(out);
}

}  // namespace tps
