#include "tps/tpan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace tps {

ChannelAttention ChannelAttention::create(std::size_t dim, std::size_t reduction, Rng& rng) {
  require(reduction >= 1 && dim % reduction == 0,
          "channel attention: reduction must divide the feature dimension (" +
              std::to_string(dim) + " % " + std::to_string(reduction) + ")");
  ChannelAttention ca;
  ca.fc1 = Linear::create("ca.fc1", dim / reduction, dim, false, rng);
  ca.fc2 = Linear::create("ca.fc2", dim, dim / reduction, false, rng);
  return ca;
}

Tensor ChannelAttention::forward(const Tensor& f_c, Ctx* ctx) const {
  Ctx local;
  Ctx& c = ctx ? *ctx : local;
  c.f_c = f_c;
  Tensor mid = act_forward(fc1.forward(f_c), Act::relu, &c.relu);
  return act_forward(fc2.forward(mid), Act::sigmoid, &c.sig);
}

Tensor ChannelAttention::backward(Ctx& ctx, const Tensor& gy) {
  Tensor g = act_backward(ctx.sig, gy);
  g = fc2.backward(ctx.relu.y, g);
  g = act_backward(ctx.relu, g);
  return fc1.backward(ctx.f_c, g);
}

void ChannelAttention::collect(std::vector<Parameter*>& out) {
  fc1.collect(out);
  fc2.collect(out);
}

Tensor apply_channel_attention(const Tensor& a_c, const Tensor& f_cmap) {
  require(f_cmap.rank() == 3 && a_c.rank() == 1 && a_c.dim(0) == f_cmap.dim(0),
          "apply_channel_attention: gate/map channel mismatch");
  Tensor out(f_cmap.shape);
  const std::size_t hw = f_cmap.dim(1) * f_cmap.dim(2);
  for (std::size_t d = 0; d < f_cmap.dim(0); ++d)
    for (std::size_t i = 0; i < hw; ++i)
      out.data[d * hw + i] = a_c.data[d] * f_cmap.data[d * hw + i];
  return out;
}

void apply_channel_attention_backward(const Tensor& a_c, const Tensor& f_cmap, const Tensor& gy,
                                      Tensor& ga_c, Tensor& gf_cmap) {
  check_same_shape(gy, f_cmap, "apply_channel_attention_backward");
  if (ga_c.numel() == 0) ga_c = Tensor(a_c.shape);
  if (gf_cmap.numel() == 0) gf_cmap = Tensor(f_cmap.shape);
  const std::size_t hw = f_cmap.dim(1) * f_cmap.dim(2);
  for (std::size_t d = 0; d < f_cmap.dim(0); ++d)
    for (std::size_t i = 0; i < hw; ++i) {
      ga_c.data[d] += gy.data[d * hw + i] * f_cmap.data[d * hw + i];
      gf_cmap.data[d * hw + i] += gy.data[d * hw + i] * a_c.data[d];
    }
}

SpatialAttention SpatialAttention::create(std::size_t hw, std::size_t reduction, Rng& rng) {
  require(reduction >= 1 && hw % reduction == 0,
          "spatial attention: reduction must divide H*W (" + std::to_string(hw) + " % " +
              std::to_string(reduction) + ")");
  SpatialAttention sa;
  sa.fc1 = Linear::create("sa.fc1", hw / reduction, hw, false, rng);
  sa.fc2 = Linear::create("sa.fc2", hw, hw / reduction, false, rng);
  return sa;
}

Tensor SpatialAttention::forward(const Tensor& fhat, Ctx* ctx) const {
  require(fhat.rank() == 3, "spatial attention expects a c x h x w map");
  require(fhat.dim(1) * fhat.dim(2) == fc1.in_dim(),
          "spatial attention: H*W mismatch, got " + fhat.shape_str());
  Ctx local;
  Ctx& c = ctx ? *ctx : local;
  c.in_shape = fhat.shape;
  c.f_s = channel_mean(fhat);
  Tensor mid = act_forward(fc1.forward(c.f_s), Act::relu, &c.relu);
  Tensor flat = act_forward(fc2.forward(mid), Act::sigmoid, &c.sig);
  Tensor map = Tensor({fhat.dim(1), fhat.dim(2)});
  map.data = flat.data;
  return map;
}

Tensor SpatialAttention::backward(Ctx& ctx, const Tensor& g_map) {
  Tensor g_flat = Tensor({ctx.in_shape[1] * ctx.in_shape[2]});
  g_flat.data = g_map.data;
  Tensor g = act_backward(ctx.sig, g_flat);
  g = fc2.backward(ctx.relu.y, g);
  g = act_backward(ctx.relu, g);
  g = fc1.backward(ctx.f_s, g);
  return channel_mean_backward(g, ctx.in_shape);
}

void SpatialAttention::collect(std::vector<Parameter*>& out) {
  fc1.collect(out);
  fc2.collect(out);
}

PrototypeTable PrototypeTable::create(std::size_t n, std::size_t dim, double lambda) {
  require(n >= 1 && dim >= 1, "prototype table needs positive extent");
  require(lambda >= 0.0 && lambda < 1.0, "prototype update ratio must lie in [0,1)");
  PrototypeTable tbl;
  tbl.P = Tensor({n, dim});
  tbl.touched.assign(n, 0);
  tbl.lambda = lambda;
  return tbl;
}

bool PrototypeTable::is_initialized(std::size_t k) const {
  require(k < size(), "prototype index out of range");
  return touched[k] != 0;
}

Tensor PrototypeTable::row(std::size_t k) const {
  require(k < size(), "prototype index out of range");
  Tensor r({dim()});
  for (std::size_t d = 0; d < dim(); ++d) r.data[d] = P.data[P.idx2(k, d)];
  return r;
}

void PrototypeTable::update(std::size_t k, const Tensor& f_t) {
  require(k < size(), "prototype index out of range");
  require(f_t.rank() == 1 && f_t.dim(0) == dim(), "prototype update dimension mismatch");
  if (!touched[k]) {
    for (std::size_t d = 0; d < dim(); ++d) P.data[P.idx2(k, d)] = f_t.data[d];
    touched[k] = 1;
    return;
  }
  for (std::size_t d = 0; d < dim(); ++d)
    P.data[P.idx2(k, d)] = lambda * P.data[P.idx2(k, d)] + (1.0 - lambda) * f_t.data[d];
}

Tensor target_map(const Tensor& target, const Tensor& f_cmap) {
  require(target.rank() == 1 && f_cmap.rank() == 3 && target.dim(0) == f_cmap.dim(0),
          "target_map: dimension mismatch");
  const double tnorm = l2_norm(target);
  require(tnorm > 1e-12, "target_map: zero prototype");
  const std::size_t D = f_cmap.dim(0), H = f_cmap.dim(1), W = f_cmap.dim(2);
  Tensor map({H, W});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      double dp = 0.0, nn = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        const double v = f_cmap.data[f_cmap.idx3(d, h, w)];
        dp += v * target.data[d];
        nn += v * v;
      }
      const double norm = std::sqrt(nn);
      map.data[map.idx2(h, w)] = norm <= 1e-12 ? 0.0 : std::max(0.0, dp / (norm * tnorm));
    }
  return map;
}

double guidance_loss(const Tensor& a_target, const Tensor& a) {
  check_same_shape(a_target, a, "guidance_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double diff = a_target.data[i] - a.data[i];
    acc += diff * diff;
  }
  return acc;
}

void guidance_loss_backward(const Tensor& a_target, const Tensor& a, double g, Tensor& g_a) {
  check_same_shape(a_target, a, "guidance_loss_backward");
  if (g_a.numel() == 0) g_a = Tensor(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i)
    g_a.data[i] += g * 2.0 * (a.data[i] - a_target.data[i]);
}

Tensor attend_pool(const Tensor& fhat, const Tensor& a, AttendPoolCtx* ctx) {
  require(fhat.rank() == 3 && a.rank() == 2 && fhat.dim(1) == a.dim(0) && fhat.dim(2) == a.dim(1),
          "attend_pool: map shapes disagree");
  AttendPoolCtx local;
  AttendPoolCtx& c = ctx ? *ctx : local;
  c.fhat = fhat;
  c.a = a;
  const std::size_t D = fhat.dim(0), hw = a.numel();
  double asum = 0.0;
  for (double v : a.data) asum += v;
  require(std::abs(asum) > 1e-12, "attend_pool: attention mass vanished");
  c.a_sum = asum;
  c.pooled = Tensor({D});
  for (std::size_t d = 0; d < D; ++d) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += a.data[i] * fhat.data[d * hw + i];
    c.pooled.data[d] = acc / asum;
  }
  return l2_normalize(c.pooled, &c.norm);
}

void attend_pool_backward(AttendPoolCtx& ctx, const Tensor& gy, Tensor& g_fhat, Tensor& g_a) {
  const std::size_t D = ctx.fhat.dim(0), hw = ctx.a.numel();
  if (g_fhat.numel() == 0) g_fhat = Tensor(ctx.fhat.shape);
  if (g_a.numel() == 0) g_a = Tensor(ctx.a.shape);
  Tensor g_pooled = l2_normalize_backward(ctx.norm, gy);
  double g_sum = 0.0;
  for (std::size_t d = 0; d < D; ++d) g_sum -= g_pooled.data[d] * ctx.pooled.data[d] / ctx.a_sum;
  for (std::size_t d = 0; d < D; ++d) {
    const double gn = g_pooled.data[d] / ctx.a_sum;
    for (std::size_t i = 0; i < hw; ++i) {
      g_fhat.data[d * hw + i] += gn * ctx.a.data[i];
      g_a.data[i] += gn * ctx.fhat.data[d * hw + i];
    }
  }
  for (std::size_t i = 0; i < hw; ++i) g_a.data[i] += g_sum;
}

std::string guidance_mode_name(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::baseline: return "baseline";
    case GuidanceMode::tpan: return "tpan";
    case GuidanceMode::tian: return "tian";
  }
  fail("unreachable guidance mode");
}

GuidanceMode guidance_mode_from_name(const std::string& name) {
  if (name == "baseline") return GuidanceMode::baseline;
  if (name == "tpan") return GuidanceMode::tpan;
  if (name == "tian") return GuidanceMode::tian;
  fail("unknown mode '" + name + "' (want baseline, tpan, or tian)");
}

void TpanModel::collect(std::vector<Parameter*>& out) {
  image_encoder.collect(out);
  reducer.collect(out);
  channel_attn.collect(out);
  spatial_attn.collect(out);
  text_encoder.collect(out);
}

TpanOutput tpan_forward(TpanModel& model, const Tensor& patch, GuidanceMode mode, int identity,
                        const Tensor* f_t_instance, TpanTrace* trace) {
  TpanTrace local;
  TpanTrace& t = trace ? *trace : local;
  Tensor f_i = model.image_encoder.forward(patch, &t.enc);
  t.f_cmap = model.reducer.forward(f_i, &t.red);
  t.f_c = spatial_mean(t.f_cmap);
  t.a_c = model.channel_attn.forward(t.f_c, &t.ca);
  t.fhat = apply_channel_attention(t.a_c, t.f_cmap);

  TpanOutput out;
  out.attention = model.spatial_attn.forward(t.fhat, &t.sa);
  out.e_i = attend_pool(t.fhat, out.attention, &t.pool);

  if (mode == GuidanceMode::baseline) return out;

  Tensor target_vec;
  if (mode == GuidanceMode::tian) {
    require(f_t_instance != nullptr, "tian mode needs the instance text feature");
    target_vec = *f_t_instance;
  } else {
    require(identity >= 0, "tpan mode needs an identity index");
    const std::size_t k = static_cast<std::size_t>(identity);
    if (model.prototypes.is_initialized(k)) {
      target_vec = model.prototypes.row(k);
    } else {
      require(f_t_instance != nullptr,
              "prototype row " + std::to_string(identity) +
                  " untouched and no instance feature to fall back on");
      target_vec = *f_t_instance;
      out.used_fallback = true;
    }
  }
  out.target = target_map(target_vec, t.f_cmap);
  out.guidance = guidance_loss(out.target, out.attention);
  return out;
}

void tpan_backward(TpanModel& model, TpanTrace& trace, const TpanOutput& out, const Tensor& ge_i,
                   double g_guidance) {
  Tensor g_a, g_fhat;
  if (g_guidance != 0.0 && out.target.numel() > 0)
    guidance_loss_backward(out.target, out.attention, g_guidance, g_a);
  attend_pool_backward(trace.pool, ge_i, g_fhat, g_a);
  Tensor g_from_sa = model.spatial_attn.backward(trace.sa, g_a);
  for (std::size_t i = 0; i < g_fhat.numel(); ++i) g_fhat.data[i] += g_from_sa.data[i];

  Tensor g_a_c, g_f_cmap;
  apply_channel_attention_backward(trace.a_c, trace.f_cmap, g_fhat, g_a_c, g_f_cmap);
  Tensor g_f_c = model.channel_attn.backward(trace.ca, g_a_c);
  Tensor g_mean = spatial_mean_backward(g_f_c, trace.f_cmap.shape);
  for (std::size_t i = 0; i < g_f_cmap.numel(); ++i) g_f_cmap.data[i] += g_mean.data[i];

  Tensor g_f_i = model.reducer.backward(trace.red, g_f_cmap);
  model.image_encoder.backward(trace.enc, g_f_i);
}

void write_attention_pgm(const std::filesystem::path& path, const Tensor& map) {
  require(map.rank() == 2, "attention export expects an H x W map");
  std::ofstream os(path);
  require(os.good(), "cannot write " + path.string());
  os << "P2\n" << map.dim(1) << " " << map.dim(0) << "\n255\n";
  for (std::size_t h = 0; h < map.dim(0); ++h) {
    for (std::size_t w = 0; w < map.dim(1); ++w) {
      const double v = std::clamp(map.data[map.idx2(h, w)], 0.0, 1.0);
      os << static_cast<int>(std::lround(v * 255.0)) << (w + 1 < map.dim(1) ? " " : "");
    }
    os << "\n";
  }
  require(os.good(), "failed writing " + path.string());
}

void write_attention_csv(const std::filesystem::path& path, const Tensor& map) {
  require(map.rank() == 2, "attention export expects an H x W map");
  std::ofstream os(path);
  require(os.good(), "cannot write " + path.string());
  os.precision(17);
  for (std::size_t h = 0; h < map.dim(0); ++h) {
    for (std::size_t w = 0; w < map.dim(1); ++w)
      os << map.data[map.idx2(h, w)] << (w + 1 < map.dim(1) ? "," : "");
    os << "\n";
  }
  require(os.good(), "failed writing " + path.string());
}

}  // namespace tps
