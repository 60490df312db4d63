#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "tps/encoders.hpp"
#include "tps/ops.hpp"
#include "tps/tensor.hpp"

namespace tps {

// Squeeze-and-excitation gate over channels: A_c = sigmoid(W2 relu(W1 f_c)),
// fed by the spatial mean of the reduced feature map.
struct ChannelAttention {
  Linear fc1;  // (dim/reduction) x dim
  Linear fc2;  // dim x (dim/reduction)

  struct Ctx {
    Tensor f_c;
    ActCtx relu, sig;
  };

  static ChannelAttention create(std::size_t dim, std::size_t reduction, Rng& rng);
  Tensor forward(const Tensor& f_c, Ctx* ctx = nullptr) const;
  Tensor backward(Ctx& ctx, const Tensor& gy);
  void collect(std::vector<Parameter*>& out);
};

// F_hat[d,h,w] = A_c[d] * F_c[d,h,w].
Tensor apply_channel_attention(const Tensor& a_c, const Tensor& f_cmap);
void apply_channel_attention_backward(const Tensor& a_c, const Tensor& f_cmap, const Tensor& gy,
                                      Tensor& ga_c, Tensor& gf_cmap);

// Spatial twin: pools the gated map over channels to a flat HW descriptor,
// runs the same bottleneck, and reshapes the sigmoid output to H x W.
struct SpatialAttention {
  Linear fc1;  // (hw/reduction) x hw
  Linear fc2;  // hw x (hw/reduction)

  struct Ctx {
    std::vector<std::size_t> in_shape;
    Tensor f_s;
    ActCtx relu, sig;
  };

  static SpatialAttention create(std::size_t hw, std::size_t reduction, Rng& rng);
  Tensor forward(const Tensor& fhat, Ctx* ctx = nullptr) const;
  // Returns the gradient w.r.t. the gated feature map.
  Tensor backward(Ctx& ctx, const Tensor& g_map);
  void collect(std::vector<Parameter*>& out);
};

// Per-identity running average of observed text features. Rows initialize
// from the first observation (cosine against a zero row is undefined) and
// never carry gradients.
struct PrototypeTable {
  Tensor P;  // n x dim
  std::vector<char> touched;
  double lambda = 0.5;

  static PrototypeTable create(std::size_t n, std::size_t dim, double lambda);
  std::size_t size() const { return P.dim(0); }
  std::size_t dim() const { return P.dim(1); }
  bool is_initialized(std::size_t k) const;
  Tensor row(std::size_t k) const;
  // First update copies f_t; later ones apply P_k <- lambda*P_k + (1-lambda)*f_t.
  void update(std::size_t k, const Tensor& f_t);
};

// A_target[h,w] = max(0, cos(target, F_c[:,h,w])); zero feature columns map
// to 0. The result is a constant in every backward pass.
Tensor target_map(const Tensor& target, const Tensor& f_cmap);

// Summed squared error between the learned map and its target.
double guidance_loss(const Tensor& a_target, const Tensor& a);
// Accumulates g * d/dA into g_a; the target side receives nothing.
void guidance_loss_backward(const Tensor& a_target, const Tensor& a, double g, Tensor& g_a);

struct AttendPoolCtx {
  Tensor fhat, a;
  Tensor pooled;
  double a_sum = 0.0;
  NormCtx norm;
};

// e_i = normalize(sum_hw A[h,w] * Fhat[:,h,w] / sum_hw A[h,w]).
Tensor attend_pool(const Tensor& fhat, const Tensor& a, AttendPoolCtx* ctx = nullptr);
void attend_pool_backward(AttendPoolCtx& ctx, const Tensor& gy, Tensor& g_fhat, Tensor& g_a);

enum class GuidanceMode { baseline, tpan, tian };
std::string guidance_mode_name(GuidanceMode mode);
GuidanceMode guidance_mode_from_name(const std::string& name);

// The dual-path network: image stack, attention blocks, text encoder, and
// the prototype table.
struct TpanModel {
  ImageEncoder image_encoder;
  FeatureReducer reducer;
  ChannelAttention channel_attn;
  SpatialAttention spatial_attn;
  TextEncoder text_encoder;
  PrototypeTable prototypes;

  void collect(std::vector<Parameter*>& out);
};

struct TpanTrace {
  ImageEncoder::Ctx enc;
  FeatureReducer::Ctx red;
  Tensor f_cmap;  // reduced map F_c
  Tensor f_c;     // its spatial mean
  ChannelAttention::Ctx ca;
  Tensor a_c;
  Tensor fhat;
  SpatialAttention::Ctx sa;
  AttendPoolCtx pool;
};

struct TpanOutput {
  Tensor e_i;        // unit-norm image embedding
  Tensor attention;  // learned H x W map
  Tensor target;     // H x W target map; empty in baseline mode
  double guidance = 0.0;
  bool used_fallback = false;  // prototype row not yet initialized
};

// identity < 0 means "no identity" (only valid outside tpan mode).
// f_t_instance backs tian mode and the uninitialized-row fallback.
TpanOutput tpan_forward(TpanModel& model, const Tensor& patch, GuidanceMode mode, int identity,
                        const Tensor* f_t_instance, TpanTrace* trace = nullptr);

// Pushes d(loss)/d(e_i) and d(loss)/d(guidance term) back through the image
// path. The target map stays constant, so nothing reaches the prototype
// table or the text encoder from here.
void tpan_backward(TpanModel& model, TpanTrace& trace, const TpanOutput& out, const Tensor& ge_i,
                   double g_guidance);

// Attention-map export: ASCII portable graymap (values scaled to 0..255)
// and plain CSV.
void write_attention_pgm(const std::filesystem::path& path, const Tensor& map);
void write_attention_csv(const std::filesystem::path& path, const Tensor& map);

}  // namespace tps
