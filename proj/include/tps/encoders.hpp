#pragma once

#include <cstddef>
#include <vector>

#include "tps/ops.hpp"
#include "tps/rng.hpp"
#include "tps/tensor.hpp"

namespace tps {

// Image path: three stride-2 conv+relu stages, 3 -> 16 -> 32 -> channels.
// Replicate padding keeps a spatially constant patch constant through the
// stack. Default 48x16 crops come out as channels x 6 x 2.
struct ImageEncoder {
  Conv2d conv1, conv2, conv3;

  struct Ctx {
    Tensor x;
    ActCtx r1, r2, r3;  // each holds the stage's pre- and post-relu maps
  };

  static ImageEncoder create(std::size_t channels, Rng& rng);
  Tensor forward(const Tensor& patch, Ctx* ctx = nullptr) const;
  // Returns the gradient w.r.t. the input patch.
  Tensor backward(Ctx& ctx, const Tensor& gy);
  void collect(std::vector<Parameter*>& out);
  std::size_t out_channels() const { return conv3.K.value.dim(0); }
};

// Per-location linear projection C -> D (1x1 convolution semantics);
// spatial extent is preserved.
struct FeatureReducer {
  Linear proj;

  struct Ctx {
    Tensor x;
  };

  static FeatureReducer create(std::size_t in_channels, std::size_t out_channels, Rng& rng);
  Tensor forward(const Tensor& fmap, Ctx* ctx = nullptr) const;
  Tensor backward(Ctx& ctx, const Tensor& gy);
  void collect(std::vector<Parameter*>& out);
  std::size_t out_channels() const { return proj.out_dim(); }
};

// Text path: embedding lookup, trainable position-weighted average
// (initialized to a linear ramp so token order matters), linear projection,
// L2 normalization. Output is always unit-norm.
struct TextEncoder {
  Parameter embedding;   // vocab x embed_dim
  Parameter pos_weight;  // max_len
  Linear proj;           // out_dim x embed_dim

  struct Ctx {
    std::vector<int> tokens;
    Tensor avg;  // position-weighted embedding average
    double weight_sum = 0.0;
    Tensor proj_out;
    NormCtx norm;
  };

  static TextEncoder create(std::size_t vocab, std::size_t embed_dim, std::size_t out_dim,
                            std::size_t max_len, Rng& rng);
  Tensor forward(const std::vector<int>& tokens, Ctx* ctx = nullptr) const;
  void backward(Ctx& ctx, const Tensor& gy);
  void collect(std::vector<Parameter*>& out);
  std::size_t out_dim() const { return proj.out_dim(); }
  std::size_t max_len() const { return pos_weight.value.numel(); }
};

}  // namespace tps
