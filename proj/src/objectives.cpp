#include "tps/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tps {

SharedClassifier SharedClassifier::create(std::size_t num_identities, std::size_t dim, Rng& rng) {
  require(num_identities >= 1 && dim >= 1, "classifier needs positive extent");
  SharedClassifier c;
  c.fc = Linear::create("cls", num_identities, dim, false, rng);
  return c;
}

void SharedClassifier::collect(std::vector<Parameter*>& out) { fc.collect(out); }

double id_loss(const SharedClassifier& c, const Tensor& e, int label, IdLossCtx* ctx) {
  require(label >= 0 && static_cast<std::size_t>(label) < c.num_identities(),
          "id_loss: label " + std::to_string(label) + " outside 0.." +
              std::to_string(c.num_identities() - 1));
  Tensor logits = c.fc.forward(e);
  double m = logits.data[0];
  for (double v : logits.data) m = std::max(m, v);
  double z = 0.0;
  for (double v : logits.data) z += std::exp(v - m);
  const double loss = -(logits.data[static_cast<std::size_t>(label)] - m) + std::log(z);
  if (ctx) {
    ctx->e = e;
    ctx->label = label;
    ctx->probs = Tensor(logits.shape);
    for (std::size_t i = 0; i < logits.numel(); ++i)
      ctx->probs.data[i] = std::exp(logits.data[i] - m) / z;
  }
  return loss;
}

Tensor id_loss_backward(SharedClassifier& c, IdLossCtx& ctx, double g) {
  Tensor g_logits(ctx.probs.shape);
  for (std::size_t i = 0; i < g_logits.numel(); ++i) g_logits.data[i] = g * ctx.probs.data[i];
  g_logits.data[static_cast<std::size_t>(ctx.label)] -= g;
  return c.fc.backward(ctx.e, g_logits);
}

double mh_loss(const BatchPairs& b, double margin, MhCtx* ctx) {
  const std::size_t n = b.e_img.size();
  require(n >= 2, "mh_loss: need at least 2 pairs");
  require(b.e_txt.size() == n && b.labels.size() == n, "mh_loss: lists must align");
  bool mixed = false;
  for (std::size_t i = 1; i < n && !mixed; ++i) mixed = b.labels[i] != b.labels[0];
  require(mixed, "mh_loss: all labels identical (no negatives)");

  MhCtx local;
  MhCtx& c = ctx ? *ctx : local;
  c.n = n;
  c.sim.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) c.sim[i * n + j] = dot(b.e_img[i], b.e_txt[j]);

  constexpr std::size_t kInactive = std::numeric_limits<std::size_t>::max();
  c.hard_i2t.assign(n, kInactive);
  c.hard_t2i.assign(n, kInactive);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = c.sim[i * n + i];
    std::size_t bi = kInactive, bt = kInactive;
    double best_i2t = -std::numeric_limits<double>::infinity();
    double best_t2i = best_i2t;
    for (std::size_t j = 0; j < n; ++j) {
      if (b.labels[j] == b.labels[i]) continue;
      if (c.sim[i * n + j] > best_i2t) {
        best_i2t = c.sim[i * n + j];
        bi = j;
      }
      if (c.sim[j * n + i] > best_t2i) {
        best_t2i = c.sim[j * n + i];
        bt = j;
      }
    }
    const double h_i2t = margin + best_i2t - pos;
    const double h_t2i = margin + best_t2i - pos;
    if (h_i2t > 0.0) {
      total += h_i2t;
      c.hard_i2t[i] = bi;
    }
    if (h_t2i > 0.0) {
      total += h_t2i;
      c.hard_t2i[i] = bt;
    }
  }
  return total / static_cast<double>(n);
}

void mh_loss_backward(const BatchPairs& b, const MhCtx& ctx, double g, std::vector<Tensor>& ge_img,
                      std::vector<Tensor>& ge_txt) {
  const std::size_t n = ctx.n;
  const std::size_t dim = b.e_img[0].numel();
  if (ge_img.size() != n) ge_img.assign(n, Tensor({dim}));
  if (ge_txt.size() != n) ge_txt.assign(n, Tensor({dim}));
  const double s = g / static_cast<double>(n);
  constexpr std::size_t kInactive = std::numeric_limits<std::size_t>::max();
  auto axpy = [dim](Tensor& acc, double a, const Tensor& v) {
    for (std::size_t d = 0; d < dim; ++d) acc.data[d] += a * v.data[d];
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (ctx.hard_i2t[i] != kInactive) {
      const std::size_t j = ctx.hard_i2t[i];
      axpy(ge_img[i], s, b.e_txt[j]);
      axpy(ge_txt[j], s, b.e_img[i]);
      axpy(ge_img[i], -s, b.e_txt[i]);
      axpy(ge_txt[i], -s, b.e_img[i]);
    }
    if (ctx.hard_t2i[i] != kInactive) {
      const std::size_t j = ctx.hard_t2i[i];
      axpy(ge_img[j], s, b.e_txt[i]);
      axpy(ge_txt[i], s, b.e_img[j]);
      axpy(ge_img[i], -s, b.e_txt[i]);
      axpy(ge_txt[i], -s, b.e_img[i]);
    }
  }
}

double total_loss(double id_term, double mh_term, double guide_term) {
  require(std::isfinite(id_term) && std::isfinite(mh_term) && std::isfinite(guide_term),
          "total_loss: non-finite loss term");
  return id_term + mh_term + guide_term;
}

}  // namespace tps
