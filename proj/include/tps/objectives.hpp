#pragma once

#include <cstddef>
#include <vector>

#include "tps/ops.hpp"
#include "tps/tensor.hpp"

namespace tps {

// One weight matrix classifies both image and text embeddings, forcing a
// shared identity space.
struct SharedClassifier {
  Linear fc;  // num_identities x dim, no bias

  static SharedClassifier create(std::size_t num_identities, std::size_t dim, Rng& rng);
  std::size_t num_identities() const { return fc.out_dim(); }
  void collect(std::vector<Parameter*>& out);
};

struct IdLossCtx {
  Tensor e;
  Tensor probs;
  int label = 0;
};

// Cross-entropy of softmax(W e) at the label.
double id_loss(const SharedClassifier& c, const Tensor& e, int label, IdLossCtx* ctx = nullptr);
// Accumulates g * d(loss)/d(W) into the classifier and returns g * d(loss)/d(e).
Tensor id_loss_backward(SharedClassifier& c, IdLossCtx& ctx, double g);

// Aligned (image, text, label) triples; embeddings unit-norm so the dot
// product is the cosine similarity.
struct BatchPairs {
  std::vector<Tensor> e_img;
  std::vector<Tensor> e_txt;
  std::vector<int> labels;
};

struct MhCtx {
  std::size_t n = 0;
  std::vector<double> sim;  // n x n, sim[i*n+j] = <e_img[i], e_txt[j]>
  // Hardest cross-identity negative per anchor and direction; SIZE_MAX when
  // the hinge is inactive.
  std::vector<std::size_t> hard_i2t, hard_t2i;
};

// Bidirectional hardest-negative hinge (max-of-hinges), mean over pairs.
// Same-identity columns/rows are never negatives.
double mh_loss(const BatchPairs& b, double margin, MhCtx* ctx = nullptr);
// Accumulates g * gradients into ge_img / ge_txt (resized on demand).
void mh_loss_backward(const BatchPairs& b, const MhCtx& ctx, double g, std::vector<Tensor>& ge_img,
                      std::vector<Tensor>& ge_txt);

// Unweighted sum of the three terms; rejects non-finite inputs.
double total_loss(double id_term, double mh_term, double guide_term);

}  // namespace tps
