#pragma once

#include <vector>

#include "capsgan/autodiff.hpp"
#include "capsgan/errors.hpp"

namespace capsgan {

struct MarginLossConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;

  void validate() const {
    if (!(0.0 < m_minus && m_minus < m_plus && m_plus < 1.0))
      throw ConfigError("margin loss: need 0 < m_minus < m_plus < 1");
    if (!(lambda > 0.0)) throw ConfigError("margin loss: lambda must be positive");
  }
};

// Margin loss over capsule lengths. v_norms [B,K], targets [B,K] with entries
// exactly 0 or 1; per class k:
//   T_k * max(0, m_plus - |v_k|)^2 + lambda * (1 - T_k) * max(0, v_k| - m_minus)^2
// summed over K, averaged over the batch. When every target is 1 the lambda
// branch multiplies by an exact 0, so the loss and all gradients are
// independent of lambda.
inline int margin_loss(Graph& g, int v_norms, int targets, const MarginLossConfig& cfg) {
  cfg.validate();
  const Tensor& tn = g.value(v_norms);
  const Tensor& tt = g.value(targets);
  if (tn.rank() != 2 || !tn.same_shape(tt))
    throw ShapeError("margin_loss: norms " + shape_str(tn.shape()) + " vs targets " +
                     shape_str(tt.shape()) + ", expected matching [batch,K]");
  for (std::size_t i = 0; i < tt.size(); ++i)
    if (tt[i] != 0.0 && tt[i] != 1.0)
      throw ShapeError("margin_loss: target entries must be exactly 0 or 1");
  Tensor inverted(tt.shape());
  for (std::size_t i = 0; i < tt.size(); ++i) inverted[i] = 1.0 - tt[i];
  int one_minus_t = g.constant(std::move(inverted));

  int pos = g.square(g.max_with_scalar(g.add_scalar(g.scale(v_norms, -1.0), cfg.m_plus), 0.0));
  int neg = g.square(g.max_with_scalar(g.add_scalar(v_norms, -cfg.m_minus), 0.0));
  int per_class = g.add(g.mul(targets, pos), g.scale(g.mul(one_minus_t, neg), cfg.lambda));
  int per_sample = g.reduce_sum(per_class, 1);
  return g.reduce_mean(per_sample, 0);
}

// conv2d -> bias -> capsule grouping -> squash. Turns an image map into
// I = (filters/capsule_dim) * Ho * Wo capsules of dimension capsule_dim.
inline int primary_capsules(Graph& g, int x, int conv_kernel, int conv_bias, int capsule_dim,
                            int stride, int pad) {
  int y = g.conv2d(x, conv_kernel, stride, pad);
  y = g.bias_add(y, conv_bias);
  y = g.caps_group(y, capsule_dim);
  return g.squash(y);
}

struct RoutingConfig {
  int iters = 3;
  bool cosine_agreement = false;

  void validate() const {
    if (iters < 1) throw ConfigError("routing: iters must be >= 1");
  }
};

// Node ids recorded while unrolling routing; couplings[t] rows sum to 1.
struct RoutedCapsules {
  int output = -1;                // v [B,J,dout]
  int uhat = -1;                  // [B,I,J,dout]
  std::vector<int> logits;        // b per iteration, before softmax
  std::vector<int> couplings;     // c per iteration
};

// Routing by agreement, fully unrolled so gradients flow through every
// iteration. Logits start at zero; each iteration takes the softmax over the
// upper capsules, forms weighted prediction sums, squashes, then reinforces
// logits by the agreement between predictions and outputs.
inline RoutedCapsules routed_capsule_layer(Graph& g, int u, int w, const RoutingConfig& cfg) {
  cfg.validate();
  RoutedCapsules r;
  r.uhat = g.caps_predict(u, w);
  const Tensor& tu = g.value(r.uhat);
  int b = g.constant(Tensor({tu.dim(0), tu.dim(1), tu.dim(2)}));
  for (int t = 0; t < cfg.iters; ++t) {
    r.logits.push_back(b);
    int c = g.softmax(b, 2);
    r.couplings.push_back(c);
    int s = g.caps_weighted_sum(c, r.uhat);
    r.output = g.squash(s);
    b = g.add(b, g.caps_agreement(r.uhat, r.output, cfg.cosine_agreement));
  }
  return r;
}

}  // namespace capsgan
