#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "capsgan/errors.hpp"
#include "capsgan/tensor.hpp"

namespace capsgan {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("adam: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("adam: beta1 must be in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam: beta2 must be in [0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("adam: epsilon must be positive");
  }
};

struct Param {
  std::string name;
  Tensor value;
};

// Bias-corrected Adam accumulators, index-aligned with a parameter list.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState init(const AdamConfig& cfg, const std::vector<Param>& params) {
    cfg.validate();
    AdamState s;
    s.config = cfg;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Param& p : params) {
      s.m.emplace_back(p.value.shape());
      s.v.emplace_back(p.value.shape());
    }
    return s;
  }
};

inline void adam_step(AdamState& state, std::vector<Param>& params,
                      const std::vector<Tensor>& grads) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " + std::to_string(state.m.size()) +
                     " accumulators");
  state.step += 1;
  const AdamConfig& c = state.config;
  double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].value;
    const Tensor& g = grads[i];
    if (!p.same_shape(g))
      throw ShapeError("adam_step: param " + params[i].name + " " + shape_str(p.shape()) +
                       " vs grad " + shape_str(g.shape()));
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      double mhat = m[k] / bc1;
      double vhat = v[k] / bc2;
      p[k] -= c.lr * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

}  // namespace capsgan
