#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "setflow/autodiff.hpp"

namespace setflow {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  AdamState() = default;
  explicit AdamState(const ParamStore& params, AdamOptions opts = {}) : options(opts) {
    for (const auto& p : params) {
      m.push_back(Tensor::zeros_like(p.value));
      v.push_back(Tensor::zeros_like(p.value));
    }
  }
};

// One bias-corrected Adam update. A non-finite gradient aborts the step
// before any parameter or moment is modified.
inline void adam_step(ParamStore& params, const std::vector<Tensor>& grads,
                      AdamState& state) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw Error("adam_step: " + std::to_string(grads.size()) + " gradients, " +
                std::to_string(state.m.size()) + " moment slots for " +
                std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params.at(i).value.shape()) {
      throw Error("adam_step: gradient shape " + shape_str(grads[i].shape()) +
                  " for parameter '" + params.at(i).name + "' of shape " +
                  shape_str(params.at(i).value.shape()));
    }
    if (!grads[i].all_finite()) {
      throw Error("adam_step: non-finite gradient for parameter '" +
                  params.at(i).name + "' at step " + std::to_string(state.step + 1));
    }
  }
  const auto& o = state.options;
  state.step += 1;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params.at(i).value;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g[j];
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g[j] * g[j];
      w[j] -= o.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + o.eps);
    }
  }
}

}  // namespace setflow
