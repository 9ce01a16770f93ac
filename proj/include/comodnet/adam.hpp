// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "comodnet/error.hpp"
#include "comodnet/layers.hpp"

namespace comodnet {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers for one LayerParams.
template <std::floating_point T>
struct BasicAdamState {
  AdamConfig config;
  BasicTensor<T> m_weights, v_weights, m_biases, v_biases;
  std::int64_t step = 0;

  static BasicAdamState for_params(const BasicLayerParams<T>& p, AdamConfig cfg) {
    using TT = BasicTensor<T>;
    return {cfg, TT(p.weights.shape()), TT(p.weights.shape()), TT(p.biases.shape()),
            TT(p.biases.shape()), 0};
  }
};

using AdamState = BasicAdamState<float>;

namespace detail {
template <std::floating_point T>
void adam_update(BasicTensor<T>& param, BasicTensor<T>& m, BasicTensor<T>& v,
                 const BasicTensor<T>& g, const AdamConfig& c, double bc1, double bc2) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double gi = g[i];
    const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
    const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double step = c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
    param[i] = static_cast<T>(param[i] - step);
  }
}
}  // namespace detail

/// One bias-corrected Adam update. Frozen parameters are left untouched.
template <std::floating_point T>
void adam_step(BasicAdamState<T>& state, BasicLayerParams<T>& params,
               const BasicParamGrads<T>& grads, std::string_view layer_name = "?") {
  if (!params.trainable) return;
  params.weights.require_same_shape(grads.weights, "adam_step weights");
  params.biases.require_same_shape(grads.biases, "adam_step biases");
  if (!grads.all_finite()) {
    throw NumericalError("adam_step: non-finite gradient in layer '" + std::string(layer_name) +
                         "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.config.beta1, t);
  const double bc2 = 1.0 - std::pow(state.config.beta2, t);
  detail::adam_update(params.weights, state.m_weights, state.v_weights, grads.weights,
                      state.config, bc1, bc2);
  detail::adam_update(params.biases, state.m_biases, state.v_biases, grads.biases, state.config,
                      bc1, bc2);
}

}  // namespace comodnet
