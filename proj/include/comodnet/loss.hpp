// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "comodnet/tensor.hpp"

namespace comodnet {

template <std::floating_point T>
struct BasicLossResult {
  double loss = 0.0;  // accumulated in double
  BasicTensor<T> grad;  // d loss / d logits
};

using LossResult = BasicLossResult<float>;

template <std::floating_point T>
std::vector<double> softmax(std::span<const T> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// -log softmax(logits)[label]; gradient softmax - onehot.
template <std::floating_point T>
BasicLossResult<T> loss_softmax_ce(const BasicTensor<T>& logits, std::size_t label) {
  if (logits.rank() != 1) throw std::invalid_argument("loss_softmax_ce: logits must be a vector");
  if (label >= logits.size()) {
    throw std::invalid_argument("loss_softmax_ce: label " + std::to_string(label) +
                                " out of range for " + std::to_string(logits.size()) + " classes");
  }
  const auto data = logits.data();
  const double mx = *std::max_element(data.begin(), data.end());
  double z = 0.0;
  for (T v : data) z += std::exp(v - mx);
  const double log_z = mx + std::log(z);
  BasicLossResult<T> r{log_z - data[label], BasicTensor<T>(logits.shape())};
  for (std::size_t i = 0; i < data.size(); ++i) {
    r.grad[i] = static_cast<T>(std::exp(data[i] - log_z) - (i == label ? 1.0 : 0.0));
  }
  return r;
}

/// Mean over attributes of sigmoid binary cross-entropy.
template <std::floating_point T>
BasicLossResult<T> loss_multi_attribute_bce(const BasicTensor<T>& logits,
                                            std::span<const float> labels) {
  if (logits.size() != labels.size()) {
    throw std::invalid_argument("loss_multi_attribute_bce: " + std::to_string(logits.size()) +
                                " logits vs " + std::to_string(labels.size()) + " labels");
  }
  const double n = static_cast<double>(labels.size());
  BasicLossResult<T> r{0.0, BasicTensor<T>(logits.shape())};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = labels[i];
    if (y != 0.0 && y != 1.0) {
      throw std::invalid_argument("loss_multi_attribute_bce: label " + std::to_string(i) +
                                  " is not in {0,1}");
    }
    const double x = logits[i];
    r.loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    r.grad[i] = static_cast<T>((sigmoid(x) - y) / n);
  }
  r.loss /= n;
  return r;
}

}  // namespace comodnet
