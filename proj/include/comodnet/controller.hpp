// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "comodnet/layers.hpp"
#include "comodnet/loss.hpp"

namespace comodnet {

struct TaskId {
  std::size_t index = 0;
  std::size_t count = 1;

  static TaskId make(std::size_t index, std::size_t count) {
    if (index >= count) {
      throw std::invalid_argument("task index " + std::to_string(index) + " out of range [0, " +
                                  std::to_string(count) + ")");
    }
    return {index, count};
  }
};

template <std::floating_point T = float>
BasicTensor<T> onehot(TaskId task) {
  BasicTensor<T> v({task.count});
  v[task.index] = T(1);
  return v;
}

enum class ControllerOutput { identity, sigmoid };

/// Per-encoder-channel context weights for one task.
template <std::floating_point T>
struct BasicTaskContext {
  std::vector<T> weights;
  bool bounded = false;
};

using TaskContext = BasicTaskContext<float>;

struct ControllerSpec {
  std::size_t tasks = 1;
  std::size_t channels = 1;
  std::size_t hidden = 0;  // 0 selects ceil(max(tasks, channels) / 2)
  ControllerOutput output = ControllerOutput::identity;
  bool unit_start = true;  // zero final weights and unit final bias: every context starts at 1

  std::size_t hidden_width() const {
    return hidden ? hidden : (std::max(tasks, channels) + 1) / 2;
  }
};

/// Two-layer MLP from a one-hot task code to context weights.
template <std::floating_point T>
struct BasicController {
  ControllerSpec spec;
  BasicLayer<T> hidden = BasicLayer<T>::dense("controller/hidden", 1, 1);
  BasicLayer<T> output = BasicLayer<T>::dense("controller/output", 1, 1);

  static BasicController make(const ControllerSpec& spec, Rng& rng) {
    if (spec.tasks == 0 || spec.channels == 0) {
      throw std::invalid_argument("controller needs at least one task and one channel");
    }
    BasicController c;
    c.spec = spec;
    c.hidden = BasicLayer<T>::dense("controller/hidden", spec.tasks, spec.hidden_width());
    c.output = BasicLayer<T>::dense("controller/output", spec.hidden_width(), spec.channels);
    c.hidden.init(rng);
    c.output.init(rng);
    if (spec.unit_start) {
      c.output.params().weights.fill(T(0));
      c.output.params().biases.fill(T(1));
    }
    return c;
  }

  struct Cache {
    BasicTensor<T> input, pre_hidden, hidden, pre_output;
  };

  BasicTaskContext<T> forward(TaskId task, Cache* cache = nullptr) const {
    if (task.count != spec.tasks) {
      throw std::invalid_argument("controller built for " + std::to_string(spec.tasks) +
                                  " tasks, got task code of length " + std::to_string(task.count));
    }
    TaskId::make(task.index, task.count);
    const BasicTensor<T> x = onehot<T>(task);
    const BasicTensor<T> pre_h = layer_forward(hidden, x);
    BasicTensor<T> h = pre_h;
    for (auto& v : h.data()) v = v > T(0) ? v : T(0);
    const BasicTensor<T> pre_o = layer_forward(output, h);
    BasicTaskContext<T> ctx{std::vector<T>(pre_o.data().begin(), pre_o.data().end()),
                            spec.output == ControllerOutput::sigmoid};
    if (ctx.bounded) {
      // Rounding saturates at 0 or 1 for large |pre|; stay strictly inside.
      const T lo = std::numeric_limits<T>::min(), hi = std::nextafter(T(1), T(0));
      for (auto& v : ctx.weights)
        v = std::clamp(static_cast<T>(sigmoid(static_cast<double>(v))), lo, hi);
    }
    if (cache) *cache = {x, pre_h, h, pre_o};
    return ctx;
  }

  /// Accumulates parameter gradients given d loss / d context.
  void backward(const Cache& cache, std::span<const T> dcontext, BasicParamGrads<T>& g_hidden,
                BasicParamGrads<T>& g_output) const {
    if (dcontext.size() != spec.channels) {
      throw ShapeError("controller backward: context gradient length " +
                       std::to_string(dcontext.size()) + " vs " + std::to_string(spec.channels));
    }
    BasicTensor<T> d_pre_o({spec.channels});
    for (std::size_t i = 0; i < spec.channels; ++i) {
      T d = dcontext[i];
      if (spec.output == ControllerOutput::sigmoid) {
        const double s = sigmoid(static_cast<double>(cache.pre_output[i]));
        d = static_cast<T>(d * s * (1.0 - s));
      }
      d_pre_o[i] = d;
    }
    BasicTensor<T> dh;
    layer_backward_into(output, cache.hidden, d_pre_o, &dh, &g_output);
    for (std::size_t i = 0; i < dh.size(); ++i) {
      if (!(cache.pre_hidden[i] > T(0))) dh[i] = T(0);
    }
    layer_backward_into(hidden, cache.input, dh, static_cast<BasicTensor<T>*>(nullptr),
                        &g_hidden);
  }

  template <std::floating_point U>
  BasicController<U> cast() const {
    BasicController<U> c;
    c.spec = spec;
    c.hidden = hidden.template cast<U>();
    c.output = output.template cast<U>();
    return c;
  }
};

using Controller = BasicController<float>;

template <std::floating_point T>
BasicTaskContext<T> controller_forward(const BasicController<T>& controller, TaskId task) {
  return controller.forward(task);
}

/// CSV rows (task_id, channel_index, context_weight).
template <std::floating_point T>
void write_context_csv(std::ostream& os, const BasicController<T>& controller) {
  os << "task_id,channel_index,context_weight\n";
  for (std::size_t k = 0; k < controller.spec.tasks; ++k) {
    const auto ctx = controller.forward(TaskId::make(k, controller.spec.tasks));
    for (std::size_t c = 0; c < ctx.weights.size(); ++c) {
      os << k << ',' << c << ',' << static_cast<double>(ctx.weights[c]) << '\n';
    }
  }
}

}  // namespace comodnet
