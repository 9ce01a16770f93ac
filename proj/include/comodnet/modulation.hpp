// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

// Stochastic gain comodulation: a scalar half-normal modulator scales the
// encoder channels through the task context, and the covariance between the
// modulator and each decoder unit, min-max normalized, becomes that unit's
// readout gain.

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <iomanip>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "comodnet/controller.hpp"
#include "comodnet/random.hpp"
#include "comodnet/tensor.hpp"

namespace comodnet {

struct ModulatorConfig {
  double variance = 0.4;
  std::size_t draws = 10;  // T

  static ModulatorConfig make(double variance, std::size_t draws) {
    if (!(variance > 0.0) || !std::isfinite(variance)) {
      throw std::invalid_argument("modulator variance must be positive, got " +
                                  std::to_string(variance));
    }
    if (draws < 2) {
      throw std::invalid_argument("modulator needs at least 2 draws per episode, got " +
                                  std::to_string(draws));
    }
    return {variance, draws};
  }

  double sigma() const { return std::sqrt(variance); }
};

struct ModulatorTrace {
  std::vector<double> values;
  double mean = 0.0;

  static ModulatorTrace from_values(std::vector<double> values) {
    if (values.empty()) throw std::invalid_argument("modulator trace is empty");
    double s = 0.0;
    for (double v : values) {
      if (!(v >= 0.0)) throw std::invalid_argument("modulator values must be non-negative");
      s += v;
    }
    const double mean = s / static_cast<double>(values.size());
    return {std::move(values), mean};
  }

  std::size_t size() const { return values.size(); }
};

/// T i.i.d. draws of |N(0, variance)|.
inline ModulatorTrace sample_modulator(const ModulatorConfig& config, Rng& rng) {
  std::normal_distribution<double> normal(0.0, config.sigma());
  std::vector<double> v(config.draws);
  for (auto& x : v) x = std::abs(normal(rng));
  return ModulatorTrace::from_values(std::move(v));
}

/// Scales channel c of a [C, H, W] (or [C]) activity by m * context[c].
template <std::floating_point T>
BasicTensor<T> apply_encoder_modulation(const BasicTensor<T>& activity,
                                        std::span<const T> context, double m) {
  if (activity.rank() == 0 || activity.dim(0) != context.size()) {
    throw ShapeError("encoder modulation: context has " + std::to_string(context.size()) +
                     " channels, activity shape is " + shape_str(activity.shape()));
  }
  BasicTensor<T> out = activity;
  const std::size_t per_channel = activity.size() / context.size();
  for (std::size_t c = 0; c < context.size(); ++c) {
    const T g = static_cast<T>(m * static_cast<double>(context[c]));
    T* p = out.ptr() + c * per_channel;
    for (std::size_t i = 0; i < per_channel; ++i) p[i] *= g;
  }
  return out;
}

template <std::floating_point T>
BasicTensor<T> apply_encoder_modulation(const BasicTensor<T>& activity,
                                        const BasicTaskContext<T>& context, double m) {
  return apply_encoder_modulation(activity, std::span<const T>(context.weights), m);
}

struct GainVector {
  std::vector<double> raw;         // sum_t (m_t - mean m) (h_t - mean h), per unit
  std::vector<double> normalized;  // min-max normalized to [0, 1]
  bool degenerate = false;         // max == min: every normalized gain is 1

  std::size_t size() const { return normalized.size(); }
};

/// (x - min) / (max - min); all ones when max == min.
inline std::vector<double> minmax_normalize(std::span<const double> raw, bool* degenerate = nullptr) {
  if (raw.empty()) throw std::invalid_argument("minmax_normalize: empty input");
  for (double v : raw) {
    if (!std::isfinite(v)) throw std::invalid_argument("minmax_normalize: non-finite input");
  }
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  const double range = *hi - *lo;
  std::vector<double> out(raw.size(), 1.0);
  if (degenerate) *degenerate = !(range > 0.0);
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - *lo) / range;
  return out;
}

/// d loss / d raw given d loss / d normalized. The argmin and argmax entries
/// receive the gradient through the normalization range; ties resolve to the
/// first index. Degenerate input has zero gradient.
inline std::vector<double> minmax_normalize_backward(std::span<const double> raw,
                                                     std::span<const double> dnormalized) {
  if (raw.size() != dnormalized.size() || raw.empty()) {
    throw std::invalid_argument("minmax_normalize_backward: length mismatch");
  }
  const auto lo_it = std::min_element(raw.begin(), raw.end());
  const auto hi_it = std::max_element(raw.begin(), raw.end());
  const double range = *hi_it - *lo_it;
  std::vector<double> d(raw.size(), 0.0);
  if (!(range > 0.0)) return d;
  const std::size_t lo = static_cast<std::size_t>(lo_it - raw.begin());
  const std::size_t hi = static_cast<std::size_t>(hi_it - raw.begin());
  double to_lo = 0.0, to_hi = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double g = (raw[i] - *lo_it) / range;
    d[i] += dnormalized[i] / range;
    to_lo += dnormalized[i] * (g - 1.0) / range;
    to_hi -= dnormalized[i] * g / range;
  }
  d[lo] += to_lo;
  d[hi] += to_hi;
  return d;
}

/// Gains from T decoder snapshots, one per modulator draw of the same input.
template <std::floating_point T>
GainVector estimate_decoder_gains(std::span<const BasicTensor<T>> activities,
                                  const ModulatorTrace& trace) {
  if (activities.size() < 2) {
    throw std::invalid_argument("estimate_decoder_gains: need at least 2 snapshots, got " +
                                std::to_string(activities.size()));
  }
  if (activities.size() != trace.size()) {
    throw std::invalid_argument("estimate_decoder_gains: " + std::to_string(activities.size()) +
                                " snapshots for a trace of " + std::to_string(trace.size()));
  }
  const std::size_t units = activities[0].size();
  std::vector<double> mean_h(units, 0.0);
  for (const auto& a : activities) {
    if (a.size() != units) throw ShapeError("estimate_decoder_gains: snapshot shapes differ");
    for (std::size_t n = 0; n < units; ++n) mean_h[n] += a[n];
  }
  const double inv_t = 1.0 / static_cast<double>(activities.size());
  for (auto& v : mean_h) v *= inv_t;
  GainVector g;
  g.raw.assign(units, 0.0);
  for (std::size_t t = 0; t < activities.size(); ++t) {
    const double dm = trace.values[t] - trace.mean;
    for (std::size_t n = 0; n < units; ++n) {
      g.raw[n] += dm * (static_cast<double>(activities[t][n]) - mean_h[n]);
    }
  }
  g.normalized = minmax_normalize(g.raw, &g.degenerate);
  return g;
}

template <std::floating_point T>
GainVector estimate_decoder_gains(const std::vector<BasicTensor<T>>& activities,
                                  const ModulatorTrace& trace) {
  return estimate_decoder_gains(std::span<const BasicTensor<T>>(activities), trace);
}

/// Gains multiply the rectified decoder activity unit by unit.
template <std::floating_point T>
BasicTensor<T> apply_decoder_gains(const BasicTensor<T>& rectified_activity,
                                   std::span<const double> gains) {
  if (gains.size() != rectified_activity.size()) {
    throw ShapeError("apply_decoder_gains: " + std::to_string(gains.size()) + " gains for " +
                     std::to_string(rectified_activity.size()) + " decoder units");
  }
  BasicTensor<T> out = rectified_activity;
  for (std::size_t n = 0; n < gains.size(); ++n) out[n] = static_cast<T>(out[n] * gains[n]);
  return out;
}

template <std::floating_point T>
BasicTensor<T> apply_decoder_gains(const BasicTensor<T>& rectified_activity,
                                   const GainVector& gains) {
  return apply_decoder_gains(rectified_activity, std::span<const double>(gains.normalized));
}

/// Elementwise mean of normalized gains; not re-normalized.
inline GainVector average_gains_per_task(std::span<const GainVector> per_input) {
  if (per_input.empty()) throw std::invalid_argument("average_gains_per_task: empty list");
  const std::size_t units = per_input[0].size();
  GainVector out;
  out.raw.assign(units, 0.0);
  out.normalized.assign(units, 0.0);
  for (const auto& g : per_input) {
    if (g.size() != units || g.raw.size() != units) {
      throw std::invalid_argument("average_gains_per_task: inconsistent gain lengths");
    }
    for (std::size_t n = 0; n < units; ++n) {
      out.raw[n] += g.raw[n];
      out.normalized[n] += g.normalized[n];
    }
  }
  const double inv = 1.0 / static_cast<double>(per_input.size());
  for (std::size_t n = 0; n < units; ++n) {
    out.raw[n] *= inv;
    out.normalized[n] *= inv;
  }
  return out;
}

/// Count of |raw gain| < threshold, per threshold.
inline std::vector<std::size_t> gain_sparsity(std::span<const double> raw,
                                              std::span<const double> thresholds) {
  std::vector<std::size_t> counts;
  counts.reserve(thresholds.size());
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0) || (i > 0 && thresholds[i] < thresholds[i - 1])) {
      throw std::invalid_argument("gain_sparsity: thresholds must be positive and ascending");
    }
    counts.push_back(static_cast<std::size_t>(
        std::count_if(raw.begin(), raw.end(), [&](double r) { return std::abs(r) < thresholds[i]; })));
  }
  return counts;
}

inline void write_gain_csv_header(std::ostream& os) {
  os << "task_id,unit_index,raw_gain,normalized_gain\n";
}

inline void write_gain_csv_rows(std::ostream& os, std::size_t task, const GainVector& g) {
  const auto prec = os.precision(9);
  for (std::size_t n = 0; n < g.size(); ++n) {
    os << task << ',' << n << ',' << g.raw[n] << ',' << g.normalized[n] << '\n';
  }
  os.precision(prec);
}

}  // namespace comodnet
