// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "comodnet/model.hpp"
#include "comodnet/random.hpp"

namespace comodnet {

// ---------------------------------------------------------------------------
// Classification

struct BinaryStats {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0, accuracy = 0.0;
  bool precision_undefined = false;  // no positive predictions; reported as 0
  bool recall_undefined = false;     // no positive labels; reported as 0
  std::size_t support() const { return tp + fn; }
};

inline BinaryStats binary_stats_from_counts(std::size_t tp, std::size_t fp, std::size_t fn,
                                            std::size_t tn) {
  BinaryStats s{tp, fp, fn, tn};
  const std::size_t n = tp + fp + fn + tn;
  if (n == 0) throw std::invalid_argument("binary_stats: empty input");
  s.accuracy = static_cast<double>(tp + tn) / static_cast<double>(n);
  s.precision_undefined = tp + fp == 0;
  s.recall_undefined = tp + fn == 0;
  s.precision = s.precision_undefined ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  s.recall = s.recall_undefined ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

inline BinaryStats binary_stats(std::span<const std::uint8_t> predicted,
                                std::span<const std::uint8_t> actual) {
  if (predicted.size() != actual.size()) {
    throw std::invalid_argument("binary_stats: " + std::to_string(predicted.size()) +
                                " predictions vs " + std::to_string(actual.size()) + " labels");
  }
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool p = predicted[i] != 0, a = actual[i] != 0;
    tp += p && a;
    fp += p && !a;
    fn += !p && a;
    tn += !p && !a;
  }
  return binary_stats_from_counts(tp, fp, fn, tn);
}

/// Per-task (or per-class) statistics plus their macro averages.
struct ClassificationStats {
  std::vector<BinaryStats> per_task;
  double accuracy = 0.0;  // attribute: mean per-task accuracy; multiclass: top-1
  double precision = 0.0, recall = 0.0, f1 = 0.0;

  std::vector<double> prf() const { return {precision, recall, f1}; }
};

inline void finish_macro(ClassificationStats& s) {
  double p = 0, r = 0, f = 0;
  for (const auto& t : s.per_task) {
    p += t.precision;
    r += t.recall;
    f += t.f1;
  }
  const double k = static_cast<double>(s.per_task.size());
  s.precision = p / k;
  s.recall = r / k;
  s.f1 = f / k;
}

/// Multi-attribute: predictions and labels are N x K row-major binary matrices.
inline ClassificationStats classification_stats_attributes(std::span<const std::uint8_t> predicted,
                                                           std::span<const std::uint8_t> actual,
                                                           std::size_t tasks) {
  if (tasks == 0 || predicted.empty()) throw std::invalid_argument("classification_stats: empty input");
  if (predicted.size() != actual.size() || predicted.size() % tasks != 0) {
    throw std::invalid_argument("classification_stats: misaligned prediction/label matrices");
  }
  const std::size_t n = predicted.size() / tasks;
  ClassificationStats s;
  double acc = 0.0;
  for (std::size_t k = 0; k < tasks; ++k) {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool p = predicted[i * tasks + k] != 0, a = actual[i * tasks + k] != 0;
      tp += p && a;
      fp += p && !a;
      fn += !p && a;
      tn += !p && !a;
    }
    s.per_task.push_back(binary_stats_from_counts(tp, fp, fn, tn));
    acc += s.per_task.back().accuracy;
  }
  s.accuracy = acc / static_cast<double>(tasks);
  finish_macro(s);
  return s;
}

/// Multiclass: one-vs-rest statistics per class, macro averaged.
inline ClassificationStats classification_stats_multiclass(std::span<const std::size_t> predicted,
                                                           std::span<const std::size_t> actual,
                                                           std::size_t classes) {
  if (predicted.empty() || classes == 0) throw std::invalid_argument("classification_stats: empty input");
  if (predicted.size() != actual.size()) {
    throw std::invalid_argument("classification_stats: misaligned predictions and labels");
  }
  std::vector<std::size_t> tp(classes), fp(classes), fn(classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] >= classes || actual[i] >= classes) {
      throw std::invalid_argument("classification_stats: class index out of range");
    }
    if (predicted[i] == actual[i]) {
      ++tp[actual[i]];
      ++correct;
    } else {
      ++fp[predicted[i]];
      ++fn[actual[i]];
    }
  }
  ClassificationStats s;
  const std::size_t n = predicted.size();
  for (std::size_t c = 0; c < classes; ++c)
    s.per_task.push_back(binary_stats_from_counts(tp[c], fp[c], fn[c], n - tp[c] - fp[c] - fn[c]));
  s.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  finish_macro(s);
  return s;
}

struct DeltaP {
  double percent = 0.0;            // mean over defined terms
  std::size_t undefined_terms = 0; // terms whose baseline value is 0
  bool defined() const { return undefined_terms == 0; }
};

/// 100% x mean_n (-1)^{p_n} (M_n - B_n) / B_n, p_n = 1 for lower-is-better
/// metrics and 0 otherwise.
inline DeltaP delta_p(std::span<const double> method, std::span<const double> baseline,
                      std::span<const bool> lower_is_better = {}) {
  if (method.size() != baseline.size() || method.empty()) {
    throw std::invalid_argument("delta_p: metric sets differ in size");
  }
  if (!lower_is_better.empty() && lower_is_better.size() != method.size()) {
    throw std::invalid_argument("delta_p: direction flags misaligned");
  }
  DeltaP d;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t n = 0; n < method.size(); ++n) {
    if (baseline[n] == 0.0) {
      ++d.undefined_terms;
      continue;
    }
    const double sign = !lower_is_better.empty() && lower_is_better[n] ? -1.0 : 1.0;
    sum += sign * (method[n] - baseline[n]) / baseline[n];
    ++used;
  }
  d.percent = used ? 100.0 * sum / static_cast<double>(used)
                   : std::numeric_limits<double>::quiet_NaN();
  return d;
}

// ---------------------------------------------------------------------------
// Calibration

struct ReliabilityBin {
  double low = 0.0, high = 0.0;
  std::size_t count = 0;
  double mean_conf = 0.0, accuracy = 0.0;  // 0 for empty bins
};

struct ReliabilityDiagram {
  std::vector<ReliabilityBin> bins;
  double ece = 0.0;
};

/// Bins are [e_i, e_{i+1}) except the last, which is closed.
inline ReliabilityDiagram ece_with_edges(std::span<const double> confidence,
                                         std::span<const std::uint8_t> correct,
                                         std::span<const double> edges) {
  if (confidence.size() != correct.size()) throw std::invalid_argument("ece: misaligned inputs");
  if (confidence.empty()) throw std::invalid_argument("ece: empty input");
  if (edges.size() < 2 || edges.front() != 0.0 || edges.back() != 1.0 ||
      !std::is_sorted(edges.begin(), edges.end())) {
    throw std::invalid_argument("ece: edges must ascend from 0 to 1");
  }
  const std::size_t B = edges.size() - 1;
  ReliabilityDiagram r;
  std::vector<double> conf_sum(B, 0.0), hit(B, 0.0);
  r.bins.resize(B);
  for (std::size_t b = 0; b < B; ++b) r.bins[b] = {edges[b], edges[b + 1], 0, 0.0, 0.0};
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double c = confidence[i];
    if (!(c >= 0.0 && c <= 1.0)) {
      throw std::invalid_argument("ece: confidence " + std::to_string(c) + " outside [0, 1]");
    }
    std::size_t b = static_cast<std::size_t>(
        std::upper_bound(edges.begin(), edges.end(), c) - edges.begin());
    b = std::min(b == 0 ? 0 : b - 1, B - 1);
    ++r.bins[b].count;
    conf_sum[b] += c;
    hit[b] += correct[i] ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(confidence.size());
  for (std::size_t b = 0; b < B; ++b) {
    auto& bin = r.bins[b];
    if (!bin.count) continue;
    bin.mean_conf = conf_sum[b] / static_cast<double>(bin.count);
    bin.accuracy = hit[b] / static_cast<double>(bin.count);
    r.ece += static_cast<double>(bin.count) / n * std::abs(bin.accuracy - bin.mean_conf);
  }
  return r;
}

inline constexpr std::size_t default_ece_bins = 15;

/// Equal-width bins over [0, 1].
inline ReliabilityDiagram ece(std::span<const double> confidence,
                              std::span<const std::uint8_t> correct,
                              std::size_t bins = default_ece_bins) {
  if (bins == 0) throw std::invalid_argument("ece: need at least one bin");
  std::vector<double> edges(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) edges[b] = static_cast<double>(b) / static_cast<double>(bins);
  edges.back() = 1.0;
  return ece_with_edges(confidence, correct, edges);
}

inline void write_reliability_csv(std::ostream& os, const ReliabilityDiagram& r) {
  const auto prec = os.precision(9);
  os << "bin_low,bin_high,count,mean_conf,accuracy\n";
  for (const auto& b : r.bins)
    os << b.low << ',' << b.high << ',' << b.count << ',' << b.mean_conf << ',' << b.accuracy << '\n';
  os.precision(prec);
}

// ---------------------------------------------------------------------------
// Dimensionality

struct SpectrumReport {
  std::vector<double> ratios;  // descending, sum 1 unless degenerate
  std::size_t dims_to_threshold = 0;
  bool degenerate = false;
};

inline constexpr double default_variance_threshold = 0.8;

/// Smallest prefix whose ratio sum reaches the threshold.
inline std::size_t dims_to_threshold(std::span<const double> ratios, double threshold = 0.8) {
  double s = 0.0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    s += ratios[i];
    if (s >= threshold - 1e-12) return i + 1;
  }
  return std::max<std::size_t>(ratios.size(), 1);
}

/// Row-major N x D sample matrix.
struct SampleMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  static SampleMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    SampleMatrix m;
    m.rows = rows.size();
    m.cols = rows.empty() ? 0 : rows[0].size();
    for (const auto& r : rows) {
      if (r.size() != m.cols) throw std::invalid_argument("sample matrix rows differ in length");
      m.values.insert(m.values.end(), r.begin(), r.end());
    }
    return m;
  }

  template <std::floating_point T>
  static SampleMatrix from_tensors(const std::vector<BasicTensor<T>>& rows) {
    SampleMatrix m;
    m.rows = rows.size();
    m.cols = rows.empty() ? 0 : rows[0].size();
    for (const auto& r : rows) {
      if (r.size() != m.cols) throw std::invalid_argument("sample matrix rows differ in length");
      m.values.insert(m.values.end(), r.data().begin(), r.data().end());
    }
    return m;
  }

  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> map() const {
    return {values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
  }
};

namespace detail {

inline SpectrumReport spectrum_from_eigenvalues(Eigen::VectorXd ev, double threshold) {
  SpectrumReport r;
  std::vector<double> v(ev.data(), ev.data() + ev.size());
  for (auto& x : v) x = std::max(x, 0.0);
  std::sort(v.begin(), v.end(), std::greater<>());
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  if (!(total > 0.0)) {
    r.degenerate = true;
    r.ratios.assign(v.size(), 0.0);
    r.dims_to_threshold = 1;
    return r;
  }
  for (auto& x : v) x /= total;
  r.ratios = std::move(v);
  r.dims_to_threshold = dims_to_threshold(r.ratios, threshold);
  return r;
}

inline Eigen::MatrixXd centered(const SampleMatrix& x, Eigen::RowVectorXd* mean_out = nullptr) {
  Eigen::MatrixXd m = x.map();
  const Eigen::RowVectorXd mean = m.colwise().mean();
  m.rowwise() -= mean;
  if (mean_out) *mean_out = mean;
  return m;
}

}  // namespace detail

/// Eigenvalues of the sample covariance as explained-variance ratios.
inline SpectrumReport pca_spectrum(const SampleMatrix& x, double threshold = default_variance_threshold) {
  if (x.rows < 2 || x.cols == 0) throw std::invalid_argument("pca_spectrum: need at least 2 samples");
  const Eigen::MatrixXd c = detail::centered(x);
  const Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(x.rows - 1);
  if (!(cov.trace() > 0.0)) throw std::invalid_argument("pca_spectrum: all samples identical");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
  return detail::spectrum_from_eigenvalues(es.eigenvalues(), threshold);
}

/// Projection of the centred samples onto the top-k principal axes (N x k).
inline SampleMatrix pca_project(const SampleMatrix& x, std::size_t k = 2) {
  if (x.rows < 2 || k == 0 || k > x.cols) throw std::invalid_argument("pca_project: bad dimensions");
  const Eigen::MatrixXd c = detail::centered(x);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es((c.transpose() * c).eval());
  const Eigen::Index d = static_cast<Eigen::Index>(x.cols);
  Eigen::MatrixXd axes(d, static_cast<Eigen::Index>(k));
  for (std::size_t j = 0; j < k; ++j) {
    Eigen::VectorXd a = es.eigenvectors().col(d - 1 - static_cast<Eigen::Index>(j));
    // Fixed sign: largest-magnitude component positive.
    Eigen::Index arg;
    a.cwiseAbs().maxCoeff(&arg);
    if (a(arg) < 0) a = -a;
    axes.col(static_cast<Eigen::Index>(j)) = a;
  }
  const Eigen::MatrixXd p = c * axes;
  SampleMatrix out;
  out.rows = x.rows;
  out.cols = k;
  out.values.resize(x.rows * k);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < k; ++j)
      out.values[i * k + j] = p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return out;
}

/// Generalized eigenvalues of between-class vs (regularized) within-class
/// scatter. Within-class scatter gets lambda * I, lambda = 1e-4 trace / D.
inline SpectrumReport lda_spectrum(const SampleMatrix& x, std::span<const std::size_t> labels,
                                   double threshold = default_variance_threshold) {
  if (labels.size() != x.rows) throw std::invalid_argument("lda_spectrum: labels misaligned");
  std::vector<std::size_t> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw std::invalid_argument("lda_spectrum: need at least 2 classes");
  const Eigen::Index D = static_cast<Eigen::Index>(x.cols);
  const auto m = x.map();
  Eigen::RowVectorXd mean = m.colwise().mean();
  Eigen::MatrixXd sw = Eigen::MatrixXd::Zero(D, D), sb = Eigen::MatrixXd::Zero(D, D);
  for (std::size_t c : classes) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) rows.push_back(static_cast<Eigen::Index>(i));
    if (rows.size() < 2) {
      throw std::invalid_argument("lda_spectrum: class " + std::to_string(c) + " has " +
                                  std::to_string(rows.size()) + " sample(s); need at least 2");
    }
    Eigen::MatrixXd xc(static_cast<Eigen::Index>(rows.size()), D);
    for (std::size_t r = 0; r < rows.size(); ++r) xc.row(static_cast<Eigen::Index>(r)) = m.row(rows[r]);
    const Eigen::RowVectorXd mc = xc.colwise().mean();
    xc.rowwise() -= mc;
    sw += xc.transpose() * xc;
    const Eigen::VectorXd dm = (mc - mean).transpose();
    sb += static_cast<double>(rows.size()) * dm * dm.transpose();
  }
  const double tr = sw.trace();
  const double lambda = tr > 0.0 ? 1e-4 * tr / static_cast<double>(D) : 1e-12;
  sw.diagonal().array() += lambda;
  SpectrumReport r;
  if (!(sb.trace() > 1e-12 * std::max(tr, 1e-300))) {
    r.degenerate = true;
    r.ratios.assign(static_cast<std::size_t>(D), 0.0);
    r.dims_to_threshold = 1;
    return r;
  }
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(sb, sw, Eigen::EigenvaluesOnly);
  return detail::spectrum_from_eigenvalues(es.eigenvalues(), threshold);
}

// ---------------------------------------------------------------------------
// Informativeness

inline constexpr std::size_t informativeness_subset = 512;

/// Per decoder unit: mean over inputs of (d o / d a_n) * a_n, o the true-class
/// logit of the active decision layer and a the unit-gain decoder activity.
/// At most `max_samples` inputs (in order) are used.
template <std::floating_point T>
std::vector<double> informativeness_grad(const BasicModel<T>& model,
                                         const std::vector<BasicTensor<T>>& inputs,
                                         std::span<const std::size_t> labels,
                                         std::size_t max_samples = informativeness_subset) {
  if (labels.size() != inputs.size()) {
    throw std::invalid_argument("informativeness_grad: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(inputs.size()) + " inputs");
  }
  if (inputs.empty()) throw std::invalid_argument("informativeness_grad: no inputs");
  const std::size_t n = std::min(max_samples, inputs.size());
  std::vector<double> score(model.decoder_units(), 0.0);
  const auto& head = model.active_head();
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = model_features(model, inputs[i]);
    const BasicTensor<T> a = model_tail(model, f, std::span<const T>{});
    if (labels[i] >= head.hyper().out) throw std::invalid_argument("informativeness_grad: label out of range");
    BasicTensor<T> up({head.hyper().out});
    up[labels[i]] = T(1);
    BasicTensor<T> da;
    layer_backward_into(head, a, up, &da, static_cast<BasicParamGrads<T>*>(nullptr));
    for (std::size_t u = 0; u < score.size(); ++u)
      score[u] += static_cast<double>(da[u]) * static_cast<double>(a[u]);
  }
  for (auto& s : score) s /= static_cast<double>(n);
  return score;
}

struct DPrime {
  double value = 0.0;
  bool zero_variance = false;  // value is +inf
};

/// |mu1 - mu0| / sqrt((var1 + var0) / 2), population variances.
inline DPrime informativeness_dprime(std::span<const double> activity,
                                     std::span<const std::uint8_t> labels) {
  if (activity.size() != labels.size()) throw std::invalid_argument("dprime: misaligned inputs");
  double s[2] = {0, 0}, ss[2] = {0, 0};
  std::size_t n[2] = {0, 0};
  for (std::size_t i = 0; i < activity.size(); ++i) {
    const int c = labels[i] ? 1 : 0;
    s[c] += activity[i];
    ++n[c];
  }
  if (!n[0] || !n[1]) throw std::invalid_argument("dprime: both classes must be present");
  const double mu[2] = {s[0] / static_cast<double>(n[0]), s[1] / static_cast<double>(n[1])};
  for (std::size_t i = 0; i < activity.size(); ++i) {
    const int c = labels[i] ? 1 : 0;
    ss[c] += (activity[i] - mu[c]) * (activity[i] - mu[c]);
  }
  const double pooled = 0.5 * (ss[0] / static_cast<double>(n[0]) + ss[1] / static_cast<double>(n[1]));
  if (!(pooled > 0.0)) return {std::numeric_limits<double>::infinity(), true};
  return {std::abs(mu[1] - mu[0]) / std::sqrt(pooled), false};
}

/// d' from summary statistics (standard deviations).
inline double dprime_from_moments(double mu1, double mu0, double sigma1, double sigma0) {
  const double pooled = 0.5 * (sigma1 * sigma1 + sigma0 * sigma0);
  if (!(pooled > 0.0)) return std::numeric_limits<double>::infinity();
  return std::abs(mu1 - mu0) / std::sqrt(pooled);
}

/// Average ranks (ties share the mean rank), 1-based.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) return 0.0;  // constant input: no association
  return sxy / std::sqrt(sxx * syy);
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need >= 2 aligned pairs");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  return pearson(rx, ry);
}

struct PermutationResult {
  double statistic = 0.0;
  double p_value = 1.0;  // one-sided, (1 + #{null >= observed}) / (1 + permutations)
  std::size_t permutations = 0;
};

/// Paired (score, gain) samples from one task.
struct RankGroup {
  std::vector<double> scores, gains;
};

/// Mean Spearman rho over groups; the null shuffles gains within each group.
inline PermutationResult grouped_spearman_test(const std::vector<RankGroup>& groups,
                                               std::size_t permutations, std::uint64_t seed) {
  if (groups.empty()) throw std::invalid_argument("grouped_spearman_test: no groups");
  std::vector<std::vector<double>> rs, rg;
  for (const auto& g : groups) {
    if (g.scores.size() != g.gains.size() || g.scores.size() < 2) {
      throw std::invalid_argument("grouped_spearman_test: each group needs >= 2 aligned pairs");
    }
    rs.push_back(average_ranks(g.scores));
    rg.push_back(average_ranks(g.gains));
  }
  auto stat = [&](const std::vector<std::vector<double>>& gains) {
    double s = 0.0;
    for (std::size_t k = 0; k < rs.size(); ++k) s += pearson(rs[k], gains[k]);
    return s / static_cast<double>(rs.size());
  };
  PermutationResult r;
  r.statistic = stat(rg);
  r.permutations = permutations;
  Rng rng = make_rng(seed, {stream::permutation});
  std::size_t exceed = 0;
  auto shuffled = rg;
  for (std::size_t p = 0; p < permutations; ++p) {
    for (auto& g : shuffled) std::shuffle(g.begin(), g.end(), rng);
    if (stat(shuffled) >= r.statistic - 1e-12) ++exceed;
  }
  r.p_value = static_cast<double>(exceed + 1) / static_cast<double>(permutations + 1);
  return r;
}

inline PermutationResult spearman_permutation_test(std::span<const double> scores,
                                                   std::span<const double> gains,
                                                   std::size_t permutations, std::uint64_t seed) {
  RankGroup g{{scores.begin(), scores.end()}, {gains.begin(), gains.end()}};
  return grouped_spearman_test({g}, permutations, seed);
}

struct InformativenessReport {
  std::vector<double> scores, gains;
  std::vector<std::size_t> bin_of_unit;
  std::vector<double> bin_mean_gain, bin_mean_score;
  std::vector<std::size_t> bin_count;
  double spearman_rho = 0.0;
};

/// Units sorted by score (ties by index) and cut into Q equal-count bins.
inline InformativenessReport gain_vs_informativeness(std::span<const double> gains,
                                                     std::span<const double> scores,
                                                     std::size_t bins) {
  if (gains.size() != scores.size()) throw std::invalid_argument("gain_vs_informativeness: misaligned");
  if (bins == 0 || bins > scores.size()) {
    throw std::invalid_argument("gain_vs_informativeness: " + std::to_string(bins) +
                                " bins for " + std::to_string(scores.size()) + " units");
  }
  for (double s : scores)
    if (!std::isfinite(s)) throw std::invalid_argument("gain_vs_informativeness: non-finite score");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  InformativenessReport r;
  r.scores.assign(scores.begin(), scores.end());
  r.gains.assign(gains.begin(), gains.end());
  r.bin_of_unit.resize(n);
  r.bin_mean_gain.assign(bins, 0.0);
  r.bin_mean_score.assign(bins, 0.0);
  r.bin_count.assign(bins, 0);
  for (std::size_t pos = 0; pos < n; ++pos) {
    const std::size_t b = pos * bins / n, u = order[pos];
    r.bin_of_unit[u] = b;
    r.bin_mean_gain[b] += gains[u];
    r.bin_mean_score[b] += scores[u];
    ++r.bin_count[b];
  }
  for (std::size_t b = 0; b < bins; ++b) {
    r.bin_mean_gain[b] /= static_cast<double>(r.bin_count[b]);
    r.bin_mean_score[b] /= static_cast<double>(r.bin_count[b]);
  }
  r.spearman_rho = n >= 2 ? spearman(scores, gains) : 0.0;
  return r;
}

}  // namespace comodnet
