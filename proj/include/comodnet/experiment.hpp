// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

// Pretraining, fine-tuning variants, the evaluation-mode matrix, analyses and
// the corruption sweep. Every random draw comes from a stream keyed by
// (seed, purpose, sample, task), so results do not depend on evaluation order,
// on which rows are requested, or on corruption of other samples.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "comodnet/adam.hpp"
#include "comodnet/config.hpp"
#include "comodnet/data.hpp"
#include "comodnet/hash.hpp"
#include "comodnet/loss.hpp"
#include "comodnet/metrics.hpp"
#include "comodnet/model.hpp"
#include "comodnet/modulation.hpp"

namespace comodnet {

struct Logger {
  bool quiet = false;
  void operator()(const std::string& s) const {
    if (!quiet) std::cerr << s << '\n';
  }
};

struct MetricRow {
  std::string phase;
  std::size_t epoch = 0, batch = 0;
  std::string split, metric;
  double value = 0.0;
  std::uint64_t seed = 0;
};

class MetricSeries {
 public:
  void add(std::string phase, std::size_t epoch, std::size_t batch, std::string split,
           std::string metric, double value, std::uint64_t seed) {
    rows_.push_back({std::move(phase), epoch, batch, std::move(split), std::move(metric), value, seed});
  }

  void append(const MetricSeries& o) { rows_.insert(rows_.end(), o.rows_.begin(), o.rows_.end()); }

  const std::vector<MetricRow>& rows() const { return rows_; }

  std::vector<double> values(std::string_view phase, std::string_view split, std::string_view metric) const {
    std::vector<double> v;
    for (const auto& r : rows_)
      if (r.phase == phase && r.split == split && r.metric == metric) v.push_back(r.value);
    return v;
  }

  void write_csv(std::ostream& os) const {
    const auto prec = os.precision(9);
    os << "phase,epoch,batch,split,metric,value,seed\n";
    for (const auto& r : rows_)
      os << r.phase << ',' << r.epoch << ',' << r.batch << ',' << r.split << ',' << r.metric << ','
         << r.value << ',' << r.seed << '\n';
    os.precision(prec);
  }

 private:
  std::vector<MetricRow> rows_;
};

// ---------------------------------------------------------------------------
// Setup

inline Dataset make_dataset(const RunConfig& c) {
  if (c.data_kind == DatasetKind::attribute) {
    AttributeDatasetConfig a = c.attribute;
    a.seed = c.data_seed;
    return gen_attribute_dataset(a);
  }
  if (!c.cifar_path.empty()) return load_cifar100_binary(c.cifar_path);
  HierarchyDatasetConfig h = c.hierarchy;
  h.seed = c.data_seed;
  return gen_hierarchy_dataset(h);
}

inline ArchitectureSpec make_architecture(const RunConfig& c, const Dataset& d) {
  ArchitectureSpec a;
  a.input = d.image_shape;
  a.backbone = c.backbone;
  a.encoder_channels = c.encoder_channels;
  a.encoder_kernel = c.encoder_kernel;
  a.processing_channels = c.processing_channels;
  a.processing_kernel = c.processing_kernel;
  a.decoder_units = c.decoder_units;
  a.wiring = c.wiring;
  a.biases = c.biases;
  a.controller.tasks = d.task_count();
  a.controller.hidden = c.controller_hidden;
  a.controller.output = c.controller_output;
  a.controller.unit_start = c.controller_unit_start;
  if (d.kind == DatasetKind::attribute) {
    a.head_outputs = d.tasks;
  } else {
    a.head_outputs = d.superclasses;
    a.finetune_outputs = d.fine_classes;
  }
  return a;
}

inline Model build_run_model(const RunConfig& c, const Dataset& d, std::uint64_t seed) {
  return build_model<float>(make_architecture(c, d), seed);
}

/// A (sample, task) evaluation unit. Attribute data yields K pairs per image;
/// hierarchy data yields one pair whose task is the superclass.
struct Pair {
  std::size_t sample = 0;
  std::size_t task = 0;
};

inline std::vector<Pair> make_pairs(const Dataset& d, const std::vector<std::size_t>& samples) {
  std::vector<Pair> p;
  for (std::size_t i : samples) {
    if (d.kind == DatasetKind::attribute) {
      for (std::size_t k = 0; k < d.tasks; ++k) p.push_back({i, k});
    } else {
      p.push_back({i, d.coarse_labels[i]});
    }
  }
  return p;
}

namespace detail {

inline std::vector<AdamState> adam_states(Model& m, const AdamConfig& cfg) {
  std::vector<AdamState> s;
  for (auto* l : m.parameter_layers()) s.push_back(AdamState::for_params(l->params(), cfg));
  return s;
}

inline void adam_update_model(Model& m, std::vector<AdamState>& st, const ModelGrads& g) {
  auto layers = m.parameter_layers();
  for (std::size_t i = 0; i < layers.size(); ++i)
    adam_step(st[i], layers[i]->params(), g.grads[i], layers[i]->name());
}

/// Single-attribute sigmoid cross-entropy on logit k.
inline double attribute_pair_loss(const Tensor& logits, std::size_t k, float y, Tensor& dlogits) {
  const double x = logits[k];
  dlogits = Tensor(logits.shape());
  dlogits[k] = static_cast<float>(sigmoid(x) - y);
  return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
}

inline bool same_feature_layers(const Model& a, const Model& b) {
  if (a.backbone.size() != b.backbone.size()) return false;
  for (std::size_t i = 0; i < a.backbone.size(); ++i) {
    if (a.backbone[i].has_params() &&
        (a.backbone[i].params().weights != b.backbone[i].params().weights ||
         a.backbone[i].params().biases != b.backbone[i].params().biases))
      return false;
  }
  if (a.encoder.params().weights != b.encoder.params().weights ||
      a.encoder.params().biases != b.encoder.params().biases)
    return false;
  if (a.encoder_skip.has_value() != b.encoder_skip.has_value()) return false;
  return !a.encoder_skip || a.encoder_skip->params().weights == b.encoder_skip->params().weights;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pretraining

using EpochHook = std::function<void(const Model&, std::size_t epoch)>;

struct PretrainOutcome {
  MetricSeries series;
  std::vector<std::pair<double, Model>> snapshots;  // (fraction of epochs, model)
};

/// Plain-mode validation metrics of the pretraining objective.
inline std::map<std::string, double> pretrain_validation(const Model& m, const Dataset& d,
                                                         const std::vector<std::size_t>& idx) {
  double loss = 0.0;
  std::map<std::string, double> out;
  if (d.kind == DatasetKind::attribute) {
    std::vector<std::uint8_t> pred, act;
    for (std::size_t i : idx) {
      const auto r = model_forward(m, d.images[i], TaskId::make(0, m.tasks()), ForwardMode::plain);
      loss += loss_multi_attribute_bce(r.logits, d.attribute_row(i)).loss;
      for (std::size_t k = 0; k < d.tasks; ++k) {
        pred.push_back(r.logits[k] > 0.0f);
        act.push_back(d.attribute_row(i)[k] > 0.5f);
      }
    }
    const auto s = classification_stats_attributes(pred, act, d.tasks);
    out["accuracy"] = s.accuracy;
    out["f1"] = s.f1;
  } else {
    std::size_t correct = 0;
    for (std::size_t i : idx) {
      const auto r = model_forward(m, d.images[i], TaskId::make(0, m.tasks()), ForwardMode::plain);
      loss += loss_softmax_ce(r.logits, d.coarse_labels[i]).loss;
      const auto arg = static_cast<std::size_t>(
          std::max_element(r.logits.data().begin(), r.logits.data().end()) - r.logits.data().begin());
      correct += arg == d.coarse_labels[i];
    }
    out["accuracy"] = static_cast<double>(correct) / static_cast<double>(idx.size());
  }
  out["loss"] = loss / static_cast<double>(idx.size());
  return out;
}

/// Trains all network parameters on the primary objective: every attribute
/// (attribute data) or the superclass (hierarchy data). The controller stays
/// at its initial context unless joint pretraining is configured, in which
/// case the forward runs in attention mode.
inline PretrainOutcome pretrain(const RunConfig& cfg, Model& m, const Dataset& d, const Split& split,
                                std::uint64_t seed, const Logger& log = {},
                                const EpochHook& on_epoch = {}) {
  if (d.image_shape != m.spec.input) {
    throw DataError("dataset images " + shape_str(d.image_shape) + " do not match model input " +
                    shape_str(m.spec.input));
  }
  m.use_finetune_head = false;
  partition_parameters(m, Phase::pretrain);
  const bool joint = cfg.controller_joint_pretrain;
  if (joint) {
    m.controller.hidden.params().trainable = true;
    m.controller.output.params().trainable = true;
  }
  const ForwardMode mode = joint ? ForwardMode::attention : ForwardMode::plain;
  AdamConfig ac = cfg.adam;
  ac.lr = cfg.pretrain_lr;
  auto states = detail::adam_states(m, ac);
  PretrainOutcome out;
  std::vector<std::size_t> order = split.train;
  std::vector<std::size_t> snapshot_epochs;
  for (double f : cfg.pretrain_checkpoints)
    snapshot_epochs.push_back(static_cast<std::size_t>(std::ceil(f * static_cast<double>(cfg.pretrain_epochs))));
  if (cfg.pretrain_epochs == 0) {
    for (double f : cfg.pretrain_checkpoints) out.snapshots.emplace_back(f, m);
    return out;
  }
  ModelGrads grads(m);
  for (std::size_t epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
    Rng shuffle = make_rng(seed, {stream::shuffle, 0, epoch});
    std::shuffle(order.begin(), order.end(), shuffle);
    double epoch_loss = 0.0;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.pretrain_batch, ++batch) {
      const std::size_t end = std::min(order.size(), start + cfg.pretrain_batch);
      grads.zero();
      double batch_loss = 0.0;
      for (std::size_t j = start; j < end; ++j) {
        const std::size_t i = order[j];
        std::size_t task = 0;
        if (joint) {
          if (d.kind == DatasetKind::hierarchy) {
            task = d.coarse_labels[i];
          } else {
            Rng tr = make_rng(seed, {stream::shuffle, 1, epoch, i});
            task = std::uniform_int_distribution<std::size_t>(0, d.tasks - 1)(tr);
          }
        }
        const auto f = model_features(m, d.images[i], true);
        ForwardOptions opt;
        opt.keep_tapes = true;
        const auto r = model_forward_features(m, f, TaskId::make(task, m.tasks()), mode, opt);
        const LossResult L = d.kind == DatasetKind::attribute
                                 ? loss_multi_attribute_bce(r.logits, d.attribute_row(i))
                                 : loss_softmax_ce(r.logits, d.coarse_labels[i]);
        if (!std::isfinite(L.loss)) {
          throw NumericalError("pretraining diverged at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch));
        }
        batch_loss += L.loss;
        model_backward(m, f, r, mode, L.grad, grads);
      }
      grads.scale(1.0f / static_cast<float>(end - start));
      detail::adam_update_model(m, states, grads);
      epoch_loss += batch_loss;
    }
    epoch_loss /= static_cast<double>(order.size());
    out.series.add("pretrain", epoch, batch, "train", "loss", epoch_loss, seed);
    const auto val = pretrain_validation(m, d, split.validation);
    for (const auto& [k, v] : val) out.series.add("pretrain", epoch, batch, "validation", k, v, seed);
    log("pretrain seed " + std::to_string(seed) + " epoch " + std::to_string(epoch) + ": loss " +
        std::to_string(epoch_loss) + ", validation accuracy " + std::to_string(val.at("accuracy")));
    for (std::size_t s = 0; s < snapshot_epochs.size(); ++s)
      if (snapshot_epochs[s] == epoch) out.snapshots.emplace_back(cfg.pretrain_checkpoints[s], m);
    if (on_epoch) on_epoch(m, epoch);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pair evaluation core

/// Features of each listed sample (optionally corrupted), indexed like `samples`.
inline std::vector<Features> compute_features(const Model& m, const Dataset& d,
                                              const std::vector<std::size_t>& samples,
                                              const CorruptionSpec* corruption = nullptr,
                                              std::uint64_t seed = 0) {
  std::vector<Features> f;
  f.reserve(samples.size());
  for (std::size_t i : samples) {
    if (corruption && corruption->severity > 0) {
      Rng rng = make_rng(seed, {stream::corruption, static_cast<std::uint64_t>(corruption->kind),
                                static_cast<std::uint64_t>(corruption->severity), i});
      f.push_back(model_features(m, corrupt(d.images[i], *corruption, rng)));
    } else {
      f.push_back(model_features(m, d.images[i]));
    }
  }
  return f;
}

/// Forward of one pair with its own modulator stream.
inline ForwardResult forward_pair(const Model& m, const Features& f, const Pair& p, ForwardMode mode,
                                  const ModulatorConfig& mod, std::uint64_t seed,
                                  std::uint64_t purpose, bool keep_tapes = false) {
  Rng rng = make_rng(seed, {stream::modulator, purpose, p.sample, p.task});
  ForwardOptions opt;
  opt.modulator = &mod;
  opt.rng = &rng;
  opt.keep_tapes = keep_tapes;
  return model_forward_features(m, f, TaskId::make(p.task, m.tasks()), mode, opt);
}

namespace purpose {
inline constexpr std::uint64_t train = 0, eval = 1, task_gains = 2;
}

struct PairPrediction {
  std::size_t predicted = 0;  // class (hierarchy) or 0/1 (attribute)
  double confidence = 0.0;
  bool correct = false;
  double loss = 0.0;
};

inline PairPrediction predict_pair(const Dataset& d, const Pair& p, const Tensor& logits) {
  PairPrediction out;
  if (d.kind == DatasetKind::attribute) {
    const double prob = sigmoid(logits[p.task]);
    const float y = d.attribute_row(p.sample)[p.task];
    out.predicted = prob > 0.5 ? 1 : 0;
    out.confidence = std::max(prob, 1.0 - prob);
    out.correct = (out.predicted == 1) == (y > 0.5f);
    Tensor dl;
    out.loss = detail::attribute_pair_loss(logits, p.task, y, dl);
  } else {
    const auto probs = softmax<float>(logits.data());
    out.predicted = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    out.confidence = probs[out.predicted];
    out.correct = out.predicted == d.fine_labels[p.sample];
    out.loss = -std::log(std::max(probs[d.fine_labels[p.sample]], 1e-300));
  }
  return out;
}

/// Task metric of a set of predictions: macro F1 over attributes, or top-1
/// accuracy over fine classes.
struct PredictionSet {
  std::vector<Pair> pairs;
  std::vector<PairPrediction> predictions;

  ClassificationStats stats(const Dataset& d) const {
    if (d.kind == DatasetKind::attribute) {
      std::map<std::size_t, std::size_t> row_of;  // sample -> row
      std::vector<std::size_t> rows;
      for (const auto& p : pairs)
        if (row_of.emplace(p.sample, row_of.size()).second) rows.push_back(p.sample);
      std::vector<std::uint8_t> pred(rows.size() * d.tasks, 0), act(rows.size() * d.tasks, 0);
      for (std::size_t j = 0; j < pairs.size(); ++j) {
        const std::size_t r = row_of.at(pairs[j].sample), k = pairs[j].task;
        pred[r * d.tasks + k] = predictions[j].predicted == 1;
        act[r * d.tasks + k] = d.attribute_row(pairs[j].sample)[k] > 0.5f;
      }
      return classification_stats_attributes(pred, act, d.tasks);
    }
    std::vector<std::size_t> pred, act;
    for (std::size_t j = 0; j < pairs.size(); ++j) {
      pred.push_back(predictions[j].predicted);
      act.push_back(d.fine_labels[pairs[j].sample]);
    }
    return classification_stats_multiclass(pred, act, d.fine_classes);
  }

  ReliabilityDiagram reliability(std::size_t bins) const {
    std::vector<double> c;
    std::vector<std::uint8_t> ok;
    for (const auto& p : predictions) {
      c.push_back(p.confidence);
      ok.push_back(p.correct);
    }
    return ece(c, ok, bins);
  }

  double mean_loss() const {
    double s = 0.0;
    for (const auto& p : predictions) s += p.loss;
    return s / static_cast<double>(predictions.size());
  }
};

inline double headline_metric(const Dataset& d, const ClassificationStats& s) {
  return d.kind == DatasetKind::attribute ? s.f1 : s.accuracy;
}

inline std::string headline_name(const Dataset& d) {
  return d.kind == DatasetKind::attribute ? "f1" : "accuracy";
}

// ---------------------------------------------------------------------------
// Fine-tuning

inline ForwardMode variant_train_mode(Variant v) {
  switch (v) {
    case Variant::readout: return ForwardMode::plain;
    case Variant::attention: return ForwardMode::attention;
    case Variant::comod: return ForwardMode::comod_train;
  }
  return ForwardMode::plain;
}

inline ForwardMode variant_eval_mode(Variant v) {
  switch (v) {
    case Variant::readout: return ForwardMode::plain;
    case Variant::attention: return ForwardMode::attention;
    case Variant::comod: return ForwardMode::comod_test;
  }
  return ForwardMode::plain;
}

inline PredictionSet predict_pairs(const Model& m, const Dataset& d, const std::vector<Pair>& pairs,
                                   const std::vector<Features>& feats,
                                   const std::map<std::size_t, std::size_t>& feat_of_sample,
                                   ForwardMode mode, const ModulatorConfig& mod, std::uint64_t seed) {
  PredictionSet s;
  s.pairs = pairs;
  for (const auto& p : pairs) {
    const auto r = forward_pair(m, feats[feat_of_sample.at(p.sample)], p, mode, mod, seed, purpose::eval);
    s.predictions.push_back(predict_pair(d, p, r.logits));
  }
  return s;
}

inline std::map<std::size_t, std::size_t> index_of(const std::vector<std::size_t>& samples) {
  std::map<std::size_t, std::size_t> m;
  for (std::size_t j = 0; j < samples.size(); ++j) m.emplace(samples[j], j);
  return m;
}

/// Per-task decoder gains estimated on every training pair, then averaged.
inline std::vector<GainVector> compute_task_gains(const Model& m, const Dataset& d,
                                                  const std::vector<std::size_t>& samples,
                                                  const std::vector<Features>& feats,
                                                  const ModulatorConfig& mod, std::uint64_t seed) {
  std::vector<std::vector<GainVector>> per_task(m.tasks());
  const auto pairs = make_pairs(d, samples);
  const auto at = index_of(samples);
  for (const auto& p : pairs) {
    const auto r = forward_pair(m, feats[at.at(p.sample)], p, ForwardMode::comod_test, mod, seed,
                                purpose::task_gains);
    per_task[p.task].push_back(*r.gains);
  }
  std::vector<GainVector> out;
  for (std::size_t k = 0; k < per_task.size(); ++k) {
    if (per_task[k].empty()) {
      GainVector g;
      g.raw.assign(m.decoder_units(), 0.0);
      g.normalized.assign(m.decoder_units(), 1.0);
      g.degenerate = true;
      out.push_back(std::move(g));
    } else {
      out.push_back(average_gains_per_task(per_task[k]));
    }
  }
  return out;
}

struct FinetuneOutcome {
  Model model;
  MetricSeries series;
  std::string frozen_hash_before, frozen_hash_after;
  ParameterPartition partition;
};

/// Fine-tunes one variant from the pretrained model. Attribute data trains
/// the controller only (readout: nothing); hierarchy data attaches a fresh
/// fine-class decision layer trained with the controller (readout: the layer
/// alone). Fails hard if any frozen parameter changes.
inline FinetuneOutcome finetune(const RunConfig& cfg, const Model& pretrained, const Dataset& d,
                                const Split& split, Variant variant, std::uint64_t seed,
                                const Logger& log = {}) {
  FinetuneOutcome out{pretrained, {}, {}, {}, {}};
  Model& m = out.model;
  const bool hierarchy = d.kind == DatasetKind::hierarchy;
  if (hierarchy) {
    Rng head_rng = make_rng(seed, {stream::head});
    m.attach_finetune_head(d.fine_classes, head_rng);
  }
  FinetuneScope scope = FinetuneScope::controller_only;
  if (hierarchy) {
    scope = variant == Variant::readout ? FinetuneScope::head_only : FinetuneScope::controller_and_head;
  }
  out.partition = partition_parameters(m, Phase::finetune, scope);
  if (!hierarchy && variant == Variant::readout) {
    for (auto* l : m.parameter_layers()) l->params().trainable = false;
    out.partition.frozen.insert(out.partition.frozen.end(), out.partition.trainable.begin(),
                                out.partition.trainable.end());
    out.partition.trainable.clear();
  }
  out.frozen_hash_before = frozen_parameter_hash(m);

  const std::string phase = "finetune_" + std::string(to_string(variant));
  const ForwardMode train_mode = variant_train_mode(variant);
  const ForwardMode eval_mode = variant_eval_mode(variant);
  const auto train_feats = compute_features(m, d, split.train);
  const auto train_at = index_of(split.train);
  std::vector<std::size_t> curve_samples(
      split.validation.begin(),
      split.validation.begin() + static_cast<std::ptrdiff_t>(std::min(cfg.curve_samples, split.validation.size())));
  const auto curve_feats = compute_features(m, d, curve_samples);
  const auto curve_at = index_of(curve_samples);
  const auto curve_pairs = make_pairs(d, curve_samples);
  auto curve_point = [&](std::size_t epoch, std::size_t batch) {
    if (curve_pairs.empty()) return;
    const auto ps = predict_pairs(m, d, curve_pairs, curve_feats, curve_at, eval_mode, cfg.modulator, seed);
    out.series.add(phase, epoch, batch, "validation", headline_name(d), headline_metric(d, ps.stats(d)), seed);
  };

  const bool trains = !out.partition.trainable.empty();
  AdamConfig ac = cfg.adam;
  ac.lr = cfg.finetune_lr;
  auto states = detail::adam_states(m, ac);
  ModelGrads grads(m);
  auto pairs = make_pairs(d, split.train);
  curve_point(0, 0);
  for (std::size_t epoch = 1; trains && epoch <= cfg.finetune_epochs; ++epoch) {
    Rng shuffle = make_rng(seed, {stream::shuffle, 2, epoch});
    std::shuffle(pairs.begin(), pairs.end(), shuffle);
    double epoch_loss = 0.0;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < pairs.size(); start += cfg.finetune_batch) {
      const std::size_t end = std::min(pairs.size(), start + cfg.finetune_batch);
      grads.zero();
      double batch_loss = 0.0;
      for (std::size_t j = start; j < end; ++j) {
        const Pair& p = pairs[j];
        const Features& f = train_feats[train_at.at(p.sample)];
        Rng rng = make_rng(seed, {stream::modulator, purpose::train, epoch, p.sample, p.task});
        ForwardOptions opt;
        opt.modulator = &cfg.modulator;
        opt.rng = &rng;
        opt.keep_tapes = true;
        const auto r = model_forward_features(m, f, TaskId::make(p.task, m.tasks()), train_mode, opt);
        Tensor dlogits;
        double loss;
        if (hierarchy) {
          auto L = loss_softmax_ce(r.logits, d.fine_labels[p.sample]);
          loss = L.loss;
          dlogits = std::move(L.grad);
        } else {
          loss = detail::attribute_pair_loss(r.logits, p.task, d.attribute_row(p.sample)[p.task], dlogits);
        }
        if (!std::isfinite(loss)) {
          throw NumericalError(phase + " diverged at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch));
        }
        batch_loss += loss;
        model_backward(m, f, r, train_mode, dlogits, grads);
      }
      grads.scale(1.0f / static_cast<float>(end - start));
      detail::adam_update_model(m, states, grads);
      epoch_loss += batch_loss;
      ++batch;
      out.series.add(phase, epoch, batch, "train", "loss", batch_loss / static_cast<double>(end - start), seed);
      if (epoch == 1 && batch <= cfg.curve_batches && batch % cfg.curve_every == 0) curve_point(epoch, batch);
    }
    log(phase + " seed " + std::to_string(seed) + " epoch " + std::to_string(epoch) + ": loss " +
        std::to_string(epoch_loss / static_cast<double>(pairs.size())));
  }
  out.frozen_hash_after = frozen_parameter_hash(m);
  if (out.frozen_hash_after != out.frozen_hash_before) {
    throw NumericalError(phase + ": frozen parameters changed during fine-tuning");
  }
  m.controller_trained = variant != Variant::readout;
  if (variant != Variant::readout) {
    m.task_gains = compute_task_gains(m, d, split.train, train_feats, cfg.modulator, seed);
  }
  const auto val_feats = compute_features(m, d, split.validation);
  const auto ps = predict_pairs(m, d, make_pairs(d, split.validation), val_feats, index_of(split.validation),
                                eval_mode, cfg.modulator, seed);
  out.series.add(phase, cfg.finetune_epochs, 0, "validation", headline_name(d), headline_metric(d, ps.stats(d)), seed);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation matrix

using VariantModels = std::map<Variant, Model>;

struct RowOutcome {
  EvalRow row = EvalRow::attention;
  PredictionSet predictions;
  ClassificationStats stats;
  ReliabilityDiagram reliability;
  double loss = 0.0;
  // Captures, aligned with predictions.pairs.
  std::vector<std::vector<double>> readout_input;  // gain-weighted decoder activity
  std::vector<std::vector<double>> decoder;        // unit-gain decoder activity
  std::vector<GainVector> gains;                   // comodulation rows only
};

struct EvalCapture {
  bool activity = false;
  bool gains = false;
};

/// Rows whose fine-tuned variant is missing are rejected.
inline std::vector<RowOutcome> evaluate(const RunConfig& cfg, const VariantModels& models, const Dataset& d,
                                        const std::vector<std::size_t>& samples,
                                        const std::vector<EvalRow>& rows, std::uint64_t seed,
                                        const CorruptionSpec* corruption = nullptr,
                                        EvalCapture capture = {}) {
  if (rows.empty()) throw std::invalid_argument("evaluate: no rows requested");
  for (EvalRow r : rows) {
    const Variant v = row_variant(r);
    if (!models.count(v)) {
      throw DataError("evaluation row '" + std::string(to_string(r)) + "' needs the '" +
                      std::string(to_string(v)) + "' fine-tuned model");
    }
    const Model& m = models.at(v);
    if (is_comod(row_mode(r)) && !m.controller_trained) {
      throw DataError("evaluation row '" + std::string(to_string(r)) +
                      "' needs a model fine-tuned with a controller");
    }
  }
  const Model& ref = models.at(row_variant(rows.front()));
  for (const auto& [v, m] : models) {
    if (!detail::same_feature_layers(ref, m)) {
      throw DataError("fine-tuned models do not share the pretrained feature layers");
    }
  }
  const auto feats = compute_features(ref, d, samples, corruption, seed);
  const auto at = index_of(samples);
  const auto pairs = make_pairs(d, samples);
  std::vector<RowOutcome> out;
  for (EvalRow row : rows) {
    const Model& m = models.at(row_variant(row));
    const ForwardMode mode = row_mode(row);
    RowOutcome o;
    o.row = row;
    o.predictions.pairs = pairs;
    for (const auto& p : pairs) {
      const auto r = forward_pair(m, feats[at.at(p.sample)], p, mode, cfg.modulator, seed, purpose::eval);
      o.predictions.predictions.push_back(predict_pair(d, p, r.logits));
      if (capture.activity) {
        o.readout_input.emplace_back(r.gained.data().begin(), r.gained.data().end());
        o.decoder.emplace_back(r.decoder.data().begin(), r.decoder.data().end());
      }
      if (capture.gains && r.gains) o.gains.push_back(*r.gains);
      if (capture.gains && mode == ForwardMode::comod_test_fixed) o.gains.push_back(m.task_gains.at(p.task));
    }
    o.stats = o.predictions.stats(d);
    o.reliability = o.predictions.reliability(cfg.ece_bins);
    o.loss = o.predictions.mean_loss();
    out.push_back(std::move(o));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Analyses

struct GainInformativeness {
  std::vector<std::size_t> tasks;             // tasks with enough usable units
  std::vector<InformativenessReport> reports; // per task
  std::vector<std::vector<std::size_t>> units;
  PermutationResult test;
  std::string measure;  // "dprime" or "grad_x_activation"
};

/// Per task: informativeness score per decoder unit against the task's mean
/// normalized gain; units with undefined scores are dropped.
inline GainInformativeness gain_informativeness(const RunConfig& cfg, const Model& comod_model,
                                                const Dataset& d, const RowOutcome& comod_row,
                                                std::uint64_t seed) {
  if (comod_row.gains.size() != comod_row.predictions.pairs.size() || comod_row.decoder.empty()) {
    throw std::invalid_argument("gain_informativeness: row was evaluated without captures");
  }
  GainInformativeness g;
  const std::size_t units = comod_model.decoder_units();
  const auto& pairs = comod_row.predictions.pairs;
  std::vector<RankGroup> groups;
  for (std::size_t k = 0; k < comod_model.tasks(); ++k) {
    std::vector<std::size_t> js;
    for (std::size_t j = 0; j < pairs.size(); ++j)
      if (pairs[j].task == k) js.push_back(j);
    if (js.size() > cfg.info_subset) js.resize(cfg.info_subset);
    if (js.size() < 2) continue;
    std::vector<double> mean_gain(units, 0.0);
    for (std::size_t j : js)
      for (std::size_t u = 0; u < units; ++u) mean_gain[u] += comod_row.gains[j].normalized[u];
    for (auto& v : mean_gain) v /= static_cast<double>(js.size());
    std::vector<double> score(units, 0.0);
    std::vector<bool> usable(units, true);
    if (d.kind == DatasetKind::attribute) {
      g.measure = "dprime";
      std::vector<std::uint8_t> y;
      for (std::size_t j : js) y.push_back(d.attribute_row(pairs[j].sample)[k] > 0.5f);
      if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;
      for (std::size_t u = 0; u < units; ++u) {
        std::vector<double> a;
        for (std::size_t j : js) a.push_back(comod_row.decoder[j][u]);
        const DPrime dp = informativeness_dprime(a, y);
        usable[u] = !dp.zero_variance;
        score[u] = dp.zero_variance ? 0.0 : dp.value;
      }
    } else {
      g.measure = "grad_x_activation";
      const auto& head = comod_model.active_head();
      for (std::size_t j : js) {
        const auto& a = comod_row.decoder[j];
        const std::size_t y = d.fine_labels[pairs[j].sample];
        for (std::size_t u = 0; u < units; ++u)
          score[u] += static_cast<double>(head.params().weights[y * units + u]) * a[u];
      }
      for (auto& s : score) s /= static_cast<double>(js.size());
      for (std::size_t u = 0; u < units; ++u) {
        bool active = false;
        for (std::size_t j : js) active = active || comod_row.decoder[j][u] != 0.0;
        usable[u] = active;
      }
    }
    std::vector<std::size_t> keep;
    RankGroup grp;
    for (std::size_t u = 0; u < units; ++u) {
      if (!usable[u]) continue;
      keep.push_back(u);
      grp.scores.push_back(score[u]);
      grp.gains.push_back(mean_gain[u]);
    }
    if (keep.size() < std::max<std::size_t>(cfg.info_bins, 3)) continue;
    g.tasks.push_back(k);
    g.units.push_back(keep);
    g.reports.push_back(gain_vs_informativeness(grp.gains, grp.scores, cfg.info_bins));
    groups.push_back(std::move(grp));
  }
  if (!groups.empty()) g.test = grouped_spearman_test(groups, cfg.permutations, seed);
  return g;
}

struct DimensionalityReport {
  SpectrumReport pca_attention, pca_comod, lda_attention, lda_comod;
};

inline DimensionalityReport dimensionality(const Dataset& d, const RowOutcome& attention,
                                           const RowOutcome& comod) {
  if (d.kind != DatasetKind::hierarchy) throw std::invalid_argument("dimensionality needs class labels");
  std::vector<std::size_t> labels;
  for (const auto& p : attention.predictions.pairs) labels.push_back(d.fine_labels[p.sample]);
  const auto xa = SampleMatrix::from_rows(attention.readout_input);
  const auto xc = SampleMatrix::from_rows(comod.readout_input);
  return {pca_spectrum(xa), pca_spectrum(xc), lda_spectrum(xa, labels), lda_spectrum(xc, labels)};
}

inline const std::vector<double>& sparsity_thresholds() {
  static const std::vector<double> t{1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0};
  return t;
}

/// Mean count of near-zero raw gains per pair, per threshold.
inline std::vector<double> mean_gain_sparsity(const std::vector<GainVector>& gains) {
  const auto& th = sparsity_thresholds();
  std::vector<double> mean(th.size(), 0.0);
  for (const auto& g : gains) {
    const auto c = gain_sparsity(g.raw, th);
    for (std::size_t i = 0; i < c.size(); ++i) mean[i] += static_cast<double>(c[i]);
  }
  for (auto& v : mean) v /= std::max<double>(1.0, static_cast<double>(gains.size()));
  return mean;
}

// ---------------------------------------------------------------------------
// Robustness

struct SweepCell {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 0;
  EvalRow row = EvalRow::attention;
  double accuracy = 0.0;
};

/// Accuracy per (corruption, severity, row) on the given samples.
inline std::vector<SweepCell> robustness_sweep(const RunConfig& cfg, const VariantModels& models,
                                               const Dataset& d, const std::vector<std::size_t>& samples,
                                               std::uint64_t seed, const Logger& log = {}) {
  std::vector<SweepCell> cells;
  for (CorruptionKind kind : cfg.corruptions) {
    for (int s = 0; s <= max_severity; ++s) {
      const CorruptionSpec spec = CorruptionSpec::make(kind, s);
      const auto rows = evaluate(cfg, models, d, samples, cfg.sweep_rows, seed, &spec);
      for (const auto& r : rows) cells.push_back({kind, s, r.row, r.stats.accuracy});
    }
    log("sweep seed " + std::to_string(seed) + ": " + std::string(to_string(kind)) + " done");
  }
  return cells;
}

inline double sweep_accuracy(const std::vector<SweepCell>& cells, CorruptionKind k, int s, EvalRow r) {
  for (const auto& c : cells)
    if (c.kind == k && c.severity == s && c.row == r) return c.accuracy;
  throw std::out_of_range("sweep cell missing");
}

// ---------------------------------------------------------------------------
// Writers

inline void write_task_gains_csv(std::ostream& os, const Model& m) {
  write_gain_csv_header(os);
  for (std::size_t k = 0; k < m.task_gains.size(); ++k) write_gain_csv_rows(os, k, m.task_gains[k]);
}

inline void write_report_csv(std::ostream& os, const std::string& split, std::uint64_t seed,
                             const std::vector<RowOutcome>& rows, bool header = true) {
  const auto prec = os.precision(9);
  if (header) os << "seed,split,mode,name,accuracy,precision,recall,f1,ece,loss,delta_p\n";
  const RowOutcome* base = nullptr;
  for (const auto& r : rows)
    if (r.row == EvalRow::output_weights_only) base = &r;
  for (const auto& r : rows) {
    os << seed << ',' << split << ',' << to_string(r.row) << ",\"" << display_name(r.row) << "\","
       << r.stats.accuracy << ',' << r.stats.precision << ',' << r.stats.recall << ',' << r.stats.f1
       << ',' << r.reliability.ece << ',' << r.loss << ',';
    if (base) {
      const auto dp = delta_p(r.stats.prf(), base->stats.prf());
      os << dp.percent;
    } else {
      os << "nan";
    }
    os << '\n';
  }
  os.precision(prec);
}

inline void write_spectrum_csv(std::ostream& os, const DimensionalityReport& r) {
  const auto prec = os.precision(9);
  os << "mode,kind,component,ratio,cumulative,dims_to_80,degenerate\n";
  auto emit = [&](const char* mode, const char* kind, const SpectrumReport& s) {
    double c = 0.0;
    for (std::size_t i = 0; i < s.ratios.size(); ++i) {
      c += s.ratios[i];
      os << mode << ',' << kind << ',' << i + 1 << ',' << s.ratios[i] << ',' << c << ','
         << s.dims_to_threshold << ',' << (s.degenerate ? 1 : 0) << '\n';
    }
  };
  emit("attention", "pca", r.pca_attention);
  emit("comodulation", "pca", r.pca_comod);
  emit("attention", "lda", r.lda_attention);
  emit("comodulation", "lda", r.lda_comod);
  os.precision(prec);
}

inline void write_informativeness_csv(std::ostream& os, const GainInformativeness& g) {
  const auto prec = os.precision(9);
  os << "task_id,unit_index,measure,score,mean_gain,bin\n";
  for (std::size_t t = 0; t < g.tasks.size(); ++t) {
    const auto& r = g.reports[t];
    for (std::size_t j = 0; j < g.units[t].size(); ++j)
      os << g.tasks[t] << ',' << g.units[t][j] << ',' << g.measure << ',' << r.scores[j] << ','
         << r.gains[j] << ',' << r.bin_of_unit[j] << '\n';
  }
  os.precision(prec);
}

inline void write_info_bins_csv(std::ostream& os, const GainInformativeness& g) {
  const auto prec = os.precision(9);
  os << "task_id,bin,count,mean_score,mean_gain,spearman_rho\n";
  for (std::size_t t = 0; t < g.tasks.size(); ++t) {
    const auto& r = g.reports[t];
    for (std::size_t b = 0; b < r.bin_count.size(); ++b)
      os << g.tasks[t] << ',' << b << ',' << r.bin_count[b] << ',' << r.bin_mean_score[b] << ','
         << r.bin_mean_gain[b] << ',' << r.spearman_rho << '\n';
  }
  os.precision(prec);
}

inline void write_sparsity_csv(std::ostream& os, const std::string& mode, const std::vector<double>& counts,
                               bool header = true) {
  const auto prec = os.precision(9);
  if (header) os << "mode,threshold,mean_count\n";
  const auto& th = sparsity_thresholds();
  for (std::size_t i = 0; i < th.size(); ++i) os << mode << ',' << th[i] << ',' << counts[i] << '\n';
  os.precision(prec);
}

inline void write_robustness_csv(std::ostream& os, const std::vector<SweepCell>& cells) {
  const auto prec = os.precision(9);
  os << "corruption,severity,mode,accuracy\n";
  for (const auto& c : cells)
    os << to_string(c.kind) << ',' << c.severity << ',' << to_string(c.row) << ',' << c.accuracy << '\n';
  os.precision(prec);
}

/// Row-minus-attention accuracy differences for every non-attention row.
inline void write_robustness_diff_csv(std::ostream& os, const RunConfig& cfg,
                                      const std::vector<SweepCell>& cells) {
  const auto prec = os.precision(9);
  os << "corruption,severity,mode,minus_attention\n";
  const bool has_att = std::find(cfg.sweep_rows.begin(), cfg.sweep_rows.end(), EvalRow::attention) !=
                       cfg.sweep_rows.end();
  if (has_att) {
    for (CorruptionKind k : cfg.corruptions)
      for (int s = 0; s <= max_severity; ++s)
        for (EvalRow r : cfg.sweep_rows) {
          if (r == EvalRow::attention) continue;
          os << to_string(k) << ',' << s << ',' << to_string(r) << ','
             << sweep_accuracy(cells, k, s, r) - sweep_accuracy(cells, k, s, EvalRow::attention) << '\n';
        }
  }
  os.precision(prec);
}

/// 2-D PCA projection of the readout input of a row.
inline void write_embedding_csv(std::ostream& os, const Dataset& d, const RowOutcome& r, bool header = true) {
  if (r.readout_input.size() < 3) return;
  const auto p = pca_project(SampleMatrix::from_rows(r.readout_input), 2);
  const auto prec = os.precision(9);
  if (header) os << "mode,sample,task_id,label,x,y\n";
  for (std::size_t i = 0; i < p.rows; ++i) {
    const Pair& pr = r.predictions.pairs[i];
    const std::size_t label = d.kind == DatasetKind::attribute
                                  ? static_cast<std::size_t>(d.attribute_row(pr.sample)[pr.task])
                                  : d.fine_labels[pr.sample];
    os << to_string(r.row) << ',' << pr.sample << ',' << pr.task << ',' << label << ','
       << p.values[2 * i] << ',' << p.values[2 * i + 1] << '\n';
  }
  os.precision(prec);
}

/// 2-D PCA projection of the controller's context vectors.
inline void write_context_embedding_csv(std::ostream& os, const Model& m) {
  os << "task_id,x,y\n";
  std::vector<std::vector<double>> rows;
  for (std::size_t k = 0; k < m.tasks(); ++k) {
    const auto c = m.controller.forward(TaskId::make(k, m.tasks()));
    rows.emplace_back(c.weights.begin(), c.weights.end());
  }
  const auto x = SampleMatrix::from_rows(rows);
  const auto prec = os.precision(9);
  bool spread = false;
  for (std::size_t j = 0; j < x.cols && !spread; ++j)
    for (std::size_t i = 1; i < x.rows; ++i)
      if (x.values[i * x.cols + j] != x.values[j]) spread = true;
  if (rows.size() >= 2 && x.cols >= 2 && spread) {
    const auto p = pca_project(x, 2);
    for (std::size_t i = 0; i < p.rows; ++i) os << i << ',' << p.values[2 * i] << ',' << p.values[2 * i + 1] << '\n';
  } else {
    for (std::size_t i = 0; i < rows.size(); ++i) os << i << ",0,0\n";
  }
  os.precision(prec);
}

}  // namespace comodnet
