// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

// Network assembly: backbone -> encoder conv (modulated) -> processing conv ->
// decoder dense (gain-weighted) -> linear decision head, with an optional
// residual variant whose skips run from the backbone features to the decoder
// input. The task controller maps a one-hot task code to encoder context.

#pragma once

#include <concepts>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "comodnet/checkpoint.hpp"
#include "comodnet/controller.hpp"
#include "comodnet/layers.hpp"
#include "comodnet/modulation.hpp"

namespace comodnet {

enum class Wiring { base, residual };

inline std::string_view to_string(Wiring w) { return w == Wiring::base ? "base" : "residual"; }

enum class ForwardMode { plain, attention, comod_train, comod_test, comod_test_fixed };

inline std::string_view to_string(ForwardMode m) {
  switch (m) {
    case ForwardMode::plain: return "plain";
    case ForwardMode::attention: return "attention";
    case ForwardMode::comod_train: return "comod_train";
    case ForwardMode::comod_test: return "comod_test";
    case ForwardMode::comod_test_fixed: return "comod_test_fixed";
  }
  return "?";
}

inline ForwardMode parse_forward_mode(std::string_view s) {
  for (auto m : {ForwardMode::plain, ForwardMode::attention, ForwardMode::comod_train,
                 ForwardMode::comod_test, ForwardMode::comod_test_fixed}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown forward mode '" + std::string(s) + "'");
}

inline bool is_comod(ForwardMode m) {
  return m == ForwardMode::comod_train || m == ForwardMode::comod_test ||
         m == ForwardMode::comod_test_fixed;
}

struct ConvBlockSpec {
  std::size_t channels = 16;
  std::size_t kernel = 3;
  bool pool = true;
};

struct ArchitectureSpec {
  Shape input{1, 16, 16};
  std::vector<ConvBlockSpec> backbone{{16, 3, true}, {32, 3, true}, {32, 3, true}};
  std::size_t encoder_channels = 16;
  std::size_t encoder_kernel = 3;
  std::size_t processing_channels = 16;
  std::size_t processing_kernel = 3;
  std::size_t decoder_units = 64;
  std::size_t head_outputs = 8;      // pretraining decision layer
  std::size_t finetune_outputs = 0;  // > 0: a fresh decision layer is attached for fine-tuning
  Wiring wiring = Wiring::base;
  bool biases = true;
  ControllerSpec controller{};       // channels are taken from encoder_channels
  std::size_t context_channels = 0;  // 0: same as encoder_channels; otherwise must match it
};

/// Per-layer activation snapshots of one input.
struct ActivationRecord {
  std::vector<std::pair<std::string, Tensor>> entries;

  void add(std::string name, Tensor t) { entries.emplace_back(std::move(name), std::move(t)); }

  void export_to(Container& c, const std::string& prefix = "") const {
    for (const auto& [name, t] : entries) c.put(prefix + name, t);
  }
};

template <std::floating_point T>
struct BasicModelGrads;

template <std::floating_point T>
class BasicModel {
 public:
  using TensorT = BasicTensor<T>;
  using LayerT = BasicLayer<T>;
  using Params = BasicLayerParams<T>;

  ArchitectureSpec spec;
  std::vector<LayerT> backbone;
  LayerT encoder = LayerT::relu("unset");
  LayerT processing = LayerT::relu("unset");
  std::optional<LayerT> encoder_skip;
  std::optional<LayerT> processing_skip;
  LayerT decoder = LayerT::relu("unset");
  LayerT head = LayerT::relu("unset");
  std::optional<LayerT> finetune_head;
  BasicController<T> controller;
  bool use_finetune_head = false;
  bool controller_trained = false;
  std::vector<GainVector> task_gains;  // fixed per-task decoder gains

  Shape backbone_shape, encoder_shape, processing_shape;

  const LayerT& active_head() const {
    return use_finetune_head && finetune_head ? *finetune_head : head;
  }
  LayerT& active_head() { return use_finetune_head && finetune_head ? *finetune_head : head; }

  std::size_t tasks() const { return controller.spec.tasks; }
  std::size_t decoder_units() const { return decoder.hyper().out; }

  /// Every parameterized layer in a fixed order.
  std::vector<LayerT*> parameter_layers() {
    std::vector<LayerT*> out;
    for (auto& l : backbone)
      if (l.has_params()) out.push_back(&l);
    out.push_back(&encoder);
    if (encoder_skip) out.push_back(&*encoder_skip);
    out.push_back(&processing);
    if (processing_skip) out.push_back(&*processing_skip);
    out.push_back(&decoder);
    out.push_back(&head);
    if (finetune_head) out.push_back(&*finetune_head);
    out.push_back(&controller.hidden);
    out.push_back(&controller.output);
    return out;
  }

  std::vector<const LayerT*> parameter_layers() const {
    std::vector<const LayerT*> out;
    for (auto* l : const_cast<BasicModel*>(this)->parameter_layers()) out.push_back(l);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto* l : parameter_layers()) n += l->parameter_count();
    return n;
  }

  template <std::floating_point U>
  BasicModel<U> cast() const {
    BasicModel<U> m;
    m.spec = spec;
    for (const auto& l : backbone) m.backbone.push_back(l.template cast<U>());
    m.encoder = encoder.template cast<U>();
    m.processing = processing.template cast<U>();
    if (encoder_skip) m.encoder_skip = encoder_skip->template cast<U>();
    if (processing_skip) m.processing_skip = processing_skip->template cast<U>();
    m.decoder = decoder.template cast<U>();
    m.head = head.template cast<U>();
    if (finetune_head) m.finetune_head = finetune_head->template cast<U>();
    m.controller = controller.template cast<U>();
    m.use_finetune_head = use_finetune_head;
    m.controller_trained = controller_trained;
    m.task_gains = task_gains;
    m.backbone_shape = backbone_shape;
    m.encoder_shape = encoder_shape;
    m.processing_shape = processing_shape;
    return m;
  }

  /// Attaches a freshly initialized fine-tuning decision layer.
  void attach_finetune_head(std::size_t outputs, Rng& rng) {
    finetune_head = LayerT::dense("finetune_head", decoder_units(), outputs, spec.biases);
    finetune_head->init(rng);
    use_finetune_head = true;
  }
};

using Model = BasicModel<float>;

namespace detail {

template <std::floating_point T>
void zero_biases(BasicLayer<T>& l) {
  if (l.has_params()) l.params().biases.fill(T(0));
}

/// Throws ConfigError naming the offending connection.
inline void check_connection(const std::function<Shape()>& f, const std::string& what) {
  try {
    (void)f();
  } catch (const ShapeError& e) {
    throw ConfigError("architecture: " + what + ": " + e.what());
  }
}

}  // namespace detail

/// Builds and initializes every layer from the seed.
template <std::floating_point T = float>
BasicModel<T> build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
  using LayerT = BasicLayer<T>;
  if (spec.input.size() != 3) {
    throw ConfigError("architecture: input must be [channels, height, width], got " +
                      shape_str(spec.input));
  }
  if (spec.context_channels != 0 && spec.context_channels != spec.encoder_channels) {
    throw ConfigError("architecture: controller context length " +
                      std::to_string(spec.context_channels) + " does not match encoder channels " +
                      std::to_string(spec.encoder_channels));
  }
  if (spec.controller.tasks == 0) throw ConfigError("architecture: task count must be >= 1");
  Rng rng = make_rng(seed, {stream::init});
  BasicModel<T> m;
  m.spec = spec;
  Shape shape = spec.input;
  for (std::size_t i = 0; i < spec.backbone.size(); ++i) {
    const auto& b = spec.backbone[i];
    const std::string n = "backbone/" + std::to_string(i);
    m.backbone.push_back(
        LayerT::conv2d(n + "/conv", shape[0], b.channels, b.kernel, 1, b.kernel / 2, spec.biases));
    m.backbone.push_back(LayerT::relu(n + "/relu"));
    if (b.pool) m.backbone.push_back(LayerT::maxpool2d(n + "/pool", 2));
    for (std::size_t j = m.backbone.size() - (b.pool ? 3 : 2); j < m.backbone.size(); ++j) {
      detail::check_connection([&] { return shape = m.backbone[j].output_shape(shape); },
                               "backbone block " + std::to_string(i));
    }
  }
  m.backbone_shape = shape;
  m.encoder = LayerT::conv2d("encoder", shape[0], spec.encoder_channels, spec.encoder_kernel, 1,
                             spec.encoder_kernel / 2, spec.biases);
  detail::check_connection([&] { return m.encoder_shape = m.encoder.output_shape(shape); },
                           "backbone -> encoder");
  m.processing = LayerT::conv2d("processing", spec.encoder_channels, spec.processing_channels,
                                spec.processing_kernel, 1, spec.processing_kernel / 2, spec.biases);
  detail::check_connection(
      [&] { return m.processing_shape = m.processing.output_shape(m.encoder_shape); },
      "encoder -> processing");
  if (spec.wiring == Wiring::residual) {
    if (m.encoder_shape[1] != shape[1] || m.encoder_shape[2] != shape[2] ||
        m.processing_shape[1] != m.encoder_shape[1] || m.processing_shape[2] != m.encoder_shape[2]) {
      throw ConfigError("architecture: residual skips need spatially aligned encoder/processing "
                        "outputs (odd kernels)");
    }
    // Each skip is a bias-free 1x1 projection; it starts as the identity when
    // the endpoint channel counts agree.
    auto make_skip = [&](const std::string& name, std::size_t in, std::size_t out) {
      LayerT s = LayerT::conv2d(name, in, out, 1, 1, 0, false);
      s.init(rng);
      if (in == out) {
        s.params().weights.fill(T(0));
        for (std::size_t c = 0; c < in; ++c) s.params().weights[c * in + c] = T(1);
      }
      return s;
    };
    m.encoder_skip = make_skip("encoder_skip", shape[0], spec.encoder_channels);
    m.processing_skip =
        make_skip("processing_skip", spec.encoder_channels, spec.processing_channels);
  }
  m.decoder = LayerT::dense("decoder", shape_numel(m.processing_shape), spec.decoder_units,
                            spec.biases);
  m.head = LayerT::dense("head", spec.decoder_units, spec.head_outputs, spec.biases);
  for (auto& l : m.backbone) l.init(rng);
  m.encoder.init(rng);
  m.processing.init(rng);
  m.decoder.init(rng);
  m.head.init(rng);
  ControllerSpec cs = spec.controller;
  cs.channels = spec.encoder_channels;
  m.controller = BasicController<T>::make(cs, rng);
  if (spec.finetune_outputs > 0) {
    Rng head_rng = make_rng(seed, {stream::head});
    m.attach_finetune_head(spec.finetune_outputs, head_rng);
    m.use_finetune_head = false;
  }
  return m;
}

/// Gradient buffers mirroring BasicModel::parameter_layers().
template <std::floating_point T>
struct BasicModelGrads {
  std::vector<BasicParamGrads<T>> grads;

  explicit BasicModelGrads(const BasicModel<T>& m) {
    for (const auto* l : m.parameter_layers())
      grads.push_back(BasicParamGrads<T>::zeros_like(l->params()));
  }

  BasicModelGrads& operator+=(const BasicModelGrads& o) {
    for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += o.grads[i];
    return *this;
  }

  void scale(T s) {
    for (auto& g : grads) {
      g.weights *= s;
      g.biases *= s;
    }
  }

  void zero() {
    for (auto& g : grads) {
      g.weights.fill(T(0));
      g.biases.fill(T(0));
    }
  }
};

using ModelGrads = BasicModelGrads<float>;

/// Frozen-part activations of one input: everything up to the encoder
/// rectifier, plus the encoder skip path in the residual wiring.
template <std::floating_point T>
struct BasicFeatures {
  BasicTensor<T> backbone_out;
  BasicTensor<T> encoder_pre;   // conv output before the rectifier
  BasicTensor<T> encoder_act;   // rectified, before modulation
  BasicTensor<T> skip;          // encoder_skip(backbone_out), residual only
  std::vector<BasicTensor<T>> backbone_inputs;  // per backbone layer, when taped
};

using Features = BasicFeatures<float>;

/// Intermediate values of the modulated part for one encoder gain pattern.
template <std::floating_point T>
struct BasicTailTape {
  BasicTensor<T> processing_in;   // modulated encoder output (+ skip)
  BasicTensor<T> processing_pre;
  BasicTensor<T> processing_out;  // rectified (+ skip)
  BasicTensor<T> decoder_in;      // flattened
  BasicTensor<T> decoder_pre;
  BasicTensor<T> decoder_out;     // rectified, before gains
};

namespace detail {

template <std::floating_point T>
BasicTensor<T> relu_copy(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (auto& v : y.data()) v = v > T(0) ? v : T(0);
  return y;
}

template <std::floating_point T>
void relu_mask(BasicTensor<T>& grad, const BasicTensor<T>& pre) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(pre[i] > T(0))) grad[i] = T(0);
}

template <std::floating_point T>
BasicParamGrads<T>* grads_for(BasicModel<T>& m, BasicModelGrads<T>* g, const BasicLayer<T>& layer) {
  if (!g || !layer.has_params() || !layer.params().trainable) return nullptr;
  auto layers = m.parameter_layers();
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i] == &layer) return &g->grads[i];
  return nullptr;
}

}  // namespace detail

template <std::floating_point T>
BasicFeatures<T> model_features(const BasicModel<T>& m, const BasicTensor<T>& input,
                                bool tape = false) {
  if (input.shape() != m.spec.input) {
    throw ShapeError("model input shape " + shape_str(input.shape()) + " vs expected " +
                     shape_str(m.spec.input));
  }
  BasicFeatures<T> f;
  BasicTensor<T> x = input;
  for (const auto& l : m.backbone) {
    if (tape) f.backbone_inputs.push_back(x);
    x = layer_forward(l, x);
  }
  f.backbone_out = std::move(x);
  f.encoder_pre = layer_forward(m.encoder, f.backbone_out);
  f.encoder_act = detail::relu_copy(f.encoder_pre);
  if (m.encoder_skip) f.skip = layer_forward(*m.encoder_skip, f.backbone_out);
  return f;
}

/// Encoder modulation through decoder rectifier. `channel_gain` is m * c per
/// encoder channel; empty means unit gain.
template <std::floating_point T>
BasicTensor<T> model_tail(const BasicModel<T>& m, const BasicFeatures<T>& f,
                          std::span<const T> channel_gain, BasicTailTape<T>* tape = nullptr) {
  BasicTailTape<T> local;
  BasicTailTape<T>& t = tape ? *tape : local;
  t.processing_in = channel_gain.empty() ? f.encoder_act
                                         : apply_encoder_modulation(f.encoder_act, channel_gain, 1.0);
  if (m.encoder_skip) t.processing_in += f.skip;
  t.processing_pre = layer_forward(m.processing, t.processing_in);
  t.processing_out = detail::relu_copy(t.processing_pre);
  if (m.processing_skip) t.processing_out += layer_forward(*m.processing_skip, t.processing_in);
  t.decoder_in = t.processing_out.reshaped({t.processing_out.size()});
  t.decoder_pre = layer_forward(m.decoder, t.decoder_in);
  t.decoder_out = detail::relu_copy(t.decoder_pre);
  return t.decoder_out;
}

/// Backward through the tail: d loss / d decoder_out -> d loss / d processing_in.
template <std::floating_point T>
BasicTensor<T> model_tail_backward(BasicModel<T>& m, const BasicTailTape<T>& t,
                                   BasicTensor<T> d_decoder_out, BasicModelGrads<T>* grads) {
  detail::relu_mask(d_decoder_out, t.decoder_pre);
  BasicTensor<T> d_in;
  layer_backward_into(m.decoder, t.decoder_in, d_decoder_out, &d_in,
                      detail::grads_for(m, grads, m.decoder));
  BasicTensor<T> d_proc_out = d_in.reshaped(t.processing_out.shape());
  BasicTensor<T> d_proc_pre = d_proc_out;
  detail::relu_mask(d_proc_pre, t.processing_pre);
  BasicTensor<T> d_proc_in;
  layer_backward_into(m.processing, t.processing_in, d_proc_pre, &d_proc_in,
                      detail::grads_for(m, grads, m.processing));
  if (m.processing_skip) {
    BasicTensor<T> d_skip;
    layer_backward_into(*m.processing_skip, t.processing_in, d_proc_out, &d_skip,
                        detail::grads_for(m, grads, *m.processing_skip));
    d_proc_in += d_skip;
  }
  return d_proc_in;
}

/// Backward from d loss / d processing_in into the encoder, its skip and the
/// backbone. Needs features computed with tape = true.
template <std::floating_point T>
void model_features_backward(BasicModel<T>& m, const BasicFeatures<T>& f,
                             const BasicTensor<T>& d_processing_in, std::span<const T> channel_gain,
                             BasicModelGrads<T>* grads) {
  BasicTensor<T> d_act = channel_gain.empty()
                             ? d_processing_in
                             : apply_encoder_modulation(d_processing_in, channel_gain, 1.0);
  detail::relu_mask(d_act, f.encoder_pre);
  BasicTensor<T> d_backbone;
  layer_backward_into(m.encoder, f.backbone_out, d_act, &d_backbone,
                      detail::grads_for(m, grads, m.encoder));
  if (m.encoder_skip) {
    BasicTensor<T> d_skip;
    layer_backward_into(*m.encoder_skip, f.backbone_out, d_processing_in, &d_skip,
                        detail::grads_for(m, grads, *m.encoder_skip));
    d_backbone += d_skip;
  }
  if (f.backbone_inputs.size() != m.backbone.size()) {
    throw std::logic_error("model_features_backward: features were not taped");
  }
  BasicTensor<T> d = std::move(d_backbone);
  for (std::size_t i = m.backbone.size(); i-- > 0;) {
    BasicTensor<T> d_prev;
    const bool need_input = i > 0;
    layer_backward_into(m.backbone[i], f.backbone_inputs[i], d, need_input ? &d_prev : nullptr,
                        detail::grads_for(m, grads, m.backbone[i]));
    if (!need_input) break;
    d = std::move(d_prev);
  }
}

/// d loss / d context from d loss / d processing_in at encoder gain m * c.
template <std::floating_point T>
void accumulate_context_grad(const BasicFeatures<T>& f, const BasicTensor<T>& d_processing_in,
                             double m, std::vector<double>& d_context) {
  const std::size_t C = f.encoder_act.dim(0);
  const std::size_t per = f.encoder_act.size() / C;
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    const T* z = f.encoder_act.ptr() + c * per;
    const T* d = d_processing_in.ptr() + c * per;
    for (std::size_t i = 0; i < per; ++i) s += static_cast<double>(z[i]) * d[i];
    d_context[c] += m * s;
  }
}

/// Everything a forward pass exposes besides the logits.
template <std::floating_point T>
struct BasicForwardResult {
  BasicTensor<T> logits;
  BasicTensor<T> decoder;       // final-pass decoder activity before gains
  BasicTensor<T> gained;        // decoder activity after gains (the readout input)
  std::optional<GainVector> gains;
  std::optional<ModulatorTrace> trace;
  std::optional<ActivationRecord> record;
  std::vector<double> applied_gains;  // empty: unit decoder gains

  // Retained for training.
  BasicTaskContext<T> context;
  typename BasicController<T>::Cache controller_cache;
  BasicTailTape<T> final_tape;
  std::vector<BasicTailTape<T>> pass_tapes;
};

using ForwardResult = BasicForwardResult<float>;

struct ForwardOptions {
  const ModulatorConfig* modulator = nullptr;
  Rng* rng = nullptr;
  const ModulatorTrace* trace = nullptr;  // overrides sampling when set
  bool record = false;
  bool keep_tapes = false;
};

/// Forward from precomputed features.
template <std::floating_point T>
BasicForwardResult<T> model_forward_features(const BasicModel<T>& m, const BasicFeatures<T>& f,
                                             TaskId task, ForwardMode mode,
                                             const ForwardOptions& opt = {}) {
  BasicForwardResult<T> r;
  if (is_comod(mode) && mode != ForwardMode::comod_test_fixed && !opt.modulator && !opt.trace) {
    throw std::invalid_argument("forward mode " + std::string(to_string(mode)) +
                                " needs a modulator configuration");
  }
  auto record = [&](const std::string& name, const BasicTensor<T>& t) {
    if (!opt.record) return;
    if (!r.record) r.record.emplace();
    r.record->add(name, t.template cast<float>());
  };
  record("layer/backbone/pass0", f.backbone_out);
  record("layer/encoder/pass0", f.encoder_act);
  std::vector<double> gains;
  if (mode == ForwardMode::attention || mode == ForwardMode::comod_train ||
      mode == ForwardMode::comod_test) {
    r.context = m.controller.forward(task, opt.keep_tapes ? &r.controller_cache : nullptr);
  }
  if (mode == ForwardMode::comod_train || mode == ForwardMode::comod_test) {
    ModulatorTrace trace;
    if (opt.trace) {
      trace = *opt.trace;
    } else {
      if (!opt.rng) throw std::invalid_argument("comodulation forward needs a generator");
      trace = sample_modulator(*opt.modulator, *opt.rng);
    }
    std::vector<BasicTensor<T>> snapshots;
    snapshots.reserve(trace.size());
    std::vector<T> channel_gain(r.context.weights.size());
    for (std::size_t t = 0; t < trace.size(); ++t) {
      for (std::size_t c = 0; c < channel_gain.size(); ++c)
        channel_gain[c] = static_cast<T>(trace.values[t] * static_cast<double>(r.context.weights[c]));
      BasicTailTape<T> tape;
      snapshots.push_back(model_tail(m, f, std::span<const T>(channel_gain), &tape));
      if (opt.record) {
        record("layer/processing/pass" + std::to_string(t + 1), tape.processing_out);
        record("layer/decoder/pass" + std::to_string(t + 1), tape.decoder_out);
      }
      if (opt.keep_tapes) r.pass_tapes.push_back(std::move(tape));
    }
    r.gains = estimate_decoder_gains(std::span<const BasicTensor<T>>(snapshots), trace);
    r.trace = std::move(trace);
    gains = r.gains->normalized;
  } else if (mode == ForwardMode::comod_test_fixed) {
    if (task.index >= m.task_gains.size()) {
      throw std::invalid_argument("comod_test_fixed: no stored gains for task " +
                                  std::to_string(task.index));
    }
    gains = m.task_gains[task.index].normalized;
  }
  // Final pass: unit encoder gain except in attention mode.
  std::vector<T> attention_gain;
  if (mode == ForwardMode::attention) attention_gain = r.context.weights;
  r.decoder = model_tail(m, f, std::span<const T>(attention_gain), &r.final_tape);
  record("layer/processing/pass0", r.final_tape.processing_out);
  record("layer/decoder/pass0", r.decoder);
  r.gained = gains.empty() ? r.decoder : apply_decoder_gains(r.decoder, std::span<const double>(gains));
  r.applied_gains = std::move(gains);
  r.logits = layer_forward(m.active_head(), r.gained);
  record("layer/head/pass0", r.logits);
  return r;
}

/// Full forward in the requested mode.
template <std::floating_point T>
BasicForwardResult<T> model_forward(const BasicModel<T>& m, const BasicTensor<T>& input,
                                    TaskId task, ForwardMode mode, const ForwardOptions& opt = {}) {
  if (task.count != m.tasks()) {
    throw std::invalid_argument("task code length " + std::to_string(task.count) +
                                " does not match the model's " + std::to_string(m.tasks()) +
                                " tasks");
  }
  TaskId::make(task.index, task.count);
  return model_forward_features(m, model_features(m, input), task, mode, opt);
}

/// Backward for a forward produced with keep_tapes = true. Parameter
/// gradients accumulate into `grads` for trainable layers only. The backbone
/// and encoder are reached only when `features` was taped (plain/attention
/// pretraining); comodulation modes propagate into the controller through the
/// gain estimator.
template <std::floating_point T>
void model_backward(BasicModel<T>& m, const BasicFeatures<T>& f, const BasicForwardResult<T>& r,
                    ForwardMode mode, const BasicTensor<T>& d_logits, BasicModelGrads<T>& grads) {
  BasicTensor<T> d_gained;
  layer_backward_into(m.active_head(), r.gained, d_logits, &d_gained,
                      detail::grads_for(m, &grads, m.active_head()));
  const bool taped_features = f.backbone_inputs.size() == m.backbone.size();
  const bool controller_trainable = m.controller.output.params().trainable ||
                                    m.controller.hidden.params().trainable;
  auto controller_backward = [&](const std::vector<double>& d_context) {
    if (!controller_trainable) return;
    std::vector<T> dc(d_context.begin(), d_context.end());
    auto* gh = detail::grads_for(m, &grads, m.controller.hidden);
    auto* go = detail::grads_for(m, &grads, m.controller.output);
    BasicParamGrads<T> sink_h = BasicParamGrads<T>::zeros_like(m.controller.hidden.params());
    BasicParamGrads<T> sink_o = BasicParamGrads<T>::zeros_like(m.controller.output.params());
    m.controller.backward(r.controller_cache, std::span<const T>(dc), gh ? *gh : sink_h,
                          go ? *go : sink_o);
  };

  if (mode == ForwardMode::plain || mode == ForwardMode::attention ||
      mode == ForwardMode::comod_test_fixed) {
    // Fixed gains are constants; only the decoder path carries gradient.
    BasicTensor<T> d_dec =
        r.applied_gains.empty()
            ? d_gained
            : apply_decoder_gains(d_gained, std::span<const double>(r.applied_gains));
    BasicTensor<T> d_proc_in = model_tail_backward(m, r.final_tape, d_dec, &grads);
    if (mode == ForwardMode::attention) {
      std::vector<double> d_context(r.context.weights.size(), 0.0);
      accumulate_context_grad(f, d_proc_in, 1.0, d_context);
      controller_backward(d_context);
    }
    if (taped_features) {
      std::span<const T> gain;
      if (mode == ForwardMode::attention) gain = std::span<const T>(r.context.weights);
      model_features_backward(m, f, d_proc_in, gain, &grads);
    }
    return;
  }

  // Comodulation: gains are the only path from the controller to the loss.
  if (!r.gains || !r.trace || r.pass_tapes.size() != r.trace->size()) {
    throw std::logic_error("model_backward: comodulation forward was not taped");
  }
  std::vector<double> d_norm(r.decoder.size());
  for (std::size_t n = 0; n < d_norm.size(); ++n)
    d_norm[n] = static_cast<double>(d_gained[n]) * static_cast<double>(r.decoder[n]);
  const std::vector<double> d_raw = minmax_normalize_backward(r.gains->raw, d_norm);
  std::vector<double> d_context(r.context.weights.size(), 0.0);
  for (std::size_t t = 0; t < r.trace->size(); ++t) {
    const double dm = r.trace->values[t] - r.trace->mean;
    BasicTensor<T> d_snap(r.decoder.shape());
    for (std::size_t n = 0; n < d_snap.size(); ++n) d_snap[n] = static_cast<T>(dm * d_raw[n]);
    // Frozen tail layers only pass gradients through.
    BasicTensor<T> d_proc_in = model_tail_backward(m, r.pass_tapes[t], d_snap, &grads);
    accumulate_context_grad(f, d_proc_in, r.trace->values[t], d_context);
  }
  controller_backward(d_context);
}

enum class Phase { pretrain, finetune };

inline Phase parse_phase(std::string_view s) {
  if (s == "pretrain") return Phase::pretrain;
  if (s == "finetune") return Phase::finetune;
  throw std::invalid_argument("unknown phase '" + std::string(s) + "'");
}

/// Which parameters a fine-tuning run may touch.
enum class FinetuneScope {
  controller_only,     // attribute tasks: decision layer frozen too
  controller_and_head, // hierarchy tasks: controller plus the new decision layer
  head_only,           // readout baseline
};

struct ParameterPartition {
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
};

/// Sets trainable flags for a phase and reports the resulting split.
template <std::floating_point T>
ParameterPartition partition_parameters(BasicModel<T>& m, Phase phase,
                                        FinetuneScope scope = FinetuneScope::controller_only) {
  ParameterPartition p;
  for (auto* l : m.parameter_layers()) {
    bool train = false;
    const bool is_controller = l == &m.controller.hidden || l == &m.controller.output;
    const bool is_new_head = m.finetune_head && l == &*m.finetune_head;
    if (phase == Phase::pretrain) {
      // The controller starts at unit context and only learns during fine-tuning.
      train = !is_controller && !is_new_head;
    } else {
      switch (scope) {
        case FinetuneScope::controller_only: train = is_controller; break;
        case FinetuneScope::controller_and_head: train = is_controller || is_new_head; break;
        case FinetuneScope::head_only: train = is_new_head; break;
      }
    }
    l->params().trainable = train;
    (train ? p.trainable : p.frozen).push_back(l->name());
  }
  return p;
}

/// Serializes all parameters (and stored task gains) into a container.
template <std::floating_point T>
Container model_to_container(const BasicModel<T>& m) {
  Container c;
  for (const auto* l : m.parameter_layers()) {
    c.put(l->name() + "/weights", l->params().weights.template cast<float>());
    c.put(l->name() + "/biases", l->params().biases.template cast<float>());
  }
  c.put("meta/flags", Tensor::vec({m.use_finetune_head ? 1.0f : 0.0f,
                                   m.controller_trained ? 1.0f : 0.0f}));
  for (std::size_t k = 0; k < m.task_gains.size(); ++k) {
    const auto& g = m.task_gains[k];
    c.put("task_gains/" + std::to_string(k) + "/normalized",
          Tensor::vec(std::vector<float>(g.normalized.begin(), g.normalized.end())));
    c.put("task_gains/" + std::to_string(k) + "/raw",
          Tensor::vec(std::vector<float>(g.raw.begin(), g.raw.end())));
  }
  return c;
}

/// Loads parameters into a model built from the same spec.
template <std::floating_point T>
void model_from_container(BasicModel<T>& m, const Container& c) {
  for (auto* l : m.parameter_layers()) {
    const Tensor& w = c.get(l->name() + "/weights");
    const Tensor& b = c.get(l->name() + "/biases");
    if (w.shape() != l->params().weights.shape() || b.shape() != l->params().biases.shape()) {
      throw DataError("checkpoint array shapes for '" + l->name() +
                      "' do not match the architecture");
    }
    l->params().weights = w.template cast<T>();
    l->params().biases = b.template cast<T>();
  }
  if (c.contains("meta/flags")) {
    const Tensor& f = c.get("meta/flags");
    m.use_finetune_head = f[0] != 0.0f;
    m.controller_trained = f[1] != 0.0f;
  }
  m.task_gains.clear();
  for (std::size_t k = 0; c.contains("task_gains/" + std::to_string(k) + "/normalized"); ++k) {
    const Tensor& n = c.get("task_gains/" + std::to_string(k) + "/normalized");
    const Tensor& r = c.get("task_gains/" + std::to_string(k) + "/raw");
    GainVector g;
    g.normalized.assign(n.data().begin(), n.data().end());
    g.raw.assign(r.data().begin(), r.data().end());
    m.task_gains.push_back(std::move(g));
  }
}

}  // namespace comodnet
