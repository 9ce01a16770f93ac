// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <concepts>
#include <random>
#include <vector>
#include <cstddef>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include "comodnet/random.hpp"
#include "comodnet/tensor.hpp"

namespace comodnet {

enum class LayerKind { dense, conv2d, relu, maxpool2d, avgpool2d, flatten };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::avgpool2d: return "avgpool2d";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

/// Weights and biases of a dense ([out, in]) or conv ([out, in, k, k]) layer.
template <std::floating_point T>
struct BasicLayerParams {
  BasicTensor<T> weights;
  BasicTensor<T> biases;
  bool trainable = true;

  template <std::floating_point U>
  BasicLayerParams<U> cast() const {
    return {weights.template cast<U>(), biases.template cast<U>(), trainable};
  }
};

template <std::floating_point T>
struct BasicParamGrads {
  BasicTensor<T> weights;
  BasicTensor<T> biases;

  static BasicParamGrads zeros_like(const BasicLayerParams<T>& p) {
    return {BasicTensor<T>(p.weights.shape()), BasicTensor<T>(p.biases.shape())};
  }

  BasicParamGrads& operator+=(const BasicParamGrads& other) {
    weights += other.weights;
    biases += other.biases;
    return *this;
  }

  bool all_finite() const { return weights.all_finite() && biases.all_finite(); }
};

/// Kind-specific sizes. `in`/`out` are features for dense and channels for conv.
struct LayerHyper {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = true;
};

template <std::floating_point T>
struct BasicLayerGrad {
  BasicTensor<T> input;
  std::optional<BasicParamGrads<T>> params;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  return (in + 2 * p - k) / s + 1;
}

// cols is [C*k*k, Ho*Wo], row-major.
template <class T>
void im2col(const BasicTensor<T>& in, const LayerHyper& h, std::size_t ho, std::size_t wo,
            T* cols) {
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2), k = h.kernel;
  const std::size_t P = ho * wo;
  const T* src = in.ptr();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * P;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * h.stride + ky) - static_cast<long>(h.padding);
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<long>(H)) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* srow = src + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * h.stride + kx) - static_cast<long>(h.padding);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(W)) ? T(0) : srow[ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, const LayerHyper& h, std::size_t ho, std::size_t wo,
            BasicTensor<T>& out) {
  const std::size_t C = out.dim(0), H = out.dim(1), W = out.dim(2), k = h.kernel;
  const std::size_t P = ho * wo;
  T* dst = out.ptr();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * P;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * h.stride + ky) - static_cast<long>(h.padding);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          T* drow = dst + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * h.stride + kx) - static_cast<long>(h.padding);
            if (ix >= 0 && ix < static_cast<long>(W)) drow[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

inline bool conv_is_pointwise(const LayerHyper& h) {
  return h.kernel == 1 && h.stride == 1 && h.padding == 0;
}

}  // namespace detail

template <std::floating_point T>
class BasicLayer {
 public:
  using Scalar = T;
  using TensorT = BasicTensor<T>;
  using Params = BasicLayerParams<T>;
  using Grads = BasicParamGrads<T>;

  static BasicLayer dense(std::string name, std::size_t in, std::size_t out, bool bias = true) {
    BasicLayer l(LayerKind::dense, std::move(name));
    l.hyper_ = {.in = in, .out = out, .bias = bias};
    l.params_ = Params{TensorT({out, in}), TensorT({out}), true};
    return l;
  }

  static BasicLayer conv2d(std::string name, std::size_t in_ch, std::size_t out_ch,
                           std::size_t kernel, std::size_t stride = 1, std::size_t padding = 0,
                           bool bias = true) {
    if (stride == 0) throw std::invalid_argument("conv2d '" + name + "': stride must be >= 1");
    BasicLayer l(LayerKind::conv2d, std::move(name));
    l.hyper_ = {.in = in_ch, .out = out_ch, .kernel = kernel, .stride = stride,
                .padding = padding, .bias = bias};
    l.params_ = Params{TensorT({out_ch, in_ch, kernel, kernel}), TensorT({out_ch}), true};
    return l;
  }

  static BasicLayer relu(std::string name) { return BasicLayer(LayerKind::relu, std::move(name)); }

  static BasicLayer maxpool2d(std::string name, std::size_t kernel, std::size_t stride = 0) {
    BasicLayer l(LayerKind::maxpool2d, std::move(name));
    l.hyper_ = {.kernel = kernel, .stride = stride ? stride : kernel};
    return l;
  }

  static BasicLayer avgpool2d(std::string name, std::size_t kernel, std::size_t stride = 0) {
    BasicLayer l(LayerKind::avgpool2d, std::move(name));
    l.hyper_ = {.kernel = kernel, .stride = stride ? stride : kernel};
    return l;
  }

  static BasicLayer flatten(std::string name) {
    return BasicLayer(LayerKind::flatten, std::move(name));
  }

  LayerKind kind() const noexcept { return kind_; }
  const std::string& name() const noexcept { return name_; }
  const LayerHyper& hyper() const noexcept { return hyper_; }
  bool has_params() const noexcept { return params_.has_value(); }

  Params& params() {
    if (!params_) throw std::logic_error("layer '" + name_ + "' has no parameters");
    return *params_;
  }
  const Params& params() const {
    if (!params_) throw std::logic_error("layer '" + name_ + "' has no parameters");
    return *params_;
  }

  std::size_t parameter_count() const {
    return params_ ? params_->weights.size() + (hyper_.bias ? params_->biases.size() : 0) : 0;
  }

  std::size_t fan_in() const {
    if (kind_ == LayerKind::dense) return hyper_.in;
    if (kind_ == LayerKind::conv2d) return hyper_.in * hyper_.kernel * hyper_.kernel;
    return 0;
  }

  /// Fan-in scaled uniform weights in +-sqrt(6/fan_in); biases in +-1/sqrt(fan_in).
  void init(Rng& rng) {
    if (!params_) return;
    const double fan = static_cast<double>(fan_in());
    const float wr = static_cast<float>(std::sqrt(6.0 / fan));
    const float br = static_cast<float>(1.0 / std::sqrt(fan));
    std::uniform_real_distribution<float> wdist(-wr, wr);
    std::uniform_real_distribution<float> bdist(-br, br);
    for (auto& w : params_->weights.data()) w = static_cast<T>(wdist(rng));
    for (auto& b : params_->biases.data()) b = hyper_.bias ? static_cast<T>(bdist(rng)) : T(0);
  }

  Shape output_shape(const Shape& in) const {
    switch (kind_) {
      case LayerKind::dense:
        if (in.size() != 1 || in[0] != hyper_.in) mismatch(in, Shape{hyper_.in});
        return {hyper_.out};
      case LayerKind::conv2d: {
        if (in.size() != 3 || in[0] != hyper_.in) mismatch(in, Shape{hyper_.in, 0, 0});
        if (in[1] + 2 * hyper_.padding < hyper_.kernel ||
            in[2] + 2 * hyper_.padding < hyper_.kernel)
          mismatch(in, Shape{hyper_.in, hyper_.kernel, hyper_.kernel});
        return {hyper_.out,
                detail::conv_out_extent(in[1], hyper_.kernel, hyper_.stride, hyper_.padding),
                detail::conv_out_extent(in[2], hyper_.kernel, hyper_.stride, hyper_.padding)};
      }
      case LayerKind::relu: return in;
      case LayerKind::maxpool2d:
      case LayerKind::avgpool2d:
        if (in.size() != 3 || in[1] < hyper_.kernel || in[2] < hyper_.kernel)
          mismatch(in, Shape{0, hyper_.kernel, hyper_.kernel});
        return {in[0], (in[1] - hyper_.kernel) / hyper_.stride + 1,
                (in[2] - hyper_.kernel) / hyper_.stride + 1};
      case LayerKind::flatten: return {shape_numel(in)};
    }
    return in;
  }

  /// Runs the layer and caches the input for a following backward().
  TensorT forward(const TensorT& input);

  /// Gradients for the most recent forward(); consumes the cached input.
  BasicLayerGrad<T> backward(const TensorT& upstream);

  template <std::floating_point U>
  BasicLayer<U> cast() const {
    BasicLayer<U> l = BasicLayer<U>::blank(kind_, name_, hyper_);
    if (params_) l.params() = params_->template cast<U>();
    return l;
  }

  /// Layer of the given kind with zeroed parameters.
  static BasicLayer blank(LayerKind kind, std::string name, const LayerHyper& h) {
    BasicLayer l(kind, std::move(name));
    l.hyper_ = h;
    if (kind == LayerKind::dense) l.params_ = Params{TensorT({h.out, h.in}), TensorT({h.out}), true};
    if (kind == LayerKind::conv2d)
      l.params_ = Params{TensorT({h.out, h.in, h.kernel, h.kernel}), TensorT({h.out}), true};
    return l;
  }

 private:
  BasicLayer(LayerKind kind, std::string name) : kind_(kind), name_(std::move(name)) {}

  [[noreturn]] void mismatch(const Shape& got, const Shape& want) const {
    throw ShapeError("layer '" + name_ + "' (" + std::string(to_string(kind_)) +
                     "): input shape " + shape_str(got) + " incompatible with expected " +
                     shape_str(want) + " (0 = any extent)");
  }

  LayerKind kind_;
  std::string name_;
  LayerHyper hyper_;
  std::optional<Params> params_;
  std::optional<TensorT> cache_;
};

using Layer = BasicLayer<float>;
using LayerParams = BasicLayerParams<float>;
using ParamGrads = BasicParamGrads<float>;
using LayerGrad = BasicLayerGrad<float>;

/// Pure forward pass.
template <std::floating_point T>
BasicTensor<T> layer_forward(const BasicLayer<T>& layer, const BasicTensor<T>& in) {
  using TensorT = BasicTensor<T>;
  const Shape out_shape = layer.output_shape(in.shape());
  const LayerHyper& h = layer.hyper();
  const auto L = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  switch (layer.kind()) {
    case LayerKind::dense: {
      const auto& p = layer.params();
      TensorT out({h.out});
      detail::CMapMat<T> W(p.weights.ptr(), L(h.out), L(h.in));
      Eigen::Map<const detail::Vec<T>> x(in.ptr(), L(h.in));
      Eigen::Map<const detail::Vec<T>> b(p.biases.ptr(), L(h.out));
      Eigen::Map<detail::Vec<T>> y(out.ptr(), L(h.out));
      y.noalias() = W * x;
      y += b;
      return out;
    }
    case LayerKind::conv2d: {
      const auto& p = layer.params();
      TensorT out(out_shape);
      const std::size_t ho = out_shape[1], wo = out_shape[2], P = ho * wo;
      const std::size_t K = h.in * h.kernel * h.kernel;
      detail::CMapMat<T> W(p.weights.ptr(), L(h.out), L(K));
      detail::MapMat<T> Y(out.ptr(), L(h.out), L(P));
      if (detail::conv_is_pointwise(h)) {
        Y.noalias() = W * detail::CMapMat<T>(in.ptr(), L(K), L(P));
      } else {
        std::vector<T> cols(K * P);
        detail::im2col(in, h, ho, wo, cols.data());
        Y.noalias() = W * detail::CMapMat<T>(cols.data(), L(K), L(P));
      }
      for (std::size_t o = 0; o < h.out; ++o) Y.row(L(o)).array() += p.biases[o];
      return out;
    }
    case LayerKind::relu: {
      TensorT out = in;
      for (auto& v : out.data()) v = v > T(0) ? v : T(0);
      return out;
    }
    case LayerKind::maxpool2d:
    case LayerKind::avgpool2d: {
      TensorT out(out_shape);
      const bool is_max = layer.kind() == LayerKind::maxpool2d;
      const T inv = T(1) / static_cast<T>(h.kernel * h.kernel);
      for (std::size_t c = 0; c < out_shape[0]; ++c)
        for (std::size_t oy = 0; oy < out_shape[1]; ++oy)
          for (std::size_t ox = 0; ox < out_shape[2]; ++ox) {
            T acc = is_max ? -std::numeric_limits<T>::infinity() : T(0);
            for (std::size_t ky = 0; ky < h.kernel; ++ky)
              for (std::size_t kx = 0; kx < h.kernel; ++kx) {
                const T v = in.at(c, oy * h.stride + ky, ox * h.stride + kx);
                acc = is_max ? std::max(acc, v) : acc + v;
              }
            out.at(c, oy, ox) = is_max ? acc : acc * inv;
          }
      return out;
    }
    case LayerKind::flatten: return in.reshaped(out_shape);
  }
  return in;
}

/// Pure backward pass. Parameter gradients are accumulated into `param_grads`
/// when non-null; the input gradient is written to `input_grad` when non-null.
template <std::floating_point T>
void layer_backward_into(const BasicLayer<T>& layer, const BasicTensor<T>& in,
                         const BasicTensor<T>& upstream, BasicTensor<T>* input_grad,
                         BasicParamGrads<T>* param_grads) {
  const Shape out_shape = layer.output_shape(in.shape());
  if (upstream.shape() != out_shape) {
    throw ShapeError("layer '" + layer.name() + "': upstream gradient shape " +
                     shape_str(upstream.shape()) + " vs output shape " + shape_str(out_shape));
  }
  const LayerHyper& h = layer.hyper();
  const auto L = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  if (input_grad) *input_grad = BasicTensor<T>(in.shape());
  switch (layer.kind()) {
    case LayerKind::dense: {
      const auto& p = layer.params();
      Eigen::Map<const detail::Vec<T>> dy(upstream.ptr(), L(h.out));
      if (param_grads) {
        Eigen::Map<const detail::Vec<T>> x(in.ptr(), L(h.in));
        detail::MapMat<T> dW(param_grads->weights.ptr(), L(h.out), L(h.in));
        dW.noalias() += dy * x.transpose();
        if (h.bias) Eigen::Map<detail::Vec<T>>(param_grads->biases.ptr(), L(h.out)) += dy;
      }
      if (input_grad) {
        detail::CMapMat<T> W(p.weights.ptr(), L(h.out), L(h.in));
        Eigen::Map<detail::Vec<T>>(input_grad->ptr(), L(h.in)).noalias() = W.transpose() * dy;
      }
      return;
    }
    case LayerKind::conv2d: {
      const auto& p = layer.params();
      const std::size_t ho = out_shape[1], wo = out_shape[2], P = ho * wo;
      const std::size_t K = h.in * h.kernel * h.kernel;
      detail::CMapMat<T> dY(upstream.ptr(), L(h.out), L(P));
      const bool pointwise = detail::conv_is_pointwise(h);
      if (param_grads) {
        std::vector<T> cols;
        const T* colp = in.ptr();
        if (!pointwise) {
          cols.resize(K * P);
          detail::im2col(in, h, ho, wo, cols.data());
          colp = cols.data();
        }
        detail::MapMat<T> dW(param_grads->weights.ptr(), L(h.out), L(K));
        dW.noalias() += dY * detail::CMapMat<T>(colp, L(K), L(P)).transpose();
        if (h.bias) {
          for (std::size_t o = 0; o < h.out; ++o) param_grads->biases[o] += dY.row(L(o)).sum();
        }
      }
      if (input_grad) {
        detail::CMapMat<T> W(p.weights.ptr(), L(h.out), L(K));
        if (pointwise) {
          detail::MapMat<T>(input_grad->ptr(), L(K), L(P)).noalias() = W.transpose() * dY;
        } else {
          std::vector<T> dcols(K * P);
          detail::MapMat<T>(dcols.data(), L(K), L(P)).noalias() = W.transpose() * dY;
          detail::col2im(dcols.data(), h, ho, wo, *input_grad);
        }
      }
      return;
    }
    case LayerKind::relu:
      if (input_grad) {
        // Subgradient at exactly 0 is 0.
        for (std::size_t i = 0; i < in.size(); ++i)
          (*input_grad)[i] = in[i] > T(0) ? upstream[i] : T(0);
      }
      return;
    case LayerKind::maxpool2d:
    case LayerKind::avgpool2d: {
      if (!input_grad) return;
      const bool is_max = layer.kind() == LayerKind::maxpool2d;
      const T inv = T(1) / static_cast<T>(h.kernel * h.kernel);
      for (std::size_t c = 0; c < out_shape[0]; ++c)
        for (std::size_t oy = 0; oy < out_shape[1]; ++oy)
          for (std::size_t ox = 0; ox < out_shape[2]; ++ox) {
            const T g = upstream.at(c, oy, ox);
            if (is_max) {
              std::size_t by = oy * h.stride, bx = ox * h.stride;
              T best = in.at(c, by, bx);
              for (std::size_t ky = 0; ky < h.kernel; ++ky)
                for (std::size_t kx = 0; kx < h.kernel; ++kx) {
                  const T v = in.at(c, oy * h.stride + ky, ox * h.stride + kx);
                  if (v > best) {
                    best = v;
                    by = oy * h.stride + ky;
                    bx = ox * h.stride + kx;
                  }
                }
              input_grad->at(c, by, bx) += g;
            } else {
              for (std::size_t ky = 0; ky < h.kernel; ++ky)
                for (std::size_t kx = 0; kx < h.kernel; ++kx)
                  input_grad->at(c, oy * h.stride + ky, ox * h.stride + kx) += g * inv;
            }
          }
      return;
    }
    case LayerKind::flatten:
      if (input_grad) *input_grad = upstream.reshaped(in.shape());
      return;
  }
}

template <std::floating_point T>
BasicLayerGrad<T> layer_backward(const BasicLayer<T>& layer, const BasicTensor<T>& in,
                                 const BasicTensor<T>& upstream) {
  BasicLayerGrad<T> g;
  std::optional<BasicParamGrads<T>> pg;
  if (layer.has_params()) pg = BasicParamGrads<T>::zeros_like(layer.params());
  layer_backward_into(layer, in, upstream, &g.input, pg ? &*pg : nullptr);
  g.params = std::move(pg);
  return g;
}

template <std::floating_point T>
BasicTensor<T> BasicLayer<T>::forward(const BasicTensor<T>& input) {
  BasicTensor<T> out = layer_forward(*this, input);
  cache_ = input;
  return out;
}

template <std::floating_point T>
BasicLayerGrad<T> BasicLayer<T>::backward(const BasicTensor<T>& upstream) {
  if (!cache_) {
    throw std::logic_error("layer '" + name_ + "': backward called without a preceding forward");
  }
  BasicLayerGrad<T> g = layer_backward(*this, *cache_, upstream);
  cache_.reset();
  return g;
}

}  // namespace comodnet
