// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic multi-task datasets with known informative features, a CIFAR-100
// binary reader, seeded train/validation/test splits and image corruptions.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "comodnet/checkpoint.hpp"
#include "comodnet/error.hpp"
#include "comodnet/random.hpp"
#include "comodnet/tensor.hpp"

namespace comodnet {

enum class DatasetKind { attribute, hierarchy };

inline std::string_view to_string(DatasetKind k) {
  return k == DatasetKind::attribute ? "attribute" : "hierarchy";
}

inline DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "attribute") return DatasetKind::attribute;
  if (s == "hierarchy") return DatasetKind::hierarchy;
  throw ConfigError("unknown dataset kind '" + std::string(s) + "'");
}

/// Immutable labelled image collection. Attribute datasets carry an N x K
/// binary matrix and the planted pixel sets; hierarchy datasets carry
/// coarse/fine labels and the fine-to-coarse map.
struct Dataset {
  DatasetKind kind = DatasetKind::attribute;
  Shape image_shape;
  std::vector<Tensor> images;

  std::size_t tasks = 0;                              // attribute
  std::vector<float> attributes;                      // N * tasks, row-major
  std::vector<std::vector<std::size_t>> planted_map;  // flat pixel indices per task

  std::size_t superclasses = 0;  // hierarchy
  std::size_t fine_classes = 0;
  std::vector<std::size_t> coarse_labels, fine_labels, fine_to_coarse;

  std::size_t size() const { return images.size(); }

  std::span<const float> attribute_row(std::size_t i) const {
    return {attributes.data() + i * tasks, tasks};
  }

  /// Tasks seen by the controller: attributes, or superclasses.
  std::size_t task_count() const { return kind == DatasetKind::attribute ? tasks : superclasses; }
};

struct AttributeDatasetConfig {
  std::size_t tasks = 8;
  std::size_t samples = 3000;
  Shape image_shape{1, 16, 16};
  std::size_t patch = 4;             // side of each planted square
  double amplitude = 0.3;            // planted pattern contrast
  double background = 0.12;          // smooth background amplitude
  double pixel_noise = 0.08;
  double label_noise = 0.05;
  std::uint64_t seed = 0;
};

namespace detail {

/// Sum of a few random low-frequency cosines per channel, zero mean.
inline void add_smooth_field(std::span<float> img, const Shape& s, double amplitude, Rng& rng,
                             int waves = 3) {
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> freq(0.3, 1.6);
  std::uniform_real_distribution<double> sign(-1.0, 1.0);
  const std::size_t C = s[0], H = s[1], W = s[2];
  for (std::size_t c = 0; c < C; ++c) {
    for (int k = 0; k < waves; ++k) {
      const double fy = freq(rng) * 2.0 * std::numbers::pi / static_cast<double>(H);
      const double fx = freq(rng) * 2.0 * std::numbers::pi / static_cast<double>(W);
      const double dy = sign(rng), dx = sign(rng), ph = phase(rng);
      const double a = amplitude / std::sqrt(static_cast<double>(waves));
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          img[(c * H + y) * W + x] += static_cast<float>(
              a * std::cos(fy * dy * static_cast<double>(y) + fx * dx * static_cast<double>(x) + ph));
    }
  }
}

inline void clamp01(std::span<float> v) {
  for (auto& x : v) x = std::clamp(x, 0.0f, 1.0f);
}

}  // namespace detail

/// Each attribute owns a patch x patch square at a distinct grid cell holding
/// a fixed +/- pattern whenever the (noise-free) attribute is present.
inline Dataset gen_attribute_dataset(const AttributeDatasetConfig& cfg) {
  if (cfg.image_shape.size() != 3) throw ConfigError("attribute images must be [C, H, W]");
  if (cfg.tasks == 0 || cfg.samples == 0) throw ConfigError("attribute dataset needs tasks and samples");
  if (!(cfg.label_noise >= 0.0 && cfg.label_noise < 0.5)) {
    throw ConfigError("label noise must be in [0, 0.5)");
  }
  const std::size_t C = cfg.image_shape[0], H = cfg.image_shape[1], W = cfg.image_shape[2];
  if (cfg.patch == 0 || cfg.patch > H || cfg.patch > W) {
    throw ConfigError("planted patch of side " + std::to_string(cfg.patch) + " does not fit " +
                      shape_str(cfg.image_shape));
  }
  const std::size_t cells_y = H / cfg.patch, cells_x = W / cfg.patch;
  if (cells_y * cells_x < cfg.tasks) {
    throw ConfigError("cannot plant " + std::to_string(cfg.tasks) + " disjoint " +
                      std::to_string(cfg.patch) + "x" + std::to_string(cfg.patch) +
                      " patches in " + shape_str(cfg.image_shape));
  }
  Rng layout = make_rng(cfg.seed, {stream::data, 0});
  std::vector<std::size_t> cells(cells_y * cells_x);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  std::shuffle(cells.begin(), cells.end(), layout);

  Dataset d;
  d.kind = DatasetKind::attribute;
  d.image_shape = cfg.image_shape;
  d.tasks = cfg.tasks;
  d.planted_map.resize(cfg.tasks);
  std::vector<std::vector<float>> patterns(cfg.tasks);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t k = 0; k < cfg.tasks; ++k) {
    const std::size_t cy = cells[k] / cells_x, cx = cells[k] % cells_x;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < cfg.patch; ++y)
        for (std::size_t x = 0; x < cfg.patch; ++x) {
          d.planted_map[k].push_back((c * H + cy * cfg.patch + y) * W + cx * cfg.patch + x);
          patterns[k].push_back(coin(layout) ? 1.0f : -1.0f);
        }
  }
  d.images.reserve(cfg.samples);
  d.attributes.resize(cfg.samples * cfg.tasks);
  std::normal_distribution<double> noise(0.0, cfg.pixel_noise);
  std::bernoulli_distribution flip(cfg.label_noise);
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    Rng rng = make_rng(cfg.seed, {stream::data, 1, i});
    Tensor img(cfg.image_shape, 0.5f);
    detail::add_smooth_field(img.data(), cfg.image_shape, cfg.background, rng);
    for (std::size_t k = 0; k < cfg.tasks; ++k) {
      const bool present = coin(rng);
      if (present) {
        for (std::size_t j = 0; j < d.planted_map[k].size(); ++j)
          img[d.planted_map[k][j]] += static_cast<float>(cfg.amplitude * patterns[k][j]);
      }
      d.attributes[i * cfg.tasks + k] = (present != flip(rng)) ? 1.0f : 0.0f;
    }
    for (auto& v : img.data()) v += static_cast<float>(noise(rng));
    detail::clamp01(img.data());
    d.images.push_back(std::move(img));
  }
  return d;
}

struct HierarchyDatasetConfig {
  std::size_t superclasses = 4;
  std::size_t fine_classes = 20;
  std::size_t samples = 4000;
  Shape image_shape{3, 32, 32};
  double coarse_amplitude = 0.22;
  double fine_amplitude = 0.16;
  double nuisance = 0.12;
  double pixel_noise = 0.08;
  std::uint64_t seed = 0;
};

/// Image = superclass template + fine-class perturbation + per-sample smooth
/// nuisance + pixel noise, with per-sample jitter on both template strengths.
/// Classes are balanced by round-robin assignment before shuffling.
inline Dataset gen_hierarchy_dataset(const HierarchyDatasetConfig& cfg) {
  if (cfg.superclasses == 0 || cfg.fine_classes == 0 || cfg.fine_classes % cfg.superclasses != 0) {
    throw ConfigError("fine classes (" + std::to_string(cfg.fine_classes) +
                      ") must be a positive multiple of superclasses (" +
                      std::to_string(cfg.superclasses) + ")");
  }
  if (cfg.image_shape.size() != 3) throw ConfigError("hierarchy images must be [C, H, W]");
  if (cfg.samples == 0) throw ConfigError("hierarchy dataset needs samples");
  const std::size_t numel = shape_numel(cfg.image_shape);
  Dataset d;
  d.kind = DatasetKind::hierarchy;
  d.image_shape = cfg.image_shape;
  d.superclasses = cfg.superclasses;
  d.fine_classes = cfg.fine_classes;
  const std::size_t per = cfg.fine_classes / cfg.superclasses;
  for (std::size_t f = 0; f < cfg.fine_classes; ++f) d.fine_to_coarse.push_back(f / per);

  auto make_template = [&](std::uint64_t tag, std::size_t id) {
    Rng rng = make_rng(cfg.seed, {stream::data, tag, id});
    std::vector<float> t(numel, 0.0f);
    detail::add_smooth_field(t, cfg.image_shape, 1.0, rng, 4);
    return t;
  };
  std::vector<std::vector<float>> coarse_t, fine_t;
  for (std::size_t s = 0; s < cfg.superclasses; ++s) coarse_t.push_back(make_template(2, s));
  for (std::size_t f = 0; f < cfg.fine_classes; ++f) fine_t.push_back(make_template(3, f));

  std::vector<std::size_t> order(cfg.samples);
  for (std::size_t i = 0; i < cfg.samples; ++i) order[i] = i % cfg.fine_classes;
  Rng shuffle_rng = make_rng(cfg.seed, {stream::data, 4});
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  std::uniform_real_distribution<double> jitter(0.75, 1.25);
  std::normal_distribution<double> noise(0.0, cfg.pixel_noise);
  d.images.reserve(cfg.samples);
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    Rng rng = make_rng(cfg.seed, {stream::data, 5, i});
    const std::size_t f = order[i], s = d.fine_to_coarse[f];
    const double ac = cfg.coarse_amplitude * jitter(rng), af = cfg.fine_amplitude * jitter(rng);
    Tensor img(cfg.image_shape, 0.5f);
    for (std::size_t j = 0; j < numel; ++j)
      img[j] += static_cast<float>(ac * coarse_t[s][j] + af * fine_t[f][j]);
    detail::add_smooth_field(img.data(), cfg.image_shape, cfg.nuisance, rng);
    for (auto& v : img.data()) v += static_cast<float>(noise(rng));
    detail::clamp01(img.data());
    d.images.push_back(std::move(img));
    d.coarse_labels.push_back(s);
    d.fine_labels.push_back(f);
  }
  return d;
}

inline constexpr std::size_t cifar_record_bytes = 3074;

/// Parses CIFAR-100 binary records (coarse byte, fine byte, 3072 pixel bytes).
inline Dataset parse_cifar100_binary(std::span<const unsigned char> bytes,
                                     const std::string& origin = "<memory>") {
  if (bytes.empty() || bytes.size() % cifar_record_bytes != 0) {
    throw DataError(origin + ": length " + std::to_string(bytes.size()) +
                    " is not a positive multiple of " + std::to_string(cifar_record_bytes));
  }
  Dataset d;
  d.kind = DatasetKind::hierarchy;
  d.image_shape = {3, 32, 32};
  d.superclasses = 20;
  d.fine_classes = 100;
  constexpr std::size_t unset = static_cast<std::size_t>(-1);
  d.fine_to_coarse.assign(100, unset);
  const std::size_t n = bytes.size() / cifar_record_bytes;
  d.images.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * cifar_record_bytes;
    const std::size_t coarse = rec[0], fine = rec[1];
    if (coarse >= 20 || fine >= 100) {
      throw DataError(origin + ": record " + std::to_string(r) + " has label bytes (" +
                      std::to_string(coarse) + ", " + std::to_string(fine) + ") out of range");
    }
    if (d.fine_to_coarse[fine] != unset && d.fine_to_coarse[fine] != coarse) {
      throw DataError(origin + ": record " + std::to_string(r) + " maps fine class " +
                      std::to_string(fine) + " to a second superclass");
    }
    d.fine_to_coarse[fine] = coarse;
    Tensor img(d.image_shape);
    for (std::size_t j = 0; j < 3072; ++j) img[j] = static_cast<float>(rec[2 + j]) / 255.0f;
    d.images.push_back(std::move(img));
    d.coarse_labels.push_back(coarse);
    d.fine_labels.push_back(fine);
  }
  for (auto& c : d.fine_to_coarse)
    if (c == unset) c = 0;  // class absent from this file
  return d;
}

inline Dataset load_cifar100_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open CIFAR-100 file '" + path + "'");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  return parse_cifar100_binary(bytes, path);
}

struct Split {
  std::vector<std::size_t> train, validation, test;

  const std::vector<std::size_t>& get(std::string_view name) const {
    if (name == "train") return train;
    if (name == "validation") return validation;
    if (name == "test") return test;
    throw std::invalid_argument("unknown split '" + std::string(name) + "'");
  }
};

/// 70/15/15 by seeded shuffle.
inline Split make_split(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = make_rng(seed, {stream::split});
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n_train = n * 70 / 100, n_val = n * 15 / 100;
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.validation.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                      idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return s;
}

enum class CorruptionKind { gaussian_noise, blur, contrast, brightness, pixel_dropout, saturate };

inline constexpr std::array<CorruptionKind, 6> all_corruptions{
    CorruptionKind::gaussian_noise, CorruptionKind::blur,          CorruptionKind::contrast,
    CorruptionKind::brightness,     CorruptionKind::pixel_dropout, CorruptionKind::saturate};

inline std::string_view to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::blur: return "blur";
    case CorruptionKind::contrast: return "contrast";
    case CorruptionKind::brightness: return "brightness";
    case CorruptionKind::pixel_dropout: return "pixel_dropout";
    case CorruptionKind::saturate: return "saturate";
  }
  return "?";
}

inline CorruptionKind parse_corruption(std::string_view s) {
  for (auto k : all_corruptions)
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown corruption kind '" + std::string(s) + "'");
}

inline constexpr int max_severity = 5;

/// Severity tables, index 0 being the identity.
namespace severity_table {
inline constexpr std::array<double, 6> noise_sigma{0.0, 0.04, 0.08, 0.12, 0.18, 0.26};
inline constexpr std::array<double, 6> blur_sigma{0.0, 0.5, 0.75, 1.0, 1.5, 2.0};
inline constexpr std::array<double, 6> contrast_factor{1.0, 0.8, 0.6, 0.4, 0.25, 0.15};
inline constexpr std::array<double, 6> brightness_shift{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
inline constexpr std::array<double, 6> dropout_rate{0.0, 0.05, 0.1, 0.2, 0.3, 0.45};
inline constexpr std::array<double, 6> saturate_factor{1.0, 1.5, 2.0, 3.0, 4.0, 5.0};
}  // namespace severity_table

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 0;

  static CorruptionSpec make(CorruptionKind kind, int severity) {
    if (severity < 0 || severity > max_severity) {
      throw std::invalid_argument("corruption severity " + std::to_string(severity) +
                                  " outside 0.." + std::to_string(max_severity));
    }
    return {kind, severity};
  }
};

namespace detail {

inline Tensor gaussian_blur(const Tensor& img, double sigma) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const int r = static_cast<int>(std::ceil(2.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double ks = 0.0;
  for (int i = -r; i <= r; ++i) ks += (k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v /= ks;
  auto at = [](int i, int n) { return std::clamp(i, 0, n - 1); };  // edge replication
  Tensor tmp(img.shape()), out(img.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double s = 0.0;
        for (int i = -r; i <= r; ++i)
          s += k[i + r] * img.at(c, y, at(static_cast<int>(x) + i, static_cast<int>(W)));
        tmp.at(c, y, x) = static_cast<float>(s);
      }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double s = 0.0;
        for (int i = -r; i <= r; ++i)
          s += k[i + r] * tmp.at(c, at(static_cast<int>(y) + i, static_cast<int>(H)), x);
        out.at(c, y, x) = static_cast<float>(s);
      }
  return out;
}

}  // namespace detail

/// Applies one corruption to a [C, H, W] image in [0, 1]; the result is
/// clamped to [0, 1]. Severity 0 returns the input unchanged.
///
/// contrast scales deviations from the image mean; saturate scales deviations
/// from the per-pixel channel mean (from 0.5 for single-channel images);
/// pixel_dropout zeroes whole pixel positions across channels.
inline Tensor corrupt(const Tensor& image, const CorruptionSpec& spec, Rng& rng) {
  if (spec.severity < 0 || spec.severity > max_severity) {
    throw std::invalid_argument("corruption severity " + std::to_string(spec.severity) +
                                " outside 0.." + std::to_string(max_severity));
  }
  if (spec.severity == 0) return image;
  if (image.rank() != 3) throw ShapeError("corrupt: image must be [C, H, W], got " + shape_str(image.shape()));
  const std::size_t s = static_cast<std::size_t>(spec.severity);
  const std::size_t C = image.dim(0), HW = image.dim(1) * image.dim(2);
  Tensor out = image;
  switch (spec.kind) {
    case CorruptionKind::gaussian_noise: {
      std::normal_distribution<double> n(0.0, severity_table::noise_sigma[s]);
      for (auto& v : out.data()) v = static_cast<float>(v + n(rng));
      break;
    }
    case CorruptionKind::blur:
      out = detail::gaussian_blur(image, severity_table::blur_sigma[s]);
      break;
    case CorruptionKind::contrast: {
      double mean = 0.0;
      for (float v : image.data()) mean += v;
      mean /= static_cast<double>(image.size());
      const double f = severity_table::contrast_factor[s];
      for (auto& v : out.data()) v = static_cast<float>(mean + f * (v - mean));
      break;
    }
    case CorruptionKind::brightness:
      for (auto& v : out.data()) v = static_cast<float>(v + severity_table::brightness_shift[s]);
      break;
    case CorruptionKind::pixel_dropout: {
      std::bernoulli_distribution drop(severity_table::dropout_rate[s]);
      for (std::size_t p = 0; p < HW; ++p)
        if (drop(rng))
          for (std::size_t c = 0; c < C; ++c) out[c * HW + p] = 0.0f;
      break;
    }
    case CorruptionKind::saturate: {
      const double f = severity_table::saturate_factor[s];
      for (std::size_t p = 0; p < HW; ++p) {
        double centre = 0.5;
        if (C > 1) {
          centre = 0.0;
          for (std::size_t c = 0; c < C; ++c) centre += image[c * HW + p];
          centre /= static_cast<double>(C);
        }
        for (std::size_t c = 0; c < C; ++c)
          out[c * HW + p] = static_cast<float>(centre + f * (image[c * HW + p] - centre));
      }
      break;
    }
  }
  detail::clamp01(out.data());
  return out;
}

/// Stores every field of a dataset in a container.
inline Container dataset_to_container(const Dataset& d) {
  Container c;
  if (d.images.empty()) throw DataError("cannot export an empty dataset");
  Shape stacked = d.image_shape;
  stacked.insert(stacked.begin(), d.size());
  std::vector<float> all;
  all.reserve(shape_numel(stacked));
  for (const auto& img : d.images) all.insert(all.end(), img.data().begin(), img.data().end());
  c.put("images", Tensor(stacked, std::move(all)));
  auto as_float = [](const std::vector<std::size_t>& v) {
    return Tensor::vec(std::vector<float>(v.begin(), v.end()));
  };
  c.put("meta", Tensor::vec({d.kind == DatasetKind::attribute ? 0.0f : 1.0f,
                             static_cast<float>(d.tasks), static_cast<float>(d.superclasses),
                             static_cast<float>(d.fine_classes)}));
  if (d.kind == DatasetKind::attribute) {
    c.put("attributes", Tensor({d.size(), d.tasks}, d.attributes));
    for (std::size_t k = 0; k < d.planted_map.size(); ++k)
      c.put("planted/" + std::to_string(k), as_float(d.planted_map[k]));
  } else {
    c.put("coarse", as_float(d.coarse_labels));
    c.put("fine", as_float(d.fine_labels));
    c.put("fine_to_coarse", as_float(d.fine_to_coarse));
  }
  return c;
}

inline Dataset dataset_from_container(const Container& c) {
  const Tensor& meta = c.get("meta");
  const Tensor& images = c.get("images");
  if (meta.size() != 4 || images.rank() != 4) throw DataError("malformed dataset container");
  Dataset d;
  d.kind = meta[0] == 0.0f ? DatasetKind::attribute : DatasetKind::hierarchy;
  d.tasks = static_cast<std::size_t>(meta[1]);
  d.superclasses = static_cast<std::size_t>(meta[2]);
  d.fine_classes = static_cast<std::size_t>(meta[3]);
  d.image_shape = {images.dim(1), images.dim(2), images.dim(3)};
  const std::size_t n = images.dim(0), per = shape_numel(d.image_shape);
  for (std::size_t i = 0; i < n; ++i) {
    d.images.emplace_back(d.image_shape, std::vector<float>(images.ptr() + i * per,
                                                            images.ptr() + (i + 1) * per));
  }
  auto as_index = [](const Tensor& t) {
    std::vector<std::size_t> v;
    for (float x : t.data()) v.push_back(static_cast<std::size_t>(x));
    return v;
  };
  if (d.kind == DatasetKind::attribute) {
    const Tensor& a = c.get("attributes");
    d.attributes.assign(a.data().begin(), a.data().end());
    for (std::size_t k = 0; k < d.tasks; ++k)
      d.planted_map.push_back(as_index(c.get("planted/" + std::to_string(k))));
  } else {
    d.coarse_labels = as_index(c.get("coarse"));
    d.fine_labels = as_index(c.get("fine"));
    d.fine_to_coarse = as_index(c.get("fine_to_coarse"));
  }
  return d;
}

}  // namespace comodnet
