// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration: a sectioned key = value file. Every field has a default;
// unknown sections or keys are rejected. The canonical serialization lists
// every field, so a stored copy is self-contained.

#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "comodnet/adam.hpp"
#include "comodnet/data.hpp"
#include "comodnet/error.hpp"
#include "comodnet/hash.hpp"
#include "comodnet/model.hpp"
#include "comodnet/modulation.hpp"

namespace comodnet {

/// Fine-tuning variants: readout trains only a decision layer in plain mode;
/// attention trains without gain fluctuations; comod trains through them.
enum class Variant { readout, attention, comod };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::readout: return "readout";
    case Variant::attention: return "attention";
    case Variant::comod: return "comod";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (auto v : {Variant::readout, Variant::attention, Variant::comod})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown fine-tuning variant '" + std::string(s) + "'");
}

/// One row of the evaluation matrix.
enum class EvalRow {
  output_weights_only,
  attention,
  comod_test_time_per_task,
  comod_test_time,
  comodulation_per_task,
  comodulation,
};

inline constexpr std::array<EvalRow, 6> all_eval_rows{
    EvalRow::output_weights_only, EvalRow::attention,        EvalRow::comod_test_time_per_task,
    EvalRow::comod_test_time,     EvalRow::comodulation_per_task, EvalRow::comodulation};

inline std::string_view to_string(EvalRow r) {
  switch (r) {
    case EvalRow::output_weights_only: return "output_weights_only";
    case EvalRow::attention: return "attention";
    case EvalRow::comod_test_time_per_task: return "comod_test_time_per_task";
    case EvalRow::comod_test_time: return "comod_test_time";
    case EvalRow::comodulation_per_task: return "comodulation_per_task";
    case EvalRow::comodulation: return "comodulation";
  }
  return "?";
}

inline std::string_view display_name(EvalRow r) {
  switch (r) {
    case EvalRow::output_weights_only: return "Output weights only";
    case EvalRow::attention: return "Attention";
    case EvalRow::comod_test_time_per_task: return "Comod test time, one gain per task";
    case EvalRow::comod_test_time: return "Comod test time";
    case EvalRow::comodulation_per_task: return "Comodulation, one gain per task";
    case EvalRow::comodulation: return "Comodulation";
  }
  return "?";
}

inline EvalRow parse_eval_row(std::string_view s) {
  for (auto r : all_eval_rows)
    if (to_string(r) == s) return r;
  throw ConfigError("unknown evaluation mode '" + std::string(s) + "'");
}

/// Which fine-tuned model a row evaluates and in which forward mode.
inline Variant row_variant(EvalRow r) {
  switch (r) {
    case EvalRow::output_weights_only: return Variant::readout;
    case EvalRow::attention:
    case EvalRow::comod_test_time_per_task:
    case EvalRow::comod_test_time: return Variant::attention;
    default: return Variant::comod;
  }
}

inline ForwardMode row_mode(EvalRow r) {
  switch (r) {
    case EvalRow::output_weights_only: return ForwardMode::plain;
    case EvalRow::attention: return ForwardMode::attention;
    case EvalRow::comod_test_time_per_task:
    case EvalRow::comodulation_per_task: return ForwardMode::comod_test_fixed;
    default: return ForwardMode::comod_test;
  }
}

struct RunConfig {
  std::string name = "run";
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  DatasetKind data_kind = DatasetKind::attribute;
  std::string cifar_path;  // hierarchy only; empty selects the synthetic generator
  AttributeDatasetConfig attribute{};
  HierarchyDatasetConfig hierarchy{};
  std::uint64_t data_seed = 1234;

  Wiring wiring = Wiring::base;
  std::vector<ConvBlockSpec> backbone{{16, 3, true}, {32, 3, true}, {32, 3, true}};
  std::size_t encoder_channels = 16, encoder_kernel = 3;
  std::size_t processing_channels = 16, processing_kernel = 3;
  std::size_t decoder_units = 64;
  bool biases = true;

  std::size_t controller_hidden = 0;
  ControllerOutput controller_output = ControllerOutput::identity;
  bool controller_unit_start = true;
  bool controller_joint_pretrain = false;

  ModulatorConfig modulator{};

  AdamConfig adam{};
  std::size_t pretrain_epochs = 10, pretrain_batch = 256;
  double pretrain_lr = 2e-4;
  std::vector<double> pretrain_checkpoints{1.0};  // fractions of pretrain_epochs

  std::size_t finetune_epochs = 1, finetune_batch = 64;
  double finetune_lr = 0.02;
  std::vector<Variant> variants{Variant::readout, Variant::attention, Variant::comod};
  std::size_t curve_every = 10;     // batches between learning-curve evaluations
  std::size_t curve_batches = 50;   // curve covers the first this-many batches
  std::size_t curve_samples = 256;  // validation subset used by the curve

  std::vector<EvalRow> eval_rows{all_eval_rows.begin(), all_eval_rows.end()};
  std::size_t ece_bins = 15;
  std::size_t info_bins = 5;
  std::size_t permutations = 999;
  std::size_t info_subset = 512;

  std::vector<CorruptionKind> corruptions{all_corruptions.begin(), all_corruptions.end()};
  std::vector<EvalRow> sweep_rows{EvalRow::attention, EvalRow::comodulation_per_task,
                                  EvalRow::comodulation};
  std::size_t sweep_samples = 0;  // 0: whole test split

  /// Canonical text; the config hash is the SHA-256 of these bytes.
  std::string serialize() const;
  std::string hash() const { return sha256_hex(serialize()); }
  void validate() const;

  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::string& path);

  std::size_t task_count() const {
    return data_kind == DatasetKind::attribute ? attribute.tasks
                                               : (cifar_path.empty() ? hierarchy.superclasses : 20);
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != ' ' && c != '\t') {
      cur += c;
    }
  }
  if (!cur.empty() || !out.empty()) out.push_back(cur);
  return out;
}

template <class Int>
Int parse_uint(const std::string& s, const std::string& key) {
  Int v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty() || s[0] == '-') {
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

inline double parse_double(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

template <class T, class F>
std::string join(const std::vector<T>& v, F f) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + f(v[i]);
  return s;
}

struct Field {
  std::string section, key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Int>
Field uint_field(std::string sec, std::string key, Int RunConfig::*p) {
  return {sec, key, [p](RunConfig& c, const std::string& v, const std::string& k) { c.*p = parse_uint<Int>(v, k); },
          [p](const RunConfig& c) { return std::to_string(c.*p); }};
}

inline Field double_field(std::string sec, std::string key, double RunConfig::*p) {
  return {sec, key, [p](RunConfig& c, const std::string& v, const std::string& k) { c.*p = parse_double(v, k); },
          [p](const RunConfig& c) { return fmt_double(c.*p); }};
}

inline Field bool_field(std::string sec, std::string key, bool RunConfig::*p) {
  return {sec, key, [p](RunConfig& c, const std::string& v, const std::string& k) { c.*p = parse_bool(v, k); },
          [p](const RunConfig& c) { return std::string(c.*p ? "true" : "false"); }};
}

/// Field accessed through a projection into a nested struct.
template <class Proj>
Field nested_uint(std::string sec, std::string key, Proj proj) {
  return {sec, key,
          [proj](RunConfig& c, const std::string& v, const std::string& k) {
            proj(c) = parse_uint<std::remove_reference_t<decltype(proj(c))>>(v, k);
          },
          [proj](const RunConfig& c) { return std::to_string(proj(const_cast<RunConfig&>(c))); }};
}

template <class Proj>
Field nested_double(std::string sec, std::string key, Proj proj) {
  return {sec, key,
          [proj](RunConfig& c, const std::string& v, const std::string& k) { proj(c) = parse_double(v, k); },
          [proj](const RunConfig& c) { return fmt_double(proj(const_cast<RunConfig&>(c))); }};
}

inline Shape parse_shape(const std::string& s, const std::string& key) {
  Shape out;
  std::string cur;
  for (char c : s + "x") {
    if (c == 'x') {
      out.push_back(parse_uint<std::size_t>(cur, key));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (out.size() != 3) throw ConfigError(key + ": expected CxHxW, got '" + s + "'");
  return out;
}

inline std::string shape_text(const Shape& s) {
  return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]);
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back({"run", "name", [](RunConfig& c, const std::string& s, const std::string&) { c.name = s; },
                 [](const RunConfig& c) { return c.name; }});
    v.push_back({"run", "seeds",
                 [](RunConfig& c, const std::string& s, const std::string& k) {
                   c.seeds.clear();
                   for (const auto& x : split_list(s)) c.seeds.push_back(parse_uint<std::uint64_t>(x, k));
                 },
                 [](const RunConfig& c) {
                   return join(c.seeds, [](std::uint64_t x) { return std::to_string(x); });
                 }});
    // data
    v.push_back({"data", "kind",
                 [](RunConfig& c, const std::string& s, const std::string&) { c.data_kind = parse_dataset_kind(s); },
                 [](const RunConfig& c) { return std::string(to_string(c.data_kind)); }});
    v.push_back({"data", "cifar_path", [](RunConfig& c, const std::string& s, const std::string&) { c.cifar_path = s; },
                 [](const RunConfig& c) { return c.cifar_path; }});
    v.push_back(uint_field("data", "seed", &RunConfig::data_seed));
    v.push_back(nested_uint("data", "samples", [](RunConfig& c) -> std::size_t& { return c.attribute.samples; }));
    v.push_back(nested_uint("data", "tasks", [](RunConfig& c) -> std::size_t& { return c.attribute.tasks; }));
    v.push_back({"data", "image_shape",
                 [](RunConfig& c, const std::string& s, const std::string& k) { c.attribute.image_shape = parse_shape(s, k); },
                 [](const RunConfig& c) { return shape_text(c.attribute.image_shape); }});
    v.push_back(nested_uint("data", "patch", [](RunConfig& c) -> std::size_t& { return c.attribute.patch; }));
    v.push_back(nested_double("data", "amplitude", [](RunConfig& c) -> double& { return c.attribute.amplitude; }));
    v.push_back(nested_double("data", "background", [](RunConfig& c) -> double& { return c.attribute.background; }));
    v.push_back(nested_double("data", "pixel_noise", [](RunConfig& c) -> double& { return c.attribute.pixel_noise; }));
    v.push_back(nested_double("data", "label_noise", [](RunConfig& c) -> double& { return c.attribute.label_noise; }));
    v.push_back(nested_uint("data", "hierarchy_samples", [](RunConfig& c) -> std::size_t& { return c.hierarchy.samples; }));
    v.push_back({"data", "hierarchy_image_shape",
                 [](RunConfig& c, const std::string& s, const std::string& k) { c.hierarchy.image_shape = parse_shape(s, k); },
                 [](const RunConfig& c) { return shape_text(c.hierarchy.image_shape); }});
    v.push_back(nested_uint("data", "superclasses", [](RunConfig& c) -> std::size_t& { return c.hierarchy.superclasses; }));
    v.push_back(nested_uint("data", "fine_classes", [](RunConfig& c) -> std::size_t& { return c.hierarchy.fine_classes; }));
    v.push_back(nested_double("data", "coarse_amplitude", [](RunConfig& c) -> double& { return c.hierarchy.coarse_amplitude; }));
    v.push_back(nested_double("data", "fine_amplitude", [](RunConfig& c) -> double& { return c.hierarchy.fine_amplitude; }));
    v.push_back(nested_double("data", "nuisance", [](RunConfig& c) -> double& { return c.hierarchy.nuisance; }));
    v.push_back(nested_double("data", "hierarchy_pixel_noise", [](RunConfig& c) -> double& { return c.hierarchy.pixel_noise; }));
    // architecture
    v.push_back({"architecture", "wiring",
                 [](RunConfig& c, const std::string& s, const std::string& k) {
                   if (s == "base") c.wiring = Wiring::base;
                   else if (s == "residual") c.wiring = Wiring::residual;
                   else throw ConfigError(k + ": expected base or residual, got '" + s + "'");
                 },
                 [](const RunConfig& c) { return std::string(to_string(c.wiring)); }});
    v.push_back({"architecture", "backbone",
                 [](RunConfig& c, const std::string& s, const std::string& k) {
                   // Keep a kernel set earlier in the file; key order must not matter.
                   const std::size_t kernel = c.backbone.empty() ? 3 : c.backbone.front().kernel;
                   c.backbone.clear();
                   for (auto x : split_list(s)) {
                     ConvBlockSpec b;
                     b.kernel = kernel;
                     b.pool = !x.empty() && x.back() == 'p';
                     if (b.pool) x.pop_back();
                     b.channels = parse_uint<std::size_t>(x, k);
                     c.backbone.push_back(b);
                   }
                 },
                 [](const RunConfig& c) {
                   return join(c.backbone, [](const ConvBlockSpec& b) {
                     return std::to_string(b.channels) + (b.pool ? "p" : "");
                   });
                 }});
    v.push_back({"architecture", "backbone_kernel",
                 [](RunConfig& c, const std::string& s, const std::string& k) {
                   const auto kk = parse_uint<std::size_t>(s, k);
                   for (auto& b : c.backbone) b.kernel = kk;
                 },
                 [](const RunConfig& c) {
                   return std::to_string(c.backbone.empty() ? 3 : c.backbone.front().kernel);
                 }});
    v.push_back(uint_field("architecture", "encoder_channels", &RunConfig::encoder_channels));
    v.push_back(uint_field("architecture", "encoder_kernel", &RunConfig::encoder_kernel));
    v.push_back(uint_field("architecture", "processing_channels", &RunConfig::processing_channels));
    v.push_back(uint_field("architecture", "processing_kernel", &RunConfig::processing_kernel));
    v.push_back(uint_field("architecture", "decoder_units", &RunConfig::decoder_units));
    v.push_back(bool_field("architecture", "biases", &RunConfig::biases));
    // controller
    v.push_back(uint_field("controller", "hidden", &RunConfig::controller_hidden));
    v.push_back({"controller", "output",
                 [](RunConfig& c, const std::string& s, const std::string& k) {
                   if (s == "identity") c.controller_output = ControllerOutput::identity;
                   else if (s == "sigmoid") c.controller_output = ControllerOutput::sigmoid;
                   else throw ConfigError(k + ": expected identity or sigmoid, got '" + s + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.controller_output == ControllerOutput::identity ? "identity" : "sigmoid");
                 }});
    v.push_back(bool_field("controller", "unit_start", &RunConfig::controller_unit_start));
    v.push_back(bool_field("controller", "joint_pretrain", &RunConfig::controller_joint_pretrain));
    // modulator
    v.push_back(nested_double("modulator", "variance", [](RunConfig& c) -> double& { return c.modulator.variance; }));
    v.push_back(nested_uint("modulator", "draws", [](RunConfig& c) -> std::size_t& { return c.modulator.draws; }));
    // optimizer
    v.push_back(nested_double("optimizer", "beta1", [](RunConfig& c) -> double& { return c.adam.beta1; }));
    v.push_back(nested_double("optimizer", "beta2", [](RunConfig& c) -> double& { return c.adam.beta2; }));
    v.push_back(nested_double("optimizer", "eps", [](RunConfig& c) -> double& { return c.adam.eps; }));
    // pretrain
    v.push_back(uint_field("pretrain", "epochs", &RunConfig::pretrain_epochs));
    v.push_back(uint_field("pretrain", "batch", &RunConfig::pretrain_batch));
    v.push_back(double_field("pretrain", "lr", &RunConfig::pretrain_lr));
    v.push_back({"pretrain", "checkpoints",
                 [](RunConfig& c, const std::string& s, const std::string& k) {
                   c.pretrain_checkpoints.clear();
                   for (const auto& x : split_list(s)) c.pretrain_checkpoints.push_back(parse_double(x, k));
                 },
                 [](const RunConfig& c) { return join(c.pretrain_checkpoints, fmt_double); }});
    // finetune
    v.push_back(uint_field("finetune", "epochs", &RunConfig::finetune_epochs));
    v.push_back(uint_field("finetune", "batch", &RunConfig::finetune_batch));
    v.push_back(double_field("finetune", "lr", &RunConfig::finetune_lr));
    v.push_back({"finetune", "variants",
                 [](RunConfig& c, const std::string& s, const std::string&) {
                   c.variants.clear();
                   for (const auto& x : split_list(s)) c.variants.push_back(parse_variant(x));
                 },
                 [](const RunConfig& c) {
                   return join(c.variants, [](Variant x) { return std::string(to_string(x)); });
                 }});
    v.push_back(uint_field("finetune", "curve_every", &RunConfig::curve_every));
    v.push_back(uint_field("finetune", "curve_batches", &RunConfig::curve_batches));
    v.push_back(uint_field("finetune", "curve_samples", &RunConfig::curve_samples));
    // eval
    auto rows_field = [](std::string sec, std::vector<EvalRow> RunConfig::*p) {
      return Field{sec, "modes",
                   [p](RunConfig& c, const std::string& s, const std::string&) {
                     (c.*p).clear();
                     for (const auto& x : split_list(s)) (c.*p).push_back(parse_eval_row(x));
                   },
                   [p](const RunConfig& c) {
                     return join(c.*p, [](EvalRow r) { return std::string(to_string(r)); });
                   }};
    };
    v.push_back(rows_field("eval", &RunConfig::eval_rows));
    v.push_back(uint_field("eval", "ece_bins", &RunConfig::ece_bins));
    v.push_back(uint_field("eval", "info_bins", &RunConfig::info_bins));
    v.push_back(uint_field("eval", "permutations", &RunConfig::permutations));
    v.push_back(uint_field("eval", "info_subset", &RunConfig::info_subset));
    // sweep
    v.push_back({"sweep", "corruptions",
                 [](RunConfig& c, const std::string& s, const std::string& k) {
                   c.corruptions.clear();
                   for (const auto& x : split_list(s)) {
                     try {
                       c.corruptions.push_back(parse_corruption(x));
                     } catch (const std::invalid_argument& e) {
                       throw ConfigError(k + ": " + e.what());
                     }
                   }
                 },
                 [](const RunConfig& c) {
                   return join(c.corruptions, [](CorruptionKind x) { return std::string(to_string(x)); });
                 }});
    v.push_back(rows_field("sweep", &RunConfig::sweep_rows));
    v.push_back(uint_field("sweep", "samples", &RunConfig::sweep_samples));
    return v;
  }();
  return f;
}

}  // namespace detail

inline void RunConfig::validate() const {
  if (seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
  if (!(pretrain_lr > 0.0) || !(finetune_lr > 0.0)) throw ConfigError("learning rates must be > 0");
  if (pretrain_batch == 0 || finetune_batch == 0) throw ConfigError("batch sizes must be >= 1");
  if (!(modulator.variance > 0.0)) throw ConfigError("modulator.variance must be > 0");
  if (modulator.draws < 2) throw ConfigError("modulator.draws must be >= 2");
  if (backbone.empty()) throw ConfigError("architecture.backbone must list at least one block");
  if (variants.empty()) throw ConfigError("finetune.variants must not be empty");
  if (ece_bins == 0 || info_bins == 0) throw ConfigError("eval bin counts must be >= 1");
  if (curve_every == 0) throw ConfigError("finetune.curve_every must be >= 1");
  for (double f : pretrain_checkpoints) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("pretrain.checkpoints fractions must lie in (0, 1]");
  }
  if (data_kind == DatasetKind::attribute) {
    if (attribute.tasks == 0 || attribute.samples == 0) throw ConfigError("data: tasks and samples must be >= 1");
    if (!(attribute.label_noise >= 0.0 && attribute.label_noise < 0.5)) {
      throw ConfigError("data.label_noise must be in [0, 0.5)");
    }
  } else if (cifar_path.empty()) {
    if (hierarchy.superclasses == 0 || hierarchy.fine_classes % hierarchy.superclasses != 0 ||
        hierarchy.fine_classes == 0) {
      throw ConfigError("data.fine_classes must be a positive multiple of data.superclasses");
    }
  }
}

inline std::string RunConfig::serialize() const {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::fields()) {
    if (f.section != section) {
      os << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
    }
    os << f.key << " = " << f.get(*this) << '\n';
  }
  return os.str();
}

inline RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ": line " + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError(origin + ": key '" + section + "' outside any section");
    }
    const auto& known = detail::fields();
    if (std::none_of(known.begin(), known.end(),
                     [&](const detail::Field& f) { return f.section == section; })) {
      throw ConfigError(origin + ": unknown section '[" + section + "]'");
    }
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const auto& fs = detail::fields();
      const auto it = std::find_if(fs.begin(), fs.end(), [&](const detail::Field& f) {
        return f.section == section && f.key == key;
      });
      if (it == fs.end()) throw ConfigError(origin + ": unknown key '" + full + "'");
      it->set(c, value.data(), full);
    }
  }
  c.validate();
  return c;
}

inline RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

}  // namespace comodnet
