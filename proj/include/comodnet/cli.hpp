// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line driver. Run directory layout:
//
//   <out>/config.ini                 canonical copy of the run config
//   <out>/data/                      dataset.bin, manifest.txt
//   <out>/seed<s>/pretrain/          model.bin, snapshot_p<pct>.bin, metrics.csv
//   <out>/seed<s>/finetune/          <variant>.bin, p<pct>/<variant>.bin, metrics.csv
//   <out>/seed<s>/eval/              report.csv, reliability.csv, analysis CSVs
//   <out>/seed<s>/sweep/             robustness.csv, robustness_diff.csv
//   <out>/seed<s>/activations/       activations.bin, index.csv
//
// Every stage directory ends with a manifest.txt, written last. An existing
// stage is never modified: without --overwrite the new output goes to a
// timestamped sibling ("eval.20261015T101500"), and readers pick the most
// recent completed sibling. --overwrite replaces the stage and its siblings.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "comodnet/experiment.hpp"

namespace comodnet::cli {

inline constexpr std::string_view tool_version = "0.1.0";

namespace fs = std::filesystem;

struct Options {
  std::string command;
  std::string config_path;
  fs::path out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> modes;
  bool overwrite = false;
  std::size_t jobs = 1;
  bool quiet = false;
  std::vector<std::string> runs;  // analyze
  std::string split = "test";     // analyze
  std::size_t samples = 8;        // export-activations
};

// ---------------------------------------------------------------------------
// Files and stage directories

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + p.string());
  f << text;
  if (!f) throw DataError("short write to " + p.string());
}

inline std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

template <class Fn>
void write_csv(const fs::path& p, Fn&& fn) {
  std::ostringstream os;
  fn(os);
  write_text(p, os.str());
}

inline std::string utc_stamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%dT%H%M%S");
  return os.str();
}

/// Fresh directory for a stage; see the file comment for the sibling rule.
inline fs::path open_stage(const fs::path& parent, const std::string& name, bool overwrite) {
  fs::path p = parent / name;
  if (overwrite && fs::is_directory(parent)) {
    // Siblings go too, so readers cannot pick a stale timestamped copy.
    std::vector<fs::path> doomed;
    for (const auto& e : fs::directory_iterator(parent)) {
      const std::string fn = e.path().filename().string();
      if (e.is_directory() && (fn == name || fn.rfind(name + ".", 0) == 0)) doomed.push_back(e.path());
    }
    for (const auto& d : doomed) fs::remove_all(d);
  }
  if (fs::exists(p)) {
    const std::string stamp = utc_stamp();
    p = parent / (name + "." + stamp);
    for (int i = 2; fs::exists(p); ++i) p = parent / (name + "." + stamp + "-" + std::to_string(i));
  }
  fs::create_directories(p);
  return p;
}

/// Most recent completed stage directory, or nullopt.
inline std::optional<fs::path> latest_stage(const fs::path& parent, const std::string& name) {
  if (!fs::is_directory(parent)) return std::nullopt;
  std::optional<fs::path> best;
  std::string best_key;
  for (const auto& e : fs::directory_iterator(parent)) {
    if (!e.is_directory()) continue;
    const std::string fn = e.path().filename().string();
    std::string key;
    if (fn == name) {
      key = "";
    } else if (fn.rfind(name + ".", 0) == 0) {
      key = fn.substr(name.size() + 1);
    } else {
      continue;
    }
    if (!fs::exists(e.path() / "manifest.txt")) continue;
    if (!best || key > best_key) {
      best = e.path();
      best_key = key;
    }
  }
  return best;
}

inline fs::path require_stage(const fs::path& parent, const std::string& name, const std::string& hint) {
  auto p = latest_stage(parent, name);
  if (!p) throw DataError("no completed '" + name + "' stage under " + parent.string() + " (run " + hint + " first)");
  return *p;
}

struct Manifest {
  std::string command;
  std::string config_sha256;
  std::optional<std::uint64_t> seed;
  std::vector<std::pair<std::string, std::string>> extra;

  void write(const fs::path& dir, double wall_seconds) const {
    std::ostringstream os;
    os << "command = " << command << '\n'
       << "config_sha256 = " << config_sha256 << '\n'
       << "seed = " << (seed ? std::to_string(*seed) : std::string("none")) << '\n'
       << "version = " << tool_version << '\n'
       << "wall_time_seconds = " << std::fixed << std::setprecision(3) << wall_seconds << '\n';
    for (const auto& [k, v] : extra) os << k << " = " << v << '\n';
    write_text(dir / "manifest.txt", os.str());
  }
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::string pct_tag(double fraction) {
  std::ostringstream os;
  os << 'p' << std::setw(3) << std::setfill('0') << static_cast<int>(std::lround(fraction * 100.0));
  return os.str();
}

// ---------------------------------------------------------------------------
// Run context shared by the per-seed stages

struct RunContext {
  Options opt;
  RunConfig cfg;
  std::string config_hash;
  Logger log;

  std::vector<std::uint64_t> seeds() const {
    return opt.seed ? std::vector<std::uint64_t>{*opt.seed} : cfg.seeds;
  }
  fs::path seed_dir(std::uint64_t s) const { return opt.out / ("seed" + std::to_string(s)); }
};

/// Loads the config and binds it to the run directory. A run directory holds
/// exactly one config; a different one is rejected.
inline RunContext open_run(const Options& o) {
  if (o.config_path.empty()) throw ConfigError("--config is required for '" + o.command + "'");
  if (o.out.empty()) throw ConfigError("--out is required for '" + o.command + "'");
  RunContext ctx{o, RunConfig::load(o.config_path), {}, Logger{o.quiet}};
  const std::string canonical = ctx.cfg.serialize();
  ctx.config_hash = sha256_hex(canonical);
  const fs::path stored = o.out / "config.ini";
  if (fs::exists(stored)) {
    const std::string prior = read_text(stored);
    if (prior != canonical) {
      throw ConfigError("run directory " + o.out.string() + " was created with a different config (sha256 " +
                        sha256_hex(prior) + "); use a fresh --out");
    }
  } else {
    write_text(stored, canonical);
  }
  return ctx;
}

inline Dataset load_run_dataset(const RunContext& ctx) {
  const fs::path dir = require_stage(ctx.opt.out, "data", "gen-data");
  return dataset_from_container(Container::load(dir / "dataset.bin"));
}

inline Model load_model(const RunContext& ctx, const Dataset& d, std::uint64_t seed, const fs::path& file) {
  if (!fs::exists(file)) throw DataError("missing checkpoint " + file.string());
  Model m = build_run_model(ctx.cfg, d, seed);
  model_from_container(m, Container::load(file));
  return m;
}

inline std::vector<EvalRow> requested_rows(const RunContext& ctx, const std::vector<EvalRow>& fallback) {
  if (ctx.opt.modes.empty()) return fallback;
  std::vector<EvalRow> rows;
  for (const auto& s : ctx.opt.modes) rows.push_back(parse_eval_row(s));
  return rows;
}

inline VariantModels load_variants(const RunContext& ctx, const Dataset& d, std::uint64_t seed,
                                   const std::vector<EvalRow>& rows) {
  const fs::path dir = require_stage(ctx.seed_dir(seed), "finetune", "finetune");
  VariantModels vm;
  for (EvalRow r : rows) {
    const Variant v = row_variant(r);
    if (!vm.count(v)) vm.emplace(v, load_model(ctx, d, seed, dir / (std::string(to_string(v)) + ".bin")));
  }
  return vm;
}

/// Runs fn(seed) for every seed on up to `jobs` threads, capped by
/// COMODNET_THREADS. The first failure is rethrown after all workers stop.
template <class Fn>
void for_each_seed(const RunContext& ctx, Fn&& fn) {
  const auto seeds = ctx.seeds();
  std::size_t jobs = std::max<std::size_t>(1, ctx.opt.jobs);
  if (const char* env = std::getenv("COMODNET_THREADS")) {
    char* end = nullptr;
    const unsigned long cap = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && cap > 0) jobs = std::min<std::size_t>(jobs, cap);
  }
  jobs = std::min(jobs, seeds.size());
  if (jobs <= 1) {
    for (auto s : seeds) fn(s);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < seeds.size(); i = next++) {
        {
          std::lock_guard lock(mu);
          if (failure) return;
        }
        try {
          fn(seeds[i]);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_gen_data(const RunContext& ctx) {
  Stopwatch sw;
  const Dataset d = make_dataset(ctx.cfg);
  const fs::path dir = open_stage(ctx.opt.out, "data", ctx.opt.overwrite);
  dataset_to_container(d).save(dir / "dataset.bin");
  ctx.log("gen-data: " + std::to_string(d.size()) + " samples -> " + dir.string());
  Manifest{"gen-data", ctx.config_hash, ctx.cfg.data_seed,
           {{"samples", std::to_string(d.size())}, {"kind", std::string(to_string(d.kind))}}}
      .write(dir, sw.seconds());
}

inline void cmd_pretrain(const RunContext& ctx) {
  const Dataset d = load_run_dataset(ctx);
  const Split split = make_split(d.size(), ctx.cfg.data_seed);
  for_each_seed(ctx, [&](std::uint64_t seed) {
    Stopwatch sw;
    Model m = build_run_model(ctx.cfg, d, seed);
    const auto outcome = pretrain(ctx.cfg, m, d, split, seed, ctx.log);
    const fs::path dir = open_stage(ctx.seed_dir(seed), "pretrain", ctx.opt.overwrite);
    model_to_container(m).save(dir / "model.bin");
    for (const auto& [f, snap] : outcome.snapshots)
      if (f < 1.0) model_to_container(snap).save(dir / ("snapshot_" + pct_tag(f) + ".bin"));
    write_csv(dir / "metrics.csv", [&](std::ostream& os) { outcome.series.write_csv(os); });
    Manifest{"pretrain", ctx.config_hash, seed, {{"parameters", std::to_string(m.parameter_count())}}}
        .write(dir, sw.seconds());
  });
}

inline void cmd_finetune(const RunContext& ctx) {
  const Dataset d = load_run_dataset(ctx);
  const Split split = make_split(d.size(), ctx.cfg.data_seed);
  for_each_seed(ctx, [&](std::uint64_t seed) {
    Stopwatch sw;
    const fs::path pre = require_stage(ctx.seed_dir(seed), "pretrain", "pretrain");
    std::vector<std::pair<std::string, fs::path>> sources{{"", pre / "model.bin"}};
    for (double f : ctx.cfg.pretrain_checkpoints)
      if (f < 1.0) sources.emplace_back(pct_tag(f), pre / ("snapshot_" + pct_tag(f) + ".bin"));
    MetricSeries series;
    std::vector<std::pair<std::string, std::string>> extra{{"pretrain_dir", pre.string()}};
    std::vector<std::pair<fs::path, Container>> outputs;
    for (const auto& [tag, file] : sources) {
      const Model base = load_model(ctx, d, seed, file);
      for (Variant v : ctx.cfg.variants) {
        auto out = finetune(ctx.cfg, base, d, split, v, seed, ctx.log);
        const std::string name = std::string(to_string(v));
        const std::string key = tag.empty() ? name : tag + "/" + name;
        if (!tag.empty()) {
          MetricSeries tagged;
          for (auto r : out.series.rows()) {
            r.phase += "_" + tag;
            tagged.add(r.phase, r.epoch, r.batch, r.split, r.metric, r.value, r.seed);
          }
          series.append(tagged);
        } else {
          series.append(out.series);
        }
        extra.emplace_back(key + ".frozen_sha256", out.frozen_hash_after);
        std::string trainable;
        for (const auto& n : out.partition.trainable) trainable += (trainable.empty() ? "" : ",") + n;
        extra.emplace_back(key + ".trainable", trainable.empty() ? "none" : trainable);
        outputs.emplace_back(fs::path(key + ".bin"), model_to_container(out.model));
      }
    }
    const fs::path dir = open_stage(ctx.seed_dir(seed), "finetune", ctx.opt.overwrite);
    for (const auto& [rel, c] : outputs) c.save(dir / rel);
    write_csv(dir / "metrics.csv", [&](std::ostream& os) { series.write_csv(os); });
    Manifest{"finetune", ctx.config_hash, seed, extra}.write(dir, sw.seconds());
  });
}

inline std::string summary_text(const RunContext& ctx, std::uint64_t seed, const Dataset& d,
                                const std::map<std::string, std::vector<RowOutcome>>& by_split,
                                const std::optional<GainInformativeness>& info,
                                const std::optional<DimensionalityReport>& dims) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "[run]\nconfig_sha256 = " << ctx.config_hash << "\nseed = " << seed << "\ndataset = " << to_string(d.kind)
     << "\nheadline = " << headline_name(d) << '\n';
  for (const auto& [split, rows] : by_split) {
    for (const auto& r : rows) {
      os << "\n[" << split << '.' << to_string(r.row) << "]\n"
         << "name = " << display_name(r.row) << '\n'
         << "accuracy = " << r.stats.accuracy << "\nprecision = " << r.stats.precision
         << "\nrecall = " << r.stats.recall << "\nf1 = " << r.stats.f1 << "\nece = " << r.reliability.ece
         << "\nloss = " << r.loss << '\n';
    }
  }
  if (info) {
    os << "\n[gain_informativeness]\nmeasure = " << info->measure << "\ntasks = " << info->tasks.size()
       << "\nspearman_rho = " << info->test.statistic << "\np_value = " << info->test.p_value
       << "\npermutations = " << ctx.cfg.permutations << '\n';
  }
  if (dims) {
    os << "\n[dimensionality]\npca_dims_attention = " << dims->pca_attention.dims_to_threshold
       << "\npca_dims_comodulation = " << dims->pca_comod.dims_to_threshold
       << "\nlda_dims_attention = " << dims->lda_attention.dims_to_threshold
       << "\nlda_dims_comodulation = " << dims->lda_comod.dims_to_threshold << '\n';
  }
  return os.str();
}

inline const RowOutcome* find_row(const std::vector<RowOutcome>& rows, EvalRow r) {
  for (const auto& o : rows)
    if (o.row == r) return &o;
  return nullptr;
}

inline void cmd_eval(const RunContext& ctx) {
  const Dataset d = load_run_dataset(ctx);
  const Split split = make_split(d.size(), ctx.cfg.data_seed);
  const auto rows = requested_rows(ctx, ctx.cfg.eval_rows);
  for_each_seed(ctx, [&](std::uint64_t seed) {
    Stopwatch sw;
    const VariantModels vm = load_variants(ctx, d, seed, rows);
    std::map<std::string, std::vector<RowOutcome>> by_split;
    for (const std::string name : {"validation", "test"}) {
      by_split[name] = evaluate(ctx.cfg, vm, d, split.get(name), rows, seed, nullptr, {true, true});
    }
    const auto& test = by_split.at("test");
    std::optional<GainInformativeness> info;
    std::optional<DimensionalityReport> dims;
    if (const auto* c = find_row(test, EvalRow::comodulation)) info = gain_informativeness(ctx.cfg, vm.at(Variant::comod), d, *c, seed);
    const auto* att = find_row(test, EvalRow::attention);
    const auto* com = find_row(test, EvalRow::comodulation);
    if (d.kind == DatasetKind::hierarchy && att && com) dims = dimensionality(d, *att, *com);

    const fs::path dir = open_stage(ctx.seed_dir(seed), "eval", ctx.opt.overwrite);
    write_csv(dir / "report.csv", [&](std::ostream& os) {
      bool header = true;
      for (const auto& [name, rs] : by_split) {
        write_report_csv(os, name, seed, rs, header);
        header = false;
      }
    });
    write_csv(dir / "reliability.csv", [&](std::ostream& os) {
      os << "split,mode,bin_low,bin_high,count,mean_conf,accuracy\n";
      for (const auto& [name, rs] : by_split)
        for (const auto& r : rs) {
          std::ostringstream body;
          write_reliability_csv(body, r.reliability);
          std::istringstream lines(body.str());
          std::string line;
          std::getline(lines, line);  // header
          while (std::getline(lines, line)) os << name << ',' << to_string(r.row) << ',' << line << '\n';
        }
    });
    write_csv(dir / "sparsity.csv", [&](std::ostream& os) {
      bool header = true;
      for (const auto& r : test) {
        if (r.gains.empty()) continue;
        write_sparsity_csv(os, std::string(to_string(r.row)), mean_gain_sparsity(r.gains), header);
        header = false;
      }
      if (header) os << "mode,threshold,mean_count\n";
    });
    for (const auto& [v, m] : vm) {
      if (v == Variant::readout) continue;
      const std::string name(to_string(v));
      write_csv(dir / ("contexts_" + name + ".csv"), [&](std::ostream& os) { write_context_csv(os, m.controller); });
      write_csv(dir / ("context_embedding_" + name + ".csv"),
                [&](std::ostream& os) { write_context_embedding_csv(os, m); });
      write_csv(dir / ("task_gains_" + name + ".csv"), [&](std::ostream& os) { write_task_gains_csv(os, m); });
    }
    write_csv(dir / "embedding.csv", [&](std::ostream& os) {
      bool header = true;
      for (const auto* r : {att, com}) {
        if (!r) continue;
        write_embedding_csv(os, d, *r, header);
        header = false;
      }
    });
    if (info) {
      write_csv(dir / "informativeness.csv", [&](std::ostream& os) { write_informativeness_csv(os, *info); });
      write_csv(dir / "info_bins.csv", [&](std::ostream& os) { write_info_bins_csv(os, *info); });
    }
    if (dims) write_csv(dir / "spectrum.csv", [&](std::ostream& os) { write_spectrum_csv(os, *dims); });
    write_text(dir / "summary.txt", summary_text(ctx, seed, d, by_split, info, dims));
    Manifest{"eval", ctx.config_hash, seed, {{"finetune_dir", require_stage(ctx.seed_dir(seed), "finetune", "finetune").string()}}}
        .write(dir, sw.seconds());
    ctx.log("eval seed " + std::to_string(seed) + " -> " + dir.string());
  });
}

inline void cmd_sweep(const RunContext& ctx) {
  const Dataset d = load_run_dataset(ctx);
  const Split split = make_split(d.size(), ctx.cfg.data_seed);
  RunConfig cfg = ctx.cfg;
  cfg.sweep_rows = requested_rows(ctx, cfg.sweep_rows);
  std::vector<std::size_t> samples = split.test;
  if (cfg.sweep_samples > 0 && cfg.sweep_samples < samples.size()) samples.resize(cfg.sweep_samples);
  for_each_seed(ctx, [&](std::uint64_t seed) {
    Stopwatch sw;
    const VariantModels vm = load_variants(ctx, d, seed, cfg.sweep_rows);
    const auto cells = robustness_sweep(cfg, vm, d, samples, seed, ctx.log);
    const fs::path dir = open_stage(ctx.seed_dir(seed), "sweep", ctx.opt.overwrite);
    write_csv(dir / "robustness.csv", [&](std::ostream& os) { write_robustness_csv(os, cells); });
    write_csv(dir / "robustness_diff.csv", [&](std::ostream& os) { write_robustness_diff_csv(os, cfg, cells); });
    Manifest{"sweep", ctx.config_hash, seed, {{"samples", std::to_string(samples.size())}}}.write(dir, sw.seconds());
  });
}

inline void cmd_export_activations(const RunContext& ctx) {
  const Dataset d = load_run_dataset(ctx);
  const Split split = make_split(d.size(), ctx.cfg.data_seed);
  const auto rows = requested_rows(ctx, ctx.cfg.eval_rows);
  std::vector<std::size_t> samples = split.test;
  if (samples.size() > ctx.opt.samples) samples.resize(ctx.opt.samples);
  for_each_seed(ctx, [&](std::uint64_t seed) {
    Stopwatch sw;
    const VariantModels vm = load_variants(ctx, d, seed, rows);
    Container c;
    std::ostringstream index;
    index << "mode,sample,task_id,prefix\n";
    for (EvalRow row : rows) {
      const Model& m = vm.at(row_variant(row));
      const auto pairs = make_pairs(d, samples);
      for (const auto& p : pairs) {
        Rng rng = make_rng(seed, {stream::modulator, purpose::eval, p.sample, p.task});
        ForwardOptions fo;
        fo.modulator = &ctx.cfg.modulator;
        fo.rng = &rng;
        fo.record = true;
        const auto r = model_forward(m, d.images[p.sample], TaskId::make(p.task, m.tasks()), row_mode(row), fo);
        const std::string prefix = std::string(to_string(row)) + "/sample" + std::to_string(p.sample) + "/task" +
                                   std::to_string(p.task) + "/";
        if (r.record) r.record->export_to(c, prefix);
        index << to_string(row) << ',' << p.sample << ',' << p.task << ',' << prefix << '\n';
      }
    }
    const fs::path dir = open_stage(ctx.seed_dir(seed), "activations", ctx.opt.overwrite);
    c.save(dir / "activations.bin");
    write_text(dir / "index.csv", index.str());
    Manifest{"export-activations", ctx.config_hash, seed, {{"arrays", std::to_string(c.size())}}}
        .write(dir, sw.seconds());
  });
}

// ---------------------------------------------------------------------------
// analyze

/// Splits one CSV line, honouring double-quoted fields.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name, const fs::path& origin) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(origin.string() + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }

  static CsvTable load(const fs::path& p) {
    std::istringstream in(read_text(p));
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw DataError(p.string() + ": empty CSV");
    t.header = split_csv_line(line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto r = split_csv_line(line);
      if (r.size() != t.header.size()) throw DataError(p.string() + ": ragged row '" + line + "'");
      t.rows.push_back(std::move(r));
    }
    return t;
  }
};

inline double to_number(const std::string& s) {
  if (s == "nan") return std::nan("");
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw DataError("non-numeric CSV value '" + s + "'");
  }
}

struct MeanStd {
  double mean = 0.0, sd = 0.0;
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  r.n = v.size();
  if (v.empty()) return {std::nan(""), std::nan(""), 0};
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  for (double x : v) r.sd += (x - r.mean) * (x - r.mean);
  r.sd = v.size() > 1 ? std::sqrt(r.sd / static_cast<double>(v.size() - 1)) : 0.0;
  return r;
}

/// Aggregates finished runs into the evaluation-mode table: one row per
/// (architecture, mode) over the chosen split, plus per-seed tables.
inline void cmd_analyze(const Options& o, const Logger& log) {
  if (o.runs.empty()) throw ConfigError("analyze needs at least one run directory");
  if (o.out.empty()) throw ConfigError("--out is required for 'analyze'");
  Stopwatch sw;
  struct Key {
    std::string arch, mode, name;
  };
  std::vector<Key> order;
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::vector<double>>> values;
  std::ostringstream per_seed, dims;
  per_seed << std::setprecision(9) << "run,architecture,seed,split,mode,name,accuracy,precision,recall,f1,ece,loss,delta_p\n";
  dims << "run,architecture,seed,kind,attention_dims,comodulation_dims,ratio\n";
  std::vector<std::pair<std::string, std::string>> extra;
  const std::vector<std::string> metrics{"accuracy", "precision", "recall", "f1", "ece", "loss", "delta_p"};
  for (const auto& run : o.runs) {
    const fs::path root(run);
    const RunConfig cfg = RunConfig::load((root / "config.ini").string());
    const std::string arch(to_string(cfg.wiring));
    extra.emplace_back("run." + root.filename().string() + ".config_sha256", cfg.hash());
    std::size_t seeds_found = 0;
    std::vector<fs::path> seed_dirs;
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && e.path().filename().string().rfind("seed", 0) == 0) seed_dirs.push_back(e.path());
    std::sort(seed_dirs.begin(), seed_dirs.end());
    for (const auto& sd : seed_dirs) {
      const auto eval = latest_stage(sd, "eval");
      if (!eval) continue;
      ++seeds_found;
      const fs::path report = *eval / "report.csv";
      const CsvTable t = CsvTable::load(report);
      const std::size_t c_seed = t.column("seed", report), c_split = t.column("split", report),
                        c_mode = t.column("mode", report), c_name = t.column("name", report);
      for (const auto& r : t.rows) {
        per_seed << root.filename().string() << ',' << arch << ',' << r[c_seed] << ',' << r[c_split] << ','
                 << r[c_mode] << ",\"" << r[c_name] << '"';
        for (const auto& m : metrics) per_seed << ',' << r[t.column(m, report)];
        per_seed << '\n';
        if (r[c_split] != o.split) continue;
        const auto key = std::make_pair(arch, r[c_mode]);
        if (!values.count(key)) order.push_back({arch, r[c_mode], r[c_name]});
        for (const auto& m : metrics) values[key][m].push_back(to_number(r[t.column(m, report)]));
      }
      if (fs::exists(*eval / "summary.txt")) {
        std::istringstream in(read_text(*eval / "summary.txt"));
        std::map<std::string, std::string> kv;
        std::string line;
        bool in_dims = false;
        while (std::getline(in, line)) {
          if (!line.empty() && line[0] == '[') in_dims = line == "[dimensionality]";
          const auto eq = line.find(" = ");
          if (in_dims && eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 3);
        }
        for (const std::string kind : {"pca", "lda"}) {
          const auto a = kv.find(kind + "_dims_attention"), c = kv.find(kind + "_dims_comodulation");
          if (a == kv.end() || c == kv.end()) continue;
          dims << root.filename().string() << ',' << arch << ',' << sd.filename().string().substr(4) << ',' << kind
               << ',' << a->second << ',' << c->second << ',' << to_number(c->second) / to_number(a->second)
               << '\n';
        }
      }
    }
    if (seeds_found == 0) throw DataError("no completed eval stage under " + root.string());
    log("analyze: " + root.string() + " (" + arch + ", " + std::to_string(seeds_found) + " seeds)");
  }
  const fs::path dir = open_stage(o.out, "analysis", o.overwrite);
  std::ostringstream table;
  table << std::setprecision(9) << "architecture,split,mode,name,seeds";
  for (const auto& m : metrics) table << ',' << m << "_mean," << m << "_sd";
  table << '\n';
  for (const auto& k : order) {
    const auto& v = values.at({k.arch, k.mode});
    table << k.arch << ',' << o.split << ',' << k.mode << ",\"" << k.name << "\"," << v.at("accuracy").size();
    for (const auto& m : metrics) {
      const auto s = mean_std(v.at(m));
      table << ',' << s.mean << ',' << s.sd;
    }
    table << '\n';
  }
  write_text(dir / "mode_table.csv", table.str());
  write_text(dir / "mode_table_seeds.csv", per_seed.str());
  write_text(dir / "dimensionality.csv", dims.str());
  Manifest{"analyze", "n/a", std::nullopt, extra}.write(dir, sw.seconds());
}

// ---------------------------------------------------------------------------
// Entry point

inline int report_error(const std::string& msg, ExitCode code) {
  std::cerr << "comodnet: error: " << msg << '\n';
  return static_cast<int>(code);
}

/// Parses argv, dispatches, and maps failures to exit codes:
/// 0 ok, 1 usage, 2 config, 3 data, 4 numerical.
inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Stochastic gain comodulation for multi-task fine-tuning", "comodnet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(tool_version));
  Options o;
  std::string out;
  auto common = [&](CLI::App* sc, bool needs_config) {
    auto* c = sc->add_option("--config", o.config_path, "run config (INI)");
    if (needs_config) c->required()->check(CLI::ExistingFile);
    sc->add_option("--out", out, "run directory")->required();
    sc->add_flag("--overwrite", o.overwrite, "replace existing stage output");
    sc->add_option("--jobs", o.jobs, "seeds processed in parallel")->check(CLI::PositiveNumber);
    sc->add_flag("--quiet", o.quiet, "suppress progress logging");
  };
  auto with_seed = [&](CLI::App* sc) {
    sc->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { o.seed = s; },
                                           "run only this seed");
  };
  auto with_modes = [&](CLI::App* sc) {
    sc->add_option("--modes", o.modes, "evaluation rows, comma separated")->delimiter(',');
  };
  auto* gen = app.add_subcommand("gen-data", "generate or ingest the dataset");
  common(gen, true);
  auto* pre = app.add_subcommand("pretrain", "pretrain the base network");
  common(pre, true);
  with_seed(pre);
  auto* fin = app.add_subcommand("finetune", "fine-tune every configured variant");
  common(fin, true);
  with_seed(fin);
  auto* ev = app.add_subcommand("eval", "evaluate the mode matrix and analyses");
  common(ev, true);
  with_seed(ev);
  with_modes(ev);
  auto* sw = app.add_subcommand("sweep", "corruption robustness sweep");
  common(sw, true);
  with_seed(sw);
  with_modes(sw);
  auto* an = app.add_subcommand("analyze", "aggregate finished runs into the mode table");
  common(an, false);
  an->add_option("runs", o.runs, "run directories")->required()->check(CLI::ExistingDirectory);
  an->add_option("--split", o.split, "split summarised in mode_table.csv")
      ->check(CLI::IsMember({"validation", "test"}));
  auto* ex = app.add_subcommand("export-activations", "dump per-layer activations");
  common(ex, true);
  with_seed(ex);
  with_modes(ex);
  ex->add_option("--samples", o.samples, "test samples to export")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::usage);
  }
  o.out = out;
  o.command = app.get_subcommands().front()->get_name();
  try {
    if (o.command == "analyze") {
      cmd_analyze(o, Logger{o.quiet});
      return 0;
    }
    const RunContext ctx = open_run(o);
    if (o.command == "gen-data") cmd_gen_data(ctx);
    else if (o.command == "pretrain") cmd_pretrain(ctx);
    else if (o.command == "finetune") cmd_finetune(ctx);
    else if (o.command == "eval") cmd_eval(ctx);
    else if (o.command == "sweep") cmd_sweep(ctx);
    else if (o.command == "export-activations") cmd_export_activations(ctx);
    return 0;
  } catch (const Error& e) {
    return report_error(e.what(), e.code());
  } catch (const fs::filesystem_error& e) {
    return report_error(e.what(), ExitCode::data);
  } catch (const std::exception& e) {
    return report_error(e.what(), ExitCode::usage);
  }
}

inline int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"comodnet"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace comodnet::cli
