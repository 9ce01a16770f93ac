// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "comodnet/config.hpp"

using namespace comodnet;

namespace {

std::string preset_path(const std::string& name) {
  return std::string(COMODNET_PRESET_DIR) + "/" + name + ".ini";
}

void expect_config_error(const std::string& text, const std::string& needle) {
  try {
    RunConfig::parse(text, "t.ini");
    ADD_FAILURE() << "accepted:\n" << text;
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughCanonicalText) {
  const RunConfig d;
  const RunConfig back = RunConfig::parse(d.serialize());
  EXPECT_EQ(back.serialize(), d.serialize());
  EXPECT_EQ(back.hash(), d.hash());
  EXPECT_EQ(d.hash().size(), 64u);
}

TEST(Config, PresetsRoundTrip) {
  for (const char* name : {"smoke", "attribute", "hierarchy"}) {
    const RunConfig c = RunConfig::load(preset_path(name));
    EXPECT_EQ(RunConfig::parse(c.serialize()).serialize(), c.serialize()) << name;
    EXPECT_EQ(c.name, name);
  }
  const RunConfig smoke = RunConfig::load(preset_path("smoke"));
  EXPECT_EQ(smoke.seeds, (std::vector<std::uint64_t>{7}));
  EXPECT_EQ(smoke.data_kind, DatasetKind::hierarchy);
  EXPECT_EQ(smoke.task_count(), 2u);
  ASSERT_EQ(smoke.backbone.size(), 2u);
  EXPECT_TRUE(smoke.backbone[1].pool);
  EXPECT_EQ(smoke.pretrain_checkpoints, (std::vector<double>{0.5, 1.0}));
}

TEST(Config, HashTracksContentNotLayout) {
  const RunConfig a = RunConfig::parse("[pretrain]\nepochs = 4\n[run]\nname = x\n");
  const RunConfig b = RunConfig::parse("; comment\n[run]\nname=x\n\n[pretrain]\nepochs=4\n");
  EXPECT_EQ(a.hash(), b.hash());
  const RunConfig c = RunConfig::parse("[run]\nname = x\n[pretrain]\nepochs = 5\n");
  EXPECT_NE(a.hash(), c.hash());
}

TEST(Config, BackboneKernelIndependentOfKeyOrder) {
  const RunConfig a = RunConfig::parse("[architecture]\nbackbone_kernel = 5\nbackbone = 4p,6\n");
  const RunConfig b = RunConfig::parse("[architecture]\nbackbone = 4p,6\nbackbone_kernel = 5\n");
  EXPECT_EQ(a.serialize(), b.serialize());
  for (const auto& blk : a.backbone) EXPECT_EQ(blk.kernel, 5u);
}

TEST(Config, FloatsSurviveExactly) {
  RunConfig c;
  c.pretrain_lr = 0.1 + 0.2;
  c.modulator.variance = 1.0 / 3.0;
  const RunConfig back = RunConfig::parse(c.serialize());
  EXPECT_EQ(back.pretrain_lr, c.pretrain_lr);
  EXPECT_EQ(back.modulator.variance, c.modulator.variance);
}

TEST(Config, RejectsUnknownNames) {
  expect_config_error("[pretrain]\nepoch = 3\n", "pretrain.epoch");
  expect_config_error("[pretrian]\nepochs = 3\n", "pretrian");
  expect_config_error("epochs = 3\n", "outside any section");
  expect_config_error("[run\nname = x\n", "t.ini");
}

TEST(Config, RejectsBadValues) {
  expect_config_error("[pretrain]\nepochs = -1\n", "pretrain.epochs");
  expect_config_error("[pretrain]\nepochs = 2.5\n", "pretrain.epochs");
  expect_config_error("[pretrain]\nlr = fast\n", "pretrain.lr");
  expect_config_error("[architecture]\nbiases = maybe\n", "architecture.biases");
  expect_config_error("[architecture]\nwiring = dense\n", "architecture.wiring");
  expect_config_error("[controller]\noutput = tanh\n", "controller.output");
  expect_config_error("[data]\nkind = imagenet\n", "imagenet");
  expect_config_error("[data]\nimage_shape = 3x8\n", "data.image_shape");
  expect_config_error("[finetune]\nvariants = readout,linear\n", "linear");
  expect_config_error("[eval]\nmodes = attention,oracle\n", "oracle");
  expect_config_error("[sweep]\ncorruptions = fog\n", "sweep.corruptions");
}

TEST(Config, ValidationFailuresAreConfigErrors) {
  expect_config_error("[pretrain]\nlr = 0\n", "learning rates");
  expect_config_error("[finetune]\nbatch = 0\n", "batch");
  expect_config_error("[modulator]\nvariance = 0\n", "modulator.variance");
  expect_config_error("[modulator]\ndraws = 1\n", "modulator.draws");
  expect_config_error("[finetune]\nvariants =\n", "variants");
  expect_config_error("[pretrain]\ncheckpoints = 0.5,1.5\n", "checkpoints");
  expect_config_error("[data]\nlabel_noise = 0.5\n", "label_noise");
  expect_config_error("[data]\nkind = hierarchy\nsuperclasses = 3\nfine_classes = 10\n", "multiple");
  expect_config_error("[run]\nseeds =\n", "seeds");
}

TEST(Config, LoadReportsMissingFile) {
  EXPECT_THROW(RunConfig::load("/nonexistent/run.ini"), ConfigError);
}

TEST(Config, EvalRowsMapToVariantAndMode) {
  using R = EvalRow;
  const std::vector<std::tuple<R, Variant, ForwardMode>> table{
      {R::output_weights_only, Variant::readout, ForwardMode::plain},
      {R::attention, Variant::attention, ForwardMode::attention},
      {R::comod_test_time_per_task, Variant::attention, ForwardMode::comod_test_fixed},
      {R::comod_test_time, Variant::attention, ForwardMode::comod_test},
      {R::comodulation_per_task, Variant::comod, ForwardMode::comod_test_fixed},
      {R::comodulation, Variant::comod, ForwardMode::comod_test},
  };
  ASSERT_EQ(table.size(), all_eval_rows.size());
  for (const auto& [row, variant, mode] : table) {
    EXPECT_EQ(row_variant(row), variant) << to_string(row);
    EXPECT_EQ(row_mode(row), mode) << to_string(row);
    EXPECT_EQ(parse_eval_row(to_string(row)), row);
    EXPECT_FALSE(display_name(row).empty());
  }
  EXPECT_THROW(parse_eval_row("plain"), ConfigError);
}
