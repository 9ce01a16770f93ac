// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "comodnet/controller.hpp"
#include "oracles.hpp"

using namespace comodnet;

namespace {

Controller zero_controller(ControllerOutput out) {
  Rng rng = make_rng(1);
  Controller c = Controller::make({2, 3, 2, out, false}, rng);
  for (auto* l : {&c.hidden, &c.output}) {
    l->params().weights.fill(0.0f);
    l->params().biases.fill(0.0f);
  }
  return c;
}

}  // namespace

TEST(Controller, ZeroWeightsGiveZeroOrHalf) {
  const auto id = zero_controller(ControllerOutput::identity);
  const auto sg = zero_controller(ControllerOutput::sigmoid);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(controller_forward(id, TaskId::make(k, 2)).weights, (std::vector<float>{0, 0, 0}));
    EXPECT_EQ(controller_forward(sg, TaskId::make(k, 2)).weights,
              (std::vector<float>{0.5f, 0.5f, 0.5f}));
  }
}

// W1 routes task 0 to hidden unit 0 and task 1 to (-1, 2); the rectifier drops the -1.
TEST(Controller, HandSetTwoByTwo) {
  Rng rng = make_rng(2);
  Controller c = Controller::make({2, 2, 2, ControllerOutput::identity, false}, rng);
  c.hidden.params().weights = Tensor({2, 2}, {1, -1, 0, 2});
  c.hidden.params().biases = Tensor({2}, 0.0f);
  c.output.params().weights = Tensor({2, 2}, {3, 1, 0, 4});
  c.output.params().biases = Tensor::vec({0.5f, 0});
  EXPECT_EQ(controller_forward(c, TaskId::make(0, 2)).weights, (std::vector<float>{3.5f, 0}));
  EXPECT_EQ(controller_forward(c, TaskId::make(1, 2)).weights, (std::vector<float>{2.5f, 8}));
}

TEST(Controller, UnitStartGivesUnitContext) {
  Rng rng = make_rng(3);
  const Controller c = Controller::make({5, 7, 0, ControllerOutput::identity, true}, rng);
  EXPECT_EQ(c.spec.hidden_width(), 4u);
  for (std::size_t k = 0; k < 5; ++k)
    EXPECT_EQ(controller_forward(c, TaskId::make(k, 5)).weights, std::vector<float>(7, 1.0f));
}

TEST(Controller, RejectsBadTasks) {
  Rng rng = make_rng(4);
  const Controller c = Controller::make({3, 2}, rng);
  EXPECT_THROW(TaskId::make(3, 3), std::invalid_argument);
  EXPECT_THROW(c.forward(TaskId{0, 4}), std::invalid_argument);
  EXPECT_THROW(c.forward(TaskId{3, 3}), std::invalid_argument);
  EXPECT_THROW(Controller::make({0, 2}, rng), std::invalid_argument);
}

TEST(Onehot, Examples) {
  EXPECT_EQ(onehot(TaskId::make(0, 3)), Tensor::vec({1, 0, 0}));
  EXPECT_EQ(onehot(TaskId::make(2, 3)), Tensor::vec({0, 0, 1}));
  for (std::size_t k = 0; k < 9; ++k) {
    const auto v = onehot<double>(TaskId::make(k, 9));
    double s = 0.0;
    for (double x : v.data()) s += x;
    EXPECT_EQ(s, 1.0);
  }
}

TEST(Controller, SigmoidContextsStayInOpenInterval) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng = make_rng(seed, {0x51u});
    Controller c = Controller::make({4, 6, 3, ControllerOutput::sigmoid, false}, rng);
    std::uniform_real_distribution<float> u(-8.0f, 8.0f);
    for (auto* l : {&c.hidden, &c.output}) {
      for (auto& w : l->params().weights.data()) w = u(rng);
      for (auto& b : l->params().biases.data()) b = u(rng);
    }
    for (std::size_t k = 0; k < 4; ++k) {
      const auto ctx = c.forward(TaskId::make(k, 4));
      EXPECT_TRUE(ctx.bounded);
      for (float v : ctx.weights) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
      }
    }
  }
}

TEST(Controller, ForwardIsDeterministic) {
  Rng a = make_rng(5), b = make_rng(5);
  const Controller ca = Controller::make({3, 4, 0, ControllerOutput::identity, false}, a);
  const Controller cb = Controller::make({3, 4, 0, ControllerOutput::identity, false}, b);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(ca.forward(TaskId::make(k, 3)).weights, ca.forward(TaskId::make(k, 3)).weights);
    EXPECT_EQ(ca.forward(TaskId::make(k, 3)).weights, cb.forward(TaskId::make(k, 3)).weights);
  }
}

TEST(Controller, BackwardMatchesCentralDifferences) {
  for (auto out : {ControllerOutput::identity, ControllerOutput::sigmoid}) {
    for (std::uint64_t seed = 0; seed < oracle::fd_instances; ++seed) {
      Rng rng = make_rng(seed, {0x52u});
      auto c = BasicController<double>::make({3, 4, 5, out, false}, rng);
      const TaskId task = TaskId::make(seed % 3, 3);
      const TensorD w = oracle::random_tensor({4}, rng);
      typename BasicController<double>::Cache cache;
      c.forward(task, &cache);
      if (std::any_of(cache.pre_hidden.data().begin(), cache.pre_hidden.data().end(),
                      [](double v) { return std::abs(v) < 1e-2; }))
        continue;  // too close to the rectifier kink for a 1e-3 step
      auto gh = BasicParamGrads<double>::zeros_like(c.hidden.params());
      auto go = BasicParamGrads<double>::zeros_like(c.output.params());
      c.backward(cache, w.data(), gh, go);
      auto f = [&] {
        const auto ctx = c.forward(task);
        double s = 0.0;
        for (std::size_t i = 0; i < 4; ++i) s += w[i] * ctx.weights[i];
        return s;
      };
      std::vector<double> analytic, numeric;
      for (auto [layer, g] : {std::pair{&c.hidden, &gh}, std::pair{&c.output, &go}}) {
        for (auto [p, a] : {std::pair{&layer->params().weights, &g->weights},
                            std::pair{&layer->params().biases, &g->biases}}) {
          const auto n = oracle::central_difference(p->data(), f);
          analytic.insert(analytic.end(), a->data().begin(), a->data().end());
          numeric.insert(numeric.end(), n.begin(), n.end());
        }
      }
      EXPECT_LT(oracle::relative_error(analytic, numeric), oracle::fd_tolerance) << "seed " << seed;
    }
  }
}

// Once the final layer leaves unit start the context depends on every
// controller parameter, so a random initialization yields a nonzero gradient.
TEST(Controller, RandomInitHasNonzeroGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed, {0x53u});
    const Controller c = Controller::make({4, 6, 0, ControllerOutput::identity, false}, rng);
    Controller::Cache cache;
    const auto a = c.forward(TaskId::make(0, 4), &cache);
    const auto b = c.forward(TaskId::make(1, 4));
    auto gh = ParamGrads::zeros_like(c.hidden.params());
    auto go = ParamGrads::zeros_like(c.output.params());
    const std::vector<float> ones(6, 1.0f);
    c.backward(cache, ones, gh, go);
    double norm = 0.0;
    for (float v : go.weights.data()) norm += v * v;
    for (float v : go.biases.data()) norm += v * v;
    EXPECT_GT(norm, 0.0);
    EXPECT_NE(a.weights, b.weights);
  }
}

TEST(Controller, ContextCsvLayout) {
  const auto c = zero_controller(ControllerOutput::sigmoid);
  std::ostringstream os;
  write_context_csv(os, c);
  EXPECT_EQ(os.str(),
            "task_id,channel_index,context_weight\n0,0,0.5\n0,1,0.5\n0,2,0.5\n1,0,0.5\n1,1,0.5\n"
            "1,2,0.5\n");
}

// Full chain: task code -> context -> encoder gain -> decoder gains -> loss.
struct ChainParam {
  ForwardMode mode;
  Wiring wiring;
  ControllerOutput output;
};

void PrintTo(const ChainParam& p, std::ostream* os) {
  *os << to_string(p.mode) << '/' << to_string(p.wiring)
      << (p.output == ControllerOutput::sigmoid ? "/sigmoid" : "");
}

class ChainGradient : public ::testing::TestWithParam<ChainParam> {};

TEST_P(ChainGradient, MatchesCentralDifferences) {
  const auto p = GetParam();
  std::size_t rejected = 0;
  const auto results =
      oracle::chain_instances({p.mode, p.wiring, p.output}, oracle::fd_instances, 0, &rejected);
  ASSERT_EQ(results.size(), oracle::fd_instances) << rejected << " instances rejected near kinks";
  for (std::size_t i = 0; i < results.size(); ++i) {
    EXPECT_LT(results[i].error, oracle::fd_tolerance) << "instance " << i;
    EXPECT_GT(results[i].gradient_norm, 0.0) << "instance " << i;
  }
}

INSTANTIATE_TEST_SUITE_P(
    Modes, ChainGradient,
    ::testing::Values(ChainParam{ForwardMode::comod_train, Wiring::base, ControllerOutput::identity},
                      ChainParam{ForwardMode::comod_test, Wiring::base, ControllerOutput::identity},
                      ChainParam{ForwardMode::comod_train, Wiring::base, ControllerOutput::sigmoid},
                      ChainParam{ForwardMode::comod_train, Wiring::residual, ControllerOutput::identity},
                      ChainParam{ForwardMode::attention, Wiring::base, ControllerOutput::identity},
                      ChainParam{ForwardMode::attention, Wiring::residual, ControllerOutput::sigmoid},
                      ChainParam{ForwardMode::plain, Wiring::base, ControllerOutput::identity},
                      ChainParam{ForwardMode::plain, Wiring::residual, ControllerOutput::identity}),
    [](const auto& info) {
      return std::string(to_string(info.param.mode)) + "_" +
             std::string(to_string(info.param.wiring)) +
             (info.param.output == ControllerOutput::sigmoid ? "_sigmoid" : "");
    });
