// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <set>

#include "comodnet/checkpoint.hpp"
#include "comodnet/data.hpp"

using namespace comodnet;

namespace {

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent; returns held-out accuracy.
double linear_probe(const Eigen::MatrixXd& x, const std::vector<std::size_t>& y, std::size_t classes,
                    std::size_t n_train, int iters = 300, double lr = 0.5) {
  const Eigen::Index n = x.rows(), d = x.cols(), tr = static_cast<Eigen::Index>(n_train);
  const Eigen::RowVectorXd mean = x.topRows(tr).colwise().mean();
  Eigen::RowVectorXd sd = ((x.topRows(tr).rowwise() - mean).array().square().colwise().mean()).sqrt();
  sd = sd.unaryExpr([](double v) { return v > 1e-9 ? v : 1.0; });
  Eigen::MatrixXd z(n, d + 1);
  z.leftCols(d) = (x.rowwise() - mean).array().rowwise() / sd.array();
  z.col(d).setOnes();
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(tr, static_cast<Eigen::Index>(classes));
  for (Eigen::Index i = 0; i < tr; ++i) onehot(i, static_cast<Eigen::Index>(y[i])) = 1.0;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(d + 1, static_cast<Eigen::Index>(classes));
  for (int it = 0; it < iters; ++it) {
    Eigen::MatrixXd s = z.topRows(tr) * w;
    s = (s.colwise() - s.rowwise().maxCoeff()).array().exp();
    s = s.array().colwise() / s.rowwise().sum().array();
    w -= lr * (z.topRows(tr).transpose() * (s - onehot)) / static_cast<double>(tr) + 1e-4 * w;
  }
  const Eigen::MatrixXd s = z.bottomRows(n - tr) * w;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    Eigen::Index arg;
    s.row(i).maxCoeff(&arg);
    correct += static_cast<std::size_t>(arg) == y[static_cast<std::size_t>(tr + i)];
  }
  return static_cast<double>(correct) / static_cast<double>(s.rows());
}

Eigen::MatrixXd pixels(const Dataset& d, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(d.size()), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) x(i, j) = d.images[i][idx[j]];
  return x;
}

std::vector<std::size_t> attribute_labels(const Dataset& d, std::size_t k) {
  std::vector<std::size_t> y;
  for (std::size_t i = 0; i < d.size(); ++i) y.push_back(d.attribute_row(i)[k] > 0.5f);
  return y;
}

double mse(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace

TEST(AttributeData, SameSeedIdenticalOtherSeedDiffers) {
  AttributeDatasetConfig cfg;
  cfg.samples = 200;
  cfg.seed = 3;
  const auto a = gen_attribute_dataset(cfg), b = gen_attribute_dataset(cfg);
  EXPECT_EQ(dataset_to_container(a).serialize(), dataset_to_container(b).serialize());
  cfg.seed = 4;
  EXPECT_NE(dataset_to_container(a).serialize(), dataset_to_container(gen_attribute_dataset(cfg)).serialize());
}

TEST(AttributeData, RejectsInfeasibleGeometry) {
  AttributeDatasetConfig cfg;
  cfg.tasks = 17;  // 16 disjoint 4x4 cells in 16x16
  EXPECT_THROW(gen_attribute_dataset(cfg), ConfigError);
  cfg.tasks = 2;
  cfg.patch = 20;
  EXPECT_THROW(gen_attribute_dataset(cfg), ConfigError);
  cfg.patch = 4;
  cfg.label_noise = 0.5;
  EXPECT_THROW(gen_attribute_dataset(cfg), ConfigError);
}

TEST(AttributeData, PlantedMapsAreDisjointSquares) {
  const auto d = gen_attribute_dataset({});
  std::set<std::size_t> seen;
  for (const auto& m : d.planted_map) {
    EXPECT_EQ(m.size(), 16u);
    for (auto p : m) EXPECT_TRUE(seen.insert(p).second);
  }
}

TEST(AttributeData, BalancedAttributes) {
  const auto d = gen_attribute_dataset({});
  ASSERT_EQ(d.size(), 3000u);
  for (std::size_t k = 0; k < d.tasks; ++k) {
    double pos = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) pos += d.attribute_row(i)[k];
    EXPECT_NEAR(pos / static_cast<double>(d.size()), 0.5, 0.05) << "task " << k;
  }
}

// With every noise source off, a planted square deviates from mid-grey by
// exactly the pattern amplitude iff its label is 1.
TEST(AttributeData, NoiseFreeLabelsMatchPlantedPattern) {
  AttributeDatasetConfig cfg;
  cfg.samples = 300;
  cfg.label_noise = 0.0;
  cfg.pixel_noise = 0.0;
  cfg.background = 0.0;
  const auto d = gen_attribute_dataset(cfg);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t k = 0; k < d.tasks; ++k) {
      double dev = 0.0;
      for (auto p : d.planted_map[k]) dev += std::abs(d.images[i][p] - 0.5);
      dev /= static_cast<double>(d.planted_map[k].size());
      const bool planted = std::abs(dev - cfg.amplitude) < 1e-6;
      EXPECT_TRUE(planted || dev < 1e-6);
      EXPECT_EQ(planted, d.attribute_row(i)[k] == 1.0f) << "sample " << i << " task " << k;
    }
  }
}

TEST(AttributeData, ProbeFindsPlantedPixelsOnly) {
  const auto d = gen_attribute_dataset({});
  for (std::size_t k = 0; k < d.tasks; ++k) {
    const auto y = attribute_labels(d, k);
    const double own = linear_probe(pixels(d, d.planted_map[k]), y, 2, 2000);
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < d.tasks; ++j)
      if (j != k) others.insert(others.end(), d.planted_map[j].begin(), d.planted_map[j].end());
    const double foreign = linear_probe(pixels(d, others), y, 2, 2000);
    EXPECT_GT(own, 0.90) << "task " << k;
    EXPECT_NEAR(foreign, 0.5, 0.06) << "task " << k;
  }
}

TEST(HierarchyData, MappingAndBalance) {
  HierarchyDatasetConfig cfg;
  cfg.samples = 1000;
  const auto d = gen_hierarchy_dataset(cfg);
  ASSERT_EQ(d.fine_to_coarse.size(), 20u);
  std::vector<std::size_t> per_super(4, 0), per_fine(20, 0);
  for (auto s : d.fine_to_coarse) ++per_super.at(s);
  for (auto c : per_super) EXPECT_EQ(c, 5u);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d.coarse_labels[i], d.fine_to_coarse[d.fine_labels[i]]);
    ++per_fine[d.fine_labels[i]];
  }
  for (auto c : per_fine) EXPECT_EQ(c, 50u);
  EXPECT_EQ(d.task_count(), 4u);
}

TEST(HierarchyData, RejectsIndivisibleClasses) {
  HierarchyDatasetConfig cfg;
  cfg.fine_classes = 21;
  EXPECT_THROW(gen_hierarchy_dataset(cfg), ConfigError);
  cfg.fine_classes = 20;
  cfg.superclasses = 0;
  EXPECT_THROW(gen_hierarchy_dataset(cfg), ConfigError);
}

TEST(HierarchyData, CoarseLabelsAreLinearlyDecodable) {
  const auto d = gen_hierarchy_dataset({});
  std::vector<std::size_t> all(shape_numel(d.image_shape));
  for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
  EXPECT_GT(linear_probe(pixels(d, all), d.coarse_labels, 4, 2800, 150), 0.90);
}

TEST(HierarchyData, SameSeedIdentical) {
  HierarchyDatasetConfig cfg;
  cfg.samples = 100;
  EXPECT_EQ(dataset_to_container(gen_hierarchy_dataset(cfg)).serialize(),
            dataset_to_container(gen_hierarchy_dataset(cfg)).serialize());
}

TEST(Cifar, ParsesRecords) {
  std::vector<unsigned char> bytes(2 * cifar_record_bytes, 0);
  ASSERT_EQ(bytes.size(), 6148u);
  bytes[0] = 3;
  bytes[1] = 17;
  bytes[cifar_record_bytes] = 5;
  bytes[cifar_record_bytes + 1] = 99;
  bytes[cifar_record_bytes + 2] = 255;
  const auto d = parse_cifar100_binary(bytes);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.images[0], Tensor({3, 32, 32}, 0.0f));
  EXPECT_EQ(d.images[1][0], 1.0f);
  EXPECT_EQ(d.coarse_labels, (std::vector<std::size_t>{3, 5}));
  EXPECT_EQ(d.fine_to_coarse[17], 3u);
  EXPECT_EQ(d.fine_to_coarse[99], 5u);
}

TEST(Cifar, RejectsBadInputWithRecordIndex) {
  std::vector<unsigned char> bytes(2 * cifar_record_bytes, 0);
  bytes[cifar_record_bytes + 1] = 255;
  try {
    parse_cifar100_binary(bytes);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("record 1"), std::string::npos);
  }
  bytes.pop_back();
  EXPECT_THROW(parse_cifar100_binary(bytes), DataError);
  EXPECT_THROW(load_cifar100_binary("/nonexistent/cifar.bin"), DataError);
}

TEST(Split, SeventyFifteenFifteen) {
  const auto s = make_split(1000, 9);
  EXPECT_EQ(s.train.size(), 700u);
  EXPECT_EQ(s.validation.size(), 150u);
  EXPECT_EQ(s.test.size(), 150u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.validation.begin(), s.validation.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 1000u);
  EXPECT_EQ(make_split(1000, 9).test, s.test);
  EXPECT_NE(make_split(1000, 10).test, s.test);
  EXPECT_THROW(s.get("holdout"), std::invalid_argument);
}

TEST(Corruption, SeverityZeroIsIdentity) {
  const auto d = gen_hierarchy_dataset({4, 20, 20, {3, 16, 16}});
  Rng rng = make_rng(1);
  for (auto k : all_corruptions)
    for (const auto& img : d.images) EXPECT_EQ(corrupt(img, CorruptionSpec::make(k, 0), rng), img);
  EXPECT_THROW(CorruptionSpec::make(CorruptionKind::blur, 6), std::invalid_argument);
  EXPECT_THROW(parse_corruption("fog"), std::invalid_argument);
  EXPECT_EQ(parse_corruption("pixel_dropout"), CorruptionKind::pixel_dropout);
}

TEST(Corruption, OutputStaysInUnitRange) {
  const auto d = gen_hierarchy_dataset({4, 20, 20, {3, 16, 16}});
  Rng rng = make_rng(2);
  for (auto k : all_corruptions)
    for (int s = 1; s <= max_severity; ++s) {
      const Tensor out = corrupt(d.images[0], CorruptionSpec::make(k, s), rng);
      for (float v : out.data()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
    }
}

// Noise on a mid-grey image is censored at +-0.5 by the clamp; the oracle is
// the variance of a normal variable censored at c.
TEST(Corruption, GaussianNoiseVarianceMatchesTable) {
  const Tensor grey({3, 64, 64}, 0.5f);
  Rng rng = make_rng(3);
  const double c = 0.5;
  for (int s = 1; s <= max_severity; ++s) {
    const double sigma = severity_table::noise_sigma[static_cast<std::size_t>(s)];
    const double k = c / sigma;
    const double phi = std::exp(-0.5 * k * k) / std::sqrt(2.0 * std::numbers::pi);
    const double tail = 0.5 * std::erfc(k / std::numbers::sqrt2);
    const double expected = sigma * sigma * (std::erf(k / std::numbers::sqrt2) - 2.0 * k * phi) +
                            2.0 * c * c * tail;
    double sum = 0.0, sq = 0.0, n = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
      const Tensor out = corrupt(grey, CorruptionSpec::make(CorruptionKind::gaussian_noise, s), rng);
      for (float v : out.data()) {
        sum += v - 0.5;
        sq += (v - 0.5) * (v - 0.5);
        n += 1.0;
      }
    }
    const double var = sq / n - (sum / n) * (sum / n);
    EXPECT_NEAR(var / expected, 1.0, 0.03) << "severity " << s;
  }
}

TEST(Corruption, ContrastKeepsConstantImagesConstant) {
  Rng rng = make_rng(4);
  for (float level : {0.0f, 0.3f, 0.77f, 1.0f}) {
    const Tensor flat({3, 8, 8}, level);
    for (int s = 1; s <= max_severity; ++s) {
      const Tensor out = corrupt(flat, CorruptionSpec::make(CorruptionKind::contrast, s), rng);
      for (float v : out.data()) EXPECT_NEAR(v, level, 1e-6);
    }
  }
}

TEST(Corruption, DistortionGrowsWithSeverity) {
  const auto d = gen_hierarchy_dataset({4, 20, 4, {3, 32, 32}});
  for (auto kind : {CorruptionKind::gaussian_noise, CorruptionKind::pixel_dropout}) {
    double prev = 0.0;
    for (int s = 0; s <= max_severity; ++s) {
      double total = 0.0;
      for (std::uint64_t rep = 0; rep < 100; ++rep) {
        Rng rng = make_rng(rep, {stream::corruption});
        for (const auto& img : d.images) total += mse(corrupt(img, CorruptionSpec::make(kind, s), rng), img);
      }
      EXPECT_GE(total, prev) << to_string(kind) << " severity " << s;
      prev = total;
    }
  }
}

TEST(DatasetContainer, RoundTrip) {
  AttributeDatasetConfig a;
  a.samples = 50;
  HierarchyDatasetConfig h;
  h.samples = 40;
  h.image_shape = {3, 8, 8};
  for (const auto& d : {gen_attribute_dataset(a), gen_hierarchy_dataset(h)}) {
    const auto bytes = dataset_to_container(d).serialize();
    const auto back = dataset_from_container(Container::deserialize(bytes));
    EXPECT_EQ(dataset_to_container(back).serialize(), bytes);
    EXPECT_EQ(back.kind, d.kind);
    EXPECT_EQ(back.planted_map, d.planted_map);
    EXPECT_EQ(back.fine_to_coarse, d.fine_to_coarse);
  }
  EXPECT_THROW(dataset_from_container(Container{}), DataError);
}
