#include "prefopt/normstate.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

using namespace prefopt;

TEST(EmaNormState, FirstBatchInitializesToPopulationStats) {
  EmaNormState s;
  std::vector<double> batch{0.2, 0.4};
  s.update(batch);
  EXPECT_TRUE(s.initialized());
  EXPECT_NEAR(s.mean(), 0.3, 1e-15);
  EXPECT_NEAR(s.std(), 0.1, 1e-15);
  EXPECT_EQ(s.step(), 1u);
}

TEST(EmaNormState, BlendsWithDecay) {
  auto s = EmaNormState::restore(0.0, 1.0, 0.9, 1e-8, 4, true);
  std::vector<double> batch{0.0, 2.0};  // mu = 1, sigma = 1
  s.update(batch);
  EXPECT_NEAR(s.mean(), 0.1, 1e-15);
  EXPECT_NEAR(s.std(), 1.0, 1e-15);
  EXPECT_EQ(s.step(), 5u);
}

TEST(EmaNormState, ZeroVarianceFloorsToEpsilon) {
  EmaNormState s(0.9, 1e-8);
  std::vector<double> batch(7, 0.42);
  s.update(batch);
  EXPECT_EQ(s.std(), 1e-8);
  EXPECT_TRUE(std::isfinite(s.normalize(0.5)));
  s.update(batch);
  EXPECT_GE(s.std(), s.epsilon());
}

TEST(EmaNormState, SingleElementBatch) {
  EmaNormState s;
  std::vector<double> one{3.0};
  s.update(one);
  EXPECT_EQ(s.mean(), 3.0);
  EXPECT_EQ(s.std(), s.epsilon());
}

TEST(EmaNormState, StepCountsUpdates) {
  EmaNormState s;
  std::vector<double> b{1.0, 2.0, 4.0};
  for (std::size_t i = 1; i <= 25; ++i) {
    s.update(b);
    EXPECT_EQ(s.step(), i);
  }
}

TEST(EmaNormState, Errors) {
  EmaNormState s;
  EXPECT_THROW(s.normalize(1.0), StateError);
  std::vector<double> empty;
  EXPECT_THROW(s.update(empty), InputDomainError);
  EXPECT_THROW(EmaNormState(1.0), InputDomainError);
  EXPECT_THROW(EmaNormState(0.0), InputDomainError);
  EXPECT_THROW(EmaNormState(0.5, 0.0), InputDomainError);
}

TEST(Normalize, Examples) {
  auto s = EmaNormState::restore(0.3, 0.1, 0.9, 1e-8, 1, true);
  EXPECT_EQ(s.normalize(0.3), 0.0);
  EXPECT_NEAR(s.normalize(0.4), 1.0, 1e-12);
}

TEST(Normalize, TranslationInvariant) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-2.0, 2.0), us(0.05, 3.0);
  for (int i = 0; i < 1000; ++i) {
    double mean = u(rng), sd = us(rng), m = u(rng), c = u(rng);
    auto a = EmaNormState::restore(mean, sd, 0.9, 1e-8, 1, true);
    auto b = EmaNormState::restore(mean + c, sd, 0.9, 1e-8, 1, true);
    EXPECT_NEAR(a.normalize(m), b.normalize(m + c), 1e-12);
  }
}

TEST(Normalize, AffineWithSlopeOneOverStd) {
  auto s = EmaNormState::restore(0.25, 0.4, 0.9, 1e-8, 3, true);
  const double h = 1e-5;
  for (double m : {-1.0, 0.0, 0.3, 2.0}) {
    double num = (s.normalize(m + h) - s.normalize(m - h)) / (2 * h);
    EXPECT_NEAR(num, 1.0 / s.std(), 1e-9);
    EXPECT_LT(s.normalize(m), s.normalize(m + 0.01));
  }
}

TEST(EmaNormState, ConstantBatchFixedPoint) {
  std::vector<double> batch{0.1, 0.5, 0.6, 0.9};
  double mu = 0.525;
  // Start far from the batch statistics.
  auto s = EmaNormState::restore(5.0, 3.0, 0.9, 1e-8, 0, true);
  double prev_err = std::abs(s.mean() - mu);
  for (int i = 0; i < 200; ++i) {
    s.update(batch);
    double err = std::abs(s.mean() - mu);
    EXPECT_LE(err, prev_err + 1e-15);
    prev_err = err;
  }
  EXPECT_LT(std::abs(s.normalize(mu)), 1e-6);

  EmaNormState fresh;
  for (int i = 0; i < 200; ++i) fresh.update(batch);
  EXPECT_LT(std::abs(fresh.normalize(mu)), 1e-6);
}
