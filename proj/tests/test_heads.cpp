#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "virda/heads.hpp"
#include "virda/objectives.hpp"

using namespace virda;
using virda::testing::numeric_gradient;
using virda::testing::random_matrix;
using virda::testing::relative_error;
using virda::testing::worst_param_error;

TEST(GradientReversal, ForwardIsIdentityBackwardIsNegatedScale) {
  GradientReversalGate grl{0.7};
  const RowMatrix<double> z = random_matrix(3, 4, 1);
  EXPECT_EQ(grl.forward(z), z);
  const RowMatrix<double> up = random_matrix(3, 4, 2);
  const RowMatrix<double> back = grl.backward(up);
  EXPECT_LT((back + 0.7 * up).norm(), 1e-15);
  grl.lambda = 0.0;
  EXPECT_EQ(grl.backward(up).norm(), 0.0);
}

TEST(GradientReversal, RampSchedule) {
  EXPECT_DOUBLE_EQ(grl_ramp(0.0), 0.0);
  EXPECT_NEAR(grl_ramp(1.0), 2.0 / (1.0 + std::exp(-10.0)) - 1.0, 1e-15);
  EXPECT_GT(grl_ramp(0.5), grl_ramp(0.25));
}

TEST(Classifier, ProbabilitiesAreRowStochastic) {
  Rng rng(1);
  Classifier<double> c(Domain::source, {6, 4, {8}, 0.3}, rng);
  Rng drop(2);
  const auto p = c.classify(random_matrix(5, 6, 3), true, &drop);
  for (Index i = 0; i < 5; ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
  EXPECT_GT(p.minCoeff(), 0.0);
}

TEST(Classifier, DeterministicPassIgnoresGenerator) {
  Rng rng(1);
  Classifier<double> c(Domain::target, {6, 4, {8}, 0.5}, rng);
  const RowMatrix<double> z = random_matrix(5, 6, 3);
  Rng a(1), b(2);
  EXPECT_EQ(c.classify(z, false, &a), c.classify(z, false, &b));
  EXPECT_NE(c.classify(z, true, &a), c.classify(z, true, &b));
}

TEST(Classifier, RejectsBadConfig) {
  Rng rng(1);
  EXPECT_THROW(Classifier<double>(Domain::source, {6, 1, {}, 0.3}, rng), ConfigError);
  EXPECT_THROW(Classifier<double>(Domain::source, {6, 3, {}, 1.0}, rng), ConfigError);
  Classifier<double> c(Domain::source, {6, 3, {}, 0.3}, rng);
  EXPECT_THROW(c.classify(random_matrix(2, 5, 1), false), ConfigError);
}

TEST(Classifier, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  Classifier<double> c(Domain::source, {6, 4, {8, 5}, 0.3}, rng);
  RowMatrix<double> z = random_matrix(5, 6, 5);
  const std::vector<int> y{0, 3, 1, 2, 3};
  auto loss = [&] {
    Rng drop(77);
    return loss_sup(c.classify(z, true, &drop), y);
  };
  Classifier<double>::Trace trace;
  Rng drop(77);
  const auto p = c.classify(z, true, &drop, &trace);
  RowMatrix<double> dp;
  loss_sup(p, y, &dp);
  zero_grads(c.parameters());
  const RowMatrix<double> dz = c.backward(trace, dp);
  EXPECT_LT(worst_param_error(c.parameters(), loss), 1e-4);
  EXPECT_LT(relative_error(dz, numeric_gradient(z, loss)), 1e-4);
}

TEST(Discriminator, OutputsProbabilities) {
  Rng rng(1);
  DomainDiscriminator<double> d(6, {16}, rng);
  const auto out = d.discriminate(random_matrix(9, 6, 2, -3, 3));
  EXPECT_EQ(out.size(), 9);
  EXPECT_GT(out.minCoeff(), 0.0);
  EXPECT_LT(out.maxCoeff(), 1.0);
}

TEST(Discriminator, AdversarialGradientMatchesFiniteDifferences) {
  Rng rng(6);
  DomainDiscriminator<double> d(6, {10}, rng);
  RowMatrix<double> zs = random_matrix(4, 6, 7);
  RowMatrix<double> zt = random_matrix(3, 6, 8);
  auto loss = [&] { return loss_adv(d.discriminate(zs), d.discriminate(zt)); };
  DomainDiscriminator<double>::Trace ts, tt;
  const auto ds = d.discriminate(zs, &ts);
  const auto dt = d.discriminate(zt, &tt);
  Vector<double> gs, gt;
  loss_adv(ds, dt, &gs, &gt);
  zero_grads(d.parameters());
  const RowMatrix<double> dzs = d.backward(ts, gs);
  const RowMatrix<double> dzt = d.backward(tt, gt);
  EXPECT_LT(worst_param_error(d.parameters(), loss), 1e-4);
  EXPECT_LT(relative_error(dzs, numeric_gradient(zs, loss)), 1e-4);
  EXPECT_LT(relative_error(dzt, numeric_gradient(zt, loss)), 1e-4);
}

TEST(Discriminator, ParameterCount) {
  Rng rng(1);
  DomainDiscriminator<float> d(768, {1024}, rng);
  EXPECT_EQ(count_scalars(std::as_const(d).parameters()), 768 * 1024 + 1024 + 1024 + 1);
}
