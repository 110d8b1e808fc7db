#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cola/optim.hpp"
#include "oracles.hpp"

using namespace cola;

TEST(AdamW, FirstStepMovesByLearningRate) {
  DenseMatrix p{{1.0}};
  const DenseMatrix g{{1.0}};
  AdamW opt;
  const std::vector<ParamSlot> slots{{&p, &g, "p"}};
  opt.step(slots, 0.1);
  EXPECT_NEAR(p(0, 0), 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(AdamW, MatchesScalarReferenceBitForBit) {
  AdamWHyper h;
  h.weight_decay = 0.01;
  AdamW opt(h);
  oracle::ScalarAdamW ref[2];
  for (auto& r : ref) r.wd = 0.01;
  DenseMatrix p{{0.3, -1.2}};
  DenseMatrix g(1, 2);
  double want[2] = {0.3, -1.2};
  for (int t = 0; t < 10; ++t) {
    g(0, 0) = std::sin(t + 1.0);
    g(0, 1) = 0.1 * t - 0.4;
    const std::vector<ParamSlot> slots{{&p, &g, "p"}};
    opt.step(slots, 0.05);
    for (int j = 0; j < 2; ++j) want[j] = ref[j].step(want[j], g(0, j), 0.05);
    EXPECT_EQ(p(0, 0), want[0]) << "step " << t;
    EXPECT_EQ(p(0, 1), want[1]) << "step " << t;
  }
}

TEST(AdamW, ResetClearsStateAndIsIdempotent) {
  DenseMatrix p{{1.0, 2.0}};
  const DenseMatrix g{{0.1, -0.2}};
  AdamW opt;
  const std::vector<ParamSlot> slots{{&p, &g, "p"}};
  opt.step(slots, 0.01);
  opt.reset();
  opt.reset();
  EXPECT_EQ(opt.step_count(), 0);
  for (const auto& m : opt.first_moments()) EXPECT_TRUE(m.is_zero());
  for (const auto& v : opt.second_moments()) EXPECT_TRUE(v.is_zero());
  // After a reset the next step behaves like the first.
  DenseMatrix fresh{{1.0, 2.0}};
  p = fresh;
  AdamW other;
  const std::vector<ParamSlot> other_slots{{&fresh, &g, "p"}};
  opt.step(slots, 0.01);
  other.step(other_slots, 0.01);
  EXPECT_EQ(p, fresh);
}

TEST(AdamW, ResetWithParamsRebindsToNewShapes) {
  DenseMatrix a(2, 4), b(3, 2);
  const DenseMatrix ga(2, 4, 1.0), gb(3, 2, 1.0);
  AdamW opt;
  opt.step(std::vector<ParamSlot>{{&a, &ga, "a"}, {&b, &gb, "b"}}, 0.01);

  DenseMatrix a2(1, 4), b2(3, 1);
  const DenseMatrix ga2(1, 4, 1.0), gb2(3, 1, 1.0);
  const std::vector<ParamSlot> smaller{{&a2, &ga2, "a"}, {&b2, &gb2, "b"}};
  EXPECT_THROW(opt.step(smaller, 0.01), ShapeError);
  const std::vector<DenseMatrix*> params{&a2, &b2};
  opt.reset(params);
  ASSERT_EQ(opt.first_moments().size(), 2u);
  EXPECT_EQ(opt.first_moments()[0].rows(), 1u);
  EXPECT_EQ(opt.second_moments()[1].cols(), 1u);
  EXPECT_NO_THROW(opt.step(smaller, 0.01));
}

TEST(AdamW, RejectsNonFiniteGradients) {
  DenseMatrix p{{1.0}};
  const DenseMatrix g{{NAN}};
  AdamW opt;
  EXPECT_THROW(opt.step(std::vector<ParamSlot>{{&p, &g, "p"}}, 0.1), NonFiniteGradient);
  EXPECT_EQ(p(0, 0), 1.0);
}

TEST(AdamW, DescendsOnOneDimensionalQuadratic) {
  DenseMatrix p{{5.0}};
  DenseMatrix g(1, 1);
  AdamW opt;
  for (int t = 0; t < 2000; ++t) {
    g(0, 0) = p(0, 0) - 2.0;
    opt.step(std::vector<ParamSlot>{{&p, &g, "p"}}, 0.05);
  }
  EXPECT_NEAR(p(0, 0), 2.0, 1e-2);
}

TEST(LrSchedule, LinearDecayToZero) {
  const LrSchedule s{1e-3, 100};
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(s, 50), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(s, 100), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 150), 0.0);
  EXPECT_DOUBLE_EQ(lr_at({1e-3, 0}, 0), 0.0);
}
