#include <random>

#include <gtest/gtest.h>

#include "ciss/adc.hpp"
#include "ciss/data_synth.hpp"
#include "oracles.hpp"

using namespace ciss;

namespace {

struct Fixture {
  TaskSchedule sched = build_schedule(6, 2, 2);
  std::vector<StepSample> pool;
  SegModel model;
  PrototypeStore store;

  Fixture() {
    SceneConfig scene;
    pool = build_corpus(3, scene, sched, 6, 1).pools[1];
    model = SegModel(ModelConfig{}, 3, {1, 2});
    model.params().scorer_b[1] = 6.0;  // class 1 wins everywhere
    std::mt19937_64 rng(3);
    for (int c : {1, 2}) {
      PrototypeRecord r;
      r.class_id = c;
      const auto v = oracle::random_tensor(rng, 1, 1, model.feature_dim(), 0.1, 1.0);
      r.proto = normalized(v.data);
      r.mean = v.data;
      r.var.assign(v.data.size(), 0.1);
      r.eta = 500;
      r.last_step = 1;
      store.records.emplace(c, r);
    }
  }
};

}  // namespace

TEST(UnifiedMasks, AgreementOnly) {
  LabelMap a(1, 5), b(1, 5);
  a.data = {0, 1, 2, 2, 1};
  b.data = {0, 1, 1, 2, 0};
  EXPECT_EQ(unified_masks(a, b).data, (std::vector<int>{0, 1, 0, 2, 0}));
}

TEST(Subprototype, MatchesOracleAndIsUnit) {
  std::mt19937_64 rng(1);
  std::vector<Tensor3> f;
  std::vector<LabelMap> m;
  for (int i = 0; i < 4; ++i) {
    f.push_back(oracle::random_tensor(rng, 3, 3, 6));
    m.push_back(oracle::random_labels(rng, 3, 3, 3));
  }
  for (int c = 1; c <= 2; ++c) {
    const auto s = subprototype(f, m, c);
    const auto o = oracle::class_center(f, m, c);
    ASSERT_TRUE(s && o);
    EXPECT_LE(oracle::dist(*s, *o), 1e-12);
    EXPECT_NEAR(oracle::norm(*s), 1.0, 1e-12);
  }
  EXPECT_FALSE(subprototype(f, m, 7).has_value());
}

TEST(AdaptiveWeight, Laws) {
  EXPECT_DOUBLE_EQ(adaptive_weight(0, 10), 0.0);
  EXPECT_DOUBLE_EQ(adaptive_weight(10, 10), 0.5);
  double last = 0.0;
  for (std::int64_t n = 1; n < 1000; n *= 3) {
    const double r = adaptive_weight(n, 50);
    EXPECT_GT(r, last);
    EXPECT_LT(r, 1.0);
    last = r;
  }
  EXPECT_GT(adaptive_weight(10, 5), adaptive_weight(10, 50));
  EXPECT_THROW(adaptive_weight(3, 0), ContractError);
}

TEST(Compensate, ZeroWeightKeepsPrototypeExactly) {
  const std::vector<double> p{0.3, -0.4, 0.2}, d{1.0, 2.0, -3.0};
  EXPECT_EQ(compensate(p, d, 0.0), p);
}

TEST(Compensate, ShiftIsWeightedDeviation) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = oracle::random_tensor(rng, 1, 1, 8).data;
    const auto d = oracle::random_tensor(rng, 1, 1, 8).data;
    const double rho = (trial + 1) / 21.0;
    const auto out = compensate(p, d, rho);
    EXPECT_NEAR(oracle::dist(out, p), rho * oracle::norm(d), 1e-12);
  }
}

TEST(RunAdc, NoDriftIsIdentity) {
  Fixture fx;
  const auto hash = fx.model.param_hash();
  const auto report = run_adc(snapshot(fx.model), fx.model, fx.pool, fx.store, 0.0, true);
  EXPECT_EQ(fx.model.param_hash(), hash);
  const auto* r1 = report.find(1);
  ASSERT_NE(r1, nullptr);
  EXPECT_GT(r1->observed_pixels, 0);
  EXPECT_GT(r1->rho, 0.0);
  EXPECT_EQ(oracle::norm(r1->delta), 0.0);
  for (const auto& r : report.classes) EXPECT_LE(oracle::dist(r.direction, fx.store.records.at(r.class_id).proto), 1e-12);
}

TEST(RunAdc, DriftMatchesHandComputation) {
  Fixture fx;
  const auto prev = snapshot(fx.model);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& w : fx.model.params().conv3.weight) w += n(rng);
  const auto report = run_adc(prev, fx.model, fx.pool, fx.store, 0.0, false);

  std::vector<Tensor3> fp, fc;
  std::vector<LabelMap> masks;
  for (const auto& s : fx.pool) {
    const auto a = prev.model().forward(s.image), b = fx.model.forward(s.image);
    const auto gt = downsample_nearest(s.label, kModelStride);
    LabelMap m(gt.h, gt.w);
    for (int y = 0; y < gt.h; ++y)
      for (int x = 0; x < gt.w; ++x) {
        const int pa = oracle::argmax(a.logits, y, x), pb = oracle::argmax(b.logits, y, x);
        if (gt(y, x) == 0 && pa == pb && (pa == 1 || pa == 2)) m(y, x) = pa;
      }
    fp.push_back(a.features);
    fc.push_back(b.features);
    masks.push_back(m);
  }
  const auto* r = report.find(1);
  ASSERT_NE(r, nullptr);
  const auto sp = oracle::class_center(fp, masks, 1), sc = oracle::class_center(fc, masks, 1);
  ASSERT_TRUE(sp && sc);
  std::int64_t count = 0;
  for (const auto& m : masks) count += std::count(m.data.begin(), m.data.end(), 1);
  EXPECT_EQ(r->observed_pixels, count);
  EXPECT_DOUBLE_EQ(r->rho, static_cast<double>(count) / (500.0 + static_cast<double>(count)));
  std::vector<double> delta(sp->size());
  for (std::size_t k = 0; k < delta.size(); ++k) delta[k] = (*sc)[k] - (*sp)[k];
  EXPECT_LE(oracle::dist(r->delta, delta), 1e-12);
  EXPECT_GT(oracle::norm(delta), 0.0);
  EXPECT_NEAR(oracle::dist(r->compensated, fx.store.records.at(1).proto), r->rho * oracle::norm(delta), 1e-12);
  EXPECT_EQ(r->direction, r->compensated);
}

TEST(RunAdc, UnobservedClassKeepsStoredPrototype) {
  Fixture fx;
  const auto report = run_adc(snapshot(fx.model), fx.model, fx.pool, fx.store, 0.0, true);
  const auto* r2 = report.find(2);
  ASSERT_NE(r2, nullptr);
  EXPECT_EQ(r2->observed_pixels, 0);
  EXPECT_EQ(r2->rho, 0.0);
  EXPECT_EQ(r2->direction, fx.store.records.at(2).proto);
  EXPECT_EQ(report.compensated_entries().at(2).observed_pixels, 0);
}
