#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "ciss/losses.hpp"
#include "ciss/segmodel.hpp"
#include "oracles.hpp"

using namespace ciss;

namespace {

std::vector<Tensor3> random_logits(std::mt19937_64& rng, int n, int K, double lo = -3, double hi = 3) {
  std::vector<Tensor3> out;
  for (int i = 0; i < n; ++i) out.push_back(oracle::random_tensor(rng, 3, 3, K, lo, hi));
  return out;
}

std::vector<LabelMap> random_label_batch(std::mt19937_64& rng, int n, int K) {
  std::vector<LabelMap> out;
  for (int i = 0; i < n; ++i) out.push_back(oracle::random_labels(rng, 3, 3, K));
  return out;
}

/// Finite-difference check of d(loss)/d(logits) over every tensor in the batch.
template <class Loss>
void check_batch_grad(std::vector<Tensor3>& x, const std::vector<Tensor3>& analytic, Loss&& loss, double tol) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto numeric = oracle::numeric_grad(loss, x[i].data);
    EXPECT_LE(oracle::rel_error(analytic[i].data, numeric), tol) << "batch item " << i;
  }
}

oracle::ReplayRows as_rows(const ReplayBatch& r, int K) {
  oracle::ReplayRows o;
  for (int i = 0; i < r.rows; ++i) {
    o.logits.emplace_back(r.logits.begin() + i * K, r.logits.begin() + (i + 1) * K);
    o.source.push_back(r.row_class[static_cast<std::size_t>(i)]);
  }
  return o;
}

}  // namespace

TEST(Mbce, ZeroLogitsGiveLogTwo) {
  std::vector<Tensor3> l{Tensor3(3, 3, 4, 0.0)};
  std::vector<LabelMap> t{LabelMap(3, 3)};
  EXPECT_NEAR(mbce(l, t, nullptr, {}), std::log(2.0), 1e-15);
}

TEST(Mbce, MatchesOracleWithReplay) {
  std::mt19937_64 rng(1);
  for (bool positive_old : {false, true}) {
    const auto l = random_logits(rng, 3, 5);
    const auto t = random_label_batch(rng, 3, 5);
    ReplayBatch r;
    r.rows = 4;
    r.logits = oracle::random_tensor(rng, 1, 4, 5).data;
    r.row_class = {1, 2, 1, 2};
    const MbceOptions opt{{3, 4}, positive_old};
    const auto rows = as_rows(r, 5);
    EXPECT_NEAR(mbce(l, t, &r, opt), oracle::mbce(l, t, &rows, {3, 4}, positive_old), 1e-13);
    EXPECT_NEAR(mbce(l, t, nullptr, opt), oracle::mbce(l, t, nullptr, {3, 4}, positive_old), 1e-13);
  }
}

TEST(Mbce, ExtremeLogitsStayFinite) {
  std::vector<Tensor3> l{Tensor3(1, 1, 2, 0.0)};
  l[0].data = {-800.0, 800.0};
  std::vector<LabelMap> t{LabelMap(1, 1)};
  const double v = mbce(l, t, nullptr, {});
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 800.0, 1e-9);
}

TEST(Mbce, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(2);
  auto l = random_logits(rng, 2, 4);
  const auto t = random_label_batch(rng, 2, 4);
  ReplayBatch r;
  r.rows = 3;
  r.logits = oracle::random_tensor(rng, 1, 3, 4).data;
  r.row_class = {1, 1, 2};
  const MbceOptions opt{{3}, true};
  std::vector<Tensor3> dl;
  std::vector<double> dr;
  mbce(l, t, &r, opt, &dl, &dr);
  auto f = [&] { return mbce(l, t, &r, opt); };
  check_batch_grad(l, dl, f, 1e-6);
  EXPECT_LE(oracle::rel_error(dr, oracle::numeric_grad(f, r.logits)), 1e-6);
}

TEST(Kd, ClosedFormSingleChannel) {
  std::vector<Tensor3> prev{Tensor3(1, 1, 3, 0.0)}, cur{Tensor3(1, 1, 5, 0.0)};
  cur[0].data[1] = 40.0;  // sigmoid 1 vs 0.5
  cur[0].data[4] = 9.0;   // new channel, not distilled
  EXPECT_DOUBLE_EQ(kd(cur, prev), 0.25 / 2.0);
}

TEST(Kd, MatchesOracleAndGradient) {
  std::mt19937_64 rng(3);
  const auto prev = random_logits(rng, 3, 4);
  auto cur = random_logits(rng, 3, 6);
  EXPECT_NEAR(kd(cur, prev), oracle::kd(cur, prev), 1e-14);
  std::vector<Tensor3> d;
  kd(cur, prev, &d);
  for (const auto& t : d)
    for (int p = 0; p < t.positions(); ++p) {
      EXPECT_EQ(t.at(p)[0], 0.0);
      EXPECT_EQ(t.at(p)[4], 0.0);
    }
  check_batch_grad(cur, d, [&] { return kd(cur, prev); }, 1e-6);
  EXPECT_EQ(kd(prev, prev), 0.0);
}

TEST(Uac, MatchesOracle) {
  std::mt19937_64 rng(4);
  for (double tau : {0.5, 0.7, 0.95}) {
    const auto l = random_logits(rng, 3, 5);
    const auto g = random_label_batch(rng, 3, 5);
    EXPECT_NEAR(uac(l, g, tau, {3, 4}), oracle::uac(l, g, tau, {3, 4}), 1e-14);
  }
}

TEST(Uac, ConfidentEverywhereIsZero) {
  std::vector<Tensor3> l{Tensor3(2, 2, 3, -5.0)};
  for (int p = 0; p < 4; ++p) l[0].at(p)[1] = 6.0;
  std::vector<LabelMap> g{LabelMap(2, 2)};
  EXPECT_EQ(uac(l, g, 0.7, {2}), 0.0);
}

TEST(Uac, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto l = random_logits(rng, 2, 4, -1.5, 1.5);
  const auto g = random_label_batch(rng, 2, 4);
  std::vector<Tensor3> d;
  uac(l, g, 0.9, {2, 3}, &d);
  check_batch_grad(l, d, [&] { return uac(l, g, 0.9, {2, 3}); }, 1e-6);
}

TEST(Centers, MatchOracle) {
  std::mt19937_64 rng(6);
  const auto f = random_logits(rng, 3, 5);
  const auto lab = random_label_batch(rng, 3, 4);
  const auto pred = random_label_batch(rng, 3, 4);
  const auto centers = batch_centers(f, lab, {1, 2, 3});
  const auto mis = misclassified_centers(f, lab, pred, {1, 2, 3});
  for (int c = 1; c <= 3; ++c) {
    EXPECT_LE(oracle::dist(centers.at(c).unit, *oracle::class_center(f, lab, c)), 1e-12);
    EXPECT_LE(oracle::dist(mis.at(c).unit, *oracle::mis_center(f, lab, pred, c)), 1e-12);
  }
}

TEST(Cpd, MatchesOracle) {
  std::mt19937_64 rng(7);
  const auto f = random_logits(rng, 3, 5, -1, 3);
  const auto lab = random_label_batch(rng, 3, 5);
  const auto pred = random_label_batch(rng, 3, 5);
  std::map<int, std::vector<double>> protos;
  for (int c : {1, 2}) protos[c] = normalized(oracle::random_tensor(rng, 1, 1, 5).data);
  for (bool proto_term : {true, false}) {
    CpdOptions opt;
    opt.epsilon = 0.5;
    opt.prototype_term = proto_term;
    const auto r = cpd_with_feature_grad(f, lab, pred, {3, 4}, protos, opt, nullptr);
    EXPECT_NEAR(r.value, oracle::cpd(f, lab, pred, {3, 4}, protos, 0.5, proto_term), 1e-13);
    EXPECT_NEAR(r.value, r.new_vs_old + r.pos_vs_neg, 1e-15);
  }
}

TEST(Cpd, ZeroDistanceGivesInverseEpsilon) {
  Center z;
  z.sum = z.unit = {1.0, 0.0};
  z.norm = 1.0;
  z.count = 1;
  CpdOptions opt;
  opt.epsilon = 0.25;
  const auto r = cpd({{3, z}}, {}, {{1, {1.0, 0.0}}}, opt);
  EXPECT_DOUBLE_EQ(r.value, 4.0);
}

TEST(Cpd, DecreasesAsCentreMovesAway) {
  CpdOptions opt;
  opt.epsilon = 0.1;
  double last = std::numeric_limits<double>::infinity();
  for (double angle = 0.1; angle < 3.1; angle += 0.3) {
    Center z;
    z.unit = z.sum = {std::cos(angle), std::sin(angle)};
    z.norm = 1.0;
    z.count = 1;
    const double v = cpd({{3, z}}, {}, {{1, {1.0, 0.0}}}, opt).value;
    EXPECT_LT(v, last);
    last = v;
  }
}

TEST(Cpd, FeatureGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto f = random_logits(rng, 2, 4, 0.1, 2);
  const auto lab = random_label_batch(rng, 2, 4);
  const auto pred = random_label_batch(rng, 2, 4);
  std::map<int, std::vector<double>> protos{{1, normalized(oracle::random_tensor(rng, 1, 1, 4).data)}};
  CpdOptions opt;
  opt.epsilon = 0.3;
  std::vector<Tensor3> d;
  cpd_with_feature_grad(f, lab, pred, {2, 3}, protos, opt, &d);
  check_batch_grad(f, d, [&] { return cpd_with_feature_grad(f, lab, pred, {2, 3}, protos, opt, nullptr).value; }, 1e-5);
}

TEST(Cpd, AveragingOverAllClasses) {
  Center z;
  z.sum = z.unit = {1.0, 0.0};
  z.norm = 1.0;
  z.count = 1;
  CpdOptions opt;
  opt.epsilon = 1.0;
  const double present = cpd({{3, z}}, {}, {{1, {1.0, 0.0}}}, opt).value;
  opt.average_over_all_classes = true;
  opt.num_current_classes = 4;
  EXPECT_DOUBLE_EQ(cpd({{3, z}}, {}, {{1, {1.0, 0.0}}}, opt).value, present / 4.0);
}

TEST(Total, WeightedSum) {
  EXPECT_DOUBLE_EQ(total(1.0, 1.0, 1.0, 1.0).total, 6.15);
  EXPECT_DOUBLE_EQ(total(2.0, 0.0, 0.0, 0.0).total, 2.0);
  EXPECT_THROW(total(1, 1, 1, 1, LossWeights{-1.0, 0.1, 0.05}), ConfigError);
  EXPECT_THROW(total(1, 1, 1, 1, LossWeights{5.0, 0.1, std::nan("")}), ConfigError);
}
