#pragma once

// The four training objectives and their weighted combination:
//
//   total = mbce + alpha * kd + beta * uac + gamma * cpd
//
// Every loss is batch-level and returns its value together with the
// gradient with respect to its differentiable inputs (logits, replayed
// logits or feature maps), so the training loop can backpropagate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ciss/error.hpp"
#include "ciss/prototype_store.hpp"
#include "ciss/segmodel.hpp"
#include "ciss/tensor.hpp"
#include "ciss/uncertainty.hpp"

namespace ciss {

namespace detail {

/// Numerically stable binary cross-entropy on a logit.
inline double bce_with_logit(double x, double y) noexcept {
  return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
}

inline bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

inline std::vector<Tensor3> zeros_like(const std::vector<Tensor3>& xs) {
  std::vector<Tensor3> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.emplace_back(x.h, x.w, x.c);
  return out;
}

}  // namespace detail

/// Feature rows replayed from stored statistics, all of one batch.
struct ReplayBatch {
  std::vector<double> logits;  // rows x K
  std::vector<int> row_class;  // source class of each row
  int rows = 0;
};

struct MbceOptions {
  std::vector<int> new_classes;      // current-step classes: replay negatives
  bool replay_positive_old = false;  // also train the source class scorer with target 1
};

/// Multi-label binary cross-entropy. Every (position, channel) pair is one
/// term: channel k has target 1 where the label equals k, else 0 (label 0
/// is a positive for the background scorer). Each replayed row adds a
/// target-1 term on the background scorer and target-0 terms on every
/// current-step scorer. Mean over all terms.
inline double mbce(const std::vector<Tensor3>& logits, const std::vector<LabelMap>& targets, const ReplayBatch* replay,
                   const MbceOptions& opt, std::vector<Tensor3>* dlogits = nullptr,
                   std::vector<double>* dreplay = nullptr) {
  CISS_REQUIRE(logits.size() == targets.size(), "logits / targets batch mismatch");
  double sum = 0.0;
  double terms = 0.0;
  if (dlogits) *dlogits = detail::zeros_like(logits);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& L = logits[i];
    const auto& Y = targets[i];
    CISS_REQUIRE(Y.h == L.h && Y.w == L.w, "target resolution mismatch");
    for (int p = 0; p < L.positions(); ++p) {
      const int y = Y[p];
      if (y < 0 || y >= L.c) throw ContractError("label " + std::to_string(y) + " has no scorer");
      const auto row = L.at(p);
      for (int k = 0; k < L.c; ++k) {
        const double t = (k == y) ? 1.0 : 0.0;
        sum += detail::bce_with_logit(row[static_cast<std::size_t>(k)], t);
        if (dlogits) (*dlogits)[i].at(p)[static_cast<std::size_t>(k)] = sigmoid(row[static_cast<std::size_t>(k)]) - t;
      }
    }
    terms += static_cast<double>(L.positions()) * L.c;
  }

  const int K = logits.empty() ? 0 : logits.front().c;
  if (replay && replay->rows > 0) {
    CISS_REQUIRE(K > 0, "replay without a batch");
    if (dreplay) dreplay->assign(static_cast<std::size_t>(replay->rows * K), 0.0);
    for (int r = 0; r < replay->rows; ++r) {
      auto term = [&](int k, double t) {
        const double x = replay->logits[static_cast<std::size_t>(r * K + k)];
        sum += detail::bce_with_logit(x, t);
        terms += 1.0;
        if (dreplay) (*dreplay)[static_cast<std::size_t>(r * K + k)] = sigmoid(x) - t;
      };
      term(0, 1.0);
      for (int c : opt.new_classes) {
        CISS_REQUIRE(c > 0 && c < K, "replay target class without scorer");
        term(c, 0.0);
      }
      if (opt.replay_positive_old) term(replay->row_class[static_cast<std::size_t>(r)], 1.0);
    }
  }
  if (terms == 0.0) return 0.0;
  const double inv = 1.0 / terms;
  if (dlogits)
    for (auto& t : *dlogits)
      for (auto& v : t.data) v *= inv;
  if (dreplay)
    for (auto& v : *dreplay) v *= inv;
  return sum * inv;
}

/// Mean squared difference of sigmoid scores on the previous model's
/// old-class channels (1 .. K_prev-1; background excluded), over all positions.
inline double kd(const std::vector<Tensor3>& cur_logits, const std::vector<Tensor3>& prev_logits,
                 std::vector<Tensor3>* dlogits = nullptr) {
  CISS_REQUIRE(cur_logits.size() == prev_logits.size(), "kd batch mismatch");
  if (dlogits) *dlogits = detail::zeros_like(cur_logits);
  double sum = 0.0, n = 0.0;
  for (std::size_t i = 0; i < cur_logits.size(); ++i) {
    const auto& C = cur_logits[i];
    const auto& P = prev_logits[i];
    if (P.c > C.c || P.h != C.h || P.w != C.w) throw ContractError("kd channel/shape mismatch");
    n += static_cast<double>(P.positions()) * (P.c - 1);
  }
  if (n == 0.0) return 0.0;
  for (std::size_t i = 0; i < cur_logits.size(); ++i) {
    const auto& C = cur_logits[i];
    const auto& P = prev_logits[i];
    for (int p = 0; p < P.positions(); ++p)
      for (int k = 1; k < P.c; ++k) {
        const double sc = sigmoid(C.at(p)[static_cast<std::size_t>(k)]);
        const double diff = sc - sigmoid(P.at(p)[static_cast<std::size_t>(k)]);
        sum += diff * diff;
        if (dlogits) (*dlogits)[i].at(p)[static_cast<std::size_t>(k)] = 2.0 * diff * sc * (1.0 - sc) / n;
      }
  }
  return sum / n;
}

/// Mean over positions of (u * m)^2 where u = 1 - phi and m is the
/// uncertainty mask; i.e. squared error against an all-zero target.
/// The mask is treated as a constant.
inline double uac(const std::vector<Tensor3>& logits, const std::vector<LabelMap>& labels, double tau,
                  const std::vector<int>& current_classes, std::vector<Tensor3>* dlogits = nullptr) {
  CISS_REQUIRE(logits.size() == labels.size(), "uac batch mismatch");
  if (dlogits) *dlogits = detail::zeros_like(logits);
  double n = 0.0;
  for (const auto& L : logits) n += L.positions();
  if (n == 0.0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& L = logits[i];
    const auto cert = certainty_scores(L);
    const auto m = uncertainty_mask(labels[i], predict(L), cert.max_sigmoid, tau, current_classes);
    for (int p = 0; p < L.positions(); ++p) {
      const auto ps = static_cast<std::size_t>(p);
      const double um = cert.u[ps] * m[ps];
      sum += um * um;
      if (dlogits && m[ps] != 0.0) {
        const double s1 = sigmoid(L.at(p)[static_cast<std::size_t>(cert.top1[ps])]);
        const double s2 = sigmoid(L.at(p)[static_cast<std::size_t>(cert.top2[ps])]);
        const double g = 2.0 * um * m[ps] / n;  // d/du
        auto d = (*dlogits)[i].at(p);
        d[static_cast<std::size_t>(cert.top1[ps])] += -g * s1 * (1.0 - s1);
        d[static_cast<std::size_t>(cert.top2[ps])] += g * s2 * (1.0 - s2);
      }
    }
  }
  return sum / n;
}

/// Aggregate of masked features over a batch, normalised by its own norm.
struct Center {
  std::vector<double> sum;
  double norm = 0.0;
  std::vector<double> unit;
  std::int64_t count = 0;
};

namespace detail {

template <class Pred>
std::map<int, Center> masked_centers(const std::vector<Tensor3>& features, const std::vector<int>& classes, Pred&& take) {
  std::map<int, Center> out;
  if (features.empty()) return out;
  const auto d = static_cast<std::size_t>(features.front().c);
  for (int c : classes) {
    Center ctr;
    ctr.sum.assign(d, 0.0);
    for (std::size_t i = 0; i < features.size(); ++i)
      for (int p = 0; p < features[i].positions(); ++p)
        if (take(i, p, c)) {
          const auto f = features[i].at(p);
          for (std::size_t k = 0; k < d; ++k) ctr.sum[k] += f[k];
          ++ctr.count;
        }
    ctr.norm = l2_norm(ctr.sum);
    if (ctr.count == 0 || ctr.norm == 0.0) continue;
    ctr.unit = ctr.sum;
    for (auto& v : ctr.unit) v /= ctr.norm;
    out.emplace(c, std::move(ctr));
  }
  return out;
}

}  // namespace detail

/// Per-class batch centres of the labelled pixels of `classes`.
inline std::map<int, Center> batch_centers(const std::vector<Tensor3>& features, const std::vector<LabelMap>& labels,
                                           const std::vector<int>& classes) {
  CISS_REQUIRE(features.size() == labels.size(), "features / labels batch mismatch");
  return detail::masked_centers(features, classes,
                                [&](std::size_t i, int p, int c) { return labels[i][p] == c; });
}

/// Centres of pixels predicted as class c whose label is not c.
inline std::map<int, Center> misclassified_centers(const std::vector<Tensor3>& features,
                                                   const std::vector<LabelMap>& labels,
                                                   const std::vector<LabelMap>& preds, const std::vector<int>& classes) {
  CISS_REQUIRE(features.size() == labels.size() && labels.size() == preds.size(), "batch size mismatch");
  return detail::masked_centers(
      features, classes, [&](std::size_t i, int p, int c) { return labels[i][p] != c && preds[i][p] == c; });
}

struct CpdOptions {
  double epsilon = 1e-2;
  /// Divide by |C^t| instead of the number of classes present in the batch.
  bool average_over_all_classes = false;
  int num_current_classes = 0;  // |C^t|, used when average_over_all_classes
  bool prototype_term = true;   // off at the initial step
};

struct CpdResult {
  double value = 0.0;
  double new_vs_old = 0.0;
  double pos_vs_neg = 0.0;
  std::map<int, std::vector<double>> d_center;  // dL / d(unit centre)
  std::map<int, std::vector<double>> d_mis_center;
};

/// Inverse-distance separation of new-class centres from (a) the nearest
/// compensated old prototype and (b) the centre of pixels wrongly predicted
/// as that class. Prototypes are constants.
inline CpdResult cpd(const std::map<int, Center>& centers, const std::map<int, Center>& mis_centers,
                     const std::map<int, std::vector<double>>& prototypes, const CpdOptions& opt) {
  CISS_REQUIRE(opt.epsilon > 0.0, "cpd epsilon must be positive");
  CpdResult res;
  const double denom = opt.average_over_all_classes ? static_cast<double>(opt.num_current_classes)
                                                    : static_cast<double>(centers.size());
  if (centers.empty() || denom <= 0.0) return res;

  auto dist_and_dir = [](const std::vector<double>& a, const std::vector<double>& b, std::vector<double>& dir) {
    dir.resize(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) dir[k] = a[k] - b[k];
    const double n = l2_norm(dir);
    for (auto& v : dir) v = n > 0.0 ? v / n : 0.0;
    return n;
  };

  std::vector<double> dir;
  for (const auto& [c, ctr] : centers) {
    auto& dc = res.d_center[c];
    dc.assign(ctr.unit.size(), 0.0);

    if (opt.prototype_term && !prototypes.empty()) {
      double best = std::numeric_limits<double>::infinity();
      std::vector<double> best_dir;
      for (const auto& [o, proto] : prototypes) {
        const double dd = dist_and_dir(ctr.unit, proto, dir);
        if (dd < best) {
          best = dd;
          best_dir = dir;
        }
      }
      const double inv = 1.0 / (best + opt.epsilon);
      res.new_vs_old += inv / denom;
      const double g = -inv * inv / denom;
      for (std::size_t k = 0; k < dc.size(); ++k) dc[k] += g * best_dir[k];
    }

    if (auto it = mis_centers.find(c); it != mis_centers.end()) {
      const double dd = dist_and_dir(ctr.unit, it->second.unit, dir);
      const double inv = 1.0 / (dd + opt.epsilon);
      res.pos_vs_neg += inv / denom;
      const double g = -inv * inv / denom;
      auto& dm = res.d_mis_center[c];
      dm.assign(dir.size(), 0.0);
      for (std::size_t k = 0; k < dc.size(); ++k) {
        dc[k] += g * dir[k];
        dm[k] -= g * dir[k];
      }
    }
  }
  res.value = res.new_vs_old + res.pos_vs_neg;
  return res;
}

/// Chains dL/d(unit centre) back to the contributing feature positions:
/// d unit / d sum = (I - u u^T) / |sum|, and d sum / d f = I on the mask.
template <class Pred>
void backprop_centers(const std::map<int, Center>& centers, const std::map<int, std::vector<double>>& d_unit,
                      std::vector<Tensor3>& dfeatures, Pred&& take) {
  for (const auto& [c, g] : d_unit) {
    const auto& ctr = centers.at(c);
    double ug = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) ug += ctr.unit[k] * g[k];
    std::vector<double> dsum(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) dsum[k] = (g[k] - ctr.unit[k] * ug) / ctr.norm;
    for (std::size_t i = 0; i < dfeatures.size(); ++i)
      for (int p = 0; p < dfeatures[i].positions(); ++p)
        if (take(i, p, c)) {
          auto df = dfeatures[i].at(p);
          for (std::size_t k = 0; k < dsum.size(); ++k) df[k] += dsum[k];
        }
  }
}

/// cpd value plus its gradient w.r.t. every feature map in the batch.
inline CpdResult cpd_with_feature_grad(const std::vector<Tensor3>& features, const std::vector<LabelMap>& labels,
                                       const std::vector<LabelMap>& preds, const std::vector<int>& classes,
                                       const std::map<int, std::vector<double>>& prototypes, const CpdOptions& opt,
                                       std::vector<Tensor3>* dfeatures) {
  const auto centers = batch_centers(features, labels, classes);
  const auto mis = misclassified_centers(features, labels, preds, classes);
  auto res = cpd(centers, mis, prototypes, opt);
  if (dfeatures) {
    *dfeatures = detail::zeros_like(features);
    backprop_centers(centers, res.d_center, *dfeatures, [&](std::size_t i, int p, int c) { return labels[i][p] == c; });
    backprop_centers(mis, res.d_mis_center, *dfeatures,
                     [&](std::size_t i, int p, int c) { return labels[i][p] != c && preds[i][p] == c; });
  }
  return res;
}

struct LossWeights {
  double alpha = 5.0;
  double beta = 0.1;
  double gamma = 0.05;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("alpha", "loss weight must be non-negative");
    if (!(beta >= 0.0)) throw ConfigError("beta", "loss weight must be non-negative");
    if (!(gamma >= 0.0)) throw ConfigError("gamma", "loss weight must be non-negative");
  }
};

struct LossBundle {
  double mbce = 0.0;
  double kd = 0.0;
  double uac = 0.0;
  double cpd = 0.0;
  LossWeights weights;
  double total = 0.0;

  nlohmann::json to_json() const {
    return {{"mbce", mbce}, {"kd", kd}, {"uac", uac}, {"cpd", cpd}, {"total", total}};
  }
};

inline LossBundle total(double mbce_v, double kd_v, double uac_v, double cpd_v, const LossWeights& w = {}) {
  w.validate();
  LossBundle b{mbce_v, kd_v, uac_v, cpd_v, w, 0.0};
  b.total = mbce_v + w.alpha * kd_v + w.beta * uac_v + w.gamma * cpd_v;
  return b;
}

}  // namespace ciss
