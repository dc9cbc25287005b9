#pragma once

// Adaptive deviation compensation: estimate how far each old class has
// drifted between the previous and the live extractor, using confidently
// predicted old-class pixels of the current pool, and move the stored
// prototype along that drift in proportion to the new evidence.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ciss/data_synth.hpp"
#include "ciss/error.hpp"
#include "ciss/prototype_store.hpp"
#include "ciss/segmodel.hpp"
#include "ciss/tensor.hpp"
#include "ciss/uncertainty.hpp"

namespace ciss {

/// Agreement of the two filtered prediction maps: the class where both are
/// equal and nonzero, 0 elsewhere.
inline LabelMap unified_masks(const LabelMap& filtered_cur, const LabelMap& filtered_prev) {
  CISS_REQUIRE(filtered_cur.h == filtered_prev.h && filtered_cur.w == filtered_prev.w, "mask resolution mismatch");
  LabelMap out(filtered_cur.h, filtered_cur.w);
  for (int p = 0; p < out.positions(); ++p)
    if (filtered_cur[p] != 0 && filtered_cur[p] == filtered_prev[p]) out[p] = filtered_cur[p];
  return out;
}

/// Per-class sums of masked features and pixel counts across a pool. The
/// sub-prototype is the aggregate divided by its own L2 norm.
class MaskedFeatureSums {
public:
  MaskedFeatureSums(int dim, const std::vector<int>& classes) : dim_(dim) {
    for (int c : classes) {
      sums_[c].assign(static_cast<std::size_t>(dim), 0.0);
      counts_[c] = 0;
    }
  }

  void add(const Tensor3& features, const LabelMap& mask) {
    CISS_REQUIRE(features.h == mask.h && features.w == mask.w && features.c == dim_, "features / mask shape mismatch");
    for (int p = 0; p < mask.positions(); ++p) {
      auto it = sums_.find(mask[p]);
      if (it == sums_.end()) continue;
      const auto f = features.at(p);
      for (std::size_t k = 0; k < f.size(); ++k) it->second[k] += f[k];
      ++counts_[mask[p]];
    }
  }

  std::int64_t count(int c) const { return counts_.at(c); }

  /// Absent when no pixel matched or the aggregate has zero norm.
  std::optional<std::vector<double>> unit(int c) const {
    const auto& s = sums_.at(c);
    if (counts_.at(c) == 0 || l2_norm(s) == 0.0) return std::nullopt;
    return normalized(s);
  }

private:
  int dim_;
  std::map<int, std::vector<double>> sums_;
  std::map<int, std::int64_t> counts_;
};

inline std::optional<std::vector<double>> subprototype(const std::vector<Tensor3>& features,
                                                       const std::vector<LabelMap>& masks, int c) {
  CISS_REQUIRE(features.size() == masks.size(), "features / masks count mismatch");
  if (features.empty()) return std::nullopt;
  MaskedFeatureSums sums(features.front().c, {c});
  for (std::size_t i = 0; i < features.size(); ++i) sums.add(features[i], masks[i]);
  return sums.unit(c);
}

/// Displacement from the previous-model sub-prototype to the current one.
inline std::vector<double> deviation(std::span<const double> prev, std::span<const double> cur) {
  CISS_REQUIRE(prev.size() == cur.size(), "sub-prototype size mismatch");
  std::vector<double> d(cur.size());
  for (std::size_t k = 0; k < d.size(); ++k) d[k] = cur[k] - prev[k];
  return d;
}

/// rho = n / (eta + n).
inline double adaptive_weight(std::int64_t observed, std::int64_t eta) {
  CISS_REQUIRE(eta >= 1 && observed >= 0, "adaptive weight needs eta >= 1 and n >= 0");
  return static_cast<double>(observed) / (static_cast<double>(eta) + static_cast<double>(observed));
}

/// rho * (P + delta) + (1 - rho) * P.
inline std::vector<double> compensate(std::span<const double> stored, std::span<const double> delta, double rho) {
  CISS_REQUIRE(stored.size() == delta.size(), "prototype / deviation size mismatch");
  std::vector<double> out(stored.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = rho * (stored[k] + delta[k]) + (1.0 - rho) * stored[k];
  return out;
}

struct AdcClassReport {
  int class_id = 0;
  std::optional<std::vector<double>> subproto_prev;
  std::optional<std::vector<double>> subproto_cur;
  std::vector<double> delta;        // zero when a sub-prototype is absent
  double rho = 0.0;
  std::vector<double> compensated;  // raw P-bar
  std::vector<double> direction;    // P-bar used downstream (unit when renormalising)
  std::int64_t observed_pixels = 0;
  std::int64_t eta = 0;
};

struct AdcReport {
  int step = 0;
  int epoch = 0;
  std::vector<AdcClassReport> classes;

  const AdcClassReport* find(int c) const {
    for (const auto& r : classes)
      if (r.class_id == c) return &r;
    return nullptr;
  }

  /// Directions keyed by class, for replay and the prototype-distance loss.
  std::map<int, std::vector<double>> directions() const {
    std::map<int, std::vector<double>> out;
    for (const auto& r : classes) out.emplace(r.class_id, r.direction);
    return out;
  }

  /// Write-back entries for finalize_step.
  std::map<int, CompensatedEntry> compensated_entries() const {
    std::map<int, CompensatedEntry> out;
    for (const auto& r : classes)
      out.emplace(r.class_id, CompensatedEntry{normalized(r.compensated), r.rho > 0.0 ? r.observed_pixels : 0});
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json cls = nlohmann::json::array();
    for (const auto& r : classes)
      cls.push_back({{"class_id", r.class_id},
                     {"present", r.subproto_prev.has_value() && r.subproto_cur.has_value()},
                     {"delta_norm", l2_norm(r.delta)},
                     {"rho", r.rho},
                     {"observed_pixels", r.observed_pixels},
                     {"eta", r.eta}});
    return {{"step", step}, {"epoch", epoch}, {"classes", cls}};
  }
};

/// Previous-model outputs over a pool; computed once per step since the
/// previous model is frozen.
struct PoolOutputs {
  std::vector<Tensor3> features;
  std::vector<Tensor3> logits;
};

inline PoolOutputs pool_outputs(const SegModel& model, const std::vector<StepSample>& pool) {
  PoolOutputs out;
  out.features.reserve(pool.size());
  out.logits.reserve(pool.size());
  for (const auto& s : pool) {
    auto r = model.forward(s.image);
    out.features.push_back(std::move(r.features));
    out.logits.push_back(std::move(r.logits));
  }
  return out;
}

/// Training-free compensation pass over the step pool. `prev_outputs`, when
/// given, must be the snapshot's outputs over `pool`.
inline AdcReport run_adc(const ModelSnapshot& prev, const SegModel& live, const std::vector<StepSample>& pool,
                         const PrototypeStore& store, double tau, bool renormalize = true,
                         const PoolOutputs* prev_outputs = nullptr) {
  const auto old_classes = store.class_ids();
  const int d = live.feature_dim();
  MaskedFeatureSums prev_sums(d, old_classes), cur_sums(d, old_classes);

  PoolOutputs computed;
  if (!prev_outputs) {
    computed = pool_outputs(prev.model(), pool);
    prev_outputs = &computed;
  }
  CISS_REQUIRE(prev_outputs->features.size() == pool.size(), "previous outputs do not match the pool");

  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto cur = live.forward(pool[i].image);
    const LabelMap gt = downsample_nearest(pool[i].label, kModelStride);
    const LabelMap f_cur = filtered_prediction(cur.logits, gt, tau, old_classes);
    const LabelMap f_prev = filtered_prediction(prev_outputs->logits[i], gt, tau, old_classes);
    const LabelMap unified = unified_masks(f_cur, f_prev);
    prev_sums.add(prev_outputs->features[i], unified);
    cur_sums.add(cur.features, unified);
  }

  AdcReport report;
  for (int c : old_classes) {
    const auto& rec = store.records.at(c);
    AdcClassReport r;
    r.class_id = c;
    r.eta = rec.eta;
    r.observed_pixels = cur_sums.count(c);
    r.subproto_prev = prev_sums.unit(c);
    r.subproto_cur = cur_sums.unit(c);
    if (r.subproto_prev && r.subproto_cur) {
      r.delta = deviation(*r.subproto_prev, *r.subproto_cur);
      r.rho = adaptive_weight(r.observed_pixels, rec.eta);
    } else {
      r.delta.assign(static_cast<std::size_t>(d), 0.0);
      r.rho = 0.0;
    }
    r.compensated = compensate(rec.proto, r.delta, r.rho);
    r.direction = (renormalize && r.rho > 0.0) ? normalized(r.compensated) : r.compensated;
    report.classes.push_back(std::move(r));
  }
  return report;
}

}  // namespace ciss
