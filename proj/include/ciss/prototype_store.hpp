#pragma once

// Per-class prototypes and feature statistics kept across steps, plus the
// diagonal-Gaussian sampler that replays old-class features.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ciss/error.hpp"
#include "ciss/io.hpp"
#include "ciss/rng.hpp"
#include "ciss/tensor.hpp"

namespace ciss {

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// v / |v|; an all-zero vector stays zero.
inline std::vector<double> normalized(std::span<const double> v) {
  const double n = l2_norm(v);
  std::vector<double> out(v.begin(), v.end());
  if (n > 0.0)
    for (auto& x : out) x /= n;
  return out;
}

struct PrototypeRecord {
  int class_id = 0;
  std::vector<double> proto;  // unit vector, = mean / |mean| at write time
  std::vector<double> mean;
  std::vector<double> var;    // population variance per dimension
  double norm_mean = 0.0;     // over per-pixel feature L2 norms
  double norm_std = 0.0;
  std::int64_t eta = 0;       // accumulated pixel count
  int last_step = 0;

  bool operator==(const PrototypeRecord&) const = default;
};

/// Finished per-class moments from one pass over a step pool.
struct ClassStats {
  std::int64_t count = 0;
  std::vector<double> mean;
  std::vector<double> var;
  std::vector<double> proto;
  double norm_mean = 0.0;
  double norm_std = 0.0;
};

/// Streaming first/second moments (Welford, with Chan's merge).
class ClassAccumulator {
public:
  explicit ClassAccumulator(int dim = 0) : mean_(static_cast<std::size_t>(dim), 0.0), m2_(mean_.size(), 0.0) {}

  void add(std::span<const double> f) {
    CISS_REQUIRE(f.size() == mean_.size(), "feature dim mismatch in class statistics");
    ++n_;
    const double inv = 1.0 / static_cast<double>(n_);
    for (std::size_t k = 0; k < f.size(); ++k) {
      const double delta = f[k] - mean_[k];
      mean_[k] += delta * inv;
      m2_[k] += delta * (f[k] - mean_[k]);
    }
    const double nv = l2_norm(f);
    const double dn = nv - norm_mean_;
    norm_mean_ += dn * inv;
    norm_m2_ += dn * (nv - norm_mean_);
  }

  void merge(const ClassAccumulator& o) {
    if (o.n_ == 0) return;
    if (n_ == 0) {
      *this = o;
      return;
    }
    const double na = static_cast<double>(n_), nb = static_cast<double>(o.n_), n = na + nb;
    for (std::size_t k = 0; k < mean_.size(); ++k) {
      const double delta = o.mean_[k] - mean_[k];
      mean_[k] += delta * nb / n;
      m2_[k] += o.m2_[k] + delta * delta * na * nb / n;
    }
    const double dn = o.norm_mean_ - norm_mean_;
    norm_mean_ += dn * nb / n;
    norm_m2_ += o.norm_m2_ + dn * dn * na * nb / n;
    n_ += o.n_;
  }

  std::int64_t count() const noexcept { return n_; }

  ClassStats finish() const {
    ClassStats s;
    s.count = n_;
    s.mean = mean_;
    s.var.resize(mean_.size());
    for (std::size_t k = 0; k < mean_.size(); ++k) s.var[k] = n_ > 0 ? std::max(0.0, m2_[k] / static_cast<double>(n_)) : 0.0;
    s.proto = normalized(mean_);
    s.norm_mean = norm_mean_;
    s.norm_std = n_ > 0 ? std::sqrt(std::max(0.0, norm_m2_ / static_cast<double>(n_))) : 0.0;
    return s;
  }

private:
  std::int64_t n_ = 0;
  std::vector<double> mean_, m2_;
  double norm_mean_ = 0.0, norm_m2_ = 0.0;
};

/// Accumulates class statistics over feature maps and matching labels (at
/// feature resolution). Only classes in `class_ids` are tracked.
class ClassStatsBuilder {
public:
  ClassStatsBuilder(int dim, const std::vector<int>& class_ids) : dim_(dim) {
    for (int c : class_ids) acc_.emplace(c, ClassAccumulator(dim));
  }

  void add(const Tensor3& features, const LabelMap& labels) {
    CISS_REQUIRE(features.h == labels.h && features.w == labels.w, "features / labels resolution mismatch");
    CISS_REQUIRE(features.c == dim_, "feature dim mismatch");
    for (int p = 0; p < labels.positions(); ++p)
      if (auto it = acc_.find(labels[p]); it != acc_.end()) it->second.add(features.at(p));
  }

  void merge(const ClassStatsBuilder& o) {
    for (const auto& [c, a] : o.acc_) acc_.at(c).merge(a);
  }

  /// Classes with zero pixels are omitted; `missing` receives their ids.
  std::map<int, ClassStats> finish(std::vector<int>* missing = nullptr) const {
    std::map<int, ClassStats> out;
    for (const auto& [c, a] : acc_) {
      if (a.count() == 0) {
        if (missing) missing->push_back(c);
        continue;
      }
      out.emplace(c, a.finish());
    }
    return out;
  }

private:
  int dim_;
  std::map<int, ClassAccumulator> acc_;
};

inline std::map<int, ClassStats> compute_class_stats(const std::vector<Tensor3>& features,
                                                     const std::vector<LabelMap>& labels,
                                                     const std::vector<int>& class_ids,
                                                     std::vector<int>* missing = nullptr) {
  CISS_REQUIRE(features.size() == labels.size(), "features / labels count mismatch");
  if (features.empty()) {
    if (missing) *missing = class_ids;
    return {};
  }
  ClassStatsBuilder b(features.front().c, class_ids);
  for (std::size_t i = 0; i < features.size(); ++i) b.add(features[i], labels[i]);
  return b.finish(missing);
}

/// R draws from Normal(mean, diag(var)), returned row-major (R x d).
inline std::vector<double> sample_replay(std::span<const double> mean, std::span<const double> var, int count,
                                         Rng& rng) {
  CISS_REQUIRE(count >= 1, "replay count must be >= 1");
  CISS_REQUIRE(mean.size() == var.size(), "mean / variance size mismatch");
  for (double v : var)
    if (!(v >= 0.0)) throw ContractError("negative or NaN variance in replay sampler");
  std::normal_distribution<double> n(0.0, 1.0);
  const std::size_t d = mean.size();
  std::vector<double> out(static_cast<std::size_t>(count) * d);
  for (int r = 0; r < count; ++r)
    for (std::size_t k = 0; k < d; ++k) out[static_cast<std::size_t>(r) * d + k] = mean[k] + std::sqrt(var[k]) * n(rng);
  return out;
}

/// Replay mean for a (possibly compensated) unit direction: the stored
/// magnitude |mean| carried along the new direction.
inline std::vector<double> compensated_mean(const PrototypeRecord& rec, std::span<const double> direction) {
  const double mag = l2_norm(rec.mean);
  std::vector<double> out(direction.begin(), direction.end());
  for (auto& x : out) x *= mag;
  return out;
}

/// End-of-step compensation result for one old class.
struct CompensatedEntry {
  std::vector<double> direction;  // unit P-bar
  std::int64_t observed_pixels = 0;
};

struct PrototypeStore {
  std::map<int, PrototypeRecord> records;
  int replay_count = 32;

  bool contains(int c) const { return records.count(c) != 0; }
  std::vector<int> class_ids() const {
    std::vector<int> out;
    for (const auto& [c, r] : records) out.push_back(c);
    return out;
  }

  bool operator==(const PrototypeStore&) const = default;
};

/// Inserts this step's new classes and writes back the final compensated
/// prototypes of old classes (eta grows by the pixels observed this step).
/// Old classes without observations keep their record; only last_step moves.
inline void finalize_step(PrototypeStore& store, int step, const std::vector<int>& new_classes,
                          const std::map<int, ClassStats>& new_stats,
                          const std::map<int, CompensatedEntry>& compensated = {}) {
  for (auto& [c, rec] : store.records) {
    if (auto it = compensated.find(c); it != compensated.end() && it->second.observed_pixels > 0) {
      rec.proto = normalized(it->second.direction);
      rec.mean = compensated_mean(rec, rec.proto);
      rec.eta += it->second.observed_pixels;
    }
    rec.last_step = step;
  }
  for (int c : new_classes) {
    auto it = new_stats.find(c);
    if (it == new_stats.end()) throw ContractError("missing statistics for new class " + std::to_string(c));
    if (store.contains(c)) throw ContractError("class " + std::to_string(c) + " already stored");
    const ClassStats& s = it->second;
    CISS_REQUIRE(s.count >= 1, "new class statistics with zero pixels");
    store.records.emplace(c, PrototypeRecord{c, s.proto, s.mean, s.var, s.norm_mean, s.norm_std, s.count, step});
  }
}

// ---------------------------------------------------------------------------
// Store persistence: <dir>/store.json index plus class_<id>.bin per class.
//
// class_<id>.bin (little-endian): "CISSPRT1" | u32 d | f64[d] proto |
//   f64[d] mean | f64[d] var

inline constexpr int kStoreFormatVersion = 1;

inline void save_store(const std::filesystem::path& dir, const PrototypeStore& store) {
  std::filesystem::create_directories(dir);
  nlohmann::json index{{"format_version", kStoreFormatVersion},
                       {"replay_count", store.replay_count},
                       {"classes", nlohmann::json::array()}};
  for (const auto& [c, r] : store.records) {
    const std::string file = "class_" + std::to_string(c) + ".bin";
    io::Writer w;
    w.str("CISSPRT1");
    w.u32(static_cast<std::uint32_t>(r.proto.size()));
    w.f64s(r.proto);
    w.f64s(r.mean);
    w.f64s(r.var);
    w.save(dir / file);
    index["classes"].push_back({{"class_id", c},
                                {"file", file},
                                {"norm_mean", r.norm_mean},
                                {"norm_std", r.norm_std},
                                {"eta", r.eta},
                                {"last_step", r.last_step}});
  }
  io::write_text(dir / "store.json", index.dump(2));
}

inline PrototypeStore load_store(const std::filesystem::path& dir) {
  const auto index_path = dir / "store.json";
  PrototypeStore store;
  try {
    const auto index = nlohmann::json::parse(io::read_text(index_path));
    if (index.at("format_version").get<int>() != kStoreFormatVersion)
      throw LoadError(index_path.string(), "unsupported store version");
    store.replay_count = index.at("replay_count");
    for (const auto& e : index.at("classes")) {
      PrototypeRecord r;
      r.class_id = e.at("class_id");
      r.norm_mean = e.at("norm_mean");
      r.norm_std = e.at("norm_std");
      r.eta = e.at("eta");
      r.last_step = e.at("last_step");
      auto rd = io::Reader::open(dir / e.at("file").get<std::string>());
      rd.expect_magic("CISSPRT1");
      const std::size_t d = rd.u32();
      r.proto = rd.f64s(d);
      r.mean = rd.f64s(d);
      r.var = rd.f64s(d);
      if (rd.remaining() != 0) rd.fail("trailing bytes");
      store.records.emplace(r.class_id, std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(index_path.string(), e.what());
  }
  return store;
}

}  // namespace ciss
