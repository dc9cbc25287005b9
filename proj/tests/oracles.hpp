#pragma once

// Independent reference implementations for the test suite: plain per-pixel
// loops written from the formulas, sharing no code with the library beyond
// its data types.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "ciss/tensor.hpp"

namespace oracle {

using ciss::LabelMap;
using ciss::Tensor3;

inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

inline bool in(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

// ---- random micro-instances ----------------------------------------------

inline Tensor3 random_tensor(std::mt19937_64& rng, int h, int w, int c, double lo = -3.0, double hi = 3.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor3 t(h, w, c);
  for (auto& v : t.data) v = u(rng);
  return t;
}

inline LabelMap random_labels(std::mt19937_64& rng, int h, int w, int num_labels) {
  std::uniform_int_distribution<int> u(0, num_labels - 1);
  LabelMap m(h, w);
  for (auto& v : m.data) v = u(rng);
  return m;
}

// ---- argmax / certainty --------------------------------------------------

inline int argmax(const Tensor3& L, int y, int x) {
  int best = 0;
  for (int k = 1; k < L.c; ++k)
    if (L(y, x, k) > L(y, x, best)) best = k;
  return best;
}

inline LabelMap predict(const Tensor3& L) {
  LabelMap m(L.h, L.w);
  for (int y = 0; y < L.h; ++y)
    for (int x = 0; x < L.w; ++x) m(y, x) = argmax(L, y, x);
  return m;
}

/// Sort all sigmoid scores descending and subtract the first two.
inline double phi(const Tensor3& L, int y, int x) {
  std::vector<double> s;
  for (int k = 0; k < L.c; ++k) s.push_back(sig(L(y, x, k)));
  std::sort(s.begin(), s.end(), std::greater<>());
  return s[0] - s[1];
}

inline double max_sigmoid(const Tensor3& L, int y, int x) {
  double m = 0.0;
  for (int k = 0; k < L.c; ++k) m = std::max(m, sig(L(y, x, k)));
  return m;
}

// ---- losses --------------------------------------------------------------

inline double bce(double x, double t) {
  const double p = sig(x);
  const double lp = std::log(std::max(p, 1e-300)), lq = std::log(std::max(1.0 - p, 1e-300));
  return -(t * lp + (1.0 - t) * lq);
}

struct ReplayRows {
  std::vector<std::vector<double>> logits;  // rows of K
  std::vector<int> source;
};

inline double mbce(const std::vector<Tensor3>& logits, const std::vector<LabelMap>& targets, const ReplayRows* replay,
                   const std::vector<int>& new_classes, bool positive_old) {
  double sum = 0.0, n = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    for (int y = 0; y < logits[i].h; ++y)
      for (int x = 0; x < logits[i].w; ++x)
        for (int k = 0; k < logits[i].c; ++k) {
          sum += bce(logits[i](y, x, k), targets[i](y, x) == k ? 1.0 : 0.0);
          n += 1.0;
        }
  if (replay)
    for (std::size_t r = 0; r < replay->logits.size(); ++r) {
      sum += bce(replay->logits[r][0], 1.0);
      n += 1.0;
      for (int c : new_classes) {
        sum += bce(replay->logits[r][static_cast<std::size_t>(c)], 0.0);
        n += 1.0;
      }
      if (positive_old) {
        sum += bce(replay->logits[r][static_cast<std::size_t>(replay->source[r])], 1.0);
        n += 1.0;
      }
    }
  return sum / n;
}

inline double kd(const std::vector<Tensor3>& cur, const std::vector<Tensor3>& prev) {
  double sum = 0.0, n = 0.0;
  for (std::size_t i = 0; i < cur.size(); ++i)
    for (int y = 0; y < prev[i].h; ++y)
      for (int x = 0; x < prev[i].w; ++x)
        for (int k = 1; k < prev[i].c; ++k) {
          const double d = sig(cur[i](y, x, k)) - sig(prev[i](y, x, k));
          sum += d * d;
          n += 1.0;
        }
  return n > 0 ? sum / n : 0.0;
}

inline double uac_mask(const Tensor3& L, const LabelMap& gt, int y, int x, double tau, const std::vector<int>& cur) {
  const int g = gt(y, x);
  if (g == argmax(L, y, x) && in(cur, g)) return 0.0;
  if (max_sigmoid(L, y, x) >= tau) return 0.0;
  return 1.0;
}

inline double uac(const std::vector<Tensor3>& logits, const std::vector<LabelMap>& gt, double tau,
                  const std::vector<int>& cur) {
  double sum = 0.0, n = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    for (int y = 0; y < logits[i].h; ++y)
      for (int x = 0; x < logits[i].w; ++x) {
        const double um = (1.0 - phi(logits[i], y, x)) * uac_mask(logits[i], gt[i], y, x, tau, cur);
        sum += um * um;
        n += 1.0;
      }
  return sum / n;
}

// ---- centres and prototype discrimination --------------------------------

/// Sum of features over positions accepted by `take`, divided by its norm.
inline std::optional<std::vector<double>> center(const std::vector<Tensor3>& f,
                                                 const std::function<bool(std::size_t, int, int)>& take) {
  const int d = f.front().c;
  std::vector<double> s(static_cast<std::size_t>(d), 0.0);
  int count = 0;
  for (std::size_t i = 0; i < f.size(); ++i)
    for (int y = 0; y < f[i].h; ++y)
      for (int x = 0; x < f[i].w; ++x)
        if (take(i, y, x)) {
          ++count;
          for (int k = 0; k < d; ++k) s[static_cast<std::size_t>(k)] += f[i](y, x, k);
        }
  const double n = norm(s);
  if (count == 0 || n == 0.0) return std::nullopt;
  for (auto& v : s) v /= n;
  return s;
}

inline std::optional<std::vector<double>> class_center(const std::vector<Tensor3>& f, const std::vector<LabelMap>& lab,
                                                       int c) {
  return center(f, [&](std::size_t i, int y, int x) { return lab[i](y, x) == c; });
}

inline std::optional<std::vector<double>> mis_center(const std::vector<Tensor3>& f, const std::vector<LabelMap>& lab,
                                                     const std::vector<LabelMap>& pred, int c) {
  return center(f, [&](std::size_t i, int y, int x) { return lab[i](y, x) != c && pred[i](y, x) == c; });
}

inline double cpd(const std::vector<Tensor3>& f, const std::vector<LabelMap>& lab, const std::vector<LabelMap>& pred,
                  const std::vector<int>& classes, const std::map<int, std::vector<double>>& protos, double eps,
                  bool proto_term) {
  std::vector<int> present;
  for (int c : classes)
    if (class_center(f, lab, c)) present.push_back(c);
  if (present.empty()) return 0.0;
  const double denom = static_cast<double>(present.size());
  double no = 0.0, pn = 0.0;
  for (int c : present) {
    const auto z = *class_center(f, lab, c);
    if (proto_term && !protos.empty()) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& [o, p] : protos) best = std::min(best, dist(z, p));
      no += 1.0 / (best + eps);
    }
    if (auto m = mis_center(f, lab, pred, c)) pn += 1.0 / (dist(z, *m) + eps);
  }
  return no / denom + pn / denom;
}

// ---- evaluation ----------------------------------------------------------

/// IoU of class c from raw pixel counts; nullopt if c never occurs.
inline std::optional<double> iou(const std::vector<LabelMap>& gt, const std::vector<LabelMap>& pred, int c) {
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < gt.size(); ++i)
    for (std::size_t p = 0; p < gt[i].data.size(); ++p) {
      const bool g = gt[i].data[p] == c, q = pred[i].data[p] == c;
      tp += g && q;
      fp += !g && q;
      fn += g && !q;
    }
  if (tp + fp + fn == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
}

// ---- finite differences --------------------------------------------------

/// Central-difference gradient of f at x (every coordinate).
inline std::vector<double> numeric_grad(const std::function<double()>& f, std::vector<double>& x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// |a - b| / max(|a|, |b|) in L2; 0 when both vanish.
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) num += (a[i] - b[i]) * (a[i] - b[i]);
  const double den = std::max(norm(a), norm(b));
  if (den == 0.0) return 0.0;
  return std::sqrt(num) / den;
}

}  // namespace oracle
