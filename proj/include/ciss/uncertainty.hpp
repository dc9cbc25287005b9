#pragma once

// Certainty scores (gap between the two largest sigmoid scores), the
// confidence filter for old-class predictions, the uncertainty mask and
// previous-model pseudo-labelling.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ciss/error.hpp"
#include "ciss/segmodel.hpp"
#include "ciss/tensor.hpp"

namespace ciss {

inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Per-position certainty phi = sigmoid(top1) - sigmoid(top2) and u = 1 - phi.
/// `top1`/`top2` record the channels involved (top1 is the lowest channel
/// among ties) so the UAC gradient can be routed.
struct CertaintyMap {
  int h = 0;
  int w = 0;
  std::vector<double> phi;
  std::vector<double> u;
  std::vector<double> max_sigmoid;
  std::vector<int> top1;
  std::vector<int> top2;
};

inline CertaintyMap certainty_scores(const Tensor3& logits) {
  if (logits.c < 2) throw ContractError("certainty scores need K >= 2 channels");
  CertaintyMap m;
  m.h = logits.h;
  m.w = logits.w;
  const auto P = static_cast<std::size_t>(logits.positions());
  m.phi.resize(P);
  m.u.resize(P);
  m.max_sigmoid.resize(P);
  m.top1.resize(P);
  m.top2.resize(P);
  for (std::size_t p = 0; p < P; ++p) {
    const auto row = logits.at(static_cast<int>(p));
    int a = 0, b = 1;
    if (row[1] > row[0]) std::swap(a, b);
    for (int k = 2; k < logits.c; ++k) {
      const double v = row[static_cast<std::size_t>(k)];
      if (v > row[static_cast<std::size_t>(a)]) {
        b = a;
        a = k;
      } else if (v > row[static_cast<std::size_t>(b)]) {
        b = k;
      }
    }
    const double s1 = sigmoid(row[static_cast<std::size_t>(a)]);
    const double s2 = sigmoid(row[static_cast<std::size_t>(b)]);
    m.top1[p] = a;
    m.top2[p] = b;
    m.max_sigmoid[p] = s1;
    m.phi[p] = s1 - s2;
    m.u[p] = 1.0 - m.phi[p];
  }
  return m;
}

/// Keeps the predicted class where the ground truth is background, the
/// certainty reaches tau and the prediction is one of `allowed_classes`
/// (the old classes); 0 elsewhere. All inputs at feature resolution.
inline LabelMap filtered_prediction(const Tensor3& logits, const CertaintyMap& cert, const LabelMap& gt_label,
                                    double tau, const std::vector<int>& allowed_classes) {
  CISS_REQUIRE(gt_label.h == logits.h && gt_label.w == logits.w, "label / logits resolution mismatch");
  CISS_REQUIRE(cert.h == logits.h && cert.w == logits.w, "certainty / logits resolution mismatch");
  const LabelMap pred = predict(logits);
  LabelMap out(logits.h, logits.w);
  for (int p = 0; p < out.positions(); ++p) {
    const int c = pred[p];
    if (gt_label[p] == 0 && cert.phi[static_cast<std::size_t>(p)] >= tau &&
        std::find(allowed_classes.begin(), allowed_classes.end(), c) != allowed_classes.end())
      out[p] = c;
  }
  return out;
}

inline LabelMap filtered_prediction(const Tensor3& logits, const LabelMap& gt_label, double tau,
                                    const std::vector<int>& allowed_classes) {
  return filtered_prediction(logits, certainty_scores(logits), gt_label, tau, allowed_classes);
}

/// m = 0 where (gt == pred and gt is a current-step class) or the largest
/// sigmoid score is at least tau; m = 1 otherwise.
inline std::vector<double> uncertainty_mask(const LabelMap& gt_label, const LabelMap& pred,
                                            const std::vector<double>& sigmoid_max, double tau,
                                            const std::vector<int>& current_classes) {
  CISS_REQUIRE(gt_label.positions() == pred.positions() &&
                   static_cast<std::size_t>(gt_label.positions()) == sigmoid_max.size(),
               "uncertainty mask inputs disagree in size");
  std::vector<double> m(sigmoid_max.size(), 1.0);
  for (int p = 0; p < gt_label.positions(); ++p) {
    const int g = gt_label[p];
    const bool agree_new =
        g == pred[p] && std::find(current_classes.begin(), current_classes.end(), g) != current_classes.end();
    if (agree_new || sigmoid_max[static_cast<std::size_t>(p)] >= tau) m[static_cast<std::size_t>(p)] = 0.0;
  }
  return m;
}

/// Fills background positions of `step_label` with confident old-class
/// predictions of the previous model. Identity when `prev_logits` is null
/// (initial step).
inline LabelMap pseudo_label(const LabelMap& step_label, const Tensor3* prev_logits, double tau,
                             const std::vector<int>& old_classes) {
  if (prev_logits == nullptr) return step_label;
  const LabelMap filtered = filtered_prediction(*prev_logits, step_label, tau, old_classes);
  LabelMap out = step_label;
  for (int p = 0; p < out.positions(); ++p)
    if (out[p] == 0 && filtered[p] != 0) out[p] = filtered[p];
  return out;
}

}  // namespace ciss
