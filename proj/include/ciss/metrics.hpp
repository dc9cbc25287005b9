#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ciss/data_synth.hpp"
#include "ciss/error.hpp"
#include "ciss/segmodel.hpp"

namespace ciss {

/// Square confusion matrix, rows = ground truth, columns = prediction.
class ConfusionMatrix {
public:
  explicit ConfusionMatrix(int classes) : n_(classes), m_(static_cast<std::size_t>(classes) * classes, 0) {}

  void add(const LabelMap& gt, const LabelMap& pred) {
    CISS_REQUIRE(gt.h == pred.h && gt.w == pred.w, "prediction / ground truth size mismatch");
    for (int p = 0; p < gt.positions(); ++p) {
      const int g = gt[p], q = pred[p];
      CISS_REQUIRE(g >= 0 && g < n_ && q >= 0 && q < n_, "class id outside confusion matrix");
      ++m_[static_cast<std::size_t>(g) * n_ + q];
    }
  }

  std::int64_t at(int gt, int pred) const { return m_[static_cast<std::size_t>(gt) * n_ + pred]; }
  int size() const noexcept { return n_; }

  /// tp / (tp + fp + fn); nullopt when the class is absent from both.
  std::optional<double> iou(int c) const {
    std::int64_t tp = at(c, c), fp = 0, fn = 0;
    for (int k = 0; k < n_; ++k) {
      if (k == c) continue;
      fp += at(k, c);
      fn += at(c, k);
    }
    const std::int64_t denom = tp + fp + fn;
    if (denom == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(denom);
  }

private:
  int n_;
  std::vector<std::int64_t> m_;
};

struct StepMetrics {
  int step = 0;
  std::vector<int> classes;  // background + learned classes
  std::map<int, std::optional<double>> iou;
  std::optional<double> miou_old;  // background + initial-step classes
  std::optional<double> miou_new;  // classes added after the initial step
  std::optional<double> miou_all;

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [c, v] : iou) per_class[std::to_string(c)] = opt(v);
    return {{"step", step},
            {"classes", classes},
            {"per_class_iou", per_class},
            {"miou_old", opt(miou_old)},
            {"miou_new", opt(miou_new)},
            {"miou_all", opt(miou_all)}};
  }

  static StepMetrics from_json(const nlohmann::json& j) {
    auto opt = [](const nlohmann::json& v) { return v.is_null() ? std::optional<double>{} : std::optional<double>(v.get<double>()); };
    StepMetrics m;
    m.step = j.at("step");
    m.classes = j.at("classes").get<std::vector<int>>();
    for (const auto& [k, v] : j.at("per_class_iou").items()) m.iou[std::stoi(k)] = opt(v);
    m.miou_old = opt(j.at("miou_old"));
    m.miou_new = opt(j.at("miou_new"));
    m.miou_all = opt(j.at("miou_all"));
    return m;
  }
};

/// Builds step-t metrics from full-resolution predictions. Ground truth must
/// already have unlearned classes mapped to background.
inline StepMetrics metrics_from_predictions(const std::vector<LabelMap>& gts, const std::vector<LabelMap>& preds,
                                            const TaskSchedule& schedule, int t) {
  CISS_REQUIRE(gts.size() == preds.size(), "prediction / ground truth count mismatch");
  ConfusionMatrix cm(schedule.num_classes + 1);
  for (std::size_t i = 0; i < gts.size(); ++i) cm.add(gts[i], preds[i]);

  StepMetrics m;
  m.step = t;
  m.classes.push_back(0);
  for (int c : schedule.learned_through(t)) m.classes.push_back(c);
  for (int c : m.classes) m.iou[c] = cm.iou(c);

  auto mean_of = [&](auto&& keep) -> std::optional<double> {
    double s = 0.0;
    int n = 0;
    for (int c : m.classes)
      if (keep(c) && m.iou[c]) {
        s += *m.iou[c];
        ++n;
      }
    if (n == 0) return std::nullopt;
    return s / n;
  };
  m.miou_old = mean_of([&](int c) { return c == 0 || schedule.step_of(c) == 1; });
  m.miou_new = mean_of([&](int c) { return c != 0 && schedule.step_of(c) > 1; });
  m.miou_all = mean_of([](int) { return true; });
  return m;
}

/// Evaluates at full image resolution (predictions upsampled) on samples
/// carrying complete labels; classes after step t count as background.
inline StepMetrics evaluate(const SegModel& model, const std::vector<StepSample>& eval_set,
                            const TaskSchedule& schedule, int t) {
  std::vector<LabelMap> gts, preds;
  gts.reserve(eval_set.size());
  preds.reserve(eval_set.size());
  for (const auto& s : eval_set) {
    gts.push_back(mask_future_classes(s.full_label, schedule, t));
    preds.push_back(predict_full_res(model.forward(s.image).logits));
  }
  return metrics_from_predictions(gts, preds, schedule, t);
}

}  // namespace ciss
