#pragma once

#include <cstdint>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "ciss/data_synth.hpp"
#include "ciss/error.hpp"
#include "ciss/losses.hpp"
#include "ciss/segmodel.hpp"

namespace ciss {

enum class Method { finetune, fixed_replay, adapter };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::finetune: return "finetune";
    case Method::fixed_replay: return "fixed_replay";
    case Method::adapter: return "adapter";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "finetune") return Method::finetune;
  if (s == "fixed_replay") return Method::fixed_replay;
  if (s == "adapter") return Method::adapter;
  throw ConfigError("method", "expected finetune|fixed_replay|adapter, got \"" + s + "\"");
}

/// Every knob of an experiment. The JSON form is flat; absent keys keep the
/// defaults below and unknown keys are rejected.
///
/// Methods:
///   finetune      plain mBCE on the step labels
///   fixed_replay  + distillation, pseudo-labels and replay of stored statistics
///   adapter       fixed_replay + compensation / uncertainty / discrimination,
///                 each switchable (all off is exactly fixed_replay)
struct TrainConfig {
  // schedule
  int num_classes = 6;
  int init_count = 2;
  int inc_count = 2;
  Setting setting = Setting::overlapped;
  // data
  SceneConfig scene;
  int pool_size = 200;
  int eval_per_step = 50;
  // model
  ModelConfig model;
  bool freeze_extractor = false;
  // objective
  LossWeights weights;
  double tau = 0.7;
  double epsilon = 1.0;
  bool cpd_average_all_classes = false;
  // optimisation
  int epochs = 20;
  double lr_initial = 0.3;
  double lr_incremental = 0.2;
  double momentum = 0.9;
  double grad_clip = 0.5;  // global gradient-norm bound, 0 = off
  int batch_size = 16;
  // replay / compensation
  int replay_count = 32;
  bool replay_positive_old = false;
  int warm_epochs = 2;
  bool renormalize_compensated = true;
  // method
  Method method = Method::adapter;
  bool use_adc = true;
  bool use_uac = true;
  bool use_cpd = true;
  std::uint64_t seed = 0;

  bool uses_old_knowledge() const noexcept { return method != Method::finetune; }
  bool adc_on() const noexcept { return method == Method::adapter && use_adc; }
  bool uac_on() const noexcept { return method == Method::adapter && use_uac; }
  bool cpd_on() const noexcept { return method == Method::adapter && use_cpd; }

  TaskSchedule schedule() const { return build_schedule(num_classes, init_count, inc_count, setting); }

  void validate() const {
    (void)schedule();
    scene.validate();
    model.validate();
    weights.validate();
    if (scene.num_classes != num_classes) throw ConfigError("num_classes", "scene and schedule disagree");
    if (scene.height != model.height || scene.width != model.width)
      throw ConfigError("height", "scene and model sizes disagree");
    if (pool_size < 1) throw ConfigError("pool_size", "must be >= 1");
    if (eval_per_step < 1) throw ConfigError("eval_per_step", "must be >= 1");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau", "must be in (0, 1]");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon", "must be > 0");
    if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
    if (!(lr_initial > 0.0)) throw ConfigError("lr_initial", "must be > 0");
    if (!(lr_incremental > 0.0)) throw ConfigError("lr_incremental", "must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum", "must be in [0, 1)");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip", "must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
    if (replay_count < 1) throw ConfigError("replay_count", "must be >= 1");
    if (warm_epochs < 1) throw ConfigError("warm_epochs", "must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"num_classes", num_classes},
            {"init_count", init_count},
            {"inc_count", inc_count},
            {"setting", to_string(setting)},
            {"height", model.height},
            {"width", model.width},
            {"min_classes_per_scene", scene.min_classes},
            {"max_classes_per_scene", scene.max_classes},
            {"min_share", scene.min_share},
            {"max_share", scene.max_share},
            {"noise_sigma", scene.noise_sigma},
            {"pool_size", pool_size},
            {"eval_per_step", eval_per_step},
            {"hidden", model.hidden},
            {"feature_dim", model.feature_dim},
            {"scorer_init_std", model.scorer_init_std},
            {"expand_noise", model.expand_noise},
            {"expand_bias_shift", model.expand_bias_shift},
            {"freeze_extractor", freeze_extractor},
            {"alpha", weights.alpha},
            {"beta", weights.beta},
            {"gamma", weights.gamma},
            {"tau", tau},
            {"epsilon", epsilon},
            {"cpd_average_all_classes", cpd_average_all_classes},
            {"epochs", epochs},
            {"lr_initial", lr_initial},
            {"lr_incremental", lr_incremental},
            {"momentum", momentum},
            {"grad_clip", grad_clip},
            {"batch_size", batch_size},
            {"replay_count", replay_count},
            {"replay_positive_old", replay_positive_old},
            {"warm_epochs", warm_epochs},
            {"renormalize_compensated", renormalize_compensated},
            {"method", to_string(method)},
            {"use_adc", use_adc},
            {"use_uac", use_uac},
            {"use_cpd", use_cpd},
            {"seed", seed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    TrainConfig c;
    const auto known = c.to_json();
    for (const auto& [k, v] : j.items())
      if (!known.contains(k)) throw ConfigError(k, "unknown configuration key");

    auto get = [&](const char* key, auto& dst) {
      if (!j.contains(key)) return;
      try {
        dst = j.at(key).get<std::decay_t<decltype(dst)>>();
      } catch (const nlohmann::json::exception&) {
        throw ConfigError(key, "wrong type");
      }
    };
    get("num_classes", c.num_classes);
    get("init_count", c.init_count);
    get("inc_count", c.inc_count);
    if (j.contains("setting")) c.setting = setting_from_string(j.at("setting").get<std::string>());
    get("height", c.model.height);
    get("width", c.model.width);
    get("min_classes_per_scene", c.scene.min_classes);
    get("max_classes_per_scene", c.scene.max_classes);
    get("min_share", c.scene.min_share);
    get("max_share", c.scene.max_share);
    get("noise_sigma", c.scene.noise_sigma);
    get("pool_size", c.pool_size);
    get("eval_per_step", c.eval_per_step);
    get("hidden", c.model.hidden);
    get("feature_dim", c.model.feature_dim);
    get("scorer_init_std", c.model.scorer_init_std);
    get("expand_noise", c.model.expand_noise);
    get("expand_bias_shift", c.model.expand_bias_shift);
    get("freeze_extractor", c.freeze_extractor);
    get("alpha", c.weights.alpha);
    get("beta", c.weights.beta);
    get("gamma", c.weights.gamma);
    get("tau", c.tau);
    get("epsilon", c.epsilon);
    get("cpd_average_all_classes", c.cpd_average_all_classes);
    get("epochs", c.epochs);
    get("lr_initial", c.lr_initial);
    get("lr_incremental", c.lr_incremental);
    get("momentum", c.momentum);
    get("grad_clip", c.grad_clip);
    get("batch_size", c.batch_size);
    get("replay_count", c.replay_count);
    get("replay_positive_old", c.replay_positive_old);
    get("warm_epochs", c.warm_epochs);
    get("renormalize_compensated", c.renormalize_compensated);
    if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
    get("use_adc", c.use_adc);
    get("use_uac", c.use_uac);
    get("use_cpd", c.use_cpd);
    get("seed", c.seed);
    c.scene.height = c.model.height;
    c.scene.width = c.model.width;
    c.scene.num_classes = c.num_classes;
    c.validate();
    return c;
  }

  std::uint64_t hash() const { return fnv1a(to_json().dump()); }
};

}  // namespace ciss
