#pragma once

// Incremental training loop, experiment runner and method comparisons.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ciss/adc.hpp"
#include "ciss/config.hpp"
#include "ciss/data_synth.hpp"
#include "ciss/io.hpp"
#include "ciss/losses.hpp"
#include "ciss/metrics.hpp"
#include "ciss/prototype_store.hpp"
#include "ciss/rng.hpp"
#include "ciss/segmodel.hpp"
#include "ciss/uncertainty.hpp"

namespace ciss {

inline constexpr int kReportSchemaVersion = 1;

/// SGD with heavy-ball momentum: v <- mu v + g; p <- p - lr v.
/// With clip > 0 the gradient is rescaled to global L2 norm <= clip first.
class Sgd {
public:
  Sgd(const ParamPack& params, double lr, double momentum, double clip = 0.0)
      : velocity_(params.zeros_like()), lr_(lr), momentum_(momentum), clip_(clip) {}

  /// Returns the gradient norm before clipping.
  double step(ParamPack& params, ParamPack& grad, bool update_extractor) {
    std::vector<std::vector<double>*> ps, gs, vs;
    params.for_each([&](const char*, std::vector<double>& v, bool ext) { ps.push_back(update_extractor || !ext ? &v : nullptr); });
    grad.for_each([&](const char*, std::vector<double>& v, bool) { gs.push_back(&v); });
    velocity_.for_each([&](const char*, std::vector<double>& v, bool) { vs.push_back(&v); });
    double sq = 0.0;
    for (std::size_t t = 0; t < ps.size(); ++t)
      if (ps[t])
        for (double g : *gs[t]) sq += g * g;
    const double norm = std::sqrt(sq);
    const double scale = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;
    for (std::size_t t = 0; t < ps.size(); ++t) {
      if (!ps[t]) continue;
      auto& p = *ps[t];
      auto& g = *gs[t];
      auto& v = *vs[t];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] + scale * g[i];
        p[i] -= lr_ * v[i];
      }
    }
    return norm;
  }

private:
  ParamPack velocity_;
  double lr_, momentum_, clip_;
};

struct StepResult {
  std::vector<AdcReport> adc_reports;
  std::optional<AdcReport> final_adc;
  LossBundle last_epoch_mean;
};

struct StepContext {
  int step = 1;
  const TaskSchedule* schedule = nullptr;
  const ModelSnapshot* prev = nullptr;  // null at the initial step
  std::ostream* train_log = nullptr;    // JSON lines, one per iteration
  std::ostream* adc_log = nullptr;      // JSON lines, one per compensation pass
  std::filesystem::path diagnostics_dir;  // where a divergent model is dumped
};

/// Trains one step in place: model (head already expanded for C^t) and store.
inline StepResult train_step(SegModel& model, PrototypeStore& store, const std::vector<StepSample>& pool,
                             const TrainConfig& cfg, const StepContext& ctx) {
  const int t = ctx.step;
  const TaskSchedule& sched = *ctx.schedule;
  const auto& new_classes = sched.classes(t);
  const auto old_classes = t > 1 ? sched.learned_through(t - 1) : std::vector<int>{};
  CISS_REQUIRE(model.num_scorers() == 1 + static_cast<int>(sched.learned_through(t).size()),
               "model head not expanded for step " + std::to_string(t));
  CISS_REQUIRE(t == 1 || (ctx.prev && ctx.prev->valid()), "incremental step without previous model");

  const bool incremental = t > 1;
  const bool use_old = incremental && cfg.uses_old_knowledge();
  const bool replay_on = use_old && !store.records.empty();
  const bool adc_on = use_old && cfg.adc_on() && !store.records.empty();
  const bool uac_on = cfg.uac_on();
  const bool cpd_on = cfg.cpd_on();
  const bool train_extractor = !(incremental && cfg.freeze_extractor);

  // Previous-model outputs and pseudo-labels are fixed for the whole step.
  PoolOutputs prev_out;
  if (use_old) prev_out = pool_outputs(ctx.prev->model(), pool);
  std::vector<LabelMap> step_labels, targets;
  step_labels.reserve(pool.size());
  targets.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    step_labels.push_back(downsample_nearest(pool[i].label, kModelStride));
    targets.push_back(use_old ? pseudo_label(step_labels.back(), &prev_out.logits[i], cfg.tau, old_classes)
                              : step_labels.back());
  }

  // Current prototype directions (start-of-step stored ones until ADC runs).
  std::map<int, std::vector<double>> directions;
  for (const auto& [c, rec] : store.records) directions.emplace(c, rec.proto);

  Sgd opt(model.params(), incremental ? cfg.lr_incremental : cfg.lr_initial, cfg.momentum, cfg.grad_clip);
  StepResult result;
  const int n = static_cast<int>(pool.size());
  const int B = cfg.batch_size;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    auto order_rng = make_rng(cfg.seed, "order", static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), order_rng);
    auto replay_rng = make_rng(cfg.seed, "replay", static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(epoch));

    LossBundle epoch_sum;
    int iters = 0;
    for (int start = 0; start < n; start += B) {
      const int end = std::min(n, start + B);
      const auto bs = static_cast<std::size_t>(end - start);
      std::vector<ForwardCache> caches(bs);
      std::vector<Tensor3> feats(bs), logits(bs), prev_logits;
      std::vector<LabelMap> tgt(bs);
      for (std::size_t b = 0; b < bs; ++b) {
        const auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(start) + b]);
        auto r = model.forward(pool[idx].image, &caches[b]);
        feats[b] = std::move(r.features);
        logits[b] = std::move(r.logits);
        tgt[b] = targets[idx];
        if (use_old) prev_logits.push_back(prev_out.logits[idx]);
      }

      ReplayBatch replay;
      std::vector<double> replay_feats;
      if (replay_on) {
        for (const auto& [c, rec] : store.records) {
          const auto mean = adc_on ? compensated_mean(rec, directions.at(c)) : rec.mean;
          auto rows = sample_replay(mean, rec.var, cfg.replay_count, replay_rng);
          replay_feats.insert(replay_feats.end(), rows.begin(), rows.end());
          replay.row_class.insert(replay.row_class.end(), static_cast<std::size_t>(cfg.replay_count), c);
        }
        replay.rows = static_cast<int>(replay.row_class.size());
        replay.logits = model.score_rows(replay_feats, replay.rows);
      }

      std::vector<Tensor3> d_mbce, d_kd, d_uac, d_cpd;
      std::vector<double> d_replay;
      const double l_mbce = mbce(logits, tgt, replay_on ? &replay : nullptr,
                                 MbceOptions{new_classes, cfg.replay_positive_old}, &d_mbce, &d_replay);
      const double l_kd = use_old ? kd(logits, prev_logits, &d_kd) : 0.0;
      const double l_uac = uac_on ? uac(logits, tgt, cfg.tau, new_classes, &d_uac) : 0.0;
      double l_cpd = 0.0;
      if (cpd_on) {
        std::vector<LabelMap> preds;
        preds.reserve(bs);
        for (const auto& L : logits) preds.push_back(predict(L));
        CpdOptions copt{cfg.epsilon, cfg.cpd_average_all_classes, static_cast<int>(new_classes.size()), incremental};
        l_cpd = cpd_with_feature_grad(feats, tgt, preds, new_classes, directions, copt, &d_cpd).value;
      }
      const LossBundle loss = total(l_mbce, l_kd, l_uac, l_cpd, cfg.weights);
      if (!std::isfinite(loss.total)) {
        if (!ctx.diagnostics_dir.empty()) {
          std::filesystem::create_directories(ctx.diagnostics_dir);
          save_checkpoint(ctx.diagnostics_dir / "diverged.bin", model, {{"step", t}, {"epoch", epoch}});
        }
        throw DivergenceError("non-finite loss at step " + std::to_string(t) + " epoch " + std::to_string(epoch) +
                              ": " + loss.to_json().dump());
      }

      ParamPack grad = model.params().zeros_like();
      for (std::size_t b = 0; b < bs; ++b) {
        Tensor3& dl = d_mbce[b];
        if (use_old)
          for (std::size_t k = 0; k < dl.data.size(); ++k) dl.data[k] += cfg.weights.alpha * d_kd[b].data[k];
        if (uac_on)
          for (std::size_t k = 0; k < dl.data.size(); ++k) dl.data[k] += cfg.weights.beta * d_uac[b].data[k];
        Tensor3* df = nullptr;
        if (cpd_on) {
          for (auto& v : d_cpd[b].data) v *= cfg.weights.gamma;
          df = &d_cpd[b];
        }
        model.backward(caches[b], feats[b], df, dl, grad, train_extractor);
      }
      if (replay_on) model.backward_scorers(replay_feats, replay.rows, d_replay, grad);
      const double grad_norm = opt.step(model.params(), grad, train_extractor);

      if (ctx.train_log) {
        auto line = loss.to_json();
        line["step"] = t;
        line["epoch"] = epoch;
        line["iter"] = iters;
        line["grad_norm"] = grad_norm;
        line["active"] = {{"replay", replay_on}, {"kd", use_old}, {"pseudo_label", use_old},
                          {"uac", uac_on},       {"cpd", cpd_on}, {"adc", adc_on}};
        *ctx.train_log << line.dump() << '\n';
      }
      epoch_sum.mbce += loss.mbce;
      epoch_sum.kd += loss.kd;
      epoch_sum.uac += loss.uac;
      epoch_sum.cpd += loss.cpd;
      epoch_sum.total += loss.total;
      ++iters;
    }
    if (iters > 0) {
      const double k = 1.0 / iters;
      result.last_epoch_mean = total(epoch_sum.mbce * k, epoch_sum.kd * k, epoch_sum.uac * k, epoch_sum.cpd * k, cfg.weights);
    }

    if (adc_on && epoch >= cfg.warm_epochs) {
      AdcReport rep = run_adc(*ctx.prev, model, pool, store, cfg.tau, cfg.renormalize_compensated, &prev_out);
      rep.step = t;
      rep.epoch = epoch;
      directions = rep.directions();
      if (ctx.adc_log) *ctx.adc_log << rep.to_json().dump() << '\n';
      result.final_adc = rep;
      result.adc_reports.push_back(std::move(rep));
    }
  }

  ClassStatsBuilder stats(model.feature_dim(), new_classes);
  for (std::size_t i = 0; i < pool.size(); ++i) stats.add(model.extract(pool[i].image), step_labels[i]);
  std::vector<int> missing;
  const auto new_stats = stats.finish(&missing);
  if (!missing.empty()) throw ContractError("new class without pixels in its own step pool");
  finalize_step(store, t, new_classes, new_stats,
                result.final_adc ? result.final_adc->compensated_entries() : std::map<int, CompensatedEntry>{});
  return result;
}

struct StepRecord {
  StepMetrics metrics;
  nlohmann::json adc = nullptr;     // final compensation pass of the step
  nlohmann::json losses = nullptr;  // mean loss bundle of the last epoch
};

struct ExperimentReport {
  TrainConfig config;
  std::vector<StepRecord> steps;
  std::uint64_t final_param_hash = 0;

  const StepMetrics& final_metrics() const { return steps.back().metrics; }

  nlohmann::json to_json() const {
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : steps) {
      auto j = s.metrics.to_json();
      j["adc"] = s.adc;
      j["losses"] = s.losses;
      st.push_back(std::move(j));
    }
    const auto sched = config.schedule();
    nlohmann::json fin = nullptr;
    if (!steps.empty()) {
      const auto f = steps.back().metrics.to_json();
      fin = {{"miou_old", f["miou_old"]}, {"miou_new", f["miou_new"]}, {"miou_all", f["miou_all"]}};
    }
    std::ostringstream h;
    h << std::hex << final_param_hash;
    return {{"schema_version", kReportSchemaVersion},
            {"method", to_string(config.method)},
            {"seed", config.seed},
            {"config_hash", config.hash()},
            {"config", config.to_json()},
            {"schedule", {{"steps", sched.steps}, {"setting", to_string(sched.setting)}}},
            {"steps", st},
            {"final", fin},
            {"final_param_hash", h.str()}};
  }
};

struct RunOptions {
  std::filesystem::path out_dir;  // empty: nothing persisted
  bool resume = false;            // continue from the last completed step in out_dir
  int stop_after_step = 0;        // > 0: stop once this step is persisted
};

namespace detail {

inline nlohmann::json progress_json(const ExperimentReport& r) {
  auto j = r.to_json();
  j["completed_steps"] = r.steps.size();
  return j;
}

inline std::filesystem::path step_dir(const std::filesystem::path& out, int t) {
  return out / ("step_" + std::to_string(t));
}

}  // namespace detail

/// Runs every step of the schedule. With an output directory, each step
/// boundary persists the checkpoint, prototype store and progress so a run
/// can be resumed; report.json, train_log.jsonl and adc_log.jsonl are
/// written there.
inline ExperimentReport run_experiment(const TrainConfig& cfg, const RunOptions& opts = {}) {
  cfg.validate();
  const TaskSchedule sched = cfg.schedule();
  const Corpus corpus = build_corpus(cfg.seed, cfg.scene, sched, cfg.pool_size, cfg.eval_per_step * sched.num_steps());

  ExperimentReport report;
  report.config = cfg;
  SegModel model;
  PrototypeStore store;
  store.replay_count = cfg.replay_count;
  int first_step = 1;

  const bool persist = !opts.out_dir.empty();
  std::ofstream train_log, adc_log;
  if (persist) {
    std::filesystem::create_directories(opts.out_dir);
    if (opts.resume && std::filesystem::exists(opts.out_dir / "progress.json")) {
      const auto progress = nlohmann::json::parse(io::read_text(opts.out_dir / "progress.json"));
      if (progress.at("config_hash").get<std::uint64_t>() != cfg.hash())
        throw ConfigError("config", "resume directory was produced by a different configuration");
      const int done = progress.at("completed_steps");
      for (const auto& s : progress.at("steps")) {
        StepRecord rec;
        rec.metrics = StepMetrics::from_json(s);
        rec.adc = s.at("adc");
        rec.losses = s.at("losses");
        report.steps.push_back(std::move(rec));
      }
      const auto dir = detail::step_dir(opts.out_dir, done);
      model = load_checkpoint(dir / "checkpoint.bin");
      store = load_store(dir / "store");
      first_step = done + 1;
    }
    const auto mode = first_step > 1 ? std::ios::app : std::ios::trunc;
    train_log.open(opts.out_dir / "train_log.jsonl", mode);
    adc_log.open(opts.out_dir / "adc_log.jsonl", mode);
  }

  for (int t = first_step; t <= sched.num_steps(); ++t) {
    std::optional<ModelSnapshot> prev;
    if (t == 1) {
      model = SegModel(cfg.model, derive_seed(cfg.seed, "init"), sched.classes(1));
    } else {
      prev = snapshot(model);
      model.expand_head(sched.classes(t), t, derive_seed(cfg.seed, "expand", static_cast<std::uint64_t>(t)));
    }
    StepContext ctx{t, &sched, prev ? &*prev : nullptr, persist ? &train_log : nullptr,
                    persist ? &adc_log : nullptr, persist ? opts.out_dir : std::filesystem::path{}};
    const StepResult res = train_step(model, store, corpus.pools[static_cast<std::size_t>(t - 1)], cfg, ctx);

    StepRecord rec;
    rec.metrics = evaluate(model, corpus.eval, sched, t);
    if (res.final_adc) rec.adc = res.final_adc->to_json();
    rec.losses = res.last_epoch_mean.to_json();
    report.steps.push_back(std::move(rec));
    report.final_param_hash = model.param_hash();

    if (persist) {
      const auto dir = detail::step_dir(opts.out_dir, t);
      std::filesystem::create_directories(dir);
      save_checkpoint(dir / "checkpoint.bin", model,
                      {{"step", t}, {"classes", sched.learned_through(t)}, {"config_hash", cfg.hash()}, {"config", cfg.to_json()}});
      save_store(dir / "store", store);
      train_log.flush();
      adc_log.flush();
      io::write_text(opts.out_dir / "progress.json", detail::progress_json(report).dump(2));
    }
    if (opts.stop_after_step > 0 && t >= opts.stop_after_step && t < sched.num_steps()) return report;
  }
  report.final_param_hash = model.param_hash();
  if (persist) io::write_text(opts.out_dir / "report.json", report.to_json().dump(2));
  return report;
}

/// Runs independent jobs on up to `jobs` threads, collecting results in
/// submission order.
template <class R>
std::vector<R> run_parallel(const std::vector<std::function<R()>>& tasks, int jobs) {
  std::vector<R> out(tasks.size());
  jobs = std::max(1, jobs);
  std::size_t next = 0;
  while (next < tasks.size()) {
    std::vector<std::future<R>> batch;
    const std::size_t stop = std::min(tasks.size(), next + static_cast<std::size_t>(jobs));
    for (std::size_t i = next; i < stop; ++i) batch.push_back(std::async(std::launch::async, tasks[i]));
    for (std::size_t i = next; i < stop; ++i) out[i] = batch[i - next].get();
    next = stop;
  }
  return out;
}

struct Variant {
  std::string name;
  TrainConfig config;
};

/// finetune / fixed_replay / adapter on identical seeds and corpora.
inline std::vector<Variant> comparison_variants(const TrainConfig& base) {
  std::vector<Variant> v;
  for (Method m : {Method::finetune, Method::fixed_replay, Method::adapter}) {
    TrainConfig c = base;
    c.method = m;
    c.use_adc = c.use_uac = c.use_cpd = true;
    v.push_back({to_string(m), c});
  }
  return v;
}

/// The four-row component ablation: base, +ADC, +ADC+UAC, full.
inline std::vector<Variant> ablation_variants(const TrainConfig& base) {
  auto make = [&](const char* name, Method m, bool adc, bool uac, bool cpd) {
    TrainConfig c = base;
    c.method = m;
    c.use_adc = adc;
    c.use_uac = uac;
    c.use_cpd = cpd;
    return Variant{name, c};
  };
  return {make("base", Method::fixed_replay, false, false, false), make("+adc", Method::adapter, true, false, false),
          make("+adc+uac", Method::adapter, true, true, false), make("full", Method::adapter, true, true, true)};
}

struct SweepResult {
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<ExperimentReport>> reports;  // [variant][seed]

  double mean_final(std::size_t v, std::optional<double> StepMetrics::* field) const {
    double s = 0.0;
    for (const auto& r : reports[v]) s += (r.final_metrics().*field).value_or(0.0);
    return s / static_cast<double>(reports[v].size());
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t v = 0; v < variants.size(); ++v) {
      nlohmann::json per_seed = nlohmann::json::array();
      for (std::size_t s = 0; s < seeds.size(); ++s) {
        const auto f = reports[v][s].final_metrics().to_json();
        per_seed.push_back({{"seed", seeds[s]}, {"miou_old", f["miou_old"]}, {"miou_new", f["miou_new"]}, {"miou_all", f["miou_all"]}});
      }
      rows.push_back({{"variant", variants[v]},
                      {"per_seed", per_seed},
                      {"mean", {{"miou_old", mean_final(v, &StepMetrics::miou_old)},
                                {"miou_new", mean_final(v, &StepMetrics::miou_new)},
                                {"miou_all", mean_final(v, &StepMetrics::miou_all)}}}});
    }
    return {{"schema_version", kReportSchemaVersion}, {"seeds", seeds}, {"variants", rows}};
  }
};

/// Every variant on seeds base.seed, base.seed+1, ... (paired across variants).
inline SweepResult run_sweep(const std::vector<Variant>& variants, int num_seeds, std::uint64_t first_seed, int jobs = 1,
                             const std::filesystem::path& out_dir = {}) {
  SweepResult res;
  for (int s = 0; s < num_seeds; ++s) res.seeds.push_back(first_seed + static_cast<std::uint64_t>(s));
  std::vector<std::function<ExperimentReport()>> tasks;
  for (const auto& v : variants) {
    res.variants.push_back(v.name);
    for (auto seed : res.seeds) {
      TrainConfig c = v.config;
      c.seed = seed;
      RunOptions o;
      if (!out_dir.empty()) o.out_dir = out_dir / v.name / ("seed_" + std::to_string(seed));
      tasks.push_back([c, o] { return run_experiment(c, o); });
    }
  }
  auto flat = run_parallel(tasks, jobs);
  std::size_t k = 0;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    res.reports.emplace_back();
    for (std::size_t s = 0; s < res.seeds.size(); ++s) res.reports.back().push_back(std::move(flat[k++]));
  }
  return res;
}

}  // namespace ciss
