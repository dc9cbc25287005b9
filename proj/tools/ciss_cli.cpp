// Command-line front end for incremental segmentation experiments.
//
//   ciss_cli run      --config cfg.json [--method M] [--seed N] [--out DIR] [--resume]
//   ciss_cli evaluate --checkpoint step_3/checkpoint.bin --out DIR
//   ciss_cli compare  --config cfg.json --seeds 5 [--out DIR] [--jobs N]
//   ciss_cli ablate   --config cfg.json [--seeds 5] [--out DIR] [--jobs N]
//   ciss_cli grid     --config cfg.json --betas 0.1,1 --gammas 0.05 --taus 0.7 [--seeds 1] [--out DIR]
//   ciss_cli corpus   --config cfg.json --count 100 --out DIR
//
// Exit code 0 on success; otherwise 1 (2 for configuration or usage errors)
// with {"error": {"kind": ..., "message": ...}} on stderr.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ciss/ciss.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ciss::TrainConfig load_config(const std::string& path) {
  json j;
  try {
    j = json::parse(ciss::io::read_text(path));
  } catch (const json::exception& e) {
    throw ciss::LoadError(path, std::string("invalid JSON: ") + e.what());
  }
  return ciss::TrainConfig::from_json(j);
}

void write_json(const fs::path& dir, const std::string& name, const json& j) {
  if (dir.empty()) return;
  fs::create_directories(dir);
  ciss::io::write_text(dir / name, j.dump(2));
}

json final_summary(const ciss::ExperimentReport& r) { return r.to_json()["final"]; }

int fail(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental segmentation with adaptive prototype replay"};
  app.require_subcommand(1);

  std::string config_path, method, out_dir, checkpoint;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  int seeds = 5, jobs = 1, count = 100;
  std::vector<double> betas{0.1}, gammas{0.05}, taus{0.7};

  auto* run = app.add_subcommand("run", "train one method over every step");
  run->add_option("--config", config_path, "configuration JSON")->required();
  run->add_option("--method", method, "finetune | fixed_replay | adapter");
  run->add_option("--seed", seed, "root seed (overrides the config)");
  run->add_option("--out", out_dir, "output directory");
  run->add_flag("--resume", resume, "continue from the last completed step in --out");

  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on its evaluation set");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--out", out_dir, "output directory");

  auto* compare = app.add_subcommand("compare", "finetune vs fixed_replay vs adapter on paired seeds");
  compare->add_option("--config", config_path)->required();
  compare->add_option("--seeds", seeds, "number of seeds")->check(CLI::PositiveNumber);
  compare->add_option("--out", out_dir);
  compare->add_option("--jobs", jobs)->check(CLI::PositiveNumber);

  auto* ablate = app.add_subcommand("ablate", "base / +adc / +adc+uac / full sweep");
  ablate->add_option("--config", config_path)->required();
  ablate->add_option("--seeds", seeds)->check(CLI::PositiveNumber);
  ablate->add_option("--out", out_dir);
  ablate->add_option("--jobs", jobs)->check(CLI::PositiveNumber);

  auto* grid = app.add_subcommand("grid", "adapter over a beta x gamma x tau grid");
  grid->add_option("--config", config_path)->required();
  grid->add_option("--betas", betas)->delimiter(',');
  grid->add_option("--gammas", gammas)->delimiter(',');
  grid->add_option("--taus", taus)->delimiter(',');
  grid->add_option("--seeds", seeds)->check(CLI::PositiveNumber);
  grid->add_option("--out", out_dir);
  grid->add_option("--jobs", jobs)->check(CLI::PositiveNumber);

  auto* corpus = app.add_subcommand("corpus", "persist generated training scenes with a manifest");
  corpus->add_option("--config", config_path)->required();
  corpus->add_option("--count", count)->check(CLI::PositiveNumber);
  corpus->add_option("--out", out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (*run) {
      auto cfg = load_config(config_path);
      if (!method.empty()) cfg.method = ciss::method_from_string(method);
      if (seed) cfg.seed = *seed;
      const auto report = ciss::run_experiment(cfg, {out_dir, resume, 0});
      std::cout << json{{"method", ciss::to_string(cfg.method)}, {"seed", cfg.seed}, {"final", final_summary(report)}}.dump(2)
                << std::endl;
    } else if (*eval) {
      json meta;
      const auto model = ciss::load_checkpoint(checkpoint, &meta);
      if (!meta.contains("config") || !meta.contains("step"))
        throw ciss::LoadError(checkpoint, "checkpoint carries no experiment metadata");
      const auto cfg = ciss::TrainConfig::from_json(meta.at("config"));
      const auto sched = cfg.schedule();
      const int step = meta.at("step");
      const auto data = ciss::build_corpus(cfg.seed, cfg.scene, sched, cfg.pool_size, cfg.eval_per_step * sched.num_steps());
      const auto metrics = ciss::evaluate(model, data.eval, sched, step);
      write_json(out_dir, "metrics.json", metrics.to_json());
      std::cout << metrics.to_json().dump(2) << std::endl;
    } else if (*compare || *ablate) {
      const auto cfg = load_config(config_path);
      const auto variants = *compare ? ciss::comparison_variants(cfg) : ciss::ablation_variants(cfg);
      const auto res = ciss::run_sweep(variants, seeds, cfg.seed, jobs, out_dir.empty() ? fs::path{} : fs::path(out_dir) / "runs");
      const auto j = res.to_json();
      write_json(out_dir, *compare ? "compare.json" : "ablation.json", j);
      std::cout << j.dump(2) << std::endl;
    } else if (*grid) {
      const auto cfg = load_config(config_path);
      std::vector<ciss::Variant> variants;
      for (double b : betas)
        for (double g : gammas)
          for (double t : taus) {
            auto c = cfg;
            c.method = ciss::Method::adapter;
            c.weights.beta = b;
            c.weights.gamma = g;
            c.tau = t;
            c.validate();
            variants.push_back({"beta=" + std::to_string(b) + ",gamma=" + std::to_string(g) + ",tau=" + std::to_string(t), c});
          }
      const auto res = ciss::run_sweep(variants, seeds, cfg.seed, jobs);
      const auto j = res.to_json();
      write_json(out_dir, "grid.json", j);
      std::cout << j.dump(2) << std::endl;
    } else if (*corpus) {
      const auto cfg = load_config(config_path);
      std::vector<ciss::Scene> scenes;
      for (int i = 0; i < count; ++i)
        scenes.push_back(ciss::generate_scene(ciss::derive_seed(cfg.seed, "corpus.train", static_cast<std::uint64_t>(i)), cfg.scene));
      ciss::save_scenes(out_dir, scenes, cfg.scene);
      std::cout << json{{"scenes", count}, {"out", out_dir}}.dump() << std::endl;
    }
  } catch (const ciss::ConfigError& e) {
    return fail(e.kind(), e.what(), 2);
  } catch (const ciss::Error& e) {
    return fail(e.kind(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
