#pragma once

// Synthetic segmentation scenes and the class-incremental relabeling
// protocol. Each foreground class is one geometric primitive family with its
// own colour signature; scenes are fully determined by their seed.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ciss/error.hpp"
#include "ciss/io.hpp"
#include "ciss/rng.hpp"
#include "ciss/tensor.hpp"

namespace ciss {

enum class Setting { overlapped, disjoint };

inline std::string to_string(Setting s) { return s == Setting::overlapped ? "overlapped" : "disjoint"; }

inline Setting setting_from_string(const std::string& s) {
  if (s == "overlapped") return Setting::overlapped;
  if (s == "disjoint") return Setting::disjoint;
  throw ConfigError("setting", "expected \"overlapped\" or \"disjoint\", got \"" + s + "\"");
}

/// Partition of foreground classes 1..num_classes into learning steps.
/// Steps are addressed 1-based: step 1 is the initial step.
struct TaskSchedule {
  int num_classes = 0;
  int init_count = 0;
  int inc_count = 0;
  std::vector<std::vector<int>> steps;
  Setting setting = Setting::overlapped;

  int num_steps() const noexcept { return static_cast<int>(steps.size()); }

  const std::vector<int>& classes(int t) const {
    CISS_REQUIRE(t >= 1 && t <= num_steps(), "step index " + std::to_string(t) + " out of range");
    return steps[static_cast<std::size_t>(t - 1)];
  }

  /// Step that introduces class c, or 0 for background / unknown classes.
  int step_of(int c) const noexcept {
    for (std::size_t i = 0; i < steps.size(); ++i)
      if (std::find(steps[i].begin(), steps[i].end(), c) != steps[i].end()) return static_cast<int>(i) + 1;
    return 0;
  }

  /// C^{1:t}, ascending.
  std::vector<int> learned_through(int t) const {
    std::vector<int> out;
    for (int s = 1; s <= t; ++s) out.insert(out.end(), classes(s).begin(), classes(s).end());
    return out;
  }
};

inline TaskSchedule build_schedule(int num_classes, int init_count, int inc_count,
                                   Setting setting = Setting::overlapped) {
  if (num_classes < 1) throw ConfigError("num_classes", "must be >= 1");
  if (init_count < 1) throw ConfigError("init_count", "must be >= 1");
  if (inc_count < 1) throw ConfigError("inc_count", "must be >= 1");
  if (init_count >= num_classes) throw ConfigError("init_count", "must leave at least one incremental class");

  TaskSchedule s{num_classes, init_count, inc_count, {}, setting};
  int next = 1;
  std::vector<int> first;
  while (next <= init_count) first.push_back(next++);
  s.steps.push_back(std::move(first));
  while (next <= num_classes) {
    std::vector<int> step;
    for (int k = 0; k < inc_count && next <= num_classes; ++k) step.push_back(next++);
    s.steps.push_back(std::move(step));
  }
  return s;
}

struct SceneConfig {
  int height = 32;
  int width = 32;
  int num_classes = 6;
  int min_classes = 1;
  int max_classes = 3;
  double min_share = 0.05;
  double max_share = 0.45;
  double noise_sigma = 0.05;
  int max_retries = 64;

  nlohmann::json to_json() const {
    return {{"height", height},       {"width", width},         {"num_classes", num_classes},
            {"min_classes", min_classes}, {"max_classes", max_classes}, {"min_share", min_share},
            {"max_share", max_share}, {"noise_sigma", noise_sigma}, {"max_retries", max_retries}};
  }
  static SceneConfig from_json(const nlohmann::json& j) {
    SceneConfig c;
    c.height = j.at("height");
    c.width = j.at("width");
    c.num_classes = j.at("num_classes");
    c.min_classes = j.at("min_classes");
    c.max_classes = j.at("max_classes");
    c.min_share = j.at("min_share");
    c.max_share = j.at("max_share");
    c.noise_sigma = j.at("noise_sigma");
    c.max_retries = j.at("max_retries");
    return c;
  }

  void validate() const {
    if (height < 4 || width < 4) throw ConfigError("scene.height", "scene must be at least 4x4");
    if (num_classes < 1) throw ConfigError("scene.num_classes", "must be >= 1");
    if (min_classes < 1 || min_classes > max_classes)
      throw ConfigError("scene.min_classes", "need 1 <= min_classes <= max_classes");
    if (max_classes > num_classes) throw ConfigError("scene.max_classes", "exceeds num_classes");
    if (!(min_share >= 0.0 && min_share < max_share && max_share <= 1.0))
      throw ConfigError("scene.min_share", "need 0 <= min_share < max_share <= 1");
    if (noise_sigma < 0.0) throw ConfigError("scene.noise_sigma", "must be >= 0");
    if (max_retries < 1) throw ConfigError("scene.max_retries", "must be >= 1");
  }
};

struct Scene {
  std::uint64_t seed = 0;
  Tensor3 image;  // H x W x 3 in [0,1]
  LabelMap label;
  std::vector<int> class_set;  // ascending

  bool operator==(const Scene&) const = default;
};

/// A scene relabeled for one learning step. `full_label` is only for evaluation.
struct StepSample {
  Tensor3 image;
  LabelMap label;
  LabelMap full_label;
};

namespace detail {

enum class Primitive { disk, square, triangle, bar, ring, cross };

struct ClassLook {
  Primitive shape;
  std::array<double, 3> color;
};

// Pairs (1,3), (2,4), (1,5) are deliberately close in colour so that later
// steps disturb what earlier steps learned.
inline ClassLook class_look(int c) {
  static constexpr std::array<Primitive, 6> shapes{Primitive::disk, Primitive::square, Primitive::triangle,
                                                   Primitive::bar,  Primitive::ring,   Primitive::cross};
  static constexpr std::array<std::array<double, 3>, 6> colors{{{0.85, 0.20, 0.20},
                                                                {0.20, 0.70, 0.25},
                                                                {0.88, 0.42, 0.15},
                                                                {0.18, 0.58, 0.50},
                                                                {0.78, 0.22, 0.48},
                                                                {0.25, 0.35, 0.85}}};
  const auto idx = static_cast<std::size_t>((c - 1) % 6);
  ClassLook look{shapes[idx], colors[idx]};
  // Classes beyond the base palette cycle with a darkened colour.
  const int cycle = (c - 1) / 6;
  for (auto& v : look.color) v *= std::pow(0.75, cycle);
  return look;
}

inline bool inside(Primitive p, double dy, double dx, double r) {
  const double ay = std::abs(dy), ax = std::abs(dx);
  switch (p) {
    case Primitive::disk: return dy * dy + dx * dx <= r * r;
    case Primitive::square: return ay <= r && ax <= r;
    case Primitive::triangle: return dy >= -r && dy <= r && ax <= (dy + r) * 0.5;
    case Primitive::bar: return ay <= r / 2.5 && ax <= r * 1.6;
    case Primitive::ring: {
      const double d2 = dy * dy + dx * dx;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    case Primitive::cross: return (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r);
  }
  return false;
}

}  // namespace detail

/// Deterministic scene for `seed`. Throws GenerationError when no placement
/// satisfying the share bounds is found within `max_retries` attempts.
inline Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  std::uniform_int_distribution<int> count_dist(cfg.min_classes, cfg.max_classes);
  std::vector<int> all(static_cast<std::size_t>(cfg.num_classes));
  for (int i = 0; i < cfg.num_classes; ++i) all[static_cast<std::size_t>(i)] = i + 1;

  const int n = count_dist(rng);
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<int> chosen(all.begin(), all.begin() + n);

  const int H = cfg.height, W = cfg.width;
  const double total = static_cast<double>(H) * W;
  const double rmin = 0.17 * std::min(H, W), rmax = 0.36 * std::min(H, W);
  std::uniform_real_distribution<double> radius(rmin, rmax);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  LabelMap label(H, W);
  bool ok = false;
  for (int attempt = 0; attempt < cfg.max_retries && !ok; ++attempt) {
    std::fill(label.data.begin(), label.data.end(), 0);
    for (int c : chosen) {
      const auto look = detail::class_look(c);
      const double r = radius(rng);
      const double cy = r * 0.6 + unit(rng) * (H - 1.2 * r);
      const double cx = r * 0.6 + unit(rng) * (W - 1.2 * r);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          if (detail::inside(look.shape, y - cy, x - cx, r)) label(y, x) = c;
    }
    ok = true;
    for (int c : chosen) {
      const double share = static_cast<double>(std::count(label.data.begin(), label.data.end(), c)) / total;
      if (share < cfg.min_share || share > cfg.max_share) ok = false;
    }
  }
  if (!ok)
    throw GenerationError("no valid placement after " + std::to_string(cfg.max_retries) + " retries (seed " +
                          std::to_string(seed) + ")");

  // Per-scene colour jitter, then independent pixel noise.
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  std::uniform_real_distribution<double> gray(0.35, 0.65);
  std::array<double, 3> bg{};
  const double g = gray(rng);
  for (auto& v : bg) v = g + jitter(rng);
  std::vector<std::array<double, 3>> palette(static_cast<std::size_t>(cfg.num_classes) + 1, bg);
  for (int c : chosen) {
    auto col = detail::class_look(c).color;
    for (auto& v : col) v += jitter(rng);
    palette[static_cast<std::size_t>(c)] = col;
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  Scene s;
  s.seed = seed;
  s.image = Tensor3(H, W, 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto& col = palette[static_cast<std::size_t>(label(y, x))];
      for (int k = 0; k < 3; ++k) s.image(y, x, k) = std::clamp(col[static_cast<std::size_t>(k)] + cfg.noise_sigma * noise(rng), 0.0, 1.0);
    }
  s.label = std::move(label);
  std::sort(chosen.begin(), chosen.end());
  s.class_set = std::move(chosen);
  return s;
}

/// Whether `scene` belongs to step t's training pool under the schedule's setting.
inline bool eligible_for_step(const Scene& scene, const TaskSchedule& schedule, int t) {
  CISS_REQUIRE(t >= 1 && t <= schedule.num_steps(), "step index out of range");
  bool has_current = false;
  for (int c : scene.class_set) {
    const int s = schedule.step_of(c);
    if (s == t) has_current = true;
    if (schedule.setting == Setting::disjoint && s > t) return false;
  }
  return has_current;
}

/// Relabels a scene for step t: only classes of step t stay foreground.
/// Returns nullopt when the scene is not eligible for step t.
inline std::optional<StepSample> relabel_for_step(const Scene& scene, const TaskSchedule& schedule, int t) {
  if (!eligible_for_step(scene, schedule, t)) return std::nullopt;
  const auto& cur = schedule.classes(t);
  StepSample out{scene.image, scene.label, scene.label};
  for (auto& v : out.label.data)
    if (v != 0 && std::find(cur.begin(), cur.end(), v) == cur.end()) v = 0;
  return out;
}

/// Full labels with classes not yet learned at step t mapped to background.
inline LabelMap mask_future_classes(const LabelMap& full, const TaskSchedule& schedule, int t) {
  LabelMap out = full;
  for (auto& v : out.data)
    if (v != 0 && schedule.step_of(v) > t) v = 0;
  return out;
}

/// Step training pools drawn from one seeded scene stream. Scene i has seed
/// derive_seed(root, "corpus.train", i); each step takes the first
/// `pool_size` eligible scenes in stream order.
struct Corpus {
  std::vector<std::vector<StepSample>> pools;           // index t-1
  std::vector<std::vector<std::uint64_t>> pool_scene_ids;  // stream indices per pool
  std::vector<StepSample> eval;                          // full labels
};

inline Corpus build_corpus(std::uint64_t root_seed, const SceneConfig& cfg, const TaskSchedule& schedule,
                           int pool_size, int eval_size, std::uint64_t max_scenes = 200000) {
  if (pool_size < 1) throw ConfigError("pool_size", "must be >= 1");
  if (eval_size < 1) throw ConfigError("eval_size", "must be >= 1");
  Corpus corpus;
  const int T = schedule.num_steps();
  corpus.pools.resize(static_cast<std::size_t>(T));
  corpus.pool_scene_ids.resize(static_cast<std::size_t>(T));
  auto full = [&] {
    return std::all_of(corpus.pools.begin(), corpus.pools.end(),
                       [&](const auto& p) { return static_cast<int>(p.size()) >= pool_size; });
  };
  for (std::uint64_t i = 0; !full(); ++i) {
    if (i >= max_scenes) throw GenerationError("could not fill step pools from " + std::to_string(max_scenes) + " scenes");
    const Scene scene = generate_scene(derive_seed(root_seed, "corpus.train", i), cfg);
    for (int t = 1; t <= T; ++t) {
      auto& pool = corpus.pools[static_cast<std::size_t>(t - 1)];
      if (static_cast<int>(pool.size()) >= pool_size) continue;
      if (auto s = relabel_for_step(scene, schedule, t)) {
        pool.push_back(std::move(*s));
        corpus.pool_scene_ids[static_cast<std::size_t>(t - 1)].push_back(i);
      }
    }
  }
  for (int i = 0; i < eval_size; ++i) {
    Scene scene = generate_scene(derive_seed(root_seed, "corpus.eval", static_cast<std::uint64_t>(i)), cfg);
    corpus.eval.push_back({scene.image, scene.label, scene.label});
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Corpus persistence: <dir>/manifest.json plus one scene_<id>.bin per scene.
//
// scene_<id>.bin layout (little-endian):
//   "CISSSCN1" | u32 H | u32 W | f64[H*W*3] image (HWC) | i32[H*W] label

inline void save_scenes(const std::filesystem::path& dir, const std::vector<Scene>& scenes, const SceneConfig& cfg) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"format_version", 1}, {"scene_config", cfg.to_json()}, {"scenes", nlohmann::json::array()}};
  for (std::size_t id = 0; id < scenes.size(); ++id) {
    const auto& s = scenes[id];
    const std::string file = "scene_" + std::to_string(id) + ".bin";
    io::Writer w;
    w.str("CISSSCN1");
    w.u32(static_cast<std::uint32_t>(s.label.h));
    w.u32(static_cast<std::uint32_t>(s.label.w));
    w.f64s(s.image.data);
    w.i32s(s.label.data);
    w.save(dir / file);
    manifest["scenes"].push_back({{"id", id}, {"seed", s.seed}, {"class_set", s.class_set}, {"file", file}});
  }
  io::write_text(dir / "manifest.json", manifest.dump(2));
}

inline nlohmann::json load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  try {
    return nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string(), e.what());
  }
}

inline std::vector<Scene> load_scenes(const std::filesystem::path& dir) {
  const auto manifest = load_manifest(dir);
  std::vector<Scene> out;
  for (const auto& entry : manifest.at("scenes")) {
    auto r = io::Reader::open(dir / entry.at("file").get<std::string>());
    r.expect_magic("CISSSCN1");
    const int H = static_cast<int>(r.u32()), W = static_cast<int>(r.u32());
    Scene s;
    s.seed = entry.at("seed");
    s.class_set = entry.at("class_set").get<std::vector<int>>();
    s.image = Tensor3(H, W, 3);
    s.image.data = r.f64s(static_cast<std::size_t>(H) * W * 3);
    s.label = LabelMap(H, W);
    s.label.data = r.i32s(static_cast<std::size_t>(H) * W);
    if (r.remaining() != 0) r.fail("trailing bytes");
    out.push_back(std::move(s));
  }
  return out;
}

/// Regenerates every scene listed in a manifest from its seed.
inline std::vector<Scene> regenerate_from_manifest(const std::filesystem::path& dir) {
  const auto manifest = load_manifest(dir);
  const auto cfg = SceneConfig::from_json(manifest.at("scene_config"));
  std::vector<Scene> out;
  for (const auto& entry : manifest.at("scenes")) out.push_back(generate_scene(entry.at("seed").get<std::uint64_t>(), cfg));
  return out;
}

}  // namespace ciss
