#pragma once

// Small fully-convolutional segmentation model: a shared feature extractor
// (three 3x3 conv blocks, two 2x average pools, output stride 4) followed by
// one linear binary scorer per class. Scorer channel k always scores class k;
// channel 0 is the background scorer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "ciss/error.hpp"
#include "ciss/io.hpp"
#include "ciss/rng.hpp"
#include "ciss/tensor.hpp"

namespace ciss {

inline constexpr int kModelStride = 4;

struct ModelConfig {
  int height = 32;
  int width = 32;
  int hidden = 16;       // channels of the first two conv blocks
  int feature_dim = 16;  // d
  double scorer_init_std = 0.1;
  double expand_noise = 1e-3;
  double expand_bias_shift = 3.0;  // new scorer bias = background bias - shift

  int feat_h() const noexcept { return height / kModelStride; }
  int feat_w() const noexcept { return width / kModelStride; }

  void validate() const {
    if (height <= 0 || width <= 0 || height % kModelStride != 0 || width % kModelStride != 0)
      throw ConfigError("model.height", "image size must be a positive multiple of the stride (4)");
    if (hidden < 1) throw ConfigError("model.hidden", "must be >= 1");
    if (feature_dim < 1) throw ConfigError("model.feature_dim", "must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"height", height},
            {"width", width},
            {"hidden", hidden},
            {"feature_dim", feature_dim},
            {"scorer_init_std", scorer_init_std},
            {"expand_noise", expand_noise},
            {"expand_bias_shift", expand_bias_shift}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.height = j.at("height");
    c.width = j.at("width");
    c.hidden = j.at("hidden");
    c.feature_dim = j.at("feature_dim");
    c.scorer_init_std = j.at("scorer_init_std");
    c.expand_noise = j.at("expand_noise");
    c.expand_bias_shift = j.at("expand_bias_shift");
    return c;
  }
};

/// 3x3 same-padded convolution. `weight` is (9*in) x out, row-major, with
/// rows ordered (ky, kx, in_channel) to match the im2col layout.
struct Conv3x3 {
  int in = 0;
  int out = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  bool operator==(const Conv3x3&) const = default;
};

/// Every trainable tensor of the model. Also used for gradients and momentum.
struct ParamPack {
  Conv3x3 conv1, conv2, conv3;
  int dim = 0;
  std::vector<double> scorer_w;  // K x dim, row-major
  std::vector<double> scorer_b;  // K

  int num_scorers() const noexcept { return static_cast<int>(scorer_b.size()); }

  template <class F>
  void for_each(F&& f) {
    f("extractor.conv1.weight", conv1.weight, true);
    f("extractor.conv1.bias", conv1.bias, true);
    f("extractor.conv2.weight", conv2.weight, true);
    f("extractor.conv2.bias", conv2.bias, true);
    f("extractor.conv3.weight", conv3.weight, true);
    f("extractor.conv3.bias", conv3.bias, true);
    f("scorers.weight", scorer_w, false);
    f("scorers.bias", scorer_b, false);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<ParamPack*>(this)->for_each([&](const char* n, std::vector<double>& v, bool ext) {
      f(n, static_cast<const std::vector<double>&>(v), ext);
    });
  }

  ParamPack zeros_like() const {
    ParamPack z = *this;
    z.for_each([](const char*, std::vector<double>& v, bool) { std::fill(v.begin(), v.end(), 0.0); });
    return z;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for_each([&](const char*, const std::vector<double>& v, bool) {
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)), h);
    });
    return h;
  }

  bool operator==(const ParamPack&) const = default;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

inline RowMat im2col(const Tensor3& x) {
  RowMat col = RowMat::Zero(x.h * x.w, 9 * x.c);
  for (int y = 0; y < x.h; ++y)
    for (int xx = 0; xx < x.w; ++xx) {
      double* row = col.data() + static_cast<std::ptrdiff_t>(y * x.w + xx) * 9 * x.c;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= x.h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = xx + kx - 1;
          if (sx < 0 || sx >= x.w) continue;
          const auto src = x.at(sy * x.w + sx);
          std::copy(src.begin(), src.end(), row + (ky * 3 + kx) * x.c);
        }
      }
    }
  return col;
}

inline void col2im_add(const RowMat& dcol, Tensor3& dx) {
  for (int y = 0; y < dx.h; ++y)
    for (int xx = 0; xx < dx.w; ++xx) {
      const double* row = dcol.data() + static_cast<std::ptrdiff_t>(y * dx.w + xx) * 9 * dx.c;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= dx.h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = xx + kx - 1;
          if (sx < 0 || sx >= dx.w) continue;
          auto dst = dx.at(sy * dx.w + sx);
          const double* src = row + (ky * 3 + kx) * dx.c;
          for (int k = 0; k < dx.c; ++k) dst[static_cast<std::size_t>(k)] += src[k];
        }
      }
    }
}

inline Tensor3 conv_forward(const RowMat& col, int h, int w, const Conv3x3& conv) {
  Tensor3 out(h, w, conv.out);
  MapMat o(out.data.data(), h * w, conv.out);
  o.noalias() = col * CMapMat(conv.weight.data(), 9 * conv.in, conv.out);
  o.rowwise() += CMapVec(conv.bias.data(), conv.out).transpose();
  return out;
}

/// Accumulates weight/bias gradients, and d(input) into `dinput` when given.
inline void conv_backward(const RowMat& col, const Tensor3& dout, const Conv3x3& conv, Conv3x3& grad,
                          Tensor3* dinput) {
  CMapMat g(dout.data.data(), dout.h * dout.w, conv.out);
  MapMat(grad.weight.data(), 9 * conv.in, conv.out).noalias() += col.transpose() * g;
  MapVec(grad.bias.data(), conv.out) += g.colwise().sum().transpose();
  if (dinput) {
    RowMat dcol = g * CMapMat(conv.weight.data(), 9 * conv.in, conv.out).transpose();
    col2im_add(dcol, *dinput);
  }
}

inline void relu_inplace(Tensor3& t) {
  for (auto& v : t.data) v = v > 0.0 ? v : 0.0;
}

inline void relu_backward_inplace(const Tensor3& activated, Tensor3& grad) {
  for (std::size_t i = 0; i < grad.data.size(); ++i)
    if (activated.data[i] <= 0.0) grad.data[i] = 0.0;
}

inline Tensor3 avgpool2(const Tensor3& x) {
  Tensor3 out(x.h / 2, x.w / 2, x.c);
  for (int y = 0; y < out.h; ++y)
    for (int xx = 0; xx < out.w; ++xx)
      for (int k = 0; k < x.c; ++k)
        out(y, xx, k) =
            0.25 * (x(2 * y, 2 * xx, k) + x(2 * y + 1, 2 * xx, k) + x(2 * y, 2 * xx + 1, k) + x(2 * y + 1, 2 * xx + 1, k));
  return out;
}

inline Tensor3 avgpool2_backward(const Tensor3& dout) {
  Tensor3 dx(dout.h * 2, dout.w * 2, dout.c);
  for (int y = 0; y < dx.h; ++y)
    for (int xx = 0; xx < dx.w; ++xx)
      for (int k = 0; k < dx.c; ++k) dx(y, xx, k) = 0.25 * dout(y / 2, xx / 2, k);
  return dx;
}

inline Conv3x3 make_conv(int in, int out, Rng& rng) {
  Conv3x3 c{in, out, std::vector<double>(static_cast<std::size_t>(9 * in * out)), std::vector<double>(static_cast<std::size_t>(out), 0.0)};
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / (9.0 * in)));
  for (auto& v : c.weight) v = n(rng);
  return c;
}

}  // namespace detail

/// Intermediate activations kept by a training forward pass.
struct ForwardCache {
  detail::RowMat col1, col2, col3;
  Tensor3 r1, r2;  // post-ReLU activations of blocks 1 and 2
  int h1 = 0, w1 = 0, h2 = 0, w2 = 0;
};

struct ForwardResult {
  Tensor3 features;  // h x w x d, post-ReLU
  Tensor3 logits;    // h x w x K, raw (pre-sigmoid)
};

class SegModel {
public:
  SegModel() = default;

  /// Fresh model with only the background scorer (K = 1) plus `initial_classes`.
  SegModel(const ModelConfig& cfg, std::uint64_t seed, const std::vector<int>& initial_classes) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    p_.conv1 = detail::make_conv(3, cfg_.hidden, rng);
    p_.conv2 = detail::make_conv(cfg_.hidden, cfg_.hidden, rng);
    p_.conv3 = detail::make_conv(cfg_.hidden, cfg_.feature_dim, rng);
    p_.dim = cfg_.feature_dim;
    classes_ = {0};
    class_step_ = {0};
    std::normal_distribution<double> n(0.0, cfg_.scorer_init_std / std::sqrt(static_cast<double>(cfg_.feature_dim)));
    const int K = 1 + static_cast<int>(initial_classes.size());
    p_.scorer_w.resize(static_cast<std::size_t>(K * cfg_.feature_dim));
    for (auto& v : p_.scorer_w) v = n(rng);
    p_.scorer_b.assign(static_cast<std::size_t>(K), 0.0);
    for (std::size_t i = 0; i < initial_classes.size(); ++i) {
      CISS_REQUIRE(initial_classes[i] == static_cast<int>(i) + 1, "initial classes must be 1..N in order");
      classes_.push_back(initial_classes[i]);
      class_step_.push_back(1);
    }
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const ParamPack& params() const noexcept { return p_; }
  ParamPack& params() noexcept { return p_; }
  int num_scorers() const noexcept { return p_.num_scorers(); }
  int feature_dim() const noexcept { return cfg_.feature_dim; }
  /// Class id per scorer channel (channel k scores class k).
  const std::vector<int>& classes() const noexcept { return classes_; }
  /// Step that introduced each channel's class (0 for background).
  const std::vector<int>& class_steps() const noexcept { return class_step_; }
  std::uint64_t param_hash() const { return p_.hash(); }

  Tensor3 extract(const Tensor3& image, ForwardCache* cache = nullptr) const {
    if (image.h != cfg_.height || image.w != cfg_.width || image.c != 3)
      throw ContractError("image is " + std::to_string(image.h) + "x" + std::to_string(image.w) + "x" +
                          std::to_string(image.c) + ", model expects " + std::to_string(cfg_.height) + "x" +
                          std::to_string(cfg_.width) + "x3");
    auto col1 = detail::im2col(image);
    Tensor3 r1 = detail::conv_forward(col1, image.h, image.w, p_.conv1);
    detail::relu_inplace(r1);
    const Tensor3 q1 = detail::avgpool2(r1);
    auto col2 = detail::im2col(q1);
    Tensor3 r2 = detail::conv_forward(col2, q1.h, q1.w, p_.conv2);
    detail::relu_inplace(r2);
    const Tensor3 q2 = detail::avgpool2(r2);
    auto col3 = detail::im2col(q2);
    Tensor3 f = detail::conv_forward(col3, q2.h, q2.w, p_.conv3);
    detail::relu_inplace(f);
    if (cache) {
      cache->col1 = std::move(col1);
      cache->col2 = std::move(col2);
      cache->col3 = std::move(col3);
      cache->h1 = q1.h;
      cache->w1 = q1.w;
      cache->h2 = q2.h;
      cache->w2 = q2.w;
      cache->r1 = std::move(r1);
      cache->r2 = std::move(r2);
    }
    return f;
  }

  /// Logits for a feature map (any h x w x d).
  Tensor3 score(const Tensor3& features) const {
    CISS_REQUIRE(features.c == cfg_.feature_dim, "feature dim mismatch");
    const int K = num_scorers();
    Tensor3 out(features.h, features.w, K);
    score_into(features.data.data(), features.positions(), out.data.data());
    return out;
  }

  ForwardResult forward(const Tensor3& image, ForwardCache* cache = nullptr) const {
    ForwardResult r;
    r.features = extract(image, cache);
    r.logits = score(r.features);
    return r;
  }

  /// Accumulates parameter gradients into `grad` given dL/dfeatures (may be
  /// empty) and dL/dlogits for one image's forward pass.
  void backward(const ForwardCache& cache, const Tensor3& features, const Tensor3* dfeatures, const Tensor3& dlogits,
                ParamPack& grad, bool extractor = true) const {
    const int K = num_scorers();
    CISS_REQUIRE(dlogits.c == K && dlogits.positions() == features.positions(), "dlogits shape mismatch");
    detail::CMapMat gl(dlogits.data.data(), features.positions(), K);
    detail::CMapMat f(features.data.data(), features.positions(), features.c);
    detail::MapMat(grad.scorer_w.data(), K, p_.dim).noalias() += gl.transpose() * f;
    detail::MapVec(grad.scorer_b.data(), K) += gl.colwise().sum().transpose();
    if (!extractor) return;

    Tensor3 df(features.h, features.w, features.c);
    detail::MapMat(df.data.data(), features.positions(), features.c).noalias() =
        gl * detail::CMapMat(p_.scorer_w.data(), K, p_.dim);
    if (dfeatures) {
      CISS_REQUIRE(dfeatures->size() == df.size(), "dfeatures shape mismatch");
      for (std::size_t i = 0; i < df.data.size(); ++i) df.data[i] += dfeatures->data[i];
    }
    detail::relu_backward_inplace(features, df);
    Tensor3 dq2(cache.h2, cache.w2, p_.conv3.in);
    detail::conv_backward(cache.col3, df, p_.conv3, grad.conv3, &dq2);
    Tensor3 dr2 = detail::avgpool2_backward(dq2);
    detail::relu_backward_inplace(cache.r2, dr2);
    Tensor3 dq1(cache.h1, cache.w1, p_.conv2.in);
    detail::conv_backward(cache.col2, dr2, p_.conv2, grad.conv2, &dq1);
    Tensor3 dr1 = detail::avgpool2_backward(dq1);
    detail::relu_backward_inplace(cache.r1, dr1);
    detail::conv_backward(cache.col1, dr1, p_.conv1, grad.conv1, nullptr);
  }

  /// Gradient of sum(dlogits . logits) w.r.t. scorer parameters for a batch
  /// of free-standing feature rows (replayed features).
  void backward_scorers(std::span<const double> features, int rows, std::span<const double> dlogits,
                        ParamPack& grad) const {
    const int K = num_scorers();
    detail::CMapMat gl(dlogits.data(), rows, K);
    detail::CMapMat f(features.data(), rows, p_.dim);
    detail::MapMat(grad.scorer_w.data(), K, p_.dim).noalias() += gl.transpose() * f;
    detail::MapVec(grad.scorer_b.data(), K) += gl.colwise().sum().transpose();
  }

  /// Logits (rows x K) for free-standing feature rows.
  std::vector<double> score_rows(std::span<const double> features, int rows) const {
    const int K = num_scorers();
    std::vector<double> out(static_cast<std::size_t>(rows * K));
    score_into(features.data(), rows, out.data());
    return out;
  }

  /// Appends one scorer per new class, initialised from the background
  /// scorer plus N(0, expand_noise^2) weight noise, with the bias lowered by
  /// expand_bias_shift so new classes start below background. New classes must continue
  /// the channel numbering (next id = current K). Existing parameters are
  /// untouched.
  void expand_head(const std::vector<int>& new_classes, int step, std::uint64_t seed) {
    for (int c : new_classes) {
      if (std::find(classes_.begin(), classes_.end(), c) != classes_.end())
        throw ContractError("class " + std::to_string(c) + " already has a scorer");
    }
    for (std::size_t i = 0; i < new_classes.size(); ++i)
      CISS_REQUIRE(new_classes[i] == num_scorers() + static_cast<int>(i),
                   "new class ids must continue the channel numbering");
    if (new_classes.empty()) return;
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, cfg_.expand_noise);
    const int d = p_.dim;
    for (int c : new_classes) {
      for (int j = 0; j < d; ++j) p_.scorer_w.push_back(p_.scorer_w[static_cast<std::size_t>(j)] + n(rng));
      p_.scorer_b.push_back(p_.scorer_b[0] - cfg_.expand_bias_shift);
      classes_.push_back(c);
      class_step_.push_back(step);
    }
  }

  bool operator==(const SegModel& o) const {
    return p_ == o.p_ && classes_ == o.classes_ && class_step_ == o.class_step_;
  }

private:
  // Channel by channel so a channel's score does not depend on the head size.
  void score_into(const double* features, int rows, double* out) const {
    const int K = num_scorers();
    const detail::CMapMat f(features, rows, p_.dim);
    Eigen::VectorXd col(rows);
    for (int k = 0; k < K; ++k) {
      col.noalias() = f * detail::CMapVec(p_.scorer_w.data() + static_cast<std::ptrdiff_t>(k) * p_.dim, p_.dim);
      for (int r = 0; r < rows; ++r) out[static_cast<std::ptrdiff_t>(r) * K + k] = col[r] + p_.scorer_b[static_cast<std::size_t>(k)];
    }
  }

  friend SegModel load_checkpoint(const std::filesystem::path&, nlohmann::json*);
  ModelConfig cfg_;
  ParamPack p_;
  std::vector<int> classes_;
  std::vector<int> class_step_;
};

/// Argmax over sigmoid(logits) per position (sigmoid is monotone, so this is
/// the raw-logit argmax); ties resolve to the lowest channel id.
inline LabelMap predict(const Tensor3& logits) {
  CISS_REQUIRE(logits.c >= 2, "predict needs at least two channels");
  LabelMap out(logits.h, logits.w);
  for (int p = 0; p < logits.positions(); ++p) {
    const auto row = logits.at(p);
    int best = 0;
    for (int k = 1; k < logits.c; ++k)
      if (row[static_cast<std::size_t>(k)] > row[static_cast<std::size_t>(best)]) best = k;
    out[p] = best;
  }
  return out;
}

inline LabelMap predict_full_res(const Tensor3& logits) { return upsample_nearest(predict(logits), kModelStride); }

/// Frozen copy of a model. Shares storage between copies; never mutates.
class ModelSnapshot {
public:
  ModelSnapshot() = default;
  explicit ModelSnapshot(const SegModel& m) : model_(std::make_shared<const SegModel>(m)) {}
  explicit ModelSnapshot(SegModel&& m) : model_(std::make_shared<const SegModel>(std::move(m))) {}

  bool valid() const noexcept { return static_cast<bool>(model_); }
  const SegModel& model() const {
    CISS_REQUIRE(model_ != nullptr, "empty snapshot");
    return *model_;
  }
  ForwardResult forward(const Tensor3& image) const { return model().forward(image); }
  int num_scorers() const { return model().num_scorers(); }
  std::uint64_t param_hash() const { return model().param_hash(); }

private:
  std::shared_ptr<const SegModel> model_;
};

inline ModelSnapshot snapshot(const SegModel& m) { return ModelSnapshot(m); }

// ---------------------------------------------------------------------------
// Checkpoint container (little-endian):
//
//   "CISSCKPT" | u32 format_version (=1) | u64 header_bytes | header JSON |
//   payload: concatenated f64 tensors in header order
//
// The JSON header holds "model_config", "classes", "class_steps", a
// "tensors" list of {name, count, offset} (offset in doubles), the payload's
// FNV-1a 64 checksum as "payload_fnv1a" and any caller metadata under "meta"
// (step, config_hash, config, ...).

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const SegModel& model,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  io::Writer payload;
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  model.params().for_each([&](const char* name, const std::vector<double>& v, bool) {
    tensors.push_back({{"name", name}, {"count", v.size()}, {"offset", offset}});
    payload.f64s(v);
    offset += v.size();
  });
  const auto& P = model.params();
  nlohmann::json header{{"model_config", model.config().to_json()},
                        {"classes", model.classes()},
                        {"class_steps", model.class_steps()},
                        {"conv_shapes", {{P.conv1.in, P.conv1.out}, {P.conv2.in, P.conv2.out}, {P.conv3.in, P.conv3.out}}},
                        {"tensors", tensors},
                        {"payload_fnv1a", io::checksum(payload.buffer())},
                        {"meta", meta}};
  const std::string hs = header.dump();
  io::Writer w;
  w.str("CISSCKPT");
  w.u32(kCheckpointVersion);
  w.u64(hs.size());
  w.str(hs);
  w.str(payload.buffer());
  w.save(path);
}

/// Loads a checkpoint; `meta_out` receives the caller metadata.
inline SegModel load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta_out = nullptr) {
  auto r = io::Reader::open(path);
  r.expect_magic("CISSCKPT");
  if (const auto v = r.u32(); v != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(v));
  const auto hlen = r.u64();
  if (hlen > r.remaining()) r.fail("header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str(hlen));
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("corrupt header: ") + e.what());
  }
  if (io::checksum(r.rest()) != header.value("payload_fnv1a", std::uint64_t{0})) r.fail("payload checksum mismatch");

  SegModel m;
  try {
    m.cfg_ = ModelConfig::from_json(header.at("model_config"));
    m.classes_ = header.at("classes").get<std::vector<int>>();
    m.class_step_ = header.at("class_steps").get<std::vector<int>>();
    const auto& cs = header.at("conv_shapes");
    Conv3x3* convs[] = {&m.p_.conv1, &m.p_.conv2, &m.p_.conv3};
    for (int i = 0; i < 3; ++i) {
      convs[i]->in = cs.at(i).at(0);
      convs[i]->out = cs.at(i).at(1);
    }
    m.p_.dim = m.cfg_.feature_dim;
    const auto& tensors = header.at("tensors");
    std::size_t idx = 0;
    m.p_.for_each([&](const char* name, std::vector<double>& v, bool) {
      const auto& t = tensors.at(idx++);
      if (t.at("name").get<std::string>() != name) r.fail("unexpected tensor " + t.at("name").get<std::string>());
      v = r.f64s(t.at("count").get<std::size_t>());
    });
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("malformed header: ") + e.what());
  }
  if (r.remaining() != 0) r.fail("trailing bytes after payload");
  const auto& P = m.p_;
  const int K = static_cast<int>(m.classes_.size());
  if (P.conv1.weight.size() != static_cast<std::size_t>(9 * P.conv1.in * P.conv1.out) ||
      P.conv3.out != m.cfg_.feature_dim || P.num_scorers() != K ||
      P.scorer_w.size() != static_cast<std::size_t>(K * m.cfg_.feature_dim))
    r.fail("tensor shapes inconsistent with header");
  if (meta_out) *meta_out = header.at("meta");
  return m;
}

inline ModelSnapshot load_snapshot(const std::filesystem::path& path) { return ModelSnapshot(load_checkpoint(path)); }

}  // namespace ciss
