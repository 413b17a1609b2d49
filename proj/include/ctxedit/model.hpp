// Copyright 2026 The ctxedit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dual-stream diffusion transformer with a hand-written backward pass.
//
// Text and image-pathway tokens keep separate weights (embeddings, qkv,
// output projection, MLP, modulation) but attend jointly under the block
// mask of the packed sequence. Every block is conditioned on its own
// timestep through adaptive layer-norm modulation whose projection starts
// at zero, so a fresh network is the identity on its residual stream.
//
// Parameter names:
//   text.embed [V, D]       text.turn [M, D]
//   image.in.w [P, D]       image.in.b [1, D]
//   time.fc1.{w,b}          time.fc2.{w,b}             [D, D], [1, D]
//   layers.<l>.<text|image>.mod.{w,b}                  [D, 6D]
//   layers.<l>.<text|image>.qkv.{w,b}                  [D, 3D]
//   layers.<l>.<text|image>.out.{w,b}                  [D, D]
//   layers.<l>.<text|image>.fc1.{w,b}                  [D, 4D]
//   layers.<l>.<text|image>.fc2.{w,b}                  [4D, D]
//   final.mod.{w,b} [D, 2D]   head.w [D, P]   head.b [1, P]

#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "ctxedit/common.hpp"
#include "ctxedit/sequencer.hpp"

namespace ctxedit {

struct ModelConfig {
  int model_dim = 256;
  int layers = 6;
  int heads = 8;
  int patch = kDefaultPatch;
  int vocab_size = 46;
  int turn_marks = kMaxTurnMarks;
  int max_frame_axis = 128;
  double rope_base = 10000.0;

  int head_dim() const { return model_dim / heads; }
  int patch_dim() const { return 3 * patch * patch; }

  void validate() const {
    require(model_dim > 0 && heads > 0 && model_dim % heads == 0, "model_dim must be a positive multiple of heads");
    require(head_dim() % 8 == 0, "head_dim must be divisible by 8");
    require(layers >= 0, "layers must be >= 0");
    require(patch > 0, "patch must be positive");
    require(vocab_size >= 2, "vocab_size must be >= 2");
    require(turn_marks >= 1, "turn_marks must be >= 1");
    require(max_frame_axis >= 1, "max_frame_axis must be >= 1");
    require(rope_base > 1.0, "rope_base must exceed 1");
  }

  /// Sorted key=value lines; also the hashed identity of the checkpoint.
  std::string to_text() const {
    std::ostringstream out;
    out.precision(17);
    out << "heads=" << heads << "\nlayers=" << layers << "\nmax_frame_axis=" << max_frame_axis
        << "\nmodel_dim=" << model_dim << "\npatch=" << patch << "\nrope_base=" << rope_base
        << "\nturn_marks=" << turn_marks << "\nvocab_size=" << vocab_size << "\n";
    return out.str();
  }

  static ModelConfig from_text(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      require(eq != std::string::npos, "bad model config line '" + line + "'");
      const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      try {
        if (key == "heads") c.heads = std::stoi(val);
        else if (key == "layers") c.layers = std::stoi(val);
        else if (key == "max_frame_axis") c.max_frame_axis = std::stoi(val);
        else if (key == "model_dim") c.model_dim = std::stoi(val);
        else if (key == "patch") c.patch = std::stoi(val);
        else if (key == "rope_base") c.rope_base = std::stod(val);
        else if (key == "turn_marks") c.turn_marks = std::stoi(val);
        else if (key == "vocab_size") c.vocab_size = std::stoi(val);
        else throw ValidationError("unknown model config key '" + key + "'");
      } catch (const std::logic_error& e) {
        if (dynamic_cast<const ValidationError*>(&e)) throw;
        throw ValidationError("bad value for model config key '" + key + "'");
      }
    }
    c.validate();
    return c;
  }

  uint64_t hash() const { return fnv1a(to_text()); }
  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form parameter count.
inline int64_t count_params(const ModelConfig& c) {
  const int64_t d = c.model_dim, p = c.patch_dim(), v = c.vocab_size, m = c.turn_marks, l = c.layers;
  const int64_t embeddings = v * d + m * d + p * d + d;
  const int64_t time = 2 * (d * d + d);
  const int64_t per_stream = 18 * d * d + 15 * d;
  const int64_t final_layer = 2 * d * d + 2 * d + d * p + p;
  return embeddings + time + 2 * l * per_stream + final_layer;
}

template <typename T>
struct ModelParams {
  ModelConfig config;
  std::map<std::string, Mat<T>> tensors;

  Mat<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    require(it != tensors.end(), "no parameter named '" + name + "'");
    return it->second;
  }
  const Mat<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), "no parameter named '" + name + "'");
    return it->second;
  }
  int64_t size() const {
    int64_t n = 0;
    for (const auto& [name, m] : tensors) n += m.size();
    return n;
  }
  bool all_finite() const {
    for (const auto& [name, m] : tensors)
      if (!m.allFinite()) return false;
    return true;
  }
  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    for (const auto& [name, m] : tensors) out.tensors[name] = m.template cast<U>();
    return out;
  }
};

template <typename T>
using Gradients = std::map<std::string, Mat<T>>;

inline std::string layer_prefix(int l, bool image) {
  return "layers." + std::to_string(l) + (image ? ".image." : ".text.");
}

/// Shapes of every tensor, keyed by name.
inline std::map<std::string, std::pair<int, int>> param_shapes(const ModelConfig& c) {
  const int d = c.model_dim, p = c.patch_dim();
  std::map<std::string, std::pair<int, int>> s;
  s["text.embed"] = {c.vocab_size, d};
  s["text.turn"] = {c.turn_marks, d};
  s["image.in.w"] = {p, d};
  s["image.in.b"] = {1, d};
  s["time.fc1.w"] = {d, d};
  s["time.fc1.b"] = {1, d};
  s["time.fc2.w"] = {d, d};
  s["time.fc2.b"] = {1, d};
  for (int l = 0; l < c.layers; ++l)
    for (bool image : {false, true}) {
      const std::string pre = layer_prefix(l, image);
      s[pre + "mod.w"] = {d, 6 * d};
      s[pre + "mod.b"] = {1, 6 * d};
      s[pre + "qkv.w"] = {d, 3 * d};
      s[pre + "qkv.b"] = {1, 3 * d};
      s[pre + "out.w"] = {d, d};
      s[pre + "out.b"] = {1, d};
      s[pre + "fc1.w"] = {d, 4 * d};
      s[pre + "fc1.b"] = {1, 4 * d};
      s[pre + "fc2.w"] = {4 * d, d};
      s[pre + "fc2.b"] = {1, d};
    }
  s["final.mod.w"] = {d, 2 * d};
  s["final.mod.b"] = {1, 2 * d};
  s["head.w"] = {d, p};
  s["head.b"] = {1, p};
  return s;
}

/// Seeded initialization: weights N(0, 1/fan_in), embeddings N(0, 1),
/// biases and every modulation projection zero.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, uint64_t seed) {
  config.validate();
  ModelParams<T> params;
  params.config = config;
  Rng rng(seed);
  for (const auto& [name, shape] : param_shapes(config)) {
    Mat<T> m = Mat<T>::Zero(shape.first, shape.second);
    const bool zero = name.ends_with(".b") || name.find("mod.") != std::string::npos;
    if (!zero) {
      const bool embedding = name == "text.embed" || name == "text.turn";
      const double stddev = embedding ? 1.0 : 1.0 / std::sqrt(static_cast<double>(shape.first));
      for (int i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * rng.normal());
    }
    params.tensors.emplace(name, std::move(m));
  }
  return params;
}

template <typename T>
Gradients<T> zero_gradients(const ModelParams<T>& params) {
  Gradients<T> g;
  for (const auto& [name, m] : params.tensors) g.emplace(name, Mat<T>::Zero(m.rows(), m.cols()));
  return g;
}

// ---------------------------------------------------------------------------
// Rotary embedding.

/// Pair j of a head rotates by positions[axis[j]] * inv_freq[j].
struct RopeAllocation {
  std::vector<int> axis;
  std::vector<double> inv_freq;

  /// `axes` is 1 (all pairs on component 0) or 3 (split 1:1:1, remainder to
  /// component 0). Frequencies restart within each axis.
  static RopeAllocation make(int head_dim, int axes, double base = 10000.0) {
    require(head_dim % 2 == 0, "head_dim must be even");
    require(axes == 1 || axes == 3, "rope axes must be 1 or 3");
    const int pairs = head_dim / 2;
    std::vector<int> counts(3, 0);
    if (axes == 1) {
      counts[0] = pairs;
    } else {
      counts[1] = counts[2] = pairs / 3;
      counts[0] = pairs - 2 * (pairs / 3);
    }
    RopeAllocation a;
    for (int ax = 0; ax < 3; ++ax)
      for (int j = 0; j < counts[static_cast<size_t>(ax)]; ++j) {
        a.axis.push_back(ax);
        a.inv_freq.push_back(std::pow(base, -static_cast<double>(j) / counts[static_cast<size_t>(ax)]));
      }
    return a;
  }
  int pairs() const { return static_cast<int>(axis.size()); }
};

/// Rotates each row (a head_dim vector) of `v` in place; `inverse` applies
/// the transpose rotation.
template <typename T>
void rope_rotate(Eigen::Ref<Mat<T>> v, const std::vector<Position>& positions, const RopeAllocation& alloc,
                 bool inverse = false) {
  require(static_cast<size_t>(v.rows()) == positions.size(), "rope: one position per row");
  require(v.cols() == 2 * alloc.pairs(), "rope: width must equal 2 * pairs");
  for (int i = 0; i < v.rows(); ++i)
    for (int j = 0; j < alloc.pairs(); ++j) {
      const double angle = positions[static_cast<size_t>(i)][static_cast<size_t>(alloc.axis[static_cast<size_t>(j)])] *
                           alloc.inv_freq[static_cast<size_t>(j)];
      const T c = static_cast<T>(std::cos(angle));
      const T s = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
      const T a = v(i, 2 * j), b = v(i, 2 * j + 1);
      v(i, 2 * j) = a * c - b * s;
      v(i, 2 * j + 1) = a * s + b * c;
    }
}

// ---------------------------------------------------------------------------
// Elementwise helpers.

namespace detail {

template <typename T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}
template <typename T>
T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::tanh(T(kGeluC) * (x + T(0.044715) * x * x * x)));
}
template <typename T>
T gelu_grad(T x) {
  const T th = std::tanh(T(kGeluC) * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * T(kGeluC) * (T(1) + T(3 * 0.044715) * x * x);
}

inline constexpr double kLayerNormEps = 1e-6;

/// Row-wise normalization without affine terms; returns 1/std per row.
template <typename T>
void layer_norm(const Mat<T>& x, Mat<T>& xhat, std::vector<T>& rstd) {
  const int n = static_cast<int>(x.rows());
  xhat.resize(x.rows(), x.cols());
  rstd.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd[static_cast<size_t>(i)] = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
  }
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dxhat, const Mat<T>& xhat, const std::vector<T>& rstd) {
  Mat<T> dx(dxhat.rows(), dxhat.cols());
  for (int i = 0; i < dxhat.rows(); ++i) {
    const T m1 = dxhat.row(i).mean();
    const T m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
    dx.row(i) = rstd[static_cast<size_t>(i)] * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

/// Sinusoidal embedding of t * 1000: [cos(w_i s), sin(w_i s)].
template <typename T>
Mat<T> timestep_embedding(const std::vector<double>& ts, int dim) {
  const int half = dim / 2;
  Mat<T> e = Mat<T>::Zero(static_cast<int>(ts.size()), dim);
  for (size_t g = 0; g < ts.size(); ++g)
    for (int i = 0; i < half; ++i) {
      const double w = std::exp(-std::log(10000.0) * i / half);
      e(static_cast<int>(g), i) = static_cast<T>(std::cos(ts[g] * 1000.0 * w));
      e(static_cast<int>(g), half + i) = static_cast<T>(std::sin(ts[g] * 1000.0 * w));
    }
  return e;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// The network.

struct ForwardOptions {
  bool keep_cache = false;   // required before backward()
  bool all_hidden = false;   // fill Forward::hidden for every token
  bool all_patches = false;  // head output for every image token, not just loss tokens
};

template <typename T>
struct ForwardResult {
  Mat<T> velocity;          // one row per output token, in sequence order
  std::vector<int> tokens;  // sequence index of each velocity row
  Mat<T> hidden;            // final residual stream in sequence order (all_hidden)
};

template <typename T>
struct BackwardResult {
  Gradients<T> grads;
  Mat<T> d_image_inputs;  // same rows as PackedSequence::image_inputs
};

template <typename T>
class Transformer {
 public:
  explicit Transformer(const ModelParams<T>& params)
      : p_(params),
        cfg_(params.config),
        rope_text_(RopeAllocation::make(cfg_.head_dim(), 1, cfg_.rope_base)),
        rope_image_(RopeAllocation::make(cfg_.head_dim(), 3, cfg_.rope_base)) {
    cfg_.validate();
    const auto shapes = param_shapes(cfg_);
    require(shapes.size() == params.tensors.size(), "parameter set does not match the config");
    for (const auto& [name, shape] : shapes) {
      const Mat<T>& m = params.at(name);
      require(m.rows() == shape.first && m.cols() == shape.second, "parameter '" + name + "' has wrong shape");
    }
  }

  const ModelConfig& config() const { return cfg_; }

  ForwardResult<T> forward(const PackedSequence& seq, const ForwardOptions& opt = {}) {
    validate_sequence(seq);
    prepare(seq, opt);
    const int d = cfg_.model_dim;
    Mat<T> x = embed(seq);
    caches_.assign(static_cast<size_t>(cfg_.layers), {});
    for (int l = 0; l < cfg_.layers; ++l) x = layer_forward(l, x, caches_[static_cast<size_t>(l)]);

    // Final modulation and head on the selected image tokens.
    ForwardResult<T> out;
    final_x_ = x;
    detail::layer_norm(x, final_xhat_, final_rstd_);
    const Mat<T> fmod = cond_act_ * p_.at("final.mod.w") + p_.at("final.mod.b").replicate(groups(), 1);
    const int n_out = static_cast<int>(out_rows_.size());
    final_h_.resize(n_out, d);
    for (int r = 0; r < n_out; ++r) {
      const int i = out_rows_[static_cast<size_t>(r)];
      const int g = group_[static_cast<size_t>(i)];
      final_h_.row(r) = final_xhat_.row(i).array() * (T(1) + fmod.row(g).segment(d, d).array()) +
                        fmod.row(g).segment(0, d).array();
    }
    out.velocity = final_h_ * p_.at("head.w") + p_.at("head.b").replicate(n_out, 1);
    for (int r : out_rows_) out.tokens.push_back(perm_[static_cast<size_t>(r)]);
    if (opt.all_hidden) {
      out.hidden.resize(n_, d);
      for (int i = 0; i < n_; ++i) out.hidden.row(perm_[static_cast<size_t>(i)]) = x.row(i);
    }
    if (!opt.keep_cache) caches_.clear();
    cached_ = opt.keep_cache;
    return out;
  }

  /// Gradients of sum(d_velocity .* velocity) from the last cached forward.
  BackwardResult<T> backward(const Mat<T>& d_velocity) {
    require(cached_, "backward() needs forward() with keep_cache");
    require(d_velocity.rows() == static_cast<int>(out_rows_.size()) && d_velocity.cols() == cfg_.patch_dim(),
            "d_velocity shape mismatch");
    const int d = cfg_.model_dim;
    BackwardResult<T> res;
    res.grads = zero_gradients(p_);
    Gradients<T>& g = res.grads;
    d_cond_act_ = Mat<T>::Zero(groups(), d);

    // Head and final modulation.
    g["head.w"] += final_h_.transpose() * d_velocity;
    g["head.b"] += d_velocity.colwise().sum();
    const Mat<T> dh = d_velocity * p_.at("head.w").transpose();
    const Mat<T> fmod = cond_act_ * p_.at("final.mod.w") + p_.at("final.mod.b").replicate(groups(), 1);
    Mat<T> dfmod = Mat<T>::Zero(groups(), 2 * d);
    Mat<T> dxhat = Mat<T>::Zero(n_, d);
    for (size_t r = 0; r < out_rows_.size(); ++r) {
      const int i = out_rows_[r];
      const int gi = group_[static_cast<size_t>(i)];
      const auto dhr = dh.row(static_cast<int>(r)).array();
      dfmod.row(gi).segment(0, d) += dhr.matrix();
      dfmod.row(gi).segment(d, d) += (dhr * final_xhat_.row(i).array()).matrix();
      dxhat.row(i) = dhr * (T(1) + fmod.row(gi).segment(d, d).array());
    }
    g["final.mod.w"] += cond_act_.transpose() * dfmod;
    g["final.mod.b"] += dfmod.colwise().sum();
    d_cond_act_ += dfmod * p_.at("final.mod.w").transpose();
    Mat<T> dx = detail::layer_norm_backward(dxhat, final_xhat_, final_rstd_);

    for (int l = cfg_.layers - 1; l >= 0; --l) dx = layer_backward(l, dx, caches_[static_cast<size_t>(l)], g);

    time_backward(g);
    res.d_image_inputs = embed_backward(dx, g);
    return res;
  }

  /// Keys and values of every visible context token at every layer, for
  /// generating one new image-pathway block after `prefix`.
  struct PrefixCache {
    std::vector<Mat<T>> k, v;  // per layer, rotated keys / values of visible prefix tokens
    int next_slot = 0;
    int next_frame_axis = 0;
    int tokens = 0;
  };

  PrefixCache build_prefix(const PackedSequence& prefix) {
    ForwardOptions opt;
    opt.keep_cache = true;
    forward(prefix, opt);
    PrefixCache pc;
    std::vector<int> visible;
    for (int i = 0; i < n_; ++i)
      if (!prefix.blocks[static_cast<size_t>(block_[static_cast<size_t>(i)])].noisy()) visible.push_back(i);
    const int d = cfg_.model_dim;
    for (const auto& c : caches_) {
      Mat<T> k(static_cast<int>(visible.size()), d), v(static_cast<int>(visible.size()), d);
      for (size_t r = 0; r < visible.size(); ++r) {
        k.row(static_cast<int>(r)) = c.k.row(visible[r]);
        v.row(static_cast<int>(r)) = c.v.row(visible[r]);
      }
      pc.k.push_back(std::move(k));
      pc.v.push_back(std::move(v));
    }
    for (const auto& b : prefix.blocks) pc.next_slot = std::max(pc.next_slot, b.slot + 1);
    for (size_t i = 0; i < prefix.positions.size(); ++i)
      if (prefix.token_kind[i] == TokenKind::kPatch)
        pc.next_frame_axis = std::max(pc.next_frame_axis, prefix.positions[i][0] + 1);
    pc.tokens = n_;
    caches_.clear();
    cached_ = false;
    return pc;
  }

  /// Velocity for a noisy image-pathway block appended after the cached
  /// prefix. `positions` are the block's (frame_axis, row, col) triples.
  Mat<T> predict_block(const PrefixCache& pc, const Mat<T>& inputs, double t, const std::vector<Position>& positions) {
    require(inputs.cols() == cfg_.patch_dim(), "block input width mismatch");
    require(static_cast<size_t>(inputs.rows()) == positions.size(), "one position per block token");
    const int d = cfg_.model_dim, hd = cfg_.head_dim(), nb = static_cast<int>(inputs.rows());
    cond_t_ = {t};
    compute_cond();
    Mat<T> x = inputs * p_.at("image.in.w") + p_.at("image.in.b").replicate(nb, 1);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string pre = layer_prefix(l, true);
      const Mat<T> mod = cond_act_ * p_.at(pre + "mod.w") + p_.at(pre + "mod.b");
      auto chunk = [&](int c) -> RowVec<T> { return mod.row(0).segment(c * d, d); };
      Mat<T> xhat;
      std::vector<T> rstd;
      detail::layer_norm(x, xhat, rstd);
      Mat<T> h = modulate(xhat, chunk(0), chunk(1));
      const Mat<T> qkv = h * p_.at(pre + "qkv.w") + p_.at(pre + "qkv.b").replicate(nb, 1);
      Mat<T> q = qkv.leftCols(d), k = qkv.middleCols(d, d), v = qkv.rightCols(d);
      rotate_heads(q, positions, rope_image_, false);
      rotate_heads(k, positions, rope_image_, false);
      const int nc = static_cast<int>(pc.k[static_cast<size_t>(l)].rows());
      Mat<T> kall(nc + nb, d), vall(nc + nb, d);
      kall << pc.k[static_cast<size_t>(l)], k;
      vall << pc.v[static_cast<size_t>(l)], v;
      Mat<T> o(nb, d);
      for (int hh = 0; hh < cfg_.heads; ++hh) {
        Mat<T> s = q.middleCols(hh * hd, hd) * kall.middleCols(hh * hd, hd).transpose() * scale;
        softmax_rows(s);
        o.middleCols(hh * hd, hd) = s * vall.middleCols(hh * hd, hd);
      }
      const Mat<T> y = o * p_.at(pre + "out.w") + p_.at(pre + "out.b").replicate(nb, 1);
      x += (y.array().rowwise() * chunk(2).array()).matrix();
      detail::layer_norm(x, xhat, rstd);
      h = modulate(xhat, chunk(3), chunk(4));
      Mat<T> f1 = h * p_.at(pre + "fc1.w") + p_.at(pre + "fc1.b").replicate(nb, 1);
      f1 = f1.unaryExpr([](T a) { return detail::gelu(a); });
      const Mat<T> f2 = f1 * p_.at(pre + "fc2.w") + p_.at(pre + "fc2.b").replicate(nb, 1);
      x += (f2.array().rowwise() * chunk(5).array()).matrix();
    }
    Mat<T> xhat;
    std::vector<T> rstd;
    detail::layer_norm(x, xhat, rstd);
    const Mat<T> fmod = cond_act_ * p_.at("final.mod.w") + p_.at("final.mod.b");
    const Mat<T> hf = modulate(xhat, fmod.row(0).segment(0, d), fmod.row(0).segment(d, d));
    return hf * p_.at("head.w") + p_.at("head.b").replicate(nb, 1);
  }

 private:
  struct LayerCache {
    Mat<T> xhat1, h1, q, k, v, o, y, xhat2, h2, f1, g, f2, mod_text, mod_image;
    std::vector<T> rstd1, rstd2;
    std::vector<std::vector<Mat<T>>> probs;  // [block][head]
  };

  int groups() const { return static_cast<int>(cond_t_.size()); }

  void validate_sequence(const PackedSequence& seq) const {
    require(seq.patch == cfg_.patch, "sequence patch " + std::to_string(seq.patch) + " != model patch " +
                                         std::to_string(cfg_.patch));
    require(seq.size() > 0, "empty sequence");
    require(seq.image_inputs.cols() == cfg_.patch_dim(), "image input width mismatch");
    require(seq.positions.size() == seq.token_block.size() && seq.token_kind.size() == seq.token_block.size() &&
                seq.token_code.size() == seq.token_block.size() && seq.loss_mask.size() == seq.token_block.size(),
            "per-token arrays disagree in length");
    for (int i = 0; i < seq.size(); ++i) {
      const auto k = seq.token_kind[static_cast<size_t>(i)];
      const int code = seq.token_code[static_cast<size_t>(i)];
      if (k == TokenKind::kWord) require(code >= 0 && code < cfg_.vocab_size, "token id out of vocabulary");
      if (k == TokenKind::kTurn) require(code >= 0 && code < cfg_.turn_marks, "turn mark out of range");
      if (k == TokenKind::kPatch) {
        require(code >= 0 && code < seq.image_inputs.rows(), "image row out of range");
        require(seq.positions[static_cast<size_t>(i)][0] < cfg_.max_frame_axis, "frame axis beyond max_frame_axis");
      }
    }
  }

  /// Internal order: text tokens, then image tokens, each in sequence order.
  /// Blocks stay contiguous because a block holds one modality.
  void prepare(const PackedSequence& seq, const ForwardOptions& opt) {
    n_ = seq.size();
    perm_.clear();
    for (int pass = 0; pass < 2; ++pass)
      for (int i = 0; i < n_; ++i)
        if ((seq.token_kind[static_cast<size_t>(i)] == TokenKind::kPatch) == (pass == 1)) perm_.push_back(i);
    n_text_ = 0;
    while (n_text_ < n_ && seq.token_kind[static_cast<size_t>(perm_[static_cast<size_t>(n_text_)])] != TokenKind::kPatch)
      ++n_text_;
    block_.resize(static_cast<size_t>(n_));
    positions_.resize(static_cast<size_t>(n_));
    for (int i = 0; i < n_; ++i) {
      block_[static_cast<size_t>(i)] = seq.token_block[static_cast<size_t>(perm_[static_cast<size_t>(i)])];
      positions_[static_cast<size_t>(i)] = seq.positions[static_cast<size_t>(perm_[static_cast<size_t>(i)])];
    }
    // Block ranges in internal order.
    const int nb = static_cast<int>(seq.blocks.size());
    range_.assign(static_cast<size_t>(nb), {n_, 0});
    for (int i = 0; i < n_; ++i) {
      auto& r = range_[static_cast<size_t>(block_[static_cast<size_t>(i)])];
      r.first = std::min(r.first, i);
      r.second = std::max(r.second, i + 1);
    }
    visible_.assign(static_cast<size_t>(nb), {});
    const AttentionMask mask = seq.attention_mask();
    for (int b = 0; b < nb; ++b)
      for (int k = 0; k < nb; ++k)
        if (mask.block_allowed(b, k)) visible_[static_cast<size_t>(b)].push_back(k);
    // Conditioning groups: one per distinct timestep.
    cond_t_.clear();
    group_.resize(static_cast<size_t>(n_));
    for (int i = 0; i < n_; ++i) {
      const double t = seq.blocks[static_cast<size_t>(block_[static_cast<size_t>(i)])].t;
      auto it = std::find(cond_t_.begin(), cond_t_.end(), t);
      if (it == cond_t_.end()) {
        cond_t_.push_back(t);
        it = cond_t_.end() - 1;
      }
      group_[static_cast<size_t>(i)] = static_cast<int>(it - cond_t_.begin());
    }
    compute_cond();
    out_rows_.clear();
    for (int i = n_text_; i < n_; ++i)
      if (opt.all_patches || seq.loss_mask[static_cast<size_t>(perm_[static_cast<size_t>(i)])]) out_rows_.push_back(i);
    // Image inputs in internal order.
    image_in_.resize(n_ - n_text_, cfg_.patch_dim());
    image_row_.resize(static_cast<size_t>(n_ - n_text_));
    for (int i = n_text_; i < n_; ++i) {
      const int row = seq.token_code[static_cast<size_t>(perm_[static_cast<size_t>(i)])];
      image_row_[static_cast<size_t>(i - n_text_)] = row;
      image_in_.row(i - n_text_) = seq.image_inputs.row(row).template cast<T>();
    }
    text_codes_.resize(static_cast<size_t>(n_text_));
    text_turn_.resize(static_cast<size_t>(n_text_));
    for (int i = 0; i < n_text_; ++i) {
      const int s = perm_[static_cast<size_t>(i)];
      text_codes_[static_cast<size_t>(i)] = seq.token_code[static_cast<size_t>(s)];
      text_turn_[static_cast<size_t>(i)] = seq.token_kind[static_cast<size_t>(s)] == TokenKind::kTurn;
    }
    image_rows_total_ = static_cast<int>(seq.image_inputs.rows());
  }

  void compute_cond() {
    temb_ = detail::timestep_embedding<T>(cond_t_, cfg_.model_dim);
    const int g = groups();
    time_a1_ = temb_ * p_.at("time.fc1.w") + p_.at("time.fc1.b").replicate(g, 1);
    time_s1_ = time_a1_.unaryExpr([](T a) { return detail::silu(a); });
    cond_ = time_s1_ * p_.at("time.fc2.w") + p_.at("time.fc2.b").replicate(g, 1);
    cond_act_ = cond_.unaryExpr([](T a) { return detail::silu(a); });
  }

  Mat<T> embed(const PackedSequence&) {
    Mat<T> x(n_, cfg_.model_dim);
    const Mat<T>& words = p_.at("text.embed");
    const Mat<T>& turns = p_.at("text.turn");
    for (int i = 0; i < n_text_; ++i)
      x.row(i) = text_turn_[static_cast<size_t>(i)] ? turns.row(text_codes_[static_cast<size_t>(i)])
                                                    : words.row(text_codes_[static_cast<size_t>(i)]);
    if (n_ > n_text_)
      x.bottomRows(n_ - n_text_) =
          image_in_ * p_.at("image.in.w") + p_.at("image.in.b").replicate(n_ - n_text_, 1);
    return x;
  }

  static Mat<T> modulate(const Mat<T>& xhat, const RowVec<T>& shift, const RowVec<T>& scale) {
    return ((xhat.array().rowwise() * (scale.array() + T(1))).rowwise() + shift.array()).matrix();
  }

  void rotate_heads(Mat<T>& m, const std::vector<Position>& pos, const RopeAllocation& alloc, bool inverse) const {
    const int hd = cfg_.head_dim();
    for (int h = 0; h < cfg_.heads; ++h) {
      Mat<T> block = m.middleCols(h * hd, hd);
      rope_rotate<T>(block, pos, alloc, inverse);
      m.middleCols(h * hd, hd) = block;
    }
  }

  /// RoPE over internal order: text rows use the 1D allocation.
  void rope_all(Mat<T>& m, bool inverse) const {
    if (n_text_ > 0) {
      Mat<T> t = m.topRows(n_text_);
      std::vector<Position> pos(positions_.begin(), positions_.begin() + n_text_);
      rotate_heads(t, pos, rope_text_, inverse);
      m.topRows(n_text_) = t;
    }
    if (n_ > n_text_) {
      Mat<T> im = m.bottomRows(n_ - n_text_);
      std::vector<Position> pos(positions_.begin() + n_text_, positions_.end());
      rotate_heads(im, pos, rope_image_, inverse);
      m.bottomRows(n_ - n_text_) = im;
    }
  }

  static void softmax_rows(Mat<T>& s) {
    for (int i = 0; i < s.rows(); ++i) {
      const T mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp();
      s.row(i) /= s.row(i).sum();
    }
  }

  /// Per-token modulation rows for modality-split weights.
  Mat<T> token_mod(const Mat<T>& mod_text, const Mat<T>& mod_image) const {
    Mat<T> out(n_, mod_text.cols());
    for (int i = 0; i < n_; ++i)
      out.row(i) = (i < n_text_ ? mod_text : mod_image).row(group_[static_cast<size_t>(i)]);
    return out;
  }

  /// Y = X W + b with separate weights for the text rows and image rows.
  Mat<T> split_linear(const Mat<T>& x, int l, const std::string& name) const {
    Mat<T> y(x.rows(), p_.at(layer_prefix(l, false) + name + ".w").cols());
    if (n_text_ > 0)
      y.topRows(n_text_) = x.topRows(n_text_) * p_.at(layer_prefix(l, false) + name + ".w") +
                           p_.at(layer_prefix(l, false) + name + ".b").replicate(n_text_, 1);
    if (n_ > n_text_)
      y.bottomRows(n_ - n_text_) = x.bottomRows(n_ - n_text_) * p_.at(layer_prefix(l, true) + name + ".w") +
                                   p_.at(layer_prefix(l, true) + name + ".b").replicate(n_ - n_text_, 1);
    return y;
  }

  Mat<T> split_linear_backward(const Mat<T>& x, const Mat<T>& dy, int l, const std::string& name,
                               Gradients<T>& g) const {
    Mat<T> dx(dy.rows(), x.cols());
    if (n_text_ > 0) {
      const std::string pre = layer_prefix(l, false) + name;
      g[pre + ".w"] += x.topRows(n_text_).transpose() * dy.topRows(n_text_);
      g[pre + ".b"] += dy.topRows(n_text_).colwise().sum();
      dx.topRows(n_text_) = dy.topRows(n_text_) * p_.at(pre + ".w").transpose();
    }
    if (n_ > n_text_) {
      const std::string pre = layer_prefix(l, true) + name;
      const int ni = n_ - n_text_;
      g[pre + ".w"] += x.bottomRows(ni).transpose() * dy.bottomRows(ni);
      g[pre + ".b"] += dy.bottomRows(ni).colwise().sum();
      dx.bottomRows(ni) = dy.bottomRows(ni) * p_.at(pre + ".w").transpose();
    }
    return dx;
  }

  /// Gathers the rows of the given blocks into one matrix.
  Mat<T> gather(const Mat<T>& m, const std::vector<int>& blocks) const {
    int rows = 0;
    for (int b : blocks) rows += range_[static_cast<size_t>(b)].second - range_[static_cast<size_t>(b)].first;
    Mat<T> out(rows, m.cols());
    int r = 0;
    for (int b : blocks) {
      const auto [s, e] = range_[static_cast<size_t>(b)];
      out.middleRows(r, e - s) = m.middleRows(s, e - s);
      r += e - s;
    }
    return out;
  }

  void scatter_add(Mat<T>& m, const Mat<T>& rows, const std::vector<int>& blocks) const {
    int r = 0;
    for (int b : blocks) {
      const auto [s, e] = range_[static_cast<size_t>(b)];
      m.middleRows(s, e - s) += rows.middleRows(r, e - s);
      r += e - s;
    }
  }

  Mat<T> layer_forward(int l, const Mat<T>& x, LayerCache& c) {
    const int d = cfg_.model_dim, hd = cfg_.head_dim();
    c.mod_text = cond_act_ * p_.at(layer_prefix(l, false) + "mod.w") +
                 p_.at(layer_prefix(l, false) + "mod.b").replicate(groups(), 1);
    c.mod_image = cond_act_ * p_.at(layer_prefix(l, true) + "mod.w") +
                  p_.at(layer_prefix(l, true) + "mod.b").replicate(groups(), 1);
    const Mat<T> mod = token_mod(c.mod_text, c.mod_image);

    detail::layer_norm(x, c.xhat1, c.rstd1);
    c.h1 = (c.xhat1.array() * (T(1) + mod.middleCols(d, d).array()) + mod.leftCols(d).array()).matrix();
    const Mat<T> qkv = split_linear(c.h1, l, "qkv");
    c.q = qkv.leftCols(d);
    c.k = qkv.middleCols(d, d);
    c.v = qkv.rightCols(d);
    rope_all(c.q, false);
    rope_all(c.k, false);

    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    c.o = Mat<T>::Zero(n_, d);
    c.probs.assign(range_.size(), {});
    for (size_t b = 0; b < range_.size(); ++b) {
      const auto [s, e] = range_[b];
      if (e <= s) continue;
      const Mat<T> kv = gather(c.k, visible_[b]);
      const Mat<T> vv = gather(c.v, visible_[b]);
      for (int h = 0; h < cfg_.heads; ++h) {
        Mat<T> p = c.q.block(s, h * hd, e - s, hd) * kv.middleCols(h * hd, hd).transpose() * scale;
        softmax_rows(p);
        c.o.block(s, h * hd, e - s, hd) = p * vv.middleCols(h * hd, hd);
        c.probs[b].push_back(std::move(p));
      }
    }
    c.y = split_linear(c.o, l, "out");
    Mat<T> xm = x + (c.y.array() * mod.middleCols(2 * d, d).array()).matrix();

    detail::layer_norm(xm, c.xhat2, c.rstd2);
    c.h2 = (c.xhat2.array() * (T(1) + mod.middleCols(4 * d, d).array()) + mod.middleCols(3 * d, d).array()).matrix();
    c.f1 = split_linear(c.h2, l, "fc1");
    c.g = c.f1.unaryExpr([](T a) { return detail::gelu(a); });
    c.f2 = split_linear(c.g, l, "fc2");
    xm += (c.f2.array() * mod.middleCols(5 * d, d).array()).matrix();
    return xm;
  }

  Mat<T> layer_backward(int l, const Mat<T>& dout, const LayerCache& c, Gradients<T>& g) {
    const int d = cfg_.model_dim, hd = cfg_.head_dim();
    const Mat<T> mod = token_mod(c.mod_text, c.mod_image);
    Mat<T> dmod = Mat<T>::Zero(n_, 6 * d);

    // MLP branch.
    dmod.middleCols(5 * d, d) = (dout.array() * c.f2.array()).matrix();
    const Mat<T> df2 = (dout.array() * mod.middleCols(5 * d, d).array()).matrix();
    const Mat<T> dg = split_linear_backward(c.g, df2, l, "fc2", g);
    const Mat<T> df1 = (dg.array() * c.f1.unaryExpr([](T a) { return detail::gelu_grad(a); }).array()).matrix();
    const Mat<T> dh2 = split_linear_backward(c.h2, df1, l, "fc1", g);
    dmod.middleCols(3 * d, d) = dh2;
    dmod.middleCols(4 * d, d) = (dh2.array() * c.xhat2.array()).matrix();
    const Mat<T> dxhat2 = (dh2.array() * (T(1) + mod.middleCols(4 * d, d).array())).matrix();
    Mat<T> dxm = dout + detail::layer_norm_backward(dxhat2, c.xhat2, c.rstd2);

    // Attention branch.
    dmod.middleCols(2 * d, d) = (dxm.array() * c.y.array()).matrix();
    const Mat<T> dy = (dxm.array() * mod.middleCols(2 * d, d).array()).matrix();
    const Mat<T> dob = split_linear_backward(c.o, dy, l, "out", g);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    Mat<T> dq = Mat<T>::Zero(n_, d), dk = Mat<T>::Zero(n_, d), dv = Mat<T>::Zero(n_, d);
    for (size_t b = 0; b < range_.size(); ++b) {
      const auto [s, e] = range_[b];
      if (e <= s) continue;
      const Mat<T> kv = gather(c.k, visible_[b]);
      const Mat<T> vv = gather(c.v, visible_[b]);
      Mat<T> dkv = Mat<T>::Zero(kv.rows(), d), dvv = Mat<T>::Zero(vv.rows(), d);
      for (int h = 0; h < cfg_.heads; ++h) {
        const Mat<T>& p = c.probs[b][static_cast<size_t>(h)];
        const Mat<T> dob_h = dob.block(s, h * hd, e - s, hd);
        dvv.middleCols(h * hd, hd) += p.transpose() * dob_h;
        const Mat<T> dp = dob_h * vv.middleCols(h * hd, hd).transpose();
        Mat<T> ds = p;
        for (int i = 0; i < ds.rows(); ++i) {
          const T dot = (dp.row(i).array() * p.row(i).array()).sum();
          ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
        }
        ds *= scale;
        dq.block(s, h * hd, e - s, hd) += ds * kv.middleCols(h * hd, hd);
        dkv.middleCols(h * hd, hd) += ds.transpose() * c.q.block(s, h * hd, e - s, hd);
      }
      scatter_add(dk, dkv, visible_[b]);
      scatter_add(dv, dvv, visible_[b]);
    }
    rope_all(dq, true);
    rope_all(dk, true);
    Mat<T> dqkv(n_, 3 * d);
    dqkv << dq, dk, dv;
    const Mat<T> dh1 = split_linear_backward(c.h1, dqkv, l, "qkv", g);
    dmod.leftCols(d) = dh1;
    dmod.middleCols(d, d) = (dh1.array() * c.xhat1.array()).matrix();
    const Mat<T> dxhat1 = (dh1.array() * (T(1) + mod.middleCols(d, d).array())).matrix();
    Mat<T> dx = dxm + detail::layer_norm_backward(dxhat1, c.xhat1, c.rstd1);

    // Modulation projections, per conditioning group.
    Mat<T> dgroup_text = Mat<T>::Zero(groups(), 6 * d), dgroup_image = Mat<T>::Zero(groups(), 6 * d);
    for (int i = 0; i < n_; ++i) (i < n_text_ ? dgroup_text : dgroup_image).row(group_[static_cast<size_t>(i)]) += dmod.row(i);
    for (bool image : {false, true}) {
      const Mat<T>& dm = image ? dgroup_image : dgroup_text;
      const std::string pre = layer_prefix(l, image);
      g[pre + "mod.w"] += cond_act_.transpose() * dm;
      g[pre + "mod.b"] += dm.colwise().sum();
      d_cond_act_ += dm * p_.at(pre + "mod.w").transpose();
    }
    return dx;
  }

  void time_backward(Gradients<T>& g) {
    const Mat<T> dc = (d_cond_act_.array() * cond_.unaryExpr([](T a) { return detail::silu_grad(a); }).array()).matrix();
    g["time.fc2.w"] += time_s1_.transpose() * dc;
    g["time.fc2.b"] += dc.colwise().sum();
    const Mat<T> ds1 = dc * p_.at("time.fc2.w").transpose();
    const Mat<T> da1 =
        (ds1.array() * time_a1_.unaryExpr([](T a) { return detail::silu_grad(a); }).array()).matrix();
    g["time.fc1.w"] += temb_.transpose() * da1;
    g["time.fc1.b"] += da1.colwise().sum();
  }

  Mat<T> embed_backward(const Mat<T>& dx, Gradients<T>& g) {
    Mat<T>& dwords = g["text.embed"];
    Mat<T>& dturns = g["text.turn"];
    for (int i = 0; i < n_text_; ++i)
      (text_turn_[static_cast<size_t>(i)] ? dturns : dwords).row(text_codes_[static_cast<size_t>(i)]) += dx.row(i);
    Mat<T> d_inputs = Mat<T>::Zero(image_rows_total_, cfg_.patch_dim());
    if (n_ > n_text_) {
      const Mat<T> dimg = dx.bottomRows(n_ - n_text_);
      g["image.in.w"] += image_in_.transpose() * dimg;
      g["image.in.b"] += dimg.colwise().sum();
      const Mat<T> din = dimg * p_.at("image.in.w").transpose();
      for (int r = 0; r < din.rows(); ++r) d_inputs.row(image_row_[static_cast<size_t>(r)]) += din.row(r);
    }
    return d_inputs;
  }

  const ModelParams<T>& p_;
  ModelConfig cfg_;
  RopeAllocation rope_text_, rope_image_;

  // State of the last forward pass, in internal token order.
  int n_ = 0, n_text_ = 0, image_rows_total_ = 0;
  std::vector<int> perm_, block_, group_, out_rows_, image_row_, text_codes_;
  std::vector<bool> text_turn_;
  std::vector<Position> positions_;
  std::vector<std::pair<int, int>> range_;
  std::vector<std::vector<int>> visible_;
  std::vector<double> cond_t_;
  Mat<T> image_in_, temb_, time_a1_, time_s1_, cond_, cond_act_, d_cond_act_;
  Mat<T> final_x_, final_xhat_, final_h_;
  std::vector<T> final_rstd_;
  std::vector<LayerCache> caches_;
  bool cached_ = false;
};

}  // namespace ctxedit
