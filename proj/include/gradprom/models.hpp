#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gradprom/rng.hpp"
#include "gradprom/tape.hpp"
#include "gradprom/tensor.hpp"

namespace gradprom {

enum class ModelRole { kEnhancerDenoise, kEnhancerSr, kClassifier, kSegmenter };

inline const char* role_name(ModelRole r) {
  switch (r) {
    case ModelRole::kEnhancerDenoise: return "enhancer_denoise";
    case ModelRole::kEnhancerSr: return "enhancer_sr";
    case ModelRole::kClassifier: return "classifier";
    case ModelRole::kSegmenter: return "segmenter";
  }
  return "?";
}

inline ModelRole role_from_name(std::string_view s) {
  if (s == "enhancer_denoise") return ModelRole::kEnhancerDenoise;
  if (s == "enhancer_sr") return ModelRole::kEnhancerSr;
  if (s == "classifier") return ModelRole::kClassifier;
  if (s == "segmenter") return ModelRole::kSegmenter;
  throw std::invalid_argument("unknown model role: " + std::string(s));
}

struct ModelConfig {
  ModelRole role = ModelRole::kEnhancerDenoise;
  int channels = 16;     // conv width
  int depth = 3;         // conv blocks (enhancer/classifier trunk)
  int in_channels = 1;
  int num_classes = 3;   // classifier C / segmenter K
  int sr_factor = 2;     // gamma, EnhancerSr only

  void validate() const {
    if (channels < 1 || depth < 1 || in_channels < 1) {
      throw std::invalid_argument("model config: channels/depth/in_channels must be >= 1");
    }
    if (role == ModelRole::kEnhancerSr && sr_factor != 2 && sr_factor != 4) {
      throw std::invalid_argument("model config: sr_factor must be 2 or 4");
    }
    if ((role == ModelRole::kClassifier || role == ModelRole::kSegmenter) && num_classes < 2) {
      throw std::invalid_argument("model config: num_classes must be >= 2");
    }
  }

  bool is_enhancer() const {
    return role == ModelRole::kEnhancerDenoise || role == ModelRole::kEnhancerSr;
  }
};

// Ordered named parameters. Order is fixed by the architecture definition
// and is the canonical layout of the flattened gradient vector.
struct ParameterSet {
  std::vector<std::pair<std::string, Tensor>> items;

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }

  const Tensor* find(std::string_view name) const {
    for (const auto& [n, t] : items) {
      if (n == name) return &t;
    }
    return nullptr;
  }

  bool bitwise_equal(const ParameterSet& other) const {
    if (items.size() != other.items.size()) return false;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].first != other.items[i].first) return false;
      if (!items[i].second.bitwise_equal(other.items[i].second)) return false;
    }
    return true;
  }
};

namespace detail {

inline Tensor kaiming_conv(std::uint64_t seed, const std::string& name, int cout, int cin, int k) {
  Rng rng(seed, name);
  const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
  std::vector<double> w(static_cast<std::size_t>(cout) * cin * k * k);
  for (double& v : w) v = rng.normal() * stddev;
  return Tensor({cout, cin, k, k}, std::move(w));
}

inline void push_conv(ParameterSet& ps, std::uint64_t seed, const std::string& stem, int cout,
                      int cin, int k) {
  ps.items.emplace_back(stem + ".weight", kaiming_conv(seed, stem + ".weight", cout, cin, k));
  ps.items.emplace_back(stem + ".bias", Tensor::zeros({cout}));
}

}  // namespace detail

// Deterministic Kaiming-style init. Each parameter draws from its own
// stream keyed by (seed, name), so adding a layer never perturbs the
// initialization of the others.
inline ParameterSet init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParameterSet ps;
  switch (cfg.role) {
    case ModelRole::kEnhancerDenoise:
    case ModelRole::kEnhancerSr: {
      int cin = cfg.in_channels;
      for (int b = 0; b < cfg.depth; ++b) {
        detail::push_conv(ps, seed, "block" + std::to_string(b), cfg.channels, cin, 3);
        cin = cfg.channels;
      }
      detail::push_conv(ps, seed, "out", cfg.in_channels, cfg.channels, 3);
      break;
    }
    case ModelRole::kClassifier: {
      int cin = cfg.in_channels;
      for (int b = 0; b < cfg.depth; ++b) {
        detail::push_conv(ps, seed, "block" + std::to_string(b), cfg.channels, cin, 3);
        cin = cfg.channels;
      }
      detail::push_conv(ps, seed, "head", cfg.num_classes, cfg.channels, 1);
      break;
    }
    case ModelRole::kSegmenter: {
      detail::push_conv(ps, seed, "enc0", cfg.channels, cfg.in_channels, 3);
      detail::push_conv(ps, seed, "enc1", cfg.channels, cfg.channels, 3);
      detail::push_conv(ps, seed, "dec", cfg.channels, 2 * cfg.channels, 3);
      detail::push_conv(ps, seed, "head", cfg.num_classes, cfg.channels, 3);
      break;
    }
  }
  return ps;
}

// Parameter leaves registered on one tape, in ParameterSet order.
struct BoundParams {
  std::vector<std::pair<std::string, Tensor>> leaves;

  const Tensor& at(std::string_view name) const {
    for (const auto& [n, t] : leaves) {
      if (n == name) return t;
    }
    throw std::invalid_argument("bound params: no parameter named " + std::string(name));
  }
};

inline BoundParams bind_params(Tape& tape, const ParameterSet& ps) {
  BoundParams bp;
  bp.leaves.reserve(ps.items.size());
  for (const auto& [name, t] : ps.items) bp.leaves.emplace_back(name, tape.param(t));
  return bp;
}

// Residual conv stack shared by both enhancer variants; `base` is the tensor
// the residual is added to (the input, or its nearest-neighbor upsampling).
namespace detail {
inline Tensor enhancer_trunk(Tape& tape, const BoundParams& p, const Tensor& base,
                             const ModelConfig& cfg) {
  Tensor h = base;
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string stem = "block" + std::to_string(b);
    h = tape.relu(tape.conv2d(h, p.at(stem + ".weight"), p.at(stem + ".bias"),
                              PadMode::kReflect, 1, 1));
  }
  Tensor residual = tape.conv2d(h, p.at("out.weight"), p.at("out.bias"), PadMode::kReflect, 1, 1);
  return tape.add(base, residual);
}
}  // namespace detail

// Enhancer: residual (noise-prediction) form, so zero weights give the
// identity map. Output is unclamped; metric code clamps its own copies.
inline Tensor enhancer_forward(Tape& tape, const BoundParams& params, const Tensor& batch,
                               const ModelConfig& cfg) {
  if (!cfg.is_enhancer()) throw std::invalid_argument("enhancer_forward: config is not an enhancer");
  if (batch.dim(batch.rank() - 3) != cfg.in_channels) {
    throw std::invalid_argument("enhancer_forward: channel count does not match config");
  }
  Tensor base = cfg.role == ModelRole::kEnhancerSr
                    ? tape.upsample_nearest(batch, cfg.sr_factor)
                    : batch;
  return detail::enhancer_trunk(tape, params, base, cfg);
}

// Classifier: conv blocks with 2x pooling, global average pool, 1x1-conv
// head -> [N, classes]. Segmenter: 2-level encoder/decoder with one skip
// concat -> [N, K, H, W].
inline Tensor recognizer_forward(Tape& tape, const BoundParams& params, const Tensor& batch,
                                 const ModelConfig& cfg) {
  if (batch.dim(batch.rank() - 3) != cfg.in_channels) {
    throw std::invalid_argument("recognizer_forward: channel count does not match config");
  }
  switch (cfg.role) {
    case ModelRole::kClassifier: {
      Tensor h = batch;
      for (int b = 0; b < cfg.depth; ++b) {
        const std::string stem = "block" + std::to_string(b);
        h = tape.relu(tape.conv2d(h, params.at(stem + ".weight"), params.at(stem + ".bias"),
                                  PadMode::kZero, 1, 1));
        h = tape.avgpool(h, 2);
      }
      h = tape.global_avgpool(h);
      Tensor logits = tape.conv2d(h, params.at("head.weight"), params.at("head.bias"),
                                  PadMode::kZero, 0, 1);
      const int n = batch.rank() == 4 ? batch.dim(0) : 1;
      return batch.rank() == 4 ? tape.reshape(logits, {n, cfg.num_classes})
                               : tape.reshape(logits, {cfg.num_classes});
    }
    case ModelRole::kSegmenter: {
      Tensor e0 = tape.relu(tape.conv2d(batch, params.at("enc0.weight"), params.at("enc0.bias"),
                                        PadMode::kZero, 1, 1));
      Tensor e1 = tape.relu(tape.conv2d(tape.avgpool(e0, 2), params.at("enc1.weight"),
                                        params.at("enc1.bias"), PadMode::kZero, 1, 1));
      Tensor up = tape.upsample_nearest(e1, 2);
      Tensor merged = tape.concat_channels({e0, up});
      Tensor d = tape.relu(tape.conv2d(merged, params.at("dec.weight"), params.at("dec.bias"),
                                       PadMode::kZero, 1, 1));
      return tape.conv2d(d, params.at("head.weight"), params.at("head.bias"), PadMode::kZero, 1, 1);
    }
    default:
      throw std::invalid_argument("recognizer_forward: config is not a recognizer");
  }
}

using GradientVector = std::vector<double>;

// Concatenates per-parameter gradients in ParameterSet order; parameters
// missing from the map contribute zeros.
inline GradientVector flatten_grads(const ParameterSet& ps,
                                    const std::map<std::string, Tensor>& grads) {
  GradientVector v;
  v.reserve(ps.total_size());
  for (const auto& [name, t] : ps.items) {
    auto it = grads.find(name);
    if (it == grads.end()) {
      v.insert(v.end(), t.numel(), 0.0);
    } else {
      check_same_shape(t, it->second, "flatten_grads");
      auto d = it->second.data();
      v.insert(v.end(), d.begin(), d.end());
    }
  }
  return v;
}

inline std::map<std::string, Tensor> unflatten(const GradientVector& v, const ParameterSet& ps) {
  if (v.size() != ps.total_size()) {
    throw std::invalid_argument("unflatten: vector length does not match parameter set");
  }
  std::map<std::string, Tensor> out;
  std::size_t off = 0;
  for (const auto& [name, t] : ps.items) {
    std::vector<double> slice(v.begin() + static_cast<std::ptrdiff_t>(off),
                              v.begin() + static_cast<std::ptrdiff_t>(off + t.numel()));
    out.emplace(name, Tensor(t.shape(), std::move(slice)));
    off += t.numel();
  }
  return out;
}

// Tape-level variant: pulls gradients by leaf node id in bound order.
inline GradientVector flatten_grads(const BoundParams& bound, const GradientMap& grads) {
  GradientVector v;
  for (const auto& [name, leaf] : bound.leaves) {
    auto it = grads.find(leaf.node());
    if (it == grads.end()) {
      v.insert(v.end(), leaf.numel(), 0.0);
    } else {
      auto d = it->second.data();
      v.insert(v.end(), d.begin(), d.end());
    }
  }
  return v;
}

// Rebuilds a ParameterSet with the same names/shapes from flat values.
inline ParameterSet params_from_flat(const ParameterSet& like, const GradientVector& v) {
  if (v.size() != like.total_size()) {
    throw std::invalid_argument("params_from_flat: length mismatch");
  }
  ParameterSet out;
  out.items.reserve(like.items.size());
  std::size_t off = 0;
  for (const auto& [name, t] : like.items) {
    std::vector<double> slice(v.begin() + static_cast<std::ptrdiff_t>(off),
                              v.begin() + static_cast<std::ptrdiff_t>(off + t.numel()));
    out.items.emplace_back(name, Tensor(t.shape(), std::move(slice)));
    off += t.numel();
  }
  return out;
}

inline GradientVector flatten_values(const ParameterSet& ps) {
  GradientVector v;
  v.reserve(ps.total_size());
  for (const auto& [name, t] : ps.items) {
    auto d = t.data();
    v.insert(v.end(), d.begin(), d.end());
  }
  return v;
}

}  // namespace gradprom
