#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "gradprom/models.hpp"
#include "gradprom/tape.hpp"
#include "gradprom/tensor.hpp"

namespace gradprom {

enum class PixelLossKind { kMse, kL1 };

// Mean pixel-wise loss, differentiable w.r.t. pred. L1 composes as
// relu(d) + relu(-d) = |d| with the usual zero subgradient at d = 0.
inline Tensor pixel_loss(Tape& tape, PixelLossKind kind, const Tensor& pred,
                         const Tensor& target) {
  check_same_shape(pred, target, "pixel_loss");
  Tensor diff = tape.sub(pred, target);
  if (kind == PixelLossKind::kMse) return tape.mean(tape.mul(diff, diff));
  return tape.mean(tape.add(tape.relu(diff), tape.relu(tape.scale(diff, -1.0))));
}

// Mean negative log-likelihood over image-level class labels.
// logits: [N, C], labels in [0, C).
inline Tensor ce_loss_image(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw std::invalid_argument("ce_loss_image: logits must be [N, C]");
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw std::invalid_argument("ce_loss_image: label count does not match batch");
  }
  std::vector<double> onehot(logits.numel(), 0.0);
  for (int i = 0; i < n; ++i) {
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= c) {
      throw std::invalid_argument("ce_loss_image: label out of range");
    }
    onehot[static_cast<std::size_t>(i) * c + labels[static_cast<std::size_t>(i)]] = 1.0;
  }
  Tensor lsm = tape.log_softmax(logits);
  Tensor picked = tape.mul(lsm, Tensor(logits.shape(), std::move(onehot)));
  return tape.scale(tape.sum(picked), -1.0 / static_cast<double>(n));
}

// Mean per-pixel negative log-likelihood. logits: [N, K, H, W], masks flat
// [N*H*W] with class ids in [0, K).
inline Tensor ce_loss_pixel(Tape& tape, const Tensor& logits, std::span<const int> masks) {
  if (logits.rank() != 4) throw std::invalid_argument("ce_loss_pixel: logits must be [N, K, H, W]");
  const int n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t pixels = static_cast<std::size_t>(n) * h * w;
  if (masks.size() != pixels) {
    throw std::invalid_argument("ce_loss_pixel: mask size does not match logits");
  }
  Tensor channels_last = tape.permute(logits, {0, 2, 3, 1});  // [N, H, W, K]
  Tensor lsm = tape.log_softmax(channels_last);
  std::vector<double> onehot(lsm.numel(), 0.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    const int cls = masks[p];
    if (cls < 0 || cls >= k) throw std::invalid_argument("ce_loss_pixel: mask label out of range");
    onehot[p * static_cast<std::size_t>(k) + static_cast<std::size_t>(cls)] = 1.0;
  }
  Tensor picked = tape.mul(lsm, Tensor(lsm.shape(), std::move(onehot)));
  return tape.scale(tape.sum(picked), -1.0 / static_cast<double>(pixels));
}

// Unsupervised recognition loss: mse between the recognizer's activations on
// the enhanced image and on the clean image. The clean branch runs on a
// scratch tape and is detached, so it acts as a constant target and no
// gradient reaches it.
inline Tensor unsup_vr_loss(Tape& tape, const BoundParams& vr, const Tensor& enhanced,
                            const Tensor& clean, const ModelConfig& cfg) {
  check_same_shape(enhanced, clean, "unsup_vr_loss");
  Tensor z = recognizer_forward(tape, vr, enhanced, cfg);
  BoundParams frozen;
  frozen.leaves.reserve(vr.leaves.size());
  for (const auto& [name, leaf] : vr.leaves) frozen.leaves.emplace_back(name, leaf.detached());
  Tape scratch;
  Tensor target = recognizer_forward(scratch, frozen, clean.detached(), cfg).detached();
  return pixel_loss(tape, PixelLossKind::kMse, z, target);
}

}  // namespace gradprom
