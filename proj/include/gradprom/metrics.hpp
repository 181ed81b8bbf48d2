#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "gradprom/tensor.hpp"

namespace gradprom {

struct MetricsRecord {
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> accuracy;  // classifier runs
  std::optional<double> miou;      // segmenter runs
  long n_samples = 0;
};

inline std::vector<double> clamp01(std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x = std::clamp(x, 0.0, 1.0);
  return out;
}

// 10*log10(1 / MSE) with MAX = 1.0 on [0,1]-clamped copies. Zero-MSE results
// are capped at 99.0 dB so CSV output stays numeric.
inline double psnr(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "psnr");
  auto p = clamp01(pred.data());
  auto t = clamp01(target.data());
  double mse = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - t[i];
    mse += d * d;
  }
  mse /= static_cast<double>(p.size());
  if (mse < std::pow(10.0, -9.9)) return 99.0;
  return -10.0 * std::log10(mse);
}

namespace detail {

// 1-D Gaussian window, normalized.
inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  const int half = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = static_cast<double>(i - half);
    w[static_cast<std::size_t>(i)] = std::exp(-(d * d) / (2.0 * sigma * sigma));
    sum += w[static_cast<std::size_t>(i)];
  }
  for (double& v : w) v /= sum;
  return w;
}

inline int reflect(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

// Separable weighted filtering with reflection padding, in-place result.
inline std::vector<double> filter2d(const std::vector<double>& img, int h, int w,
                                    const std::vector<double>& win) {
  const int half = static_cast<int>(win.size()) / 2;
  std::vector<double> tmp(img.size()), out(img.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = -half; j <= half; ++j) {
        acc += win[static_cast<std::size_t>(j + half)] *
               img[static_cast<std::size_t>(y) * w + reflect(x + j, w)];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = -half; j <= half; ++j) {
        acc += win[static_cast<std::size_t>(j + half)] *
               tmp[static_cast<std::size_t>(reflect(y + j, h)) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  return out;
}

inline double ssim_channel(const std::vector<double>& x, const std::vector<double>& y, int h,
                           int w) {
  static const std::vector<double> win = gaussian_window(11, 1.5);
  const double c1 = 0.01 * 0.01;  // (K1*L)^2 with L = 1
  const double c2 = 0.03 * 0.03;
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  auto mu_x = filter2d(x, h, w, win);
  auto mu_y = filter2d(y, h, w, win);
  auto e_xx = filter2d(xx, h, w, win);
  auto e_yy = filter2d(yy, h, w, win);
  auto e_xy = filter2d(xy, h, w, win);
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double var_x = e_xx[i] - mu_x[i] * mu_x[i];
    const double var_y = e_yy[i] - mu_y[i] * mu_y[i];
    const double cov = e_xy[i] - mu_x[i] * mu_y[i];
    const double num = (2.0 * mu_x[i] * mu_y[i] + c1) * (2.0 * cov + c2);
    const double den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1) * (var_x + var_y + c2);
    acc += num / den;
  }
  return acc / static_cast<double>(x.size());
}

}  // namespace detail

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// L=1, reflection padding, mean over pixels, channels averaged. Inputs are
// clamped to [0,1] first. Accepts [H,W] or [C,H,W].
inline double ssim(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "ssim");
  if (pred.rank() != 2 && pred.rank() != 3) {
    throw std::invalid_argument("ssim: expected [H,W] or [C,H,W]");
  }
  const int c = pred.rank() == 3 ? pred.dim(0) : 1;
  const int h = pred.dim(pred.rank() - 2);
  const int w = pred.dim(pred.rank() - 1);
  if (h < 11 || w < 11) throw std::invalid_argument("ssim: image smaller than 11x11 window");
  auto p = clamp01(pred.data());
  auto t = clamp01(target.data());
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  double acc = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    std::vector<double> pc(p.begin() + static_cast<std::ptrdiff_t>(ch * plane),
                           p.begin() + static_cast<std::ptrdiff_t>((ch + 1) * plane));
    std::vector<double> tc(t.begin() + static_cast<std::ptrdiff_t>(ch * plane),
                           t.begin() + static_cast<std::ptrdiff_t>((ch + 1) * plane));
    acc += detail::ssim_channel(pc, tc, h, w);
  }
  return acc / static_cast<double>(c);
}

// Fraction of rows whose argmax equals the label; ties break toward the
// lowest index.
inline double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw std::invalid_argument("accuracy: logits must be [N, C]");
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw std::invalid_argument("accuracy: label count does not match batch");
  }
  int correct = 0;
  auto d = logits.data();
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < c; ++j) {
      if (d[static_cast<std::size_t>(i) * c + j] > d[static_cast<std::size_t>(i) * c + best]) best = j;
    }
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// Mean IoU over classes, aggregated from global confusion counts across the
// whole evaluation set. A class absent from both prediction and ground truth
// contributes IoU = 1. Background counts as a class.
class MiouAccumulator {
 public:
  explicit MiouAccumulator(int num_classes)
      : k_(num_classes), confusion_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
    if (num_classes < 2) throw std::invalid_argument("miou: need at least 2 classes");
  }

  // pred_logits: [N, K, H, W] (or [K, H, W]); masks flat, row-major, one
  // class id per pixel.
  void add(const Tensor& pred_logits, std::span<const int> masks) {
    const int rank = pred_logits.rank();
    if (rank != 3 && rank != 4) throw std::invalid_argument("miou: logits must be [N,K,H,W]");
    const int n = rank == 4 ? pred_logits.dim(0) : 1;
    const int k = pred_logits.dim(rank - 3);
    const int h = pred_logits.dim(rank - 2);
    const int w = pred_logits.dim(rank - 1);
    if (k != k_) throw std::invalid_argument("miou: class count mismatch");
    const std::size_t pixels = static_cast<std::size_t>(n) * h * w;
    if (masks.size() != pixels) throw std::invalid_argument("miou: mask size mismatch");
    auto d = pred_logits.data();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < plane; ++p) {
        int best = 0;
        for (int j = 1; j < k; ++j) {
          const std::size_t base = (static_cast<std::size_t>(b) * k) * plane + p;
          if (d[base + static_cast<std::size_t>(j) * plane] >
              d[base + static_cast<std::size_t>(best) * plane]) {
            best = j;
          }
        }
        const int gt = masks[static_cast<std::size_t>(b) * plane + p];
        if (gt < 0 || gt >= k_) throw std::invalid_argument("miou: mask label out of range");
        ++confusion_[static_cast<std::size_t>(gt) * k_ + best];
      }
    }
  }

  double value() const {
    double total = 0.0;
    for (int c = 0; c < k_; ++c) {
      long tp = confusion_[static_cast<std::size_t>(c) * k_ + c];
      long fp = 0, fn = 0;
      for (int o = 0; o < k_; ++o) {
        if (o == c) continue;
        fp += confusion_[static_cast<std::size_t>(o) * k_ + c];
        fn += confusion_[static_cast<std::size_t>(c) * k_ + o];
      }
      const long denom = tp + fp + fn;
      total += denom == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(denom);
    }
    return total / static_cast<double>(k_);
  }

 private:
  int k_;
  std::vector<long> confusion_;
};

inline double miou(const Tensor& pred_logits, std::span<const int> masks, int num_classes) {
  MiouAccumulator acc(num_classes);
  acc.add(pred_logits, masks);
  return acc.value();
}

}  // namespace gradprom
