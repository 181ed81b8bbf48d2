#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "gradprom/tensor.hpp"

namespace gradprom {

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kRelu,
  kSigmoid,
  kMatmul,
  kConv2d,
  kAvgPool,
  kUpsampleNearest,
  kGlobalAvgPool,
  kMean,
  kSum,
  kReshape,
  kConcatChannels,
  kLogSoftmax,
  kPermute,
};

enum class PadMode { kZero, kReflect };

// Gradients keyed by leaf node id (the id returned by Tape::param).
using GradientMap = std::unordered_map<int, Tensor>;

// Append-only reverse-mode tape. Forward primitives record one node each;
// backward() walks the nodes in exact reverse insertion order and is
// non-destructive, so several scalar losses can be differentiated against
// the same forward pass. Single-threaded per tape; distinct tapes are
// independent.
class Tape {
 public:
  // Registers a parameter leaf. The returned tensor shares the input's data
  // buffer and participates in backward().
  Tensor param(const Tensor& value) {
    if (!value.all_finite()) throw numeric_error("param: non-finite input value");
    Node n;
    n.op = Op::kLeaf;
    n.output = value;
    return record(std::move(n), /*requires_grad=*/true);
  }

  Tensor add(const Tensor& a, const Tensor& b) { return binary(Op::kAdd, a, b); }
  Tensor sub(const Tensor& a, const Tensor& b) { return binary(Op::kSub, a, b); }
  Tensor mul(const Tensor& a, const Tensor& b) { return binary(Op::kMul, a, b); }

  Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * c;
    Node n = unary_node(Op::kScale, a, Tensor(a.shape(), std::move(out)));
    n.c = c;
    return record(std::move(n));
  }

  Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = in[i] > 0.0 ? in[i] : 0.0;
      min_relu_gap_ = std::min(min_relu_gap_, std::fabs(in[i]));
    }
    return record(unary_node(Op::kRelu, a, Tensor(a.shape(), std::move(out))));
  }

  Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.numel());
    auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      double x = in[i];
      if (x >= 0.0) {
        out[i] = 1.0 / (1.0 + std::exp(-x));
      } else {
        double e = std::exp(x);
        out[i] = e / (1.0 + e);
      }
    }
    return record(unary_node(Op::kSigmoid, a, Tensor(a.shape(), std::move(out))));
  }

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
      throw std::invalid_argument("matmul: need [m x k] by [k x n], got " +
                                  shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * nn, 0.0);
    auto ad = a.data();
    auto bd = b.data();
    for (int i = 0; i < m; ++i) {
      for (int l = 0; l < k; ++l) {
        const double av = ad[static_cast<std::size_t>(i) * k + l];
        const double* brow = &bd[static_cast<std::size_t>(l) * nn];
        double* orow = &out[static_cast<std::size_t>(i) * nn];
        for (int j = 0; j < nn; ++j) orow[j] += av * brow[j];
      }
    }
    Node n;
    n.op = Op::kMatmul;
    n.take(a);
    n.take(b);
    n.output = Tensor({m, nn}, std::move(out));
    return record(std::move(n));
  }

  // Cross-correlation with bias. Input rank 3 [Cin,H,W] or 4 [N,Cin,H,W],
  // kernel [Cout,Cin,k,k], bias [Cout]. Output size (H + 2p - k)/stride + 1
  // must divide exactly.
  Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, PadMode mode,
                int pad, int stride) {
    ConvGeom g = conv_geom(input, kernel, pad, stride);
    auto padded = pad_spatial(input.data(), g.batch * g.cin, g.h, g.w, pad, mode);
    std::vector<double> out(
        static_cast<std::size_t>(g.batch) * g.cout * g.ho * g.wo);
    auto kd = kernel.data();
    auto bd = bias.data();
    const std::size_t plane_p = static_cast<std::size_t>(g.hp) * g.wp;
    const std::size_t plane_o = static_cast<std::size_t>(g.ho) * g.wo;
    for (int n = 0; n < g.batch; ++n) {
      for (int co = 0; co < g.cout; ++co) {
        double* out_nc = &out[(static_cast<std::size_t>(n) * g.cout + co) * plane_o];
        std::fill(out_nc, out_nc + plane_o, bd[static_cast<std::size_t>(co)]);
        for (int ci = 0; ci < g.cin; ++ci) {
          const double* pin = &padded[(static_cast<std::size_t>(n) * g.cin + ci) * plane_p];
          const double* w =
              &kd[(static_cast<std::size_t>(co) * g.cin + ci) * g.k * g.k];
          for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
              const double wv = w[ky * g.k + kx];
              for (int oy = 0; oy < g.ho; ++oy) {
                const double* prow = pin + static_cast<std::size_t>(oy * g.stride + ky) * g.wp + kx;
                double* orow = out_nc + static_cast<std::size_t>(oy) * g.wo;
                if (g.stride == 1) {
                  for (int ox = 0; ox < g.wo; ++ox) orow[ox] += wv * prow[ox];
                } else {
                  for (int ox = 0; ox < g.wo; ++ox) orow[ox] += wv * prow[ox * g.stride];
                }
              }
            }
          }
        }
      }
    }
    Shape oshape = input.rank() == 3 ? Shape{g.cout, g.ho, g.wo}
                                     : Shape{g.batch, g.cout, g.ho, g.wo};
    Node n;
    n.op = Op::kConv2d;
    n.take(input);
    n.take(kernel);
    n.take(bias);
    n.i0 = pad;
    n.i1 = stride;
    n.pad_mode = mode;
    n.output = Tensor(std::move(oshape), std::move(out));
    return record(std::move(n));
  }

  Tensor avgpool(const Tensor& a, int gamma) {
    auto [lead, h, w] = spatial_geom(a, "avgpool");
    if (gamma <= 0 || h % gamma != 0 || w % gamma != 0) {
      throw std::invalid_argument("avgpool: dims " + shape_str(a.shape()) +
                                  " not divisible by " + std::to_string(gamma));
    }
    const int ho = h / gamma, wo = w / gamma;
    std::vector<double> out(static_cast<std::size_t>(lead) * ho * wo, 0.0);
    auto in = a.data();
    const double inv = 1.0 / (static_cast<double>(gamma) * gamma);
    for (int c = 0; c < lead; ++c) {
      const double* ip = &in[static_cast<std::size_t>(c) * h * w];
      double* op = &out[static_cast<std::size_t>(c) * ho * wo];
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int dy = 0; dy < gamma; ++dy) {
            for (int dx = 0; dx < gamma; ++dx) {
              acc += ip[static_cast<std::size_t>(oy * gamma + dy) * w + ox * gamma + dx];
            }
          }
          op[static_cast<std::size_t>(oy) * wo + ox] = acc * inv;
        }
      }
    }
    Shape oshape = a.shape();
    oshape[oshape.size() - 2] = ho;
    oshape[oshape.size() - 1] = wo;
    Node n = unary_node(Op::kAvgPool, a, Tensor(std::move(oshape), std::move(out)));
    n.i0 = gamma;
    return record(std::move(n));
  }

  Tensor upsample_nearest(const Tensor& a, int gamma) {
    auto [lead, h, w] = spatial_geom(a, "upsample_nearest");
    if (gamma <= 0) throw std::invalid_argument("upsample_nearest: gamma must be positive");
    const int ho = h * gamma, wo = w * gamma;
    std::vector<double> out(static_cast<std::size_t>(lead) * ho * wo);
    auto in = a.data();
    for (int c = 0; c < lead; ++c) {
      const double* ip = &in[static_cast<std::size_t>(c) * h * w];
      double* op = &out[static_cast<std::size_t>(c) * ho * wo];
      for (int y = 0; y < ho; ++y) {
        const double* irow = ip + static_cast<std::size_t>(y / gamma) * w;
        double* orow = op + static_cast<std::size_t>(y) * wo;
        for (int x = 0; x < wo; ++x) orow[x] = irow[x / gamma];
      }
    }
    Shape oshape = a.shape();
    oshape[oshape.size() - 2] = ho;
    oshape[oshape.size() - 1] = wo;
    Node n = unary_node(Op::kUpsampleNearest, a, Tensor(std::move(oshape), std::move(out)));
    n.i0 = gamma;
    return record(std::move(n));
  }

  Tensor global_avgpool(const Tensor& a) {
    auto [lead, h, w] = spatial_geom(a, "global_avgpool");
    std::vector<double> out(static_cast<std::size_t>(lead));
    auto in = a.data();
    const double inv = 1.0 / (static_cast<double>(h) * w);
    for (int c = 0; c < lead; ++c) {
      double acc = 0.0;
      const double* ip = &in[static_cast<std::size_t>(c) * h * w];
      for (int i = 0; i < h * w; ++i) acc += ip[i];
      out[static_cast<std::size_t>(c)] = acc * inv;
    }
    Shape oshape = a.shape();
    oshape[oshape.size() - 2] = 1;
    oshape[oshape.size() - 1] = 1;
    return record(unary_node(Op::kGlobalAvgPool, a, Tensor(std::move(oshape), std::move(out))));
  }

  Tensor mean(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return record(
        unary_node(Op::kMean, a, Tensor::scalar(acc / static_cast<double>(a.numel()))));
  }

  Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return record(unary_node(Op::kSum, a, Tensor::scalar(acc)));
  }

  Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
      throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) +
                                  " -> " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return record(unary_node(Op::kReshape, a, Tensor(std::move(shape), std::move(out))));
  }

  // Concatenates along the channel axis: axis 0 for rank-3 [C,H,W] inputs,
  // axis 1 for rank-4 [N,C,H,W] inputs.
  Tensor concat_channels(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const int rank = parts[0].rank();
    if (rank != 3 && rank != 4) {
      throw std::invalid_argument("concat_channels: inputs must be rank 3 or 4");
    }
    const int axis = rank == 3 ? 0 : 1;
    int channels = 0;
    for (const Tensor& t : parts) {
      if (t.rank() != rank) throw std::invalid_argument("concat_channels: rank mismatch");
      for (int d = 0; d < rank; ++d) {
        if (d != axis && t.dim(d) != parts[0].dim(d)) {
          throw std::invalid_argument("concat_channels: non-channel dims must match");
        }
      }
      channels += t.dim(axis);
    }
    Shape oshape = parts[0].shape();
    oshape[static_cast<std::size_t>(axis)] = channels;
    const int batch = rank == 4 ? parts[0].dim(0) : 1;
    const std::size_t plane =
        static_cast<std::size_t>(parts[0].dim(rank - 2)) * parts[0].dim(rank - 1);
    std::vector<double> out(shape_numel(oshape));
    std::size_t chan_off = 0;
    for (const Tensor& t : parts) {
      const int tc = t.dim(axis);
      auto td = t.data();
      for (int n = 0; n < batch; ++n) {
        const double* src = &td[static_cast<std::size_t>(n) * tc * plane];
        double* dst = &out[(static_cast<std::size_t>(n) * channels + chan_off) * plane];
        std::copy(src, src + static_cast<std::size_t>(tc) * plane, dst);
      }
      chan_off += static_cast<std::size_t>(tc);
    }
    Node n;
    n.op = Op::kConcatChannels;
    for (const Tensor& t : parts) n.take(t);
    n.output = Tensor(std::move(oshape), std::move(out));
    return record(std::move(n));
  }

  Tensor concat_channels(std::initializer_list<Tensor> parts) {
    std::vector<Tensor> v(parts);
    return concat_channels(std::span<const Tensor>(v));
  }

  // Log-softmax over the last axis, stabilized by per-row max subtraction.
  Tensor log_softmax(const Tensor& a) {
    const int c = a.dim(a.rank() - 1);
    if (c < 2) throw std::invalid_argument("log_softmax: last axis must have >= 2 entries");
    const std::size_t rows = a.numel() / static_cast<std::size_t>(c);
    std::vector<double> out(a.numel());
    auto in = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = &in[r * c];
      double* orow = &out[r * c];
      double mx = row[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (int j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
      const double log_denom = std::log(denom);
      for (int j = 0; j < c; ++j) orow[j] = row[j] - mx - log_denom;
    }
    return record(unary_node(Op::kLogSoftmax, a, Tensor(a.shape(), std::move(out))));
  }

  // General axis permutation; used to bring the class axis last before
  // log_softmax on [N,K,H,W] logits.
  Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    const int rank = a.rank();
    if (static_cast<int>(axes.size()) != rank) {
      throw std::invalid_argument("permute: axes length must equal rank");
    }
    std::vector<bool> seen(static_cast<std::size_t>(rank), false);
    for (int ax : axes) {
      if (ax < 0 || ax >= rank || seen[static_cast<std::size_t>(ax)]) {
        throw std::invalid_argument("permute: axes must be a permutation of 0..rank-1");
      }
      seen[static_cast<std::size_t>(ax)] = true;
    }
    Shape oshape(axes.size());
    for (int d = 0; d < rank; ++d) oshape[static_cast<std::size_t>(d)] = a.dim(axes[static_cast<std::size_t>(d)]);
    std::vector<double> out(a.numel());
    permute_copy(a.data(), a.shape(), axes, [&](std::size_t src, std::size_t dst) {
      out[dst] = a.data()[src];
    });
    Node n = unary_node(Op::kPermute, a, Tensor(std::move(oshape), std::move(out)));
    n.axes = axes;
    return record(std::move(n));
  }

  // Gradient of a scalar loss w.r.t. every requires_grad leaf on the tape.
  // Leaves not on the loss's forward path get exact-zero gradients. The tape
  // is left untouched, so a second loss from the same forward pass can be
  // differentiated without recomputation.
  GradientMap backward(const Tensor& loss) const {
    if (!loss.on_tape()) throw std::invalid_argument("backward: loss is not on this tape");
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    const std::size_t count = nodes_.size();
    if (static_cast<std::size_t>(loss.node()) >= count) {
      throw std::invalid_argument("backward: loss node out of range");
    }
    std::vector<std::vector<double>> adj(count);
    adj[static_cast<std::size_t>(loss.node())] = {1.0};
    for (std::size_t idx = count; idx-- > 0;) {
      const Node& n = nodes_[idx];
      if (adj[idx].empty()) continue;
      backprop_node(n, adj[idx], adj);
    }
    GradientMap grads;
    for (std::size_t i = 0; i < count; ++i) {
      const Node& n = nodes_[i];
      if (n.op != Op::kLeaf || !n.output.requires_grad()) continue;
      if (adj[i].empty()) {
        grads.emplace(static_cast<int>(i), Tensor::zeros(n.output.shape()));
      } else {
        grads.emplace(static_cast<int>(i), Tensor(n.output.shape(), std::move(adj[i])));
      }
    }
    return grads;
  }

  std::size_t size() const { return nodes_.size(); }

  // Smallest |x| seen at any relu input since construction/reset; the
  // finite-difference checker uses it to exclude kink-adjacent samples.
  double min_relu_gap() const { return min_relu_gap_; }
  void reset_relu_gap() { min_relu_gap_ = std::numeric_limits<double>::infinity(); }

  // One sign bit per relu input element, in insertion order. Two forward
  // passes with equal patterns lie in the same piecewise-linear region of
  // every relu, which is what the finite-difference checker needs to know.
  std::vector<bool> relu_sign_pattern() const {
    std::vector<bool> bits;
    for (const Node& n : nodes_) {
      if (n.op != Op::kRelu) continue;
      for (double v : n.inputs[0].data()) bits.push_back(v > 0.0);
    }
    return bits;
  }

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<int> input_ids;
    std::vector<Tensor> inputs;  // value snapshots (constants included)
    Tensor output;
    double c = 0.0;
    int i0 = 0;  // pad / gamma
    int i1 = 1;  // stride
    PadMode pad_mode = PadMode::kZero;
    std::vector<int> axes;

    void take(const Tensor& t) {
      input_ids.push_back(t.node());
      inputs.push_back(t);
    }
  };

  struct ConvGeom {
    int batch, cin, h, w, cout, k, stride, pad, hp, wp, ho, wo;
  };

  Tensor record(Node n, bool requires_grad = false) {
    if (n.op != Op::kLeaf && !n.output.all_finite()) {
      throw numeric_error(std::string("non-finite output produced by ") + op_name(n.op));
    }
    bool rg = requires_grad;
    for (const Tensor& t : n.inputs) rg = rg || t.requires_grad();
    Tensor out = n.output;
    out.node_ = static_cast<int>(nodes_.size());
    out.requires_grad_ = rg;
    n.output = out;
    nodes_.push_back(std::move(n));
    return out;
  }

  static Node unary_node(Op op, const Tensor& a, Tensor out) {
    Node n;
    n.op = op;
    n.take(a);
    n.output = std::move(out);
    return n;
  }

  Tensor binary(Op op, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, op_name(op));
    std::vector<double> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    switch (op) {
      case Op::kAdd:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
        break;
      case Op::kSub:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
        break;
      case Op::kMul:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
        break;
      default:
        throw std::logic_error("binary: bad op");
    }
    Node n;
    n.op = op;
    n.take(a);
    n.take(b);
    n.output = Tensor(a.shape(), std::move(out));
    return record(std::move(n));
  }

  static const char* op_name(Op op) {
    switch (op) {
      case Op::kLeaf: return "leaf";
      case Op::kAdd: return "add";
      case Op::kSub: return "sub";
      case Op::kMul: return "mul";
      case Op::kScale: return "scale";
      case Op::kRelu: return "relu";
      case Op::kSigmoid: return "sigmoid";
      case Op::kMatmul: return "matmul";
      case Op::kConv2d: return "conv2d";
      case Op::kAvgPool: return "avgpool";
      case Op::kUpsampleNearest: return "upsample_nearest";
      case Op::kGlobalAvgPool: return "global_avgpool";
      case Op::kMean: return "mean";
      case Op::kSum: return "sum";
      case Op::kReshape: return "reshape";
      case Op::kConcatChannels: return "concat_channels";
      case Op::kLogSoftmax: return "log_softmax";
      case Op::kPermute: return "permute";
    }
    return "?";
  }

  static std::array<int, 3> spatial_dims(const Tensor& a, const char* op) {
    if (a.rank() < 2) throw std::invalid_argument(std::string(op) + ": rank must be >= 2");
    int lead = 1;
    for (int d = 0; d + 2 < a.rank(); ++d) lead *= a.dim(d);
    return {lead, a.dim(a.rank() - 2), a.dim(a.rank() - 1)};
  }

  static std::array<int, 3> spatial_geom(const Tensor& a, const char* op) {
    return spatial_dims(a, op);
  }

  static ConvGeom conv_geom(const Tensor& input, const Tensor& kernel, int pad, int stride) {
    if (input.rank() != 3 && input.rank() != 4) {
      throw std::invalid_argument("conv2d: input must be [C,H,W] or [N,C,H,W]");
    }
    if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3)) {
      throw std::invalid_argument("conv2d: kernel must be [Cout,Cin,k,k]");
    }
    ConvGeom g;
    g.batch = input.rank() == 4 ? input.dim(0) : 1;
    g.cin = input.dim(input.rank() - 3);
    g.h = input.dim(input.rank() - 2);
    g.w = input.dim(input.rank() - 1);
    g.cout = kernel.dim(0);
    g.k = kernel.dim(2);
    g.stride = stride;
    g.pad = pad;
    if (g.k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
    if (kernel.dim(1) != g.cin) {
      throw std::invalid_argument("conv2d: kernel Cin does not match input channels");
    }
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/padding");
    g.hp = g.h + 2 * pad;
    g.wp = g.w + 2 * pad;
    if (g.hp < g.k || g.wp < g.k || (g.hp - g.k) % stride != 0 || (g.wp - g.k) % stride != 0) {
      throw std::invalid_argument("conv2d: non-integer output size for input " +
                                  shape_str(input.shape()));
    }
    g.ho = (g.hp - g.k) / stride + 1;
    g.wo = (g.wp - g.k) / stride + 1;
    return g;
  }

  // Symmetric reflection with the edge pixel repeated: index -1 -> 0, H -> H-1.
  static int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i - 1;
      if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
  }

  // Source index per padded row/col; -1 marks zero fill.
  static std::vector<int> pad_map(int n, int pad, PadMode mode) {
    std::vector<int> map(static_cast<std::size_t>(n + 2 * pad));
    for (int q = 0; q < n + 2 * pad; ++q) {
      const int i = q - pad;
      if (i >= 0 && i < n) {
        map[static_cast<std::size_t>(q)] = i;
      } else {
        map[static_cast<std::size_t>(q)] = mode == PadMode::kReflect ? reflect_index(i, n) : -1;
      }
    }
    return map;
  }

  static std::vector<double> pad_spatial(std::span<const double> src, int planes, int h, int w,
                                         int pad, PadMode mode) {
    const int hp = h + 2 * pad, wp = w + 2 * pad;
    std::vector<double> out(static_cast<std::size_t>(planes) * hp * wp, 0.0);
    auto rmap = pad_map(h, pad, mode);
    auto cmap = pad_map(w, pad, mode);
    for (int c = 0; c < planes; ++c) {
      const double* ip = &src[static_cast<std::size_t>(c) * h * w];
      double* op = &out[static_cast<std::size_t>(c) * hp * wp];
      for (int y = 0; y < hp; ++y) {
        const int sy = rmap[static_cast<std::size_t>(y)];
        if (sy < 0) continue;
        const double* irow = ip + static_cast<std::size_t>(sy) * w;
        double* orow = op + static_cast<std::size_t>(y) * wp;
        for (int x = 0; x < wp; ++x) {
          const int sx = cmap[static_cast<std::size_t>(x)];
          if (sx >= 0) orow[x] = irow[sx];
        }
      }
    }
    return out;
  }

  // Adjoint of pad_spatial: folds padded-cell gradients back onto sources.
  static void fold_pad(const std::vector<double>& gpad, std::vector<double>& gsrc, int planes,
                       int h, int w, int pad, PadMode mode) {
    const int hp = h + 2 * pad, wp = w + 2 * pad;
    auto rmap = pad_map(h, pad, mode);
    auto cmap = pad_map(w, pad, mode);
    for (int c = 0; c < planes; ++c) {
      const double* gp = &gpad[static_cast<std::size_t>(c) * hp * wp];
      double* gs = &gsrc[static_cast<std::size_t>(c) * h * w];
      for (int y = 0; y < hp; ++y) {
        const int sy = rmap[static_cast<std::size_t>(y)];
        if (sy < 0) continue;
        const double* grow = gp + static_cast<std::size_t>(y) * wp;
        double* srow = gs + static_cast<std::size_t>(sy) * w;
        for (int x = 0; x < wp; ++x) {
          const int sx = cmap[static_cast<std::size_t>(x)];
          if (sx >= 0) srow[sx] += grow[x];
        }
      }
    }
  }

  template <typename Fn>
  static void permute_copy(std::span<const double>, const Shape& in_shape,
                           const std::vector<int>& axes, Fn&& assign) {
    const int rank = static_cast<int>(in_shape.size());
    std::vector<std::size_t> in_strides(static_cast<std::size_t>(rank), 1);
    for (int d = rank - 2; d >= 0; --d) {
      in_strides[static_cast<std::size_t>(d)] =
          in_strides[static_cast<std::size_t>(d + 1)] * static_cast<std::size_t>(in_shape[static_cast<std::size_t>(d + 1)]);
    }
    Shape oshape(static_cast<std::size_t>(rank));
    std::vector<std::size_t> src_stride_for_out(static_cast<std::size_t>(rank));
    for (int d = 0; d < rank; ++d) {
      oshape[static_cast<std::size_t>(d)] = in_shape[static_cast<std::size_t>(axes[static_cast<std::size_t>(d)])];
      src_stride_for_out[static_cast<std::size_t>(d)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(d)])];
    }
    std::vector<int> idx(static_cast<std::size_t>(rank), 0);
    const std::size_t total = shape_numel(in_shape);
    std::size_t src = 0;
    for (std::size_t dst = 0; dst < total; ++dst) {
      assign(src, dst);
      for (int d = rank - 1; d >= 0; --d) {
        auto ud = static_cast<std::size_t>(d);
        if (++idx[ud] < oshape[ud]) {
          src += src_stride_for_out[ud];
          break;
        }
        idx[ud] = 0;
        src -= src_stride_for_out[ud] * static_cast<std::size_t>(oshape[ud] - 1);
      }
    }
  }

  // Adds `contribution` into adj[target] (allocating zeros on first touch).
  static std::vector<double>& adj_buffer(std::vector<std::vector<double>>& adj, int id,
                                         std::size_t size) {
    auto& buf = adj[static_cast<std::size_t>(id)];
    if (buf.empty()) buf.assign(size, 0.0);
    return buf;
  }

  void backprop_node(const Node& n, const std::vector<double>& g,
                     std::vector<std::vector<double>>& adj) const {
    auto want = [&](int slot) { return n.input_ids[static_cast<std::size_t>(slot)] >= 0; };
    auto buf = [&](int slot) -> std::vector<double>& {
      return adj_buffer(adj, n.input_ids[static_cast<std::size_t>(slot)],
                        n.inputs[static_cast<std::size_t>(slot)].numel());
    };
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        if (want(0)) {
          auto& ga = buf(0);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (want(1)) {
          auto& gb = buf(1);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
        break;
      }
      case Op::kSub: {
        if (want(0)) {
          auto& ga = buf(0);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (want(1)) {
          auto& gb = buf(1);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
        break;
      }
      case Op::kMul: {
        auto a = n.inputs[0].data();
        auto b = n.inputs[1].data();
        if (want(0)) {
          auto& ga = buf(0);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
        }
        if (want(1)) {
          auto& gb = buf(1);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
        }
        break;
      }
      case Op::kScale: {
        if (want(0)) {
          auto& ga = buf(0);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.c;
        }
        break;
      }
      case Op::kRelu: {
        if (want(0)) {
          auto a = n.inputs[0].data();
          auto& ga = buf(0);
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (a[i] > 0.0) ga[i] += g[i];
          }
        }
        break;
      }
      case Op::kSigmoid: {
        if (want(0)) {
          auto s = n.output.data();
          auto& ga = buf(0);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i] * (1.0 - s[i]);
        }
        break;
      }
      case Op::kMatmul: {
        const Tensor& a = n.inputs[0];
        const Tensor& b = n.inputs[1];
        const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
        if (want(0)) {
          auto& ga = buf(0);
          auto bd = b.data();
          for (int i = 0; i < m; ++i) {
            for (int l = 0; l < k; ++l) {
              const double* grow = &g[static_cast<std::size_t>(i) * nn];
              const double* brow = &bd[static_cast<std::size_t>(l) * nn];
              double acc = 0.0;
              for (int j = 0; j < nn; ++j) acc += grow[j] * brow[j];
              ga[static_cast<std::size_t>(i) * k + l] += acc;
            }
          }
        }
        if (want(1)) {
          auto& gb = buf(1);
          auto ad = a.data();
          for (int i = 0; i < m; ++i) {
            const double* grow = &g[static_cast<std::size_t>(i) * nn];
            for (int l = 0; l < k; ++l) {
              const double av = ad[static_cast<std::size_t>(i) * k + l];
              double* gbrow = &gb[static_cast<std::size_t>(l) * nn];
              for (int j = 0; j < nn; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
        break;
      }
      case Op::kConv2d:
        backprop_conv(n, g, adj);
        break;
      case Op::kAvgPool: {
        if (want(0)) {
          auto [lead, h, w] = spatial_dims(n.inputs[0], "avgpool");
          const int gamma = n.i0, ho = h / gamma, wo = w / gamma;
          const double inv = 1.0 / (static_cast<double>(gamma) * gamma);
          auto& ga = buf(0);
          for (int c = 0; c < lead; ++c) {
            const double* gp = &g[static_cast<std::size_t>(c) * ho * wo];
            double* gi = &ga[static_cast<std::size_t>(c) * h * w];
            for (int oy = 0; oy < ho; ++oy) {
              for (int ox = 0; ox < wo; ++ox) {
                const double gv = gp[static_cast<std::size_t>(oy) * wo + ox] * inv;
                for (int dy = 0; dy < gamma; ++dy) {
                  for (int dx = 0; dx < gamma; ++dx) {
                    gi[static_cast<std::size_t>(oy * gamma + dy) * w + ox * gamma + dx] += gv;
                  }
                }
              }
            }
          }
        }
        break;
      }
      case Op::kUpsampleNearest: {
        if (want(0)) {
          auto [lead, h, w] = spatial_dims(n.inputs[0], "upsample_nearest");
          const int gamma = n.i0, ho = h * gamma, wo = w * gamma;
          auto& ga = buf(0);
          for (int c = 0; c < lead; ++c) {
            const double* gp = &g[static_cast<std::size_t>(c) * ho * wo];
            double* gi = &ga[static_cast<std::size_t>(c) * h * w];
            for (int y = 0; y < ho; ++y) {
              double* girow = gi + static_cast<std::size_t>(y / gamma) * w;
              const double* grow = gp + static_cast<std::size_t>(y) * wo;
              for (int x = 0; x < wo; ++x) girow[x / gamma] += grow[x];
            }
          }
        }
        break;
      }
      case Op::kGlobalAvgPool: {
        if (want(0)) {
          auto [lead, h, w] = spatial_dims(n.inputs[0], "global_avgpool");
          const double inv = 1.0 / (static_cast<double>(h) * w);
          auto& ga = buf(0);
          for (int c = 0; c < lead; ++c) {
            const double gv = g[static_cast<std::size_t>(c)] * inv;
            double* gi = &ga[static_cast<std::size_t>(c) * h * w];
            for (int i = 0; i < h * w; ++i) gi[i] += gv;
          }
        }
        break;
      }
      case Op::kMean: {
        if (want(0)) {
          auto& ga = buf(0);
          const double gv = g[0] / static_cast<double>(ga.size());
          for (double& v : ga) v += gv;
        }
        break;
      }
      case Op::kSum: {
        if (want(0)) {
          auto& ga = buf(0);
          for (double& v : ga) v += g[0];
        }
        break;
      }
      case Op::kReshape: {
        if (want(0)) {
          auto& ga = buf(0);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        break;
      }
      case Op::kConcatChannels: {
        const int rank = n.output.rank();
        const int axis = rank == 3 ? 0 : 1;
        const int batch = rank == 4 ? n.output.dim(0) : 1;
        const int channels = n.output.dim(axis);
        const std::size_t plane =
            static_cast<std::size_t>(n.output.dim(rank - 2)) * n.output.dim(rank - 1);
        std::size_t chan_off = 0;
        for (std::size_t slot = 0; slot < n.inputs.size(); ++slot) {
          const int tc = n.inputs[slot].dim(axis);
          if (n.input_ids[slot] >= 0) {
            auto& gi = adj_buffer(adj, n.input_ids[slot], n.inputs[slot].numel());
            for (int b = 0; b < batch; ++b) {
              const double* src = &g[(static_cast<std::size_t>(b) * channels + chan_off) * plane];
              double* dst = &gi[static_cast<std::size_t>(b) * tc * plane];
              for (std::size_t i = 0; i < static_cast<std::size_t>(tc) * plane; ++i) dst[i] += src[i];
            }
          }
          chan_off += static_cast<std::size_t>(tc);
        }
        break;
      }
      case Op::kLogSoftmax: {
        if (want(0)) {
          const int c = n.output.dim(n.output.rank() - 1);
          const std::size_t rows = n.output.numel() / static_cast<std::size_t>(c);
          auto out = n.output.data();
          auto& ga = buf(0);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* grow = &g[r * c];
            const double* orow = &out[r * c];
            double gsum = 0.0;
            for (int j = 0; j < c; ++j) gsum += grow[j];
            double* garow = &ga[r * c];
            for (int j = 0; j < c; ++j) garow[j] += grow[j] - std::exp(orow[j]) * gsum;
          }
        }
        break;
      }
      case Op::kPermute: {
        if (want(0)) {
          auto& ga = buf(0);
          permute_copy(n.inputs[0].data(), n.inputs[0].shape(), n.axes,
                       [&](std::size_t src, std::size_t dst) { ga[src] += g[dst]; });
        }
        break;
      }
    }
  }

  void backprop_conv(const Node& n, const std::vector<double>& g,
                     std::vector<std::vector<double>>& adj) const {
    const Tensor& input = n.inputs[0];
    const Tensor& kernel = n.inputs[1];
    ConvGeom geo = conv_geom(input, kernel, n.i0, n.i1);
    const std::size_t plane_p = static_cast<std::size_t>(geo.hp) * geo.wp;
    const std::size_t plane_o = static_cast<std::size_t>(geo.ho) * geo.wo;
    auto kd = kernel.data();

    const bool need_input = n.input_ids[0] >= 0;
    const bool need_kernel = n.input_ids[1] >= 0;
    const bool need_bias = n.input_ids[2] >= 0;

    std::vector<double> gpad;
    std::vector<double> padded;
    if (need_input) gpad.assign(static_cast<std::size_t>(geo.batch) * geo.cin * plane_p, 0.0);
    if (need_kernel) {
      padded = pad_spatial(input.data(), geo.batch * geo.cin, geo.h, geo.w, geo.pad, n.pad_mode);
    }

    if (need_bias) {
      auto& gb = adj_buffer(adj, n.input_ids[2], n.inputs[2].numel());
      for (int b = 0; b < geo.batch; ++b) {
        for (int co = 0; co < geo.cout; ++co) {
          const double* grow = &g[(static_cast<std::size_t>(b) * geo.cout + co) * plane_o];
          double acc = 0.0;
          for (std::size_t i = 0; i < plane_o; ++i) acc += grow[i];
          gb[static_cast<std::size_t>(co)] += acc;
        }
      }
    }

    std::vector<double>* gk = nullptr;
    if (need_kernel) gk = &adj_buffer(adj, n.input_ids[1], kernel.numel());

    for (int b = 0; b < geo.batch; ++b) {
      for (int co = 0; co < geo.cout; ++co) {
        const double* gout = &g[(static_cast<std::size_t>(b) * geo.cout + co) * plane_o];
        for (int ci = 0; ci < geo.cin; ++ci) {
          const double* w = &kd[(static_cast<std::size_t>(co) * geo.cin + ci) * geo.k * geo.k];
          double* gpin =
              need_input ? &gpad[(static_cast<std::size_t>(b) * geo.cin + ci) * plane_p] : nullptr;
          const double* pin =
              need_kernel ? &padded[(static_cast<std::size_t>(b) * geo.cin + ci) * plane_p] : nullptr;
          double* gw = need_kernel ? &(*gk)[(static_cast<std::size_t>(co) * geo.cin + ci) * geo.k * geo.k]
                                   : nullptr;
          for (int ky = 0; ky < geo.k; ++ky) {
            for (int kx = 0; kx < geo.k; ++kx) {
              const double wv = w[ky * geo.k + kx];
              double wacc = 0.0;
              for (int oy = 0; oy < geo.ho; ++oy) {
                const std::size_t prow_off = static_cast<std::size_t>(oy * geo.stride + ky) * geo.wp + kx;
                const double* grow = gout + static_cast<std::size_t>(oy) * geo.wo;
                if (need_input) {
                  double* gprow = gpin + prow_off;
                  if (geo.stride == 1) {
                    for (int ox = 0; ox < geo.wo; ++ox) gprow[ox] += wv * grow[ox];
                  } else {
                    for (int ox = 0; ox < geo.wo; ++ox) gprow[ox * geo.stride] += wv * grow[ox];
                  }
                }
                if (need_kernel) {
                  const double* prow = pin + prow_off;
                  if (geo.stride == 1) {
                    for (int ox = 0; ox < geo.wo; ++ox) wacc += prow[ox] * grow[ox];
                  } else {
                    for (int ox = 0; ox < geo.wo; ++ox) wacc += prow[ox * geo.stride] * grow[ox];
                  }
                }
              }
              if (need_kernel) gw[ky * geo.k + kx] += wacc;
            }
          }
        }
      }
    }

    if (need_input) {
      auto& gi = adj_buffer(adj, n.input_ids[0], input.numel());
      fold_pad(gpad, gi, geo.batch * geo.cin, geo.h, geo.w, geo.pad, n.pad_mode);
    }
  }

  std::vector<Node> nodes_;
  double min_relu_gap_ = std::numeric_limits<double>::infinity();
};

}  // namespace gradprom
