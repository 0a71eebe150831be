#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "zonas/autodiff.hpp"

namespace zonas::ops {

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};

struct PoolAttrs {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
};

constexpr double kNormEps = 1e-5;

Shape conv2d_output_shape(const Shape& x, const Shape& w, const Conv2dAttrs& a);
Shape pool_output_shape(const Shape& x, const PoolAttrs& a);

// Elementwise and reductions.
/// Pass-through recorded as its own node (shares the input buffer).
Var identity(const Var& x);
/// Zeros at the stride-adjusted shape of x, recorded as a node without gradient.
Var zero(const Var& x, std::size_t stride);
Var add(const Var& a, const Var& b);
Var add_n(std::span<const Var> xs);
Var scale(const Var& x, double factor);
Var relu(const Var& x);
Var sum(const Var& x);
/// sum(x * weights) with constant weights of the same shape.
Var weighted_total(const Var& x, const Tensor& weights);

// Convolution family (NCHW, weight (Cout, Cin/groups, k, k)).
Var conv2d(const Var& x, const Var& w, const Conv2dAttrs& a);

/// Normalization by per-channel batch statistics, optionally followed by a
/// learnable per-channel scale and shift. gamma/beta may be undefined Vars.
Var channel_norm(const Var& x, const Var& gamma, const Var& beta, double eps = kNormEps);

/// Average pool that excludes padding from the divisor.
Var avg_pool2d(const Var& x, const PoolAttrs& a);
/// Max pool; gradient goes to the first maximal element in scan order.
Var max_pool2d(const Var& x, const PoolAttrs& a);
Var global_avg_pool(const Var& x);

/// x (N, in) times w (out, in)^T plus b (out).
Var linear(const Var& x, const Var& w, const Var& b);

/// Softmax over the last axis.
Var softmax(const Var& x);
/// Mean cross-entropy of logits (N, classes) against integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);

/// Softmax over the entries of a 1-D vector where keep[i] is true; the result
/// has one entry per kept index. Masked entries receive no gradient.
Var masked_softmax(const Var& alpha, const std::vector<bool>& keep);
/// log sum_{keep[i]} exp(alpha_i) as a scalar.
Var masked_logsumexp(const Var& alpha, const std::vector<bool>& keep);

/// sum_i w[i] * xs[i] with w a 1-D Var of length xs.size().
Var weighted_sum(std::span<const Var> xs, const Var& w);

// Channel plumbing.
Var concat_channels(std::span<const Var> xs);
Var select_channels(const Var& x, std::span<const std::size_t> channels);
/// View (N, groups, C/groups, H, W), swap the two channel axes, flatten back.
Var channel_shuffle(const Var& x, std::size_t groups);

/// Untracked zeros of the given shape.
Var zeros(const Shape& shape);

/// Primitive vocabulary for generic dispatch.
enum class Primitive {
  kIdentity,
  kZero,
  kAdd,
  kScale,
  kRelu,
  kSum,
  kConv2d,
  kChannelNorm,
  kAvgPool,
  kMaxPool,
  kGlobalAvgPool,
  kLinear,
  kSoftmax,
  kCrossEntropy,
  kMaskedSoftmax,
  kMaskedLogSumExp,
  kWeightedSum,
  kConcat,
  kSelectChannels,
  kChannelShuffle,
};

std::string_view primitive_name(Primitive p);

struct Attrs {
  Conv2dAttrs conv;
  PoolAttrs pool;
  double factor = 1.0;
  double eps = kNormEps;
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::vector<int> labels;
  std::vector<bool> keep;
  std::vector<std::size_t> channels;
};

/// Dispatch a primitive by kind. Input arity follows the typed functions
/// above; weighted_sum takes the weight vector last.
Var forward_primitive(Primitive kind, std::span<const Var> inputs, const Attrs& attrs = {});

}  // namespace zonas::ops
