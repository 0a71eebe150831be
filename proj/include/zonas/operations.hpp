#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "zonas/autodiff.hpp"
#include "zonas/ops.hpp"

namespace zonas {

/// Candidate operations of the DARTS cell vocabulary.
enum class OpKind : std::uint8_t {
  kZero,
  kIdentity,
  kSepConv3,
  kSepConv5,
  kDilConv3,
  kDilConv5,
  kAvgPool3,
  kMaxPool3,
};

std::string_view op_name(OpKind kind);
/// Accepts the canonical names ("none", "skip_connect", "sep_conv_3x3", ...).
std::optional<OpKind> parse_op(std::string_view name);
/// The eight DARTS candidates in their conventional order.
const std::vector<OpKind>& darts_ops();

enum class InitKind { kKaimingUniform, kOnes, kZeros };

struct ParamSpec {
  std::string suffix;
  Shape shape;
  InitKind init;
  std::size_t fan_in = 1;
};

/// Parameters an operation needs at `channels` width (input = output).
/// Identity at stride 2 becomes a factorized reduction and owns a projection.
std::vector<ParamSpec> op_param_specs(OpKind kind, std::size_t channels, std::size_t stride);

/// Parameters of relu -> 1x1 conv -> affine norm (cell preprocessing).
std::vector<ParamSpec> relu_conv_norm_specs(std::size_t c_in, std::size_t c_out, std::size_t kernel);

Tensor init_param(const ParamSpec& spec, std::uint64_t seed);

/// Binds a parameter to a tape (watch) or reads it as a constant.
Var use_param(Parameter& p, Tape* tape);

/// Runs a candidate op. `params` follow the order of op_param_specs.
Var apply_op(OpKind kind, const Var& x, std::size_t stride, std::span<Parameter* const> params, Tape* tape);

/// relu -> conv(kernel, stride) -> affine norm.
Var relu_conv_norm(const Var& x, std::size_t stride, std::span<Parameter* const> params, Tape* tape);

// Building blocks, exposed for composition tests.
Var depthwise_conv(const Var& x, const Var& w, std::size_t stride, std::size_t dilation);
Var pointwise_conv(const Var& x, const Var& w);

}  // namespace zonas
