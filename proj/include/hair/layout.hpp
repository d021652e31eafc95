#pragma once

#include "hair/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace hair {

enum class BlockKind {
  transformer,  // MDTA + GDFN
  res_conv,     // x + conv3x3(gelu(conv3x3(x))), used for plain CNN backbones
};

std::string to_string(BlockKind kind);
BlockKind parse_block_kind(const std::string& text);

/// Hyperparameters of one block at one level.
struct BlockHyper {
  Index channels = 8;
  int heads = 1;
  double expansion = 2.66;
  BlockKind kind = BlockKind::transformer;

  /// Width of each of the two gated GDFN paths: floor(expansion * channels).
  Index hidden() const;
  /// Throws ShapeError when the channel/head/expansion constraints fail.
  void validate() const;
};

/// Flat parameter vector layout of one block.
///
/// A transformer block stores six physical convolutions (the fused QKV 1x1 and
/// 3x3 depthwise pair, the attention output 1x1, the fused GDFN expansion 1x1
/// and 3x3 depthwise pair, the GDFN projection 1x1) plus the two
/// normalization scales and the per-head attention temperature.
struct ParamLayout {
  struct Entry {
    std::string name;
    Shape shape;
    Index offset = 0;
    Index size() const { return numel(shape); }
  };

  std::vector<Entry> entries;
  Index total = 0;

  const Entry& at(const std::string& name) const;

  /// Splits a flat vector of length `total` into one tensor per entry.
  template <typename Scalar>
  std::vector<Tensor<Scalar>> unflatten(const Tensor<Scalar>& flat) const;
  /// Inverse of `unflatten`; shapes must match the entries in order.
  template <typename Scalar>
  Tensor<Scalar> flatten(const std::vector<Tensor<Scalar>>& parts) const;

  /// Fresh flat parameters: conv regions uniform in +-1/sqrt(fan_in),
  /// normalization scales and temperatures set to one.
  template <typename Scalar>
  Tensor<Scalar> initialize(std::mt19937_64& rng) const;
};

ParamLayout param_layout(const BlockHyper& hyper);

}  // namespace hair
