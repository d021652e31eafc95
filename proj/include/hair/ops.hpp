#pragma once

#include "hair/autograd.hpp"

#include <optional>
#include <vector>

namespace hair {

// Differentiable primitives. Shapes follow the NCHW convention for images and
// [Cout, Cin/groups, kh, kw] for kernels. Broadcasting is limited to
// scalar-times-tensor and the explicit per-slice scales below.

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s);

/// Multiplies slice i along axis 0 of `x` by s[i]; `s` has shape [x.dim(0)].
template <typename Scalar>
Var<Scalar> scale_slices(const Var<Scalar>& x, const Var<Scalar>& s);

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape);

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& x);

/// Contiguous flat range [offset, offset + numel(shape)) of `x`, reshaped.
template <typename Scalar>
Var<Scalar> slice_flat(const Var<Scalar>& x, Index offset, Shape shape);

/// Channels [first, first + count) of an NCHW tensor.
template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& x, Index first, Index count);
template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b);

/// Element `b` along axis 0, keeping the axis (extent 1).
template <typename Scalar>
Var<Scalar> slice_batch(const Var<Scalar>& x, Index b);
template <typename Scalar>
Var<Scalar> concat_batch(const std::vector<Var<Scalar>>& parts);

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, int stride = 1, int padding = 0,
                   int groups = 1);

/// [B,C,H,W] -> [B,C] spatial mean.
template <typename Scalar>
Var<Scalar> global_average_pool(const Var<Scalar>& x);

/// Max-subtracted softmax along the last axis.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& v);

/// v[..., Din] * weight[Dout, Din]^T + bias[Dout].
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& v, const Var<Scalar>& weight, const std::optional<Var<Scalar>>& bias);

/// Scale-only normalization over the channel axis of [B,C,H,W] with eps 1e-5.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& scale);

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x);

/// [m,k] x [k,n] -> [m,n].
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

/// Batched product over a leading axis: [g,m,k] x [g,k,n] with optional
/// transposition of either operand's trailing 2-D slices.
template <typename Scalar>
Var<Scalar> bmm(const Var<Scalar>& a, const Var<Scalar>& b, bool transpose_a = false, bool transpose_b = false);

/// Divides each last-axis row by max(||row||_2, 1e-12).
template <typename Scalar>
Var<Scalar> l2_normalize(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> pixel_unshuffle(const Var<Scalar>& x, int factor);
template <typename Scalar>
Var<Scalar> pixel_shuffle(const Var<Scalar>& x, int factor);

/// Mirror padding of the two spatial axes; pads larger than the extent wrap by
/// repeated reflection.
template <typename Scalar>
Var<Scalar> pad_reflect(const Var<Scalar>& x, Index top, Index bottom, Index left, Index right);
template <typename Scalar>
Var<Scalar> crop(const Var<Scalar>& x, Index top, Index left, Index height, Index width);

/// Mean absolute error; subgradient 0 where pred == target.
template <typename Scalar>
Var<Scalar> l1_loss(const Var<Scalar>& pred, const Var<Scalar>& target);

/// Index into [0, n) after mirror reflection of an out-of-range coordinate.
Index reflect_index(Index i, Index n);

}  // namespace hair
