#pragma once

#include "hair/layout.hpp"
#include "hair/ops.hpp"

namespace hair {

// Blocks take their parameters as one flat vector laid out by
// param_layout(hyper). The vector may be a leaf (plain block) or the output of
// a Weight Box mixture (HyperTrans block); both paths are differentiable.

/// Channel-attention sub-block with residual: x + Proj(Attn(DWConv(Conv(LN(x))))).
template <typename Scalar>
Var<Scalar> mdta_forward(const Var<Scalar>& x, const Var<Scalar>& w, const ParamLayout& layout, const BlockHyper& hyper);

/// Gated feed-forward sub-block with residual: x + Proj(GELU(p1) * p2).
template <typename Scalar>
Var<Scalar> gdfn_forward(const Var<Scalar>& x, const Var<Scalar>& w, const ParamLayout& layout, const BlockHyper& hyper);

/// gdfn(mdta(x)). Throws ShapeError when |w| != layout.total.
template <typename Scalar>
Var<Scalar> transformer_block_forward(const Var<Scalar>& x, const Var<Scalar>& w, const BlockHyper& hyper);

/// Dispatches on hyper.kind.
template <typename Scalar>
Var<Scalar> block_forward(const Var<Scalar>& x, const Var<Scalar>& w, const ParamLayout& layout,
                          const BlockHyper& hyper);

/// pixel_unshuffle(2) then a 1x1 conv [2C, 4C, 1, 1]: halves H,W and doubles C.
template <typename Scalar>
Var<Scalar> resample_down(const Var<Scalar>& x, const Var<Scalar>& kernel);

/// 1x1 conv [2C, C, 1, 1] then pixel_shuffle(2): doubles H,W and halves C.
template <typename Scalar>
Var<Scalar> resample_up(const Var<Scalar>& x, const Var<Scalar>& kernel);

/// Channel concatenation [decoder | encoder] followed by a 1x1 conv back to the
/// decoder width.
template <typename Scalar>
Var<Scalar> skip_fuse(const Var<Scalar>& decoder, const Var<Scalar>& encoder, const Var<Scalar>& kernel);

}  // namespace hair
