#include "hair/blocks.hpp"

namespace hair {

namespace {

template <typename Scalar>
Var<Scalar> param(const Var<Scalar>& w, const ParamLayout& layout, const std::string& name) {
  const auto& e = layout.at(name);
  return slice_flat(w, e.offset, e.shape);
}

template <typename Scalar>
void check_block_input(const Var<Scalar>& x, const Var<Scalar>& w, const ParamLayout& layout, const BlockHyper& hyper) {
  if (x.value().rank() != 4 || x.dim(1) != hyper.channels) {
    throw ShapeError("block expects [B," + std::to_string(hyper.channels) + ",H,W], got " + to_string(x.shape()));
  }
  if (w.size() != layout.total) {
    throw ShapeError("block parameter length " + std::to_string(w.size()) + " != " + std::to_string(layout.total));
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> mdta_forward(const Var<Scalar>& x, const Var<Scalar>& w, const ParamLayout& layout, const BlockHyper& hyper) {
  check_block_input(x, w, layout, hyper);
  const Index b = x.dim(0), c = hyper.channels, h = x.dim(2), wd = x.dim(3);
  const Index heads = hyper.heads, d = c / heads;

  auto y = layer_norm(x, param(w, layout, "mdta.norm"));
  y = conv2d(y, param(w, layout, "mdta.qkv"));
  y = conv2d(y, param(w, layout, "mdta.qkv_dw"), 1, 1, static_cast<int>(3 * c));

  const Shape heads_shape{b * heads, d, h * wd};
  auto q = l2_normalize(reshape(slice_channels(y, 0, c), heads_shape));
  auto k = l2_normalize(reshape(slice_channels(y, c, c), heads_shape));
  auto v = reshape(slice_channels(y, 2 * c, c), heads_shape);

  auto temperature = param(w, layout, "mdta.temperature");
  if (b > 1) temperature = concat_batch(std::vector<Var<Scalar>>(static_cast<std::size_t>(b), temperature));

  auto attn = softmax(scale_slices(bmm(q, k, false, true), temperature));  // [B*heads, d, d]
  auto out = reshape(bmm(attn, v), Shape{b, c, h, wd});
  out = conv2d(out, param(w, layout, "mdta.project_out"));
  return add(x, out);
}

template <typename Scalar>
Var<Scalar> gdfn_forward(const Var<Scalar>& x, const Var<Scalar>& w, const ParamLayout& layout, const BlockHyper& hyper) {
  check_block_input(x, w, layout, hyper);
  const Index hidden = hyper.hidden();
  auto y = layer_norm(x, param(w, layout, "gdfn.norm"));
  y = conv2d(y, param(w, layout, "gdfn.project_in"));
  y = conv2d(y, param(w, layout, "gdfn.dw"), 1, 1, static_cast<int>(2 * hidden));
  auto gated = mul(gelu(slice_channels(y, 0, hidden)), slice_channels(y, hidden, hidden));
  return add(x, conv2d(gated, param(w, layout, "gdfn.project_out")));
}

template <typename Scalar>
Var<Scalar> transformer_block_forward(const Var<Scalar>& x, const Var<Scalar>& w, const BlockHyper& hyper) {
  if (hyper.kind != BlockKind::transformer) throw ShapeError("transformer_block_forward: hyper describes a non-transformer block");
  const ParamLayout layout = param_layout(hyper);
  return gdfn_forward(mdta_forward(x, w, layout, hyper), w, layout, hyper);
}

template <typename Scalar>
Var<Scalar> block_forward(const Var<Scalar>& x, const Var<Scalar>& w, const ParamLayout& layout,
                          const BlockHyper& hyper) {
  if (hyper.kind == BlockKind::transformer) return gdfn_forward(mdta_forward(x, w, layout, hyper), w, layout, hyper);
  check_block_input(x, w, layout, hyper);
  auto y = conv2d(gelu(conv2d(x, param(w, layout, "conv.a"), 1, 1)), param(w, layout, "conv.b"), 1, 1);
  return add(x, y);
}

template <typename Scalar>
Var<Scalar> resample_down(const Var<Scalar>& x, const Var<Scalar>& kernel) {
  if (x.value().rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ShapeError("resample_down: needs even spatial extents, got " + to_string(x.shape()));
  }
  return conv2d(pixel_unshuffle(x, 2), kernel);
}

template <typename Scalar>
Var<Scalar> resample_up(const Var<Scalar>& x, const Var<Scalar>& kernel) {
  return pixel_shuffle(conv2d(x, kernel), 2);
}

template <typename Scalar>
Var<Scalar> skip_fuse(const Var<Scalar>& decoder, const Var<Scalar>& encoder, const Var<Scalar>& kernel) {
  if (decoder.value().rank() != 4 || encoder.value().rank() != 4 || decoder.dim(2) != encoder.dim(2) ||
      decoder.dim(3) != encoder.dim(3)) {
    throw ShapeError("skip_fuse: spatial mismatch " + to_string(decoder.shape()) + " vs " + to_string(encoder.shape()));
  }
  if (kernel.dim(0) != decoder.dim(1)) throw ShapeError("skip_fuse: kernel must map back to the decoder width");
  return conv2d(concat_channels(decoder, encoder), kernel);
}

#define HAIR_INSTANTIATE_BLOCKS(S)                                                                           \
  template Var<S> mdta_forward(const Var<S>&, const Var<S>&, const ParamLayout&, const BlockHyper&);        \
  template Var<S> gdfn_forward(const Var<S>&, const Var<S>&, const ParamLayout&, const BlockHyper&);        \
  template Var<S> transformer_block_forward(const Var<S>&, const Var<S>&, const BlockHyper&);               \
  template Var<S> block_forward(const Var<S>&, const Var<S>&, const ParamLayout&, const BlockHyper&);       \
  template Var<S> resample_down(const Var<S>&, const Var<S>&);                                              \
  template Var<S> resample_up(const Var<S>&, const Var<S>&);                                                \
  template Var<S> skip_fuse(const Var<S>&, const Var<S>&, const Var<S>&);

HAIR_INSTANTIATE_BLOCKS(float)
HAIR_INSTANTIATE_BLOCKS(double)

}  // namespace hair
