#include "hair/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace hair {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

namespace {

template <typename Scalar>
void accumulate(Node<Scalar>& parent, const Eigen::Ref<const typename Tensor<Scalar>::Vector>& g) {
  if (!parent.requires_grad) return;
  parent.grad_buffer().vec() += g;
}

template <typename Scalar>
bool wants_grad(const Node<Scalar>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename Scalar>
void require_rank(const Var<Scalar>& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(a.shape()));
  }
}

using IndexTable = std::shared_ptr<const std::vector<Index>>;

// out[i] = x[table[i]]; gradients scatter back. Backs every pure data
// movement op (crop, pad, shuffles, transposes, slices).
template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& x, IndexTable table, Shape out_shape) {
  Tensor<Scalar> out(std::move(out_shape));
  const auto& src = x.value();
  const auto& idx = *table;
  for (Index i = 0; i < out.size(); ++i) out[i] = src[idx[i]];
  return make_result<Scalar>(std::move(out), {x}, [table](Node<Scalar>& self) {
    auto& parent = *self.parents[0];
    if (!parent.requires_grad) return;
    auto& g = parent.grad_buffer();
    const auto& idx = *table;
    for (Index i = 0; i < self.grad.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::RowMatrix;
template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;

// c (+)= op(a) * op(b)
template <typename Scalar>
void gemm(MatMap<Scalar> c, ConstMatMap<Scalar> a, bool ta, ConstMatMap<Scalar> b, bool tb, bool accumulate) {
  if (!accumulate) c.setZero();
  if (!ta && !tb) {
    c.noalias() += a * b;
  } else if (ta && !tb) {
    c.noalias() += a.transpose() * b;
  } else if (!ta && tb) {
    c.noalias() += a * b.transpose();
  } else {
    c.noalias() += a.transpose() * b.transpose();
  }
}

struct ConvGeometry {
  Index batch, cin, h, w, cout, kh, kw, ho, wo;
  int stride, padding, groups;
  Index cin_g, cout_g;
  Index kvol() const { return cin_g * kh * kw; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
  bool depthwise() const { return cin_g == 1 && cout_g == 1; }
};

template <typename Scalar>
ConvGeometry conv_geometry(const Tensor<Scalar>& x, const Tensor<Scalar>& k, int stride, int padding, int groups) {
  require(x.rank() == 4, "conv2d: input must be [B,Cin,H,W], got " + to_string(x.shape()));
  require(k.rank() == 4, "conv2d: kernel must be [Cout,Cin/groups,kh,kw], got " + to_string(k.shape()));
  require(stride > 0, "conv2d: stride must be positive");
  require(padding >= 0, "conv2d: padding must be non-negative");
  require(groups > 0, "conv2d: groups must be positive");
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = k.dim(0);
  g.kh = k.dim(2);
  g.kw = k.dim(3);
  g.stride = stride;
  g.padding = padding;
  g.groups = groups;
  require(g.cin % groups == 0, "conv2d: groups must divide input channels");
  require(g.cout % groups == 0, "conv2d: groups must divide output channels");
  g.cin_g = g.cin / groups;
  g.cout_g = g.cout / groups;
  require(k.dim(1) == g.cin_g, "conv2d: kernel expects " + std::to_string(k.dim(1)) + " channels per group, input has " +
                                   std::to_string(g.cin_g));
  require(g.kh <= g.h + 2 * padding && g.kw <= g.w + 2 * padding, "conv2d: kernel larger than padded input");
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  return g;
}

// Output columns [lo, hi) whose input coordinate o*stride - pad + k lies in [0, n).
inline std::pair<Index, Index> valid_range(Index n_out, Index n_in, int stride, int pad, Index k) {
  const Index off = k - pad;
  Index lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  Index hi = (n_in - 1 - off) < 0 ? 0 : (n_in - 1 - off) / stride + 1;
  return {std::min(lo, n_out), std::clamp(hi, Index{0}, n_out)};
}

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Scalar* col) {
  const Index plane = g.ho * g.wo;
  for (Index c = 0; c < g.cin_g; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        Scalar* row = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        const auto [xlo, xhi] = valid_range(g.wo, g.w, g.stride, g.padding, kj);
        for (Index oy = 0; oy < g.ho; ++oy) {
          Scalar* dst = row + oy * g.wo;
          const Index iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, Scalar(0));
            continue;
          }
          const Scalar* src = x + (c * g.h + iy) * g.w;
          std::fill(dst, dst + xlo, Scalar(0));
          for (Index ox = xlo; ox < xhi; ++ox) dst[ox] = src[ox * g.stride - g.padding + kj];
          std::fill(dst + xhi, dst + g.wo, Scalar(0));
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* col, const ConvGeometry& g, Scalar* x) {
  const Index plane = g.ho * g.wo;
  for (Index c = 0; c < g.cin_g; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        const auto [xlo, xhi] = valid_range(g.wo, g.w, g.stride, g.padding, kj);
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= g.h) continue;
          const Scalar* src = row + oy * g.wo;
          Scalar* dst = x + (c * g.h + iy) * g.w;
          for (Index ox = xlo; ox < xhi; ++ox) dst[ox * g.stride - g.padding + kj] += src[ox];
        }
      }
    }
  }
}

// One channel of a depthwise convolution: out += k (*) x.
template <typename Scalar>
void depthwise_channel(const Scalar* x, const Scalar* k, const ConvGeometry& g, Scalar* out) {
  for (Index ki = 0; ki < g.kh; ++ki) {
    for (Index kj = 0; kj < g.kw; ++kj) {
      const Scalar wv = k[ki * g.kw + kj];
      const auto [xlo, xhi] = valid_range(g.wo, g.w, g.stride, g.padding, kj);
      for (Index oy = 0; oy < g.ho; ++oy) {
        const Index iy = oy * g.stride - g.padding + ki;
        if (iy < 0 || iy >= g.h) continue;
        const Scalar* src = x + iy * g.w - g.padding + kj;
        Scalar* dst = out + oy * g.wo;
        if (g.stride == 1) {
          for (Index ox = xlo; ox < xhi; ++ox) dst[ox] += wv * src[ox];
        } else {
          for (Index ox = xlo; ox < xhi; ++ox) dst[ox] += wv * src[ox * g.stride];
        }
      }
    }
  }
}

template <typename Scalar>
void depthwise_channel_backward(const Scalar* x, const Scalar* k, const Scalar* gout, const ConvGeometry& g,
                                Scalar* gx, Scalar* gk) {
  for (Index ki = 0; ki < g.kh; ++ki) {
    for (Index kj = 0; kj < g.kw; ++kj) {
      const Scalar wv = k[ki * g.kw + kj];
      Scalar acc = 0;
      const auto [xlo, xhi] = valid_range(g.wo, g.w, g.stride, g.padding, kj);
      for (Index oy = 0; oy < g.ho; ++oy) {
        const Index iy = oy * g.stride - g.padding + ki;
        if (iy < 0 || iy >= g.h) continue;
        const Index base = iy * g.w - g.padding + kj;
        const Scalar* go = gout + oy * g.wo;
        for (Index ox = xlo; ox < xhi; ++ox) {
          const Index xi = base + ox * g.stride;
          acc += go[ox] * x[xi];
          if (gx) gx[xi] += wv * go[ox];
        }
      }
      if (gk) gk[ki * g.kw + kj] += acc;
    }
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "add");
  Tensor<Scalar> out(a.shape(), a.value().vec() + b.value().vec());
  return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    accumulate(*self.parents[0], self.grad.vec());
    accumulate(*self.parents[1], self.grad.vec());
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "sub");
  Tensor<Scalar> out(a.shape(), a.value().vec() - b.value().vec());
  return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    accumulate(*self.parents[0], self.grad.vec());
    if (wants_grad(self, 1)) self.parents[1]->grad_buffer().vec() -= self.grad.vec();
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "mul");
  Tensor<Scalar> out(a.shape(), (a.value().array() * b.value().array()).matrix());
  return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (wants_grad(self, 0)) accumulate(*self.parents[0], (self.grad.array() * bv.array()).matrix());
    if (wants_grad(self, 1)) accumulate(*self.parents[1], (self.grad.array() * av.array()).matrix());
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape(), a.value().vec() * s);
  return make_result<Scalar>(std::move(out), {a},
                             [s](Node<Scalar>& self) { accumulate(*self.parents[0], self.grad.vec() * s); });
}

template <typename Scalar>
Var<Scalar> scale_slices(const Var<Scalar>& x, const Var<Scalar>& s) {
  require(x.value().rank() >= 1, "scale_slices: rank-0 input");
  require(s.value().rank() == 1 && s.dim(0) == x.dim(0),
          "scale_slices: scale " + to_string(s.shape()) + " does not match leading axis of " + to_string(x.shape()));
  const Index slices = x.dim(0);
  const Index len = x.size() / std::max<Index>(slices, 1);
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < slices; ++i) out.vec().segment(i * len, len) = x.value().vec().segment(i * len, len) * s.value()[i];
  return make_result<Scalar>(std::move(out), {x, s}, [slices, len](Node<Scalar>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& sv = self.parents[1]->value;
    if (wants_grad(self, 0)) {
      auto& gx = self.parents[0]->grad_buffer();
      for (Index i = 0; i < slices; ++i) gx.vec().segment(i * len, len) += self.grad.vec().segment(i * len, len) * sv[i];
    }
    if (wants_grad(self, 1)) {
      auto& gs = self.parents[1]->grad_buffer();
      for (Index i = 0; i < slices; ++i) gs[i] += self.grad.vec().segment(i * len, len).dot(xv.vec().segment(i * len, len));
    }
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  auto out = Tensor<Scalar>::scalar(x.value().vec().sum());
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) p.grad_buffer().array() += self.grad[0];
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  require(x.size() > 0, "mean: empty tensor");
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) { accumulate(*self.parents[0], self.grad.vec()); });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& x) {
  const int r = x.value().rank();
  require(r == 2 || r == 3, "transpose: expected rank 2 or 3, got " + to_string(x.shape()));
  const Index g = r == 3 ? x.dim(0) : 1;
  const Index m = x.dim(-2), n = x.dim(-1);
  auto table = std::make_shared<std::vector<Index>>(x.size());
  for (Index b = 0; b < g; ++b)
    for (Index j = 0; j < n; ++j)
      for (Index i = 0; i < m; ++i) (*table)[b * m * n + j * m + i] = b * m * n + i * n + j;
  Shape out_shape = r == 3 ? Shape{g, n, m} : Shape{n, m};
  return gather(x, std::move(table), std::move(out_shape));
}

template <typename Scalar>
Var<Scalar> slice_flat(const Var<Scalar>& x, Index offset, Shape shape) {
  const Index len = numel(shape);
  require(offset >= 0 && offset + len <= x.size(), "slice_flat: range [" + std::to_string(offset) + "," +
                                                       std::to_string(offset + len) + ") exceeds length " +
                                                       std::to_string(x.size()));
  Tensor<Scalar> out(std::move(shape), x.value().vec().segment(offset, len));
  return make_result<Scalar>(std::move(out), {x}, [offset, len](Node<Scalar>& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) p.grad_buffer().vec().segment(offset, len) += self.grad.vec();
  });
}

template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& x, Index first, Index count) {
  require_rank(x, 4, "slice_channels");
  const Index b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  require(first >= 0 && count > 0 && first + count <= c, "slice_channels: channel range out of bounds");
  Tensor<Scalar> out(Shape{b, count, x.dim(2), x.dim(3)});
  for (Index i = 0; i < b; ++i)
    out.vec().segment(i * count * plane, count * plane) = x.value().vec().segment((i * c + first) * plane, count * plane);
  return make_result<Scalar>(std::move(out), {x}, [b, c, first, count, plane](Node<Scalar>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (Index i = 0; i < b; ++i)
      g.vec().segment((i * c + first) * plane, count * plane) += self.grad.vec().segment(i * count * plane, count * plane);
  });
}

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: batch/spatial mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const Index n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  Tensor<Scalar> out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
  for (Index i = 0; i < n; ++i) {
    out.vec().segment(i * (ca + cb) * plane, ca * plane) = a.value().vec().segment(i * ca * plane, ca * plane);
    out.vec().segment((i * (ca + cb) + ca) * plane, cb * plane) = b.value().vec().segment(i * cb * plane, cb * plane);
  }
  return make_result<Scalar>(std::move(out), {a, b}, [n, ca, cb, plane](Node<Scalar>& self) {
    if (wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (Index i = 0; i < n; ++i)
        g.vec().segment(i * ca * plane, ca * plane) += self.grad.vec().segment(i * (ca + cb) * plane, ca * plane);
    }
    if (wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (Index i = 0; i < n; ++i)
        g.vec().segment(i * cb * plane, cb * plane) += self.grad.vec().segment((i * (ca + cb) + ca) * plane, cb * plane);
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_batch(const Var<Scalar>& x, Index b) {
  require(x.value().rank() >= 1 && b >= 0 && b < x.dim(0), "slice_batch: index out of range");
  Shape shape = x.shape();
  shape[0] = 1;
  const Index len = x.size() / x.dim(0);
  return slice_flat(x, b * len, std::move(shape));
}

template <typename Scalar>
Var<Scalar> concat_batch(const std::vector<Var<Scalar>>& parts) {
  require(!parts.empty(), "concat_batch: no inputs");
  Shape shape = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    require(s.size() == shape.size() && std::equal(s.begin() + 1, s.end(), shape.begin() + 1),
            "concat_batch: trailing shape mismatch");
    total += s[0];
  }
  shape[0] = total;
  Tensor<Scalar> out(shape);
  Index off = 0;
  for (const auto& p : parts) {
    out.vec().segment(off, p.size()) = p.value().vec();
    off += p.size();
  }
  return make_result<Scalar>(std::move(out), parts, [](Node<Scalar>& self) {
    Index off = 0;
    for (auto& p : self.parents) {
      const Index len = p->value.size();
      if (p->requires_grad) p->grad_buffer().vec() += self.grad.vec().segment(off, len);
      off += len;
    }
  });
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, int stride, int padding, int groups) {
  const ConvGeometry g = conv_geometry(input.value(), kernel.value(), stride, padding, groups);
  Tensor<Scalar> out(Shape{g.batch, g.cout, g.ho, g.wo});
  const Index in_plane = g.h * g.w, out_plane = g.ho * g.wo;
  const auto& xv = input.value();
  const auto& kv = kernel.value();
  std::vector<Scalar> col;
  if (!g.depthwise() && !g.pointwise()) col.resize(static_cast<std::size_t>(g.kvol() * out_plane));

  for (Index b = 0; b < g.batch; ++b) {
    for (Index grp = 0; grp < g.groups; ++grp) {
      const Scalar* x = xv.data() + (b * g.cin + grp * g.cin_g) * in_plane;
      Scalar* y = out.data() + (b * g.cout + grp * g.cout_g) * out_plane;
      const Index kstart = grp * g.cout_g * g.kvol();
      if (g.depthwise()) {
        depthwise_channel(x, kv.data() + kstart, g, y);
      } else if (g.pointwise()) {
        gemm<Scalar>(MatMap<Scalar>(y, g.cout_g, out_plane), kv.matrix(g.cout_g, g.kvol(), kstart), false,
                     ConstMatMap<Scalar>(x, g.cin_g, out_plane), false, false);
      } else {
        im2col(x, g, col.data());
        gemm<Scalar>(MatMap<Scalar>(y, g.cout_g, out_plane), kv.matrix(g.cout_g, g.kvol(), kstart), false,
                     ConstMatMap<Scalar>(col.data(), g.kvol(), out_plane), false, false);
      }
    }
  }

  return make_result<Scalar>(std::move(out), {input, kernel}, [g](Node<Scalar>& self) {
    auto& xn = *self.parents[0];
    auto& kn = *self.parents[1];
    const Index in_plane = g.h * g.w, out_plane = g.ho * g.wo;
    Scalar* gx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
    Scalar* gk = kn.requires_grad ? kn.grad_buffer().data() : nullptr;
    const auto& xv = xn.value;
    const auto& kv = kn.value;
    std::vector<Scalar> col, dcol;
    if (!g.depthwise() && !g.pointwise()) {
      col.resize(static_cast<std::size_t>(g.kvol() * out_plane));
      dcol.resize(col.size());
    }
    for (Index b = 0; b < g.batch; ++b) {
      for (Index grp = 0; grp < g.groups; ++grp) {
        const Index xoff = (b * g.cin + grp * g.cin_g) * in_plane;
        const Scalar* go = self.grad.data() + (b * g.cout + grp * g.cout_g) * out_plane;
        const Index kstart = grp * g.cout_g * g.kvol();
        ConstMatMap<Scalar> gout(go, g.cout_g, out_plane);
        if (g.depthwise()) {
          depthwise_channel_backward(xv.data() + xoff, kv.data() + kstart, go, g, gx ? gx + xoff : nullptr,
                                     gk ? gk + kstart : nullptr);
        } else if (g.pointwise()) {
          ConstMatMap<Scalar> x(xv.data() + xoff, g.cin_g, out_plane);
          if (gk) gemm<Scalar>(MatMap<Scalar>(gk + kstart, g.cout_g, g.kvol()), gout, false, x, true, true);
          if (gx) {
            gemm<Scalar>(MatMap<Scalar>(gx + xoff, g.cin_g, out_plane), kv.matrix(g.cout_g, g.kvol(), kstart), true, gout,
                         false, true);
          }
        } else {
          im2col(xv.data() + xoff, g, col.data());
          if (gk) {
            gemm<Scalar>(MatMap<Scalar>(gk + kstart, g.cout_g, g.kvol()), gout, false,
                         ConstMatMap<Scalar>(col.data(), g.kvol(), out_plane), true, true);
          }
          if (gx) {
            gemm<Scalar>(MatMap<Scalar>(dcol.data(), g.kvol(), out_plane), kv.matrix(g.cout_g, g.kvol(), kstart), true,
                         gout, false, false);
            col2im_add(dcol.data(), g, gx + xoff);
          }
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> global_average_pool(const Var<Scalar>& x) {
  require_rank(x, 4, "global_average_pool");
  const Index b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  require(plane > 0, "global_average_pool: empty spatial extent");
  Tensor<Scalar> out(Shape{b, c});
  out.vec() = x.value().matrix(b * c, plane).rowwise().mean();
  return make_result<Scalar>(std::move(out), {x}, [b, c, plane](Node<Scalar>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto gx = p.grad_buffer().matrix(b * c, plane);
    gx.colwise() += self.grad.vec() / static_cast<Scalar>(plane);
  });
}

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& v) {
  require(v.value().rank() >= 1 && v.dim(-1) >= 1, "softmax: trailing axis must be non-empty");
  if (!v.value().all_finite()) throw std::domain_error("softmax: non-finite input");
  const Index n = v.dim(-1), rows = v.size() / n;
  Tensor<Scalar> out(v.shape());
  auto in = v.value().matrix(rows, n);
  auto y = out.matrix(rows, n);
  for (Index r = 0; r < rows; ++r) {
    const Scalar m = in.row(r).maxCoeff();
    y.row(r) = (in.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return make_result<Scalar>(std::move(out), {v}, [rows, n](Node<Scalar>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    // Output values are not stored on the node separately; recompute from the input.
    Tensor<Scalar> yt(p.value.shape());
    auto in = p.value.matrix(rows, n);
    auto y = yt.matrix(rows, n);
    for (Index r = 0; r < rows; ++r) {
      const Scalar m = in.row(r).maxCoeff();
      y.row(r) = (in.row(r).array() - m).exp();
      y.row(r) /= y.row(r).sum();
    }
    auto gy = self.grad.matrix(rows, n);
    auto gx = p.grad_buffer().matrix(rows, n);
    for (Index r = 0; r < rows; ++r) {
      const Scalar dot = gy.row(r).dot(y.row(r));
      gx.row(r).array() += y.row(r).array() * (gy.row(r).array() - dot);
    }
  });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& v, const Var<Scalar>& weight, const std::optional<Var<Scalar>>& bias) {
  require(weight.value().rank() == 2, "linear: weight must be [Dout,Din]");
  const Index dout = weight.dim(0), din = weight.dim(1);
  require(v.value().rank() >= 1 && v.dim(-1) == din,
          "linear: input " + to_string(v.shape()) + " incompatible with weight " + to_string(weight.shape()));
  if (bias) require(bias->value().rank() == 1 && bias->dim(0) == dout, "linear: bias must be [Dout]");
  const Index rows = v.size() / din;
  Shape shape = v.shape();
  shape.back() = dout;
  Tensor<Scalar> out(shape);
  auto y = out.matrix(rows, dout);
  y.noalias() = v.value().matrix(rows, din) * weight.value().matrix(dout, din).transpose();
  if (bias) y.rowwise() += bias->value().vec().transpose();

  std::vector<Var<Scalar>> parents{v, weight};
  if (bias) parents.push_back(*bias);
  return make_result<Scalar>(std::move(out), std::move(parents), [rows, din, dout](Node<Scalar>& self) {
    auto gy = self.grad.matrix(rows, dout);
    auto& vn = *self.parents[0];
    auto& wn = *self.parents[1];
    if (vn.requires_grad) vn.grad_buffer().matrix(rows, din).noalias() += gy * wn.value.matrix(dout, din);
    if (wn.requires_grad) wn.grad_buffer().matrix(dout, din).noalias() += gy.transpose() * vn.value.matrix(rows, din);
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      self.parents[2]->grad_buffer().vec() += gy.colwise().sum().transpose();
    }
  });
}

namespace {
constexpr double kLayerNormEps = 1e-5;

// xhat for one batch element viewed as (C, HW); returns per-pixel rstd.
template <typename Scalar>
typename Tensor<Scalar>::RowMatrix normalized(ConstMatMap<Scalar> x,
                                              Eigen::Array<Scalar, 1, Eigen::Dynamic>& rstd) {
  const Scalar c = static_cast<Scalar>(x.rows());
  Eigen::Array<Scalar, 1, Eigen::Dynamic> mu = x.colwise().sum().array() / c;
  typename Tensor<Scalar>::RowMatrix centered = x.rowwise() - mu.matrix();
  Eigen::Array<Scalar, 1, Eigen::Dynamic> var = centered.array().square().colwise().sum() / c;
  rstd = (var + static_cast<Scalar>(kLayerNormEps)).rsqrt();
  centered.array().rowwise() *= rstd;
  return centered;
}
}  // namespace

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& scale_param) {
  require_rank(x, 4, "layer_norm");
  const Index b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  require(scale_param.value().rank() == 1 && scale_param.dim(0) == c, "layer_norm: scale must be [C]");
  Tensor<Scalar> out(x.shape());
  Eigen::Array<Scalar, 1, Eigen::Dynamic> rstd;
  for (Index i = 0; i < b; ++i) {
    auto xhat = normalized<Scalar>(x.value().matrix(c, plane, i * c * plane), rstd);
    out.matrix(c, plane, i * c * plane) = scale_param.value().vec().asDiagonal() * xhat;
  }
  return make_result<Scalar>(std::move(out), {x, scale_param}, [b, c, plane](Node<Scalar>& self) {
    auto& xn = *self.parents[0];
    auto& sn = *self.parents[1];
    Eigen::Array<Scalar, 1, Eigen::Dynamic> rstd;
    const Scalar cs = static_cast<Scalar>(c);
    for (Index i = 0; i < b; ++i) {
      const Index off = i * c * plane;
      auto xhat = normalized<Scalar>(std::as_const(xn.value).matrix(c, plane, off), rstd);
      auto gy = self.grad.matrix(c, plane, off);
      if (sn.requires_grad) sn.grad_buffer().vec() += (gy.array() * xhat.array()).rowwise().sum().matrix();
      if (xn.requires_grad) {
        typename Tensor<Scalar>::RowMatrix dxhat = sn.value.vec().asDiagonal() * gy;
        Eigen::Array<Scalar, 1, Eigen::Dynamic> m1 = dxhat.colwise().sum().array() / cs;
        Eigen::Array<Scalar, 1, Eigen::Dynamic> m2 = (dxhat.array() * xhat.array()).colwise().sum() / cs;
        auto gx = xn.grad_buffer().matrix(c, plane, off);
        gx.array() += ((dxhat.array().rowwise() - m1) - xhat.array().rowwise() * m2).rowwise() * rstd;
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  const Scalar inv_sqrt2 = static_cast<Scalar>(1.0 / std::numbers::sqrt2);
  Tensor<Scalar> out(x.shape());
  const auto& xv = x.value();
  for (Index i = 0; i < xv.size(); ++i) out[i] = Scalar(0.5) * xv[i] * (Scalar(1) + std::erf(xv[i] * inv_sqrt2));
  return make_result<Scalar>(std::move(out), {x}, [inv_sqrt2](Node<Scalar>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    const Scalar inv_sqrt2pi = static_cast<Scalar>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    auto& g = p.grad_buffer();
    for (Index i = 0; i < g.size(); ++i) {
      const Scalar v = p.value[i];
      const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
      const Scalar pdf = inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), x.value().array().max(Scalar(0)).matrix());
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.grad_buffer().array() += (p.value.array() > Scalar(0)).select(self.grad.array(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require(a.dim(1) == b.dim(0), "matmul: inner extents differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  auto out = bmm(reshape(a, Shape{1, a.dim(0), a.dim(1)}), reshape(b, Shape{1, b.dim(0), b.dim(1)}));
  return reshape(out, Shape{a.dim(0), b.dim(1)});
}

template <typename Scalar>
Var<Scalar> bmm(const Var<Scalar>& a, const Var<Scalar>& b, bool ta, bool tb) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  require(a.dim(0) == b.dim(0), "bmm: batch extents differ");
  const Index g = a.dim(0);
  const Index ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const Index m = ta ? ac : ar, k = ta ? ar : ac, kb = tb ? bc : br, n = tb ? br : bc;
  require(k == kb, "bmm: inner extents differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor<Scalar> out(Shape{g, m, n});
  for (Index i = 0; i < g; ++i) {
    gemm<Scalar>(out.matrix(m, n, i * m * n), a.value().matrix(ar, ac, i * ar * ac), ta,
                 b.value().matrix(br, bc, i * br * bc), tb, false);
  }
  return make_result<Scalar>(std::move(out), {a, b}, [=](Node<Scalar>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    for (Index i = 0; i < g; ++i) {
      ConstMatMap<Scalar> gc(self.grad.data() + i * m * n, m, n);
      auto av = std::as_const(an.value).matrix(ar, ac, i * ar * ac);
      auto bv = std::as_const(bn.value).matrix(br, bc, i * br * bc);
      if (an.requires_grad) {
        auto ga = an.grad_buffer().matrix(ar, ac, i * ar * ac);
        if (!ta) {
          gemm<Scalar>(ga, gc, false, bv, !tb, true);
        } else {
          gemm<Scalar>(ga, bv, tb, gc, true, true);
        }
      }
      if (bn.requires_grad) {
        auto gb = bn.grad_buffer().matrix(br, bc, i * br * bc);
        if (!tb) {
          gemm<Scalar>(gb, av, !ta, gc, false, true);
        } else {
          gemm<Scalar>(gb, gc, true, av, ta, true);
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> l2_normalize(const Var<Scalar>& x) {
  require(x.value().rank() >= 1 && x.dim(-1) >= 1, "l2_normalize: empty trailing axis");
  const Index n = x.dim(-1), rows = x.size() / n;
  const Scalar eps = static_cast<Scalar>(1e-12);
  Tensor<Scalar> out(x.shape());
  auto xm = x.value().matrix(rows, n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms = xm.rowwise().norm().cwiseMax(eps);
  out.matrix(rows, n) = norms.cwiseInverse().asDiagonal() * xm;
  return make_result<Scalar>(std::move(out), {x}, [rows, n, eps](Node<Scalar>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto xm = p.value.matrix(rows, n);
    auto gy = self.grad.matrix(rows, n);
    auto gx = p.grad_buffer().matrix(rows, n);
    for (Index r = 0; r < rows; ++r) {
      const Scalar norm = xm.row(r).norm();
      if (norm > eps) {
        const auto y = xm.row(r) / norm;
        gx.row(r) += (gy.row(r) - y * y.dot(gy.row(r))) / norm;
      } else {
        gx.row(r) += gy.row(r) / eps;
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> pixel_unshuffle(const Var<Scalar>& x, int factor) {
  require_rank(x, 4, "pixel_unshuffle");
  require(factor > 0, "pixel_unshuffle: factor must be positive");
  const Index b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), r = factor;
  require(h % r == 0 && w % r == 0, "pixel_unshuffle: spatial extents " + to_string(x.shape()) +
                                        " not divisible by " + std::to_string(r));
  const Index ho = h / r, wo = w / r, co = c * r * r;
  auto table = std::make_shared<std::vector<Index>>(x.size());
  Index o = 0;
  for (Index n = 0; n < b; ++n)
    for (Index oc = 0; oc < co; ++oc) {
      const Index ic = oc / (r * r), i = (oc / r) % r, j = oc % r;
      for (Index y = 0; y < ho; ++y)
        for (Index xx = 0; xx < wo; ++xx) (*table)[o++] = ((n * c + ic) * h + y * r + i) * w + xx * r + j;
    }
  return gather(x, std::move(table), Shape{b, co, ho, wo});
}

template <typename Scalar>
Var<Scalar> pixel_shuffle(const Var<Scalar>& x, int factor) {
  require_rank(x, 4, "pixel_shuffle");
  require(factor > 0, "pixel_shuffle: factor must be positive");
  const Index b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), r = factor;
  require(c % (r * r) == 0, "pixel_shuffle: channels not divisible by factor^2");
  const Index co = c / (r * r), ho = h * r, wo = w * r;
  auto table = std::make_shared<std::vector<Index>>(x.size());
  Index o = 0;
  for (Index n = 0; n < b; ++n)
    for (Index oc = 0; oc < co; ++oc)
      for (Index y = 0; y < ho; ++y)
        for (Index xx = 0; xx < wo; ++xx) {
          const Index ic = oc * r * r + (y % r) * r + (xx % r);
          (*table)[o++] = ((n * c + ic) * h + y / r) * w + xx / r;
        }
  return gather(x, std::move(table), Shape{b, co, ho, wo});
}

template <typename Scalar>
Var<Scalar> pad_reflect(const Var<Scalar>& x, Index top, Index bottom, Index left, Index right) {
  require_rank(x, 4, "pad_reflect");
  require(top >= 0 && bottom >= 0 && left >= 0 && right >= 0, "pad_reflect: negative padding");
  const Index b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h > 0 && w > 0, "pad_reflect: empty spatial extent");
  const Index ho = h + top + bottom, wo = w + left + right;
  auto table = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(b * c * ho * wo));
  Index o = 0;
  for (Index n = 0; n < b * c; ++n)
    for (Index y = 0; y < ho; ++y) {
      const Index iy = reflect_index(y - top, h);
      for (Index xx = 0; xx < wo; ++xx) (*table)[o++] = (n * h + iy) * w + reflect_index(xx - left, w);
    }
  return gather(x, std::move(table), Shape{b, c, ho, wo});
}

template <typename Scalar>
Var<Scalar> crop(const Var<Scalar>& x, Index top, Index left, Index height, Index width) {
  require_rank(x, 4, "crop");
  const Index b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(top >= 0 && left >= 0 && height > 0 && width > 0 && top + height <= h && left + width <= w,
          "crop: window out of bounds for " + to_string(x.shape()));
  auto table = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(b * c * height * width));
  Index o = 0;
  for (Index n = 0; n < b * c; ++n)
    for (Index y = 0; y < height; ++y)
      for (Index xx = 0; xx < width; ++xx) (*table)[o++] = (n * h + top + y) * w + left + xx;
  return gather(x, std::move(table), Shape{b, c, height, width});
}

template <typename Scalar>
Var<Scalar> l1_loss(const Var<Scalar>& pred, const Var<Scalar>& target) {
  require_same_shape(pred, target, "l1_loss");
  require(pred.size() > 0, "l1_loss: empty tensors");
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(pred.size());
  const Scalar value = (pred.value().array() - target.value().array()).abs().sum() * inv_n;
  auto out = Tensor<Scalar>::scalar(value);
  return make_result<Scalar>(std::move(out), {pred, target}, [inv_n](Node<Scalar>& self) {
    const auto diff = (self.parents[0]->value.array() - self.parents[1]->value.array()).eval();
    const auto sign = ((diff > Scalar(0)).template cast<Scalar>() - (diff < Scalar(0)).template cast<Scalar>()).eval();
    const Scalar g = self.grad[0] * inv_n;
    if (wants_grad(self, 0)) self.parents[0]->grad_buffer().array() += sign * g;
    if (wants_grad(self, 1)) self.parents[1]->grad_buffer().array() -= sign * g;
  });
}

template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  Node<Scalar>* root = loss.node();
  if (root == nullptr) throw std::logic_error("backward: undefined loss");
  if (root->value.size() != 1) throw ShapeError("backward: loss must be a scalar, got " + to_string(root->value.shape()));
  if (root->consumed) throw std::logic_error("backward: graph already consumed");
  if (!root->requires_grad) throw std::logic_error("backward: loss does not depend on any tracked parameter");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> visited;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer().vec().array() += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->is_leaf() || !node->backward_fn) continue;
    if (node->grad.size() != node->value.size()) continue;  // nothing flowed here
    node->backward_fn(*node);
  }
  for (Node<Scalar>* node : order) {
    if (node->is_leaf()) continue;
    node->backward_fn = nullptr;
    node->parents.clear();
    node->grad = Tensor<Scalar>();
    node->consumed = true;
  }
}

#define HAIR_INSTANTIATE_OPS(S)                                                                   \
  template Var<S> add(const Var<S>&, const Var<S>&);                                             \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                             \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                             \
  template Var<S> scale(const Var<S>&, S);                                                       \
  template Var<S> scale_slices(const Var<S>&, const Var<S>&);                                    \
  template Var<S> sum(const Var<S>&);                                                            \
  template Var<S> mean(const Var<S>&);                                                           \
  template Var<S> reshape(const Var<S>&, Shape);                                                 \
  template Var<S> transpose(const Var<S>&);                                                      \
  template Var<S> slice_flat(const Var<S>&, Index, Shape);                                       \
  template Var<S> slice_channels(const Var<S>&, Index, Index);                                   \
  template Var<S> concat_channels(const Var<S>&, const Var<S>&);                                 \
  template Var<S> slice_batch(const Var<S>&, Index);                                             \
  template Var<S> concat_batch(const std::vector<Var<S>>&);                                      \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, int, int, int);                           \
  template Var<S> global_average_pool(const Var<S>&);                                            \
  template Var<S> softmax(const Var<S>&);                                                        \
  template Var<S> linear(const Var<S>&, const Var<S>&, const std::optional<Var<S>>&);            \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&);                                      \
  template Var<S> gelu(const Var<S>&);                                                           \
  template Var<S> relu(const Var<S>&);                                                           \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                          \
  template Var<S> bmm(const Var<S>&, const Var<S>&, bool, bool);                                 \
  template Var<S> l2_normalize(const Var<S>&);                                                   \
  template Var<S> pixel_unshuffle(const Var<S>&, int);                                           \
  template Var<S> pixel_shuffle(const Var<S>&, int);                                             \
  template Var<S> pad_reflect(const Var<S>&, Index, Index, Index, Index);                        \
  template Var<S> crop(const Var<S>&, Index, Index, Index, Index);                               \
  template Var<S> l1_loss(const Var<S>&, const Var<S>&);                                         \
  template void backward(const Var<S>&);

HAIR_INSTANTIATE_OPS(float)
HAIR_INSTANTIATE_OPS(double)

}  // namespace hair
