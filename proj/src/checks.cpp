#include "hair/checks.hpp"

#include "hair/blocks.hpp"
#include "hair/gradcheck.hpp"
#include "hair/model.hpp"
#include "hair/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

namespace hair {

bool SuiteReport::passed() const { return first_failure() == nullptr; }

const CheckResult* SuiteReport::first_failure() const {
  for (const auto& r : results) {
    if (!r.passed) return &r;
  }
  return nullptr;
}

template <typename Scalar>
Tensor<Scalar> conv2d_reference(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, int stride, int padding,
                                int groups) {
  const Index b = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index cout = kernel.dim(0), cg = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (cin != cg * groups || cout % groups != 0) throw ShapeError("conv2d_reference: channel/group mismatch");
  const Index ho = (h + 2 * padding - kh) / stride + 1, wo = (w + 2 * padding - kw) / stride + 1;
  const Index opg = cout / groups;
  Tensor<Scalar> out(Shape{b, cout, ho, wo});
  for (Index n = 0; n < b; ++n)
    for (Index o = 0; o < cout; ++o)
      for (Index y = 0; y < ho; ++y)
        for (Index x = 0; x < wo; ++x) {
          Scalar acc = 0;
          const Index g = o / opg;
          for (Index c = 0; c < cg; ++c)
            for (Index i = 0; i < kh; ++i)
              for (Index j = 0; j < kw; ++j) {
                const Index iy = y * stride + i - padding, ix = x * stride + j - padding;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += input.at({n, g * cg + c, iy, ix}) * kernel.at({o, c, i, j});
              }
          out.at({n, o, y, x}) = acc;
        }
  return out;
}

template Tensor<float> conv2d_reference(const Tensor<float>&, const Tensor<float>&, int, int, int);
template Tensor<double> conv2d_reference(const Tensor<double>&, const Tensor<double>&, int, int, int);

namespace {

using V = Var<double>;
using T = Tensor<double>;

T normal(Shape shape, std::mt19937_64& rng, double sd = 1.0, double mu = 0.0) {
  std::normal_distribution<double> dist(mu, sd);
  T t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

T uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  T t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

// Values bounded away from zero so kinked ops stay differentiable.
T away_from_zero(Shape shape, std::mt19937_64& rng) {
  T t = uniform(std::move(shape), rng, 0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (Index i = 0; i < t.size(); ++i) {
    if (sign(rng)) t[i] = -t[i];
  }
  return t;
}

double max_abs(const T& t) { return t.size() ? t.vec().cwiseAbs().maxCoeff() : 0.0; }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

CheckResult make(std::string name, bool ok, std::string detail) { return {std::move(name), ok, std::move(detail)}; }

// ---------------------------------------------------------------------------
// Distributivity
// ---------------------------------------------------------------------------

CheckResult distributivity_draws(std::uint64_t seed, int draws) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> n_dist(1, 8), c_dist(1, 8), hw_dist(3, 10), k_dist(0, 1);
  double worst = 0.0;
  for (int d = 0; d < draws; ++d) {
    const int n = n_dist(rng), cin = c_dist(rng), cout = c_dist(rng), k = k_dist(rng) ? 3 : 1;
    const Index h = hw_dist(rng), w = hw_dist(rng);
    const T x = normal({1, cin, h, w}, rng);
    const T rows = normal({n, cout * cin * k * k}, rng);
    const T vs = softmax(V(normal({1, n}, rng, 2.0))).value();

    const T mixed_flat = matmul(V(vs), V(rows)).value();
    const T mixed = conv2d(V(x), V(mixed_flat.reshaped({cout, cin, k, k})), 1, k / 2).value();
    T mixture(mixed.shape());
    for (int i = 0; i < n; ++i) {
      const T ki = T({cout, cin, k, k}, rows.vec().segment(i * rows.dim(1), rows.dim(1)));
      mixture.vec() += vs[i] * conv2d(V(x), V(ki), 1, k / 2).value().vec();
    }
    const double scale = max_abs(x) * max_abs(rows) * static_cast<double>(cin * k * k);
    worst = std::max(worst, max_abs(T(mixed.shape(), mixed.vec() - mixture.vec())) / scale);
  }
  return make("conv(x, sum v_i K_i) == sum v_i conv(x, K_i)", worst <= 1e-10,
              std::to_string(draws) + " draws, max deviation / scale = " + fmt(worst));
}

CheckResult conv_matches_reference(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  struct Case {
    Index cin, cout, k;
    int stride, pad, groups;
  };
  const std::vector<Case> cases{{3, 5, 3, 1, 1, 1}, {4, 6, 3, 2, 1, 1}, {6, 6, 3, 1, 1, 6},
                                {4, 8, 1, 1, 0, 1}, {4, 4, 3, 1, 0, 2}, {2, 3, 5, 2, 2, 1}};
  double worst = 0.0;
  for (const auto& c : cases) {
    const T x = normal({2, c.cin, 9, 7}, rng);
    const T kern = normal({c.cout, c.cin / c.groups, c.k, c.k}, rng);
    const T fast = conv2d(V(x), V(kern), c.stride, c.pad, c.groups).value();
    const T ref = conv2d_reference(x, kern, c.stride, c.pad, c.groups);
    if (fast.shape() != ref.shape()) return make("conv2d matches loop reference", false, "shape mismatch");
    const double scale = max_abs(x) * max_abs(kern) * static_cast<double>(c.cin * c.k * c.k);
    worst = std::max(worst, max_abs(T(ref.shape(), fast.vec() - ref.vec())) / scale);
  }
  return make("conv2d matches loop reference", worst <= 1e-12, "max deviation / scale = " + fmt(worst));
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

// Checks d/d(inputs) of sum(f(inputs) * R) for a fixed random R.
CheckResult grad_case(const std::string& name, std::vector<T> values, const std::function<V(const std::vector<V>&)>& f,
                      std::mt19937_64& rng, std::size_t samples = 0) {
  std::vector<V> params;
  for (auto& v : values) params.push_back(V::parameter(std::move(v)));
  const T probe = f(params).value();
  const V weights(normal(probe.shape(), rng));
  auto loss = [&] { return sum(mul(f(params), weights)); };
  GradCheckOptions opt;
  opt.samples = samples;
  opt.seed = rng();
  const GradCheckReport r = finite_diff_check(loss, params, opt);
  return make("grad " + name, r.passed,
              std::to_string(r.checked) + " coords, max rel err " + fmt(r.max_rel_err) +
                  (r.passed ? std::string{} : ", worst " + r.worst));
}

std::vector<CheckResult> primitive_gradients(std::mt19937_64& rng) {
  std::vector<CheckResult> out;
  auto add_case = [&](const std::string& name, std::vector<T> values, const std::function<V(const std::vector<V>&)>& f) {
    out.push_back(grad_case(name, std::move(values), f, rng));
  };
  add_case("add", {normal({2, 3}, rng), normal({2, 3}, rng)}, [](auto& p) { return add(p[0], p[1]); });
  add_case("sub", {normal({2, 3}, rng), normal({2, 3}, rng)}, [](auto& p) { return sub(p[0], p[1]); });
  add_case("mul", {normal({2, 3}, rng), normal({2, 3}, rng)}, [](auto& p) { return mul(p[0], p[1]); });
  add_case("scale", {normal({4}, rng)}, [](auto& p) { return scale(p[0], 1.7); });
  add_case("scale_slices", {normal({3, 2, 2}, rng), normal({3}, rng)}, [](auto& p) { return scale_slices(p[0], p[1]); });
  add_case("sum", {normal({3, 2}, rng)}, [](auto& p) { return sum(p[0]); });
  add_case("mean", {normal({3, 2}, rng)}, [](auto& p) { return mean(p[0]); });
  add_case("reshape", {normal({2, 6}, rng)}, [](auto& p) { return reshape(p[0], {3, 4}); });
  add_case("transpose", {normal({2, 3, 4}, rng)}, [](auto& p) { return transpose(p[0]); });
  add_case("slice_flat", {normal({10}, rng)}, [](auto& p) { return slice_flat(p[0], 3, {2, 2}); });
  add_case("slice_channels", {normal({2, 5, 2, 2}, rng)}, [](auto& p) { return slice_channels(p[0], 1, 3); });
  add_case("concat_channels", {normal({2, 2, 2, 2}, rng), normal({2, 3, 2, 2}, rng)},
           [](auto& p) { return concat_channels(p[0], p[1]); });
  add_case("slice_batch", {normal({3, 2, 2, 2}, rng)}, [](auto& p) { return slice_batch(p[0], 1); });
  add_case("concat_batch", {normal({1, 2, 2, 2}, rng), normal({2, 2, 2, 2}, rng)},
           [](auto& p) { return concat_batch<double>({p[0], p[1]}); });
  add_case("conv2d 3x3", {normal({2, 3, 5, 4}, rng), normal({4, 3, 3, 3}, rng)},
           [](auto& p) { return conv2d(p[0], p[1], 1, 1); });
  add_case("conv2d stride 2", {normal({1, 2, 6, 6}, rng), normal({3, 2, 3, 3}, rng)},
           [](auto& p) { return conv2d(p[0], p[1], 2, 1); });
  add_case("conv2d depthwise", {normal({1, 4, 5, 5}, rng), normal({4, 1, 3, 3}, rng)},
           [](auto& p) { return conv2d(p[0], p[1], 1, 1, 4); });
  add_case("conv2d 1x1", {normal({2, 3, 3, 3}, rng), normal({5, 3, 1, 1}, rng)},
           [](auto& p) { return conv2d(p[0], p[1]); });
  add_case("conv2d grouped", {normal({1, 4, 4, 4}, rng), normal({6, 2, 3, 3}, rng)},
           [](auto& p) { return conv2d(p[0], p[1], 1, 0, 2); });
  add_case("global_average_pool", {normal({2, 3, 3, 2}, rng)}, [](auto& p) { return global_average_pool(p[0]); });
  add_case("softmax", {normal({3, 5}, rng)}, [](auto& p) { return softmax(p[0]); });
  add_case("linear", {normal({2, 4}, rng), normal({3, 4}, rng), normal({3}, rng)},
           [](auto& p) { return linear(p[0], p[1], std::optional<V>(p[2])); });
  add_case("layer_norm", {normal({2, 4, 3, 3}, rng), normal({4}, rng, 0.3, 1.0)},
           [](auto& p) { return layer_norm(p[0], p[1]); });
  add_case("gelu", {normal({3, 4}, rng, 2.0)}, [](auto& p) { return gelu(p[0]); });
  add_case("relu", {away_from_zero({3, 4}, rng)}, [](auto& p) { return relu(p[0]); });
  add_case("matmul", {normal({3, 4}, rng), normal({4, 2}, rng)}, [](auto& p) { return matmul(p[0], p[1]); });
  add_case("bmm", {normal({2, 3, 4}, rng), normal({2, 4, 2}, rng)}, [](auto& p) { return bmm(p[0], p[1]); });
  add_case("bmm transposed", {normal({2, 4, 3}, rng), normal({2, 2, 4}, rng)},
           [](auto& p) { return bmm(p[0], p[1], true, true); });
  add_case("l2_normalize", {normal({3, 5}, rng)}, [](auto& p) { return l2_normalize(p[0]); });
  add_case("pixel_unshuffle", {normal({1, 2, 4, 4}, rng)}, [](auto& p) { return pixel_unshuffle(p[0], 2); });
  add_case("pixel_shuffle", {normal({1, 8, 2, 3}, rng)}, [](auto& p) { return pixel_shuffle(p[0], 2); });
  add_case("pad_reflect", {normal({1, 2, 3, 4}, rng)}, [](auto& p) { return pad_reflect(p[0], 1, 2, 3, 2); });
  add_case("crop", {normal({1, 2, 5, 5}, rng)}, [](auto& p) { return crop(p[0], 1, 2, 3, 2); });
  add_case("l1_loss", {normal({2, 3}, rng), normal({2, 3}, rng, 1.0, 5.0)}, [](auto& p) { return l1_loss(p[0], p[1]); });
  return out;
}

std::vector<CheckResult> block_gradients(std::mt19937_64& rng) {
  std::vector<CheckResult> out;
  const BlockHyper th{4, 2, 2.0, BlockKind::transformer};
  const ParamLayout tl = param_layout(th);
  auto flat = [&](const ParamLayout& l) { return l.initialize<double>(rng); };
  out.push_back(grad_case("mdta", {normal({1, 4, 4, 4}, rng), flat(tl)},
                          [&](auto& p) { return mdta_forward(p[0], p[1], tl, th); }, rng));
  out.push_back(grad_case("gdfn", {normal({1, 4, 4, 4}, rng), flat(tl)},
                          [&](auto& p) { return gdfn_forward(p[0], p[1], tl, th); }, rng));
  out.push_back(grad_case("transformer block", {normal({2, 4, 3, 3}, rng), flat(tl)},
                          [&](auto& p) { return transformer_block_forward(p[0], p[1], th); }, rng));
  const BlockHyper rh{3, 1, 2.0, BlockKind::res_conv};
  const ParamLayout rl = param_layout(rh);
  out.push_back(grad_case("res_conv block", {normal({1, 3, 4, 4}, rng), flat(rl)},
                          [&](auto& p) { return block_forward(p[0], p[1], rl, rh); }, rng));
  out.push_back(grad_case("resample_down", {normal({1, 2, 4, 4}, rng), normal({4, 8, 1, 1}, rng)},
                          [](auto& p) { return resample_down(p[0], p[1]); }, rng));
  out.push_back(grad_case("resample_up", {normal({1, 4, 2, 2}, rng), normal({8, 4, 1, 1}, rng)},
                          [](auto& p) { return resample_up(p[0], p[1]); }, rng));
  out.push_back(grad_case("skip_fuse", {normal({1, 2, 3, 3}, rng), normal({1, 2, 3, 3}, rng), normal({2, 4, 1, 1}, rng)},
                          [](auto& p) { return skip_fuse(p[0], p[1], p[2]); }, rng));
  return out;
}

std::vector<CheckResult> mechanism_gradients(std::mt19937_64& rng) {
  std::vector<CheckResult> out;
  // DAC on an 8C = 8 wide tap of a C = 1 toy: 8 -> 4 -> 2 -> 2.
  {
    const auto sched = default_dac_schedule(8, 1);
    std::vector<T> values{normal({1, 8, 8, 8}, rng)};
    Index in = sched.input;
    for (Index o : sched.stages) {
      const double b = 1.0 / std::sqrt(static_cast<double>(in * 9));
      values.push_back(uniform({in, in, 3, 3}, rng, -b, b));
      values.push_back(uniform({in, in, 3, 3}, rng, -b, b));
      values.push_back(uniform({o, in, 3, 3}, rng, -b, b));
      in = o;
    }
    out.push_back(grad_case("dac_forward", values, [](auto& p) {
      DacParams<double> dac;
      for (int t = 0; t < 3; ++t) dac.stages.push_back({p[1 + 3 * t], p[2 + 3 * t], p[3 + 3 * t]});
      return dac_forward(p[0], dac);
    }, rng));
  }
  out.push_back(grad_case("hsn_select", {normal({1, 6}, rng), normal({4, 6}, rng), normal({4}, rng)},
                          [](auto& p) { return hsn_select(p[0], Fcnn<double>{p[1], p[2]}); }, rng));
  {
    const BlockHyper h{4, 1, 2.0, BlockKind::transformer};
    const ParamLayout l = param_layout(h);
    T rows(Shape{3, l.total});
    for (int r = 0; r < 3; ++r) rows.vec().segment(r * l.total, l.total) = l.initialize<double>(rng).vec();
    out.push_back(grad_case("weightbox_mix", {normal({1, 3}, rng), rows}, [&](auto& p) {
      return weightbox_mix(p[0], WeightBox<double>{p[1], l, 1});
    }, rng));
    out.push_back(grad_case("hypertrans_forward", {normal({1, 4, 4, 4}, rng), normal({1, 8}, rng), rows,
                                                   normal({3, 8}, rng), normal({3}, rng)},
                            [&](auto& p) {
                              HyperTransBlock<double> blk{Fcnn<double>{p[3], p[4]},
                                                          std::make_shared<WeightBox<double>>(WeightBox<double>{p[2], l, 1}), h};
                              return hypertrans_forward(p[0], p[1], blk);
                            },
                            rng, 300));
  }
  return out;
}

CheckResult model_gradient(std::mt19937_64& rng, std::size_t samples) {
  const ModelDesc desc = hyperize(restormer_desc(4, {1, 1, 1, 1}, {1, 1, 1, 1}, 2.0), 3, {2, 2, 2, 2});
  Model<double> model(desc, rng());
  const V x(uniform({1, 3, 16, 16}, rng, 0.0, 1.0));
  const V image_weights(normal({1, 3, 16, 16}, rng));
  const V giv_weights(normal({1, desc.giv_length()}, rng));
  // The GIV term gives the classifier a direct path; through the selection
  // alone its gradients sit at the finite-difference noise level.
  auto loss = [&] {
    const auto r = model.forward(x);
    return add(sum(mul(r.image, image_weights)), sum(mul(r.giv, giv_weights)));
  };
  GradCheckOptions opt;
  opt.samples = samples;
  opt.seed = rng();
  opt.abs_floor = 1e-3;
  opt.abs_tol = 1e-7;
  const GradCheckReport r = finite_diff_check(loss, model.parameter_vars(), opt);
  std::string groups;
  for (ParamGroup g : {ParamGroup::encoder, ParamGroup::decoder, ParamGroup::dac, ParamGroup::fcnn, ParamGroup::weight_box}) {
    bool present = false;
    for (const auto& p : model.parameters()) present = present || p.group == g;
    if (present) groups += (groups.empty() ? "" : ",") + to_string(g);
  }
  return make("grad end-to-end toy HAIR (C=4, 1 block/level)", r.passed && r.relative_checked >= 500,
              std::to_string(r.checked) + " coords (" + std::to_string(r.relative_checked) + " relative) over " +
                  std::to_string(model.parameters().size()) + " tensors [" + groups + "], max rel err " +
                  fmt(r.max_rel_err) + ", max abs err below floor " + fmt(r.max_abs_fallback_err) +
                  (r.passed ? std::string{} : ", worst " + r.worst));
}

// ---------------------------------------------------------------------------
// Invariants
// ---------------------------------------------------------------------------

CheckResult simplex_draws(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n_dist(1, 9), c_dist(1, 8);
  std::uniform_real_distribution<double> mag(0.01, 20.0);
  double worst_sum = 0.0;
  bool in_range = true;
  for (int d = 0; d < 10000; ++d) {
    const int n = n_dist(rng);
    const Index len = 2 * c_dist(rng);
    const V giv(normal({1, len}, rng, mag(rng)));
    const Fcnn<double> fcnn{V(normal({n, len}, rng, mag(rng))), V(normal({n}, rng, mag(rng)))};
    const T vs = hsn_select(giv, fcnn).value();
    worst_sum = std::max(worst_sum, std::abs(vs.vec().sum() - 1.0));
    in_range = in_range && vs.vec().minCoeff() >= 0.0 && vs.vec().maxCoeff() <= 1.0;
  }
  return make("hsn_select lies on the simplex (10^4 draws)", worst_sum <= 1e-6 && in_range,
              "max |sum - 1| = " + fmt(worst_sum) + (in_range ? "" : ", element outside [0,1]"));
}

CheckResult degenerate_selections(std::mt19937_64& rng) {
  const BlockHyper h{4, 2, 2.0, BlockKind::transformer};
  const ParamLayout l = param_layout(h);
  const V x(normal({1, 4, 5, 6}, rng));
  const V giv(normal({1, 8}, rng));

  // N = 1: selection is exactly 1 and the block equals the plain block.
  const T row = l.initialize<double>(rng);
  HyperTransBlock<double> one{Fcnn<double>{V(normal({1, 8}, rng)), V(normal({1}, rng))},
                              std::make_shared<WeightBox<double>>(WeightBox<double>{V(row.reshaped({1, l.total})), l, 1}), h};
  const T sel = hsn_select(giv, one.fcnn).value();
  const T a = hypertrans_forward(x, giv, one).value();
  const T b = block_forward(x, V(row), l, h).value();
  if (sel[0] != 1.0 || a.vec() != b.vec()) return make("N=1 and one-hot selections are exact", false, "N=1 differs");

  // One-hot selecting vectors pick out single Weight Box rows.
  T rows(Shape{4, l.total});
  for (int r = 0; r < 4; ++r) rows.vec().segment(r * l.total, l.total) = l.initialize<double>(rng).vec();
  HyperTransBlock<double> four{Fcnn<double>{V(normal({4, 8}, rng)), V(normal({4}, rng))},
                               std::make_shared<WeightBox<double>>(WeightBox<double>{V(rows), l, 1}), h};
  for (int j = 0; j < 4; ++j) {
    T e(Shape{1, 4});
    e[j] = 1.0;
    const T mixed = hypertrans_forward(x, giv, four, std::optional<V>(V(e))).value();
    const T plain = block_forward(x, V(T({l.total}, rows.vec().segment(j * l.total, l.total))), l, h).value();
    if (mixed.vec() != plain.vec())
      return make("N=1 and one-hot selections are exact", false, "one-hot row " + std::to_string(j) + " differs");
  }
  return make("N=1 and one-hot selections are exact", true, "max deviation 0");
}

CheckResult box_sharing(std::mt19937_64& rng) {
  const ModelDesc desc = hyperize(restormer_desc(4, {1, 1, 1, 2}, {1, 1, 1, 1}, 2.0), 3, {3, 3, 3, 3});
  Model<double> model(desc, rng());
  const auto* lat = &model.groups()[3];
  if (lat->hyper_blocks.size() != 2 || lat->hyper_blocks[0].box.get() != lat->hyper_blocks[1].box.get())
    return make("Weight Box shared per level, FCNN per block", false, "latent blocks do not share one box");
  for (const auto& g : model.groups()) {
    for (const auto& b : g.hyper_blocks) {
      if (b.box.get() != g.box.get()) return make("Weight Box shared per level, FCNN per block", false, g.desc.name);
    }
  }
  const V x(uniform({1, 3, 16, 16}, rng, 0.0, 1.0));
  const auto base = model.forward(x);

  // Perturbing one block's FCNN changes only that block's selecting vector.
  model.parameter("lat.block0.hsn.bias").mutable_value()[0] += 0.5;
  const auto after_fcnn = model.forward(x);
  const bool own_changed = after_fcnn.selections[0].at("lat.block0").vec() != base.selections[0].at("lat.block0").vec();
  bool others_same = true;
  for (const auto& [key, value] : base.selections[0]) {
    if (key != "lat.block0") others_same = others_same && after_fcnn.selections[0].at(key).vec() == value.vec();
  }
  model.parameter("lat.block0.hsn.bias").mutable_value()[0] -= 0.5;

  // Perturbing a shared box row moves the output although no FCNN changed.
  const auto& lat_layout = model.groups()[3].layout;
  model.parameter("lat.box").mutable_value()[lat_layout.at("mdta.project_out").offset] += 0.25;
  const auto after_box = model.forward(x);
  const bool box_moves = after_box.image.value().vec() != base.image.value().vec();
  bool selections_same = true;
  for (const auto& [key, value] : base.selections[0])
    selections_same = selections_same && after_box.selections[0].at(key).vec() == value.vec();

  const bool ok = own_changed && others_same && box_moves && selections_same;
  return make("Weight Box shared per level, FCNN per block", ok,
              std::string("fcnn local: ") + (own_changed && others_same ? "yes" : "no") +
                  ", shared box effective: " + (box_moves && selections_same ? "yes" : "no"));
}

CheckResult shape_contracts(std::mt19937_64& rng) {
  const ModelDesc desc = hyperize(restormer_desc(4, {1, 1, 1, 1}, {1, 1, 1, 1}, 2.0), 3, {2, 2, 2, 2});
  Model<double> model(desc, rng());
  std::ostringstream detail;
  bool ok = true;
  for (auto [b, h, w] : std::vector<std::array<Index, 3>>{{1, 16, 16}, {2, 24, 40}, {1, 19, 23}}) {
    const auto r = model.forward(V(uniform({b, 3, h, w}, rng, 0.0, 1.0)));
    ok = ok && r.image.shape() == Shape{b, 3, h, w} && r.giv.shape() == Shape{b, desc.giv_length()};
    detail << to_string(r.image.shape()) << " giv " << to_string(r.giv.shape()) << "; ";
  }
  return make("model preserves [B,3,H,W]; GIV length 2C", ok, detail.str());
}

CheckResult zero_identities(std::mt19937_64& rng) {
  bool ok = true;
  std::string detail;
  // Zero output projection: the global residual returns the input.
  {
    const ModelDesc desc = hyperize(restormer_desc(4, {1, 1, 1, 1}, {1, 1, 1, 1}, 2.0), 3, {2, 2, 2, 2});
    Model<double> model(desc, rng());
    model.output_conv().mutable_value().set_zero();
    const T x = uniform({1, 3, 20, 18}, rng, 0.0, 1.0);
    if (model.forward(V(x)).image.value().vec() != x.vec()) {
      ok = false;
      detail += "model output != input; ";
    }
  }
  // Zero sub-block projections: a transformer block is the identity.
  {
    const BlockHyper h{4, 2, 2.0, BlockKind::transformer};
    const ParamLayout l = param_layout(h);
    T w = l.initialize<double>(rng);
    for (const char* name : {"mdta.project_out", "gdfn.project_out"}) {
      const auto& e = l.at(name);
      w.vec().segment(e.offset, e.size()).setZero();
    }
    const T x = normal({2, 4, 5, 5}, rng);
    if (transformer_block_forward(V(x), V(w), h).value().vec() != x.vec()) {
      ok = false;
      detail += "transformer block not identity; ";
    }
  }
  {
    const BlockHyper h{3, 1, 2.0, BlockKind::res_conv};
    const ParamLayout l = param_layout(h);
    T w = l.initialize<double>(rng);
    const auto& e = l.at("conv.b");
    w.vec().segment(e.offset, e.size()).setZero();
    const T x = normal({1, 3, 5, 5}, rng);
    if (block_forward(V(x), V(w), l, h).value().vec() != x.vec()) {
      ok = false;
      detail += "res_conv block not identity; ";
    }
  }
  return make("zero-parameter residual identities", ok, ok ? "exact" : detail);
}

CheckResult layout_round_trip(std::mt19937_64& rng) {
  bool ok = true;
  for (const BlockHyper& h : {BlockHyper{4, 1, 2.0, BlockKind::transformer}, BlockHyper{48, 8, 2.66, BlockKind::transformer},
                              BlockHyper{6, 1, 2.0, BlockKind::res_conv}}) {
    const ParamLayout l = param_layout(h);
    const T w = normal({l.total}, rng);
    const auto parts = l.unflatten(w);
    ok = ok && parts.size() == l.entries.size() && l.flatten(parts).vec() == w.vec();
    for (std::size_t i = 0; i < parts.size(); ++i) ok = ok && parts[i].shape() == l.entries[i].shape;
  }
  const ParamLayout small = param_layout(BlockHyper{4, 1, 2.0, BlockKind::transformer});
  return make("ParamLayout flatten/unflatten round trip", ok && small.total == 421,
              "C=4 transformer block P = " + std::to_string(small.total));
}

}  // namespace

SuiteReport run_distributivity_suite(std::uint64_t seed, int draws) {
  SuiteReport report{"distributivity", {}};
  report.results.push_back(distributivity_draws(seed, draws));
  report.results.push_back(conv_matches_reference(seed + 1));
  return report;
}

SuiteReport run_gradient_suite(std::uint64_t seed, std::size_t model_samples) {
  SuiteReport report{"gradients", {}};
  std::mt19937_64 rng(seed);
  for (auto& r : primitive_gradients(rng)) report.results.push_back(std::move(r));
  for (auto& r : block_gradients(rng)) report.results.push_back(std::move(r));
  for (auto& r : mechanism_gradients(rng)) report.results.push_back(std::move(r));
  report.results.push_back(model_gradient(rng, model_samples));
  return report;
}

SuiteReport run_invariant_suite(std::uint64_t seed) {
  SuiteReport report{"invariants", {}};
  std::mt19937_64 rng(seed);
  report.results.push_back(simplex_draws(rng));
  report.results.push_back(degenerate_selections(rng));
  report.results.push_back(box_sharing(rng));
  report.results.push_back(shape_contracts(rng));
  report.results.push_back(zero_identities(rng));
  report.results.push_back(layout_round_trip(rng));
  return report;
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"distributivity", "gradients", "invariants", "all"};
  return names;
}

std::vector<SuiteReport> run_suites(const std::string& which, std::uint64_t seed) {
  if (std::find(suite_names().begin(), suite_names().end(), which) == suite_names().end())
    throw std::invalid_argument("unknown suite '" + which + "'");
  std::vector<SuiteReport> out;
  if (which == "distributivity" || which == "all") out.push_back(run_distributivity_suite(seed));
  if (which == "gradients" || which == "all") out.push_back(run_gradient_suite(seed));
  if (which == "invariants" || which == "all") out.push_back(run_invariant_suite(seed));
  return out;
}

}  // namespace hair
