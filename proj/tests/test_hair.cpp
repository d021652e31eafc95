#include "helpers.hpp"
#include "reference.hpp"

#include "hair/gradcheck.hpp"
#include "hair/model.hpp"
#include "hair/training.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace hair;
using testing::max_abs;
using testing::max_abs_diff;
using testing::uniform;
using testing::uniform_int;

namespace {

using V = Var<double>;
using T = TensorD;

ModelDesc toy_desc(Index c, std::vector<int> blocks = {1, 1, 1, 1}, std::vector<int> boxes = {2, 2, 2, 2}) {
  return hyperize(restormer_desc(c, blocks, {1, 1, 1, 1}, 2.66), 3, boxes);
}

DacParams<double> random_dac(Index in, const std::vector<Index>& widths, std::mt19937_64& rng) {
  DacParams<double> dac;
  for (Index out : widths) {
    dac.stages.push_back({V::parameter(uniform({in, in, 3, 3}, rng, -0.2, 0.2)),
                          V::parameter(uniform({in, in, 3, 3}, rng, -0.2, 0.2)),
                          V::parameter(uniform({out, in, 3, 3}, rng, -0.2, 0.2))});
    in = out;
  }
  return dac;
}

Fcnn<double> fcnn(T weight, T bias) { return {V::parameter(std::move(weight)), V::parameter(std::move(bias))}; }

void set_zero(Var<double> v) { v.mutable_value().set_zero(); }

}  // namespace

TEST_SUITE("hair-core") {

TEST_CASE("DAC backbone step") {
  std::mt19937_64 rng(1);
  DacParams<double> dac = random_dac(64, {32, 16, 16}, rng);
  const V x(uniform({1, 64, 16, 16}, rng));
  CHECK(dac_backbone_step(x, dac, 0).shape() == Shape{1, 32, 8, 8});

  set_zero(dac.stages[0].res_a);
  set_zero(dac.stages[0].res_b);
  CHECK(dac_backbone_step(x, dac, 0).value().vec() == conv2d(x, dac.stages[0].down, 2, 1).value().vec());
  CHECK_THROWS_AS(dac_backbone_step(x, dac, 3), std::out_of_range);
  CHECK_THROWS_AS(dac_backbone_step(V(uniform({1, 64, 5, 6}, rng)), dac, 0), ShapeError);

  DacParams<double> small = random_dac(3, {2, 2, 2}, rng);
  V in = V::parameter(uniform({1, 3, 6, 6}, rng));
  const V r(uniform({1, 2, 3, 3}, rng));
  const auto& st = small.stages[0];
  const auto report = finite_diff_check([&] { return sum(mul(dac_backbone_step(in, small, 0), r)); },
                                        {in, st.res_a, st.res_b, st.down});
  CHECK(report.passed);
  CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("DAC forward") {
  std::mt19937_64 rng(2);
  DacParams<double> dac = random_dac(8, {4, 4, 4}, rng);
  const T x = uniform({2, 8, 16, 24}, rng);
  const T giv = dac_forward(V(x), dac).value();
  CHECK(giv.shape() == Shape{2, 4});

  V f(x);
  for (int t = 0; t < 3; ++t) f = dac_backbone_step(f, dac, t);
  CHECK(giv.vec() == global_average_pool(f).value().vec());

  // Loop oracle for one sample.
  ref::Feat rf = ref::from_tensor(x, 1);
  for (const auto& st : dac.stages) {
    rf = ref::add(rf, ref::conv(ref::gelu(ref::conv(rf, st.res_a.value(), 1, 1)), st.res_b.value(), 1, 1));
    rf = ref::conv(rf, st.down.value(), 2, 1);
  }
  const std::vector<double> expect = ref::gap(rf);
  for (Index i = 0; i < 4; ++i) CHECK(giv.at({1, i}) == doctest::Approx(expect[i]).epsilon(1e-12));

  for (auto& st : dac.stages) {
    set_zero(st.res_a);
    set_zero(st.res_b);
    set_zero(st.down);
  }
  CHECK(max_abs(dac_forward(V(x), dac).value()) == 0.0);
  CHECK_THROWS_AS(dac_forward(V(uniform({1, 8, 12, 16}, rng)), dac), ShapeError);
}

TEST_CASE("GIV length is 2C at any resolution and the default DAC schedule") {
  const ModelDesc desc = toy_desc(4);
  CHECK(desc.dac.input == 32);
  CHECK(desc.dac.stages == std::vector<Index>{16, 8, 8});
  CHECK(default_dac_schedule(384, 48).stages == std::vector<Index>{192, 96, 96});
  const Model<float> model(desc, 3);
  for (Index s : {64, 96, 40}) {
    const TensorF img = gen_clean(5, s, s).reshaped({1, 3, s, s});
    CHECK(model.giv(Var<float>(img)).shape() == Shape{1, 8});
  }
}

TEST_CASE("HSN selection examples") {
  std::mt19937_64 rng(3);
  const V giv(uniform({6}, rng));
  const T uniform_sel = hsn_select(giv, fcnn(T({4, 6}), T({4}))).value();
  CHECK(uniform_sel.shape() == Shape{1, 4});
  for (Index i = 0; i < 4; ++i) CHECK(uniform_sel[i] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(hsn_select(giv, fcnn(uniform({1, 6}, rng), uniform({1}, rng))).value()[0] == 1.0);
  const T pair = hsn_select(giv, fcnn(T({2, 6}), T({2}, {0.0, std::log(3.0)}))).value();
  CHECK(pair[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(pair[1] == doctest::Approx(0.75).epsilon(1e-14));
  CHECK_THROWS_AS(hsn_select(V(uniform({5}, rng)), fcnn(T({2, 6}), T({2}))), ShapeError);
}

TEST_CASE("HSN outputs stay on the simplex and keep the logit ordering under GIV scaling") {
  std::mt19937_64 rng(4);
  for (int draw = 0; draw < 10000; ++draw) {
    const Index n = uniform_int(rng, 1, 9), width = 2 * uniform_int(rng, 1, 4);
    const Fcnn<double> f = fcnn(uniform({n, width}, rng, -2, 2), uniform({n}, rng, -2, 2));
    const T g = uniform({width}, rng, -50, 50);
    const double alpha = std::pow(10.0, uniform(Shape{1}, rng, -2, 2)[0]);
    for (const T& giv : {g, T(g.shape(), alpha * g.vec())}) {
      const T vs = hsn_select(V(giv), f).value();
      CHECK(std::abs(vs.vec().sum() - 1.0) <= 1e-6);
      CHECK(vs.vec().minCoeff() >= 0.0);
      CHECK(vs.vec().maxCoeff() <= 1.0);
      const T logits = linear(V(giv.reshaped({1, width})), f.weight, std::optional<V>(f.bias)).value();
      Index a = 0, b = 0;
      logits.vec().maxCoeff(&a);
      vs.vec().maxCoeff(&b);
      CHECK(vs[a] == vs[b]);
    }
  }
}

TEST_CASE("Weight Box mixing") {
  const ParamLayout layout{{{"w", {2}, 0}}, 2};
  WeightBox<double> box{V::parameter(T({3, 2}, {1, 2, 3, 4, 5, 6})), layout, 1};
  const T mixed = weightbox_mix(V(T({3}, {0.2, 0.3, 0.5})), box).value();
  CHECK(mixed.shape() == Shape{1, 2});
  CHECK(mixed[0] == doctest::Approx(3.6).epsilon(1e-15));
  CHECK(mixed[1] == doctest::Approx(4.6).epsilon(1e-15));
  for (Index k = 0; k < 3; ++k) {
    T onehot({3});
    onehot[k] = 1.0;
    const T row = weightbox_mix(V(onehot), box).value();
    CHECK(row[0] == box.rows.value().at({k, 0}));
    CHECK(row[1] == box.rows.value().at({k, 1}));
  }
  WeightBox<double> flat{V::parameter(T({3, 2}, {0.7, -1.1, 0.7, -1.1, 0.7, -1.1})), layout, 1};
  std::mt19937_64 rng(5);
  for (int draw = 0; draw < 50; ++draw) {
    const T vs = softmax(V(uniform({3}, rng, -4, 4))).value();
    const T w = weightbox_mix(V(vs), flat).value();
    CHECK(w[0] == doctest::Approx(0.7).epsilon(1e-14));
    CHECK(w[1] == doctest::Approx(-1.1).epsilon(1e-14));
  }
  CHECK_THROWS_AS(weightbox_mix(V(T({2})), box), ShapeError);
}

TEST_CASE("HyperTrans block degeneracies and per-layer distributivity") {
  std::mt19937_64 rng(6);
  const BlockHyper h{4, 2, 2.0, BlockKind::transformer};
  const ParamLayout l = param_layout(h);
  std::vector<T> rows;
  for (int i = 0; i < 3; ++i) rows.push_back(l.initialize<double>(rng));
  T stacked({3, l.total});
  for (int i = 0; i < 3; ++i) stacked.vec().segment(i * l.total, l.total) = rows[i].vec();

  const T x = uniform({1, 4, 6, 6}, rng);
  HyperTransBlock<double> single{fcnn(uniform({1, 6}, rng), uniform({1}, rng)),
                                 std::make_shared<WeightBox<double>>(WeightBox<double>{V(rows[0].reshaped({1, l.total})), l, 1}), h};
  const T direct = transformer_block_forward(V(x), V(rows[0]), h).value();
  for (int draw = 0; draw < 5; ++draw) {
    CHECK(hypertrans_forward(V(x), V(uniform({6}, rng, -10, 10)), single).value().vec() == direct.vec());
  }

  HyperTransBlock<double> multi{fcnn(uniform({3, 6}, rng), uniform({3}, rng)),
                                std::make_shared<WeightBox<double>>(WeightBox<double>{V(stacked), l, 1}), h};
  for (Index k = 0; k < 3; ++k) {
    T onehot({1, 3});
    onehot[k] = 1.0;
    const T forced = hypertrans_forward(V(x), V(uniform({6}, rng)), multi, std::optional<V>(V(onehot))).value();
    CHECK(forced.vec() == transformer_block_forward(V(x), V(rows[k]), h).value().vec());
  }

  // Each convolution inside the block: mixed kernel == mixture of per-row outputs.
  const T vs = softmax(V(uniform({3}, rng, -2, 2))).value();
  const T w = weightbox_mix(V(vs), *multi.box).value().reshaped({l.total});
  const T feat = uniform({1, 4, 6, 6}, rng);
  for (const auto& [name, groups, pad] : std::vector<std::tuple<std::string, int, int>>{
           {"mdta.qkv", 1, 0}, {"mdta.qkv_dw", 12, 1}, {"mdta.project_out", 1, 0}, {"gdfn.project_in", 1, 0}}) {
    const auto& e = l.at(name);
    const Index cin = e.shape[1] * groups;
    const T input = cin == 4 ? feat : uniform({1, cin, 6, 6}, rng);
    auto kernel_of = [&](const T& flat) { return T(e.shape, flat.vec().segment(e.offset, e.size())); };
    const T lhs = conv2d(V(input), V(kernel_of(w)), 1, pad, groups).value();
    T rhs(lhs.shape());
    double scale = 0.0;
    for (int k = 0; k < 3; ++k) {
      rhs.vec() += vs[k] * conv2d(V(input), V(kernel_of(rows[k])), 1, pad, groups).value().vec();
      scale = std::max(scale, max_abs(kernel_of(rows[k])));
    }
    CHECK(max_abs_diff(lhs, rhs) <= 1e-10 * max_abs(input) * scale);
  }
}

TEST_CASE("hyperize reproduces the published placement and box sizes") {
  const ModelDesc base = restormer_desc(48, {4, 6, 6, 8}, {1, 2, 4, 8});
  const ModelDesc desc = hyperize(base, 3, {5, 7, 7, 9});
  REQUIRE(desc.groups.size() == 7);
  const std::vector<std::string> names{"enc1", "enc2", "enc3", "lat", "dec3", "dec2", "dec1"};
  const std::vector<int> blocks{4, 6, 6, 8, 6, 6, 4}, boxes{5, 7, 7, 9, 7, 7, 5};
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(desc.groups[i].name == names[i]);
    CHECK(desc.groups[i].blocks == blocks[i]);
    CHECK(desc.groups[i].hyper == (i >= 3));
    if (i >= 3) CHECK(desc.groups[i].box_size == boxes[i]);
  }
  CHECK(desc.groups[3].width == 8 * 48);
  CHECK(desc.dac.input == 384);
  CHECK(desc.dac.stages.back() == 96);
  CHECK(desc.giv_length() == 96);

  for (int split = 1; split <= 6; ++split) {
    const ModelDesc alt = hyperize(base, split, {5, 7, 7, 9});
    CHECK(alt.dac.input == base.groups[static_cast<std::size_t>(split)].width);
  }
  CHECK_THROWS_AS(hyperize(base, 0, {5, 7, 7, 9}), std::invalid_argument);
  CHECK_THROWS_AS(hyperize(base, 7, {5, 7, 7, 9}), std::invalid_argument);
  CHECK_THROWS_AS(hyperize(base, 3, {5, 7, 7}), std::invalid_argument);
  CHECK_THROWS_AS(hyperize(base, 3, {5, 7, 0, 9}), std::invalid_argument);
  CHECK_THROWS_AS(hyperize(desc, 3, {5, 7, 7, 9}), std::invalid_argument);
  CHECK_THROWS_AS(hyperize(base, 3, {5, 7, 7, 9}, DacSchedule{100, {48, 96, 96}}), std::invalid_argument);
  CHECK_THROWS_AS(hyperize(restormer_desc(4, {0, 1, 1, 1}, {1, 1, 1, 1}), 6, {1, 1, 1, 1}), std::invalid_argument);
}

TEST_CASE("alternative splits build and run a forward pass") {
  const ModelDesc base = restormer_desc(2, {1, 1, 1, 1}, {1, 1, 1, 1});
  const TensorF img = gen_clean(1, 16, 16).reshaped({1, 3, 16, 16});
  for (int split = 1; split <= 6; ++split) {
    const Model<float> model(hyperize(base, split, {2, 2, 2, 2}), 1);
    const auto r = model.forward(Var<float>(img));
    CHECK(r.image.shape() == Shape{1, 3, 16, 16});
    CHECK(r.giv.shape() == Shape{1, 4});
  }
}

TEST_CASE("model shape contract and global residual") {
  Model<float> model(toy_desc(4), 2);
  std::mt19937_64 rng(7);
  for (const Shape& s : {Shape{1, 3, 64, 64}, Shape{2, 3, 128, 128}, Shape{1, 3, 21, 37}}) {
    const auto r = model.forward(Var<float>(uniform<float>(s, rng, 0, 1)));
    CHECK(r.image.shape() == s);
    CHECK(r.giv.shape() == Shape{s[0], 8});
    CHECK(r.selections.size() == static_cast<std::size_t>(s[0]));
  }
  CHECK_THROWS_AS(model.forward(Var<float>(TensorF({1, 3, 20, 20})), ForwardOptions{false}), ShapeError);
  CHECK_THROWS_AS(model.forward(Var<float>(TensorF({1, 4, 16, 16}))), ShapeError);

  model.output_conv().mutable_value().set_zero();
  const TensorF x = uniform<float>({1, 3, 40, 24}, rng, 0, 1);
  CHECK(model.forward(Var<float>(x)).image.value().vec() == x.vec());
}

TEST_CASE("end-to-end toy network matches the loop oracle") {
  Model<double> model(toy_desc(2), 11);
  std::mt19937_64 rng(8);
  // Larger box rows and FCNN weights make the selection path matter.
  for (const auto& p : model.parameters()) {
    if (p.group == ParamGroup::fcnn) {
      Var<double> v = p.var;
      v.mutable_value() = uniform(v.shape(), rng, -3, 3);
    }
  }
  const ref::Network oracle{model};
  for (const Shape& s : {Shape{1, 3, 16, 16}, Shape{1, 3, 13, 10}, Shape{1, 3, 24, 8}}) {
    const T x = uniform(s, rng, 0, 1);
    const auto r = model.forward(V(x));
    std::vector<double> giv;
    const T expect = ref::to_tensor(oracle.forward(ref::from_tensor(x), &giv));
    CHECK(max_abs_diff(r.image.value(), expect) <= 1e-8);
    for (Index i = 0; i < 4; ++i) CHECK(std::abs(r.giv.value()[i] - giv[i]) <= 1e-8);
  }
}

TEST_CASE("Weight Box sharing and per-block FCNN locality") {
  Model<double> model(toy_desc(2, {1, 1, 2, 2}, {2, 3, 2, 2}), 12);
  std::mt19937_64 rng(9);
  const V giv(uniform({1, 4}, rng, -1, 1));
  auto outputs = [&] {
    std::map<std::string, T> out;
    for (const auto& g : model.groups()) {
      if (!g.desc.hyper) continue;
      std::mt19937_64 xr(g.desc.level);
      const V x(uniform({1, g.desc.width, 4, 4}, xr));
      for (std::size_t b = 0; b < g.hyper_blocks.size(); ++b) {
        out[g.desc.name + std::to_string(b)] = hypertrans_forward(x, giv, g.hyper_blocks[b]).value();
      }
    }
    return out;
  };
  for (const auto& g : model.groups()) {
    if (!g.desc.hyper) continue;
    for (const auto& blk : g.hyper_blocks) CHECK(blk.box.get() == g.box.get());
  }

  const auto before = outputs();
  Var<double> box = model.parameter("dec2.box");
  box.mutable_value().vec().segment(box.dim(1), box.dim(1)).array() += 0.05;
  const auto after = outputs();
  for (const auto& [name, value] : before) {
    CAPTURE(name);
    CHECK((value.vec() != after.at(name).vec()) == name.starts_with("dec2"));
  }

  const T img = uniform({1, 3, 16, 16}, rng, 0, 1);
  const auto sel_before = model.forward(V(img)).selections.front();
  Var<double> w = model.parameter("lat.block1.hsn.weight");
  w.mutable_value().vec().head(w.dim(1)).array() += 0.3;
  const auto sel_after = model.forward(V(img)).selections.front();
  REQUIRE(sel_before.size() == 6);
  for (const auto& [name, vs] : sel_before) {
    CAPTURE(name);
    CHECK((vs.vec() != sel_after.at(name).vec()) == (name == "lat.block1"));
  }
}

TEST_CASE("batched forward equals per-sample forwards") {
  const Model<float> model(toy_desc(4), 13);
  std::mt19937_64 rng(10);
  const TensorF a = uniform<float>({1, 3, 24, 24}, rng, 0, 1), b = uniform<float>({1, 3, 24, 24}, rng, 0, 1);
  TensorF both({2, 3, 24, 24});
  both.vec() << a.vec(), b.vec();
  const auto batched = model.forward(Var<float>(both));
  TensorF split({2, 3, 24, 24});
  split.vec() << model.forward(Var<float>(a)).image.value().vec(), model.forward(Var<float>(b)).image.value().vec();
  CHECK(max_abs_diff(batched.image.value(), split) <= 1e-6);
  CHECK(batched.selections.size() == 2);
}

TEST_CASE("end-to-end gradients span DAC, FCNN, Weight Box and encoder parameters") {
  Model<double> model(toy_desc(2), 14);
  std::mt19937_64 rng(11);
  const V x(uniform({1, 3, 16, 16}, rng, 0, 1));
  const V r(uniform({1, 3, 16, 16}, rng));
  const V r2(uniform({1, 4}, rng, -100, 100));
  GradCheckOptions opts;
  opts.samples = 800;
  opts.abs_floor = 1e-3;
  opts.abs_tol = 1e-7;
  opts.seed = 3;
  const auto report = finite_diff_check(
      [&] {
        const auto out = model.forward(x);
        return add(sum(mul(out.image, r)), sum(mul(out.giv, r2)));
      },
      model.parameter_vars(), opts);
  CHECK(report.passed);
  CHECK(report.max_rel_err <= 1e-4);
  CHECK(report.relative_checked >= 100);
}

TEST_CASE("a two-level CNN with N=[2,2] builds and trains") {
  const ModelDesc desc =
      hyperize(restormer_desc(4, {1, 1}, {1, 1}, 2.66, BlockKind::res_conv), 1, {2, 2});
  Model<float> model(desc, 15);
  std::mt19937_64 rng(12);
  const TensorF clean = uniform<float>({2, 3, 16, 16}, rng, 0, 1);
  const TensorF noisy(clean.shape(), clean.vec() + uniform<float>(clean.shape(), rng, -0.1, 0.1).vec());
  auto state = make_optim_state<float>([&] {
    std::vector<TensorF> v;
    for (const auto& p : model.parameters()) v.push_back(p.var.value());
    return v;
  }());
  std::vector<double> losses;
  for (int step = 0; step < 30; ++step) {
    for (auto& p : model.parameters()) Var<float>(p.var).zero_grad();
    const auto loss = l1_loss(model.forward(Var<float>(noisy)).image, Var<float>(clean));
    losses.push_back(loss.value()[0]);
    backward(loss);
    adamw_step(model.parameters(), state, 1e-3);
  }
  CHECK(losses.back() < losses.front());
}

}  // TEST_SUITE
