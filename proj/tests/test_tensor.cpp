#include "helpers.hpp"
#include "reference.hpp"

#include "hair/gradcheck.hpp"
#include "hair/ops.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <random>

using namespace hair;
using testing::max_abs;
using testing::max_abs_diff;
using testing::uniform;
using testing::uniform_int;

namespace {

using V = Var<double>;
using T = TensorD;

V param(T t) { return V::parameter(std::move(t)); }
V constant(T t) { return V(std::move(t)); }

}  // namespace

TEST_SUITE("tensor-core") {

TEST_CASE("tensor construction enforces numel and finiteness") {
  CHECK_THROWS_AS(T({2, 3}, T::Vector::Zero(5)), ShapeError);
  T::Vector bad = T::Vector::Zero(4);
  bad[2] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(T({2, 2}, bad), std::domain_error);
  bad[2] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(T({4}, bad), std::domain_error);
  CHECK_THROWS_AS(T({-1, 2}), ShapeError);

  const T t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == numel(t.shape()));
  CHECK(t.at({1, 0}) == 4);
  CHECK_THROWS_AS(t.at({2, 0}), std::out_of_range);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  CHECK(t.reshaped({3, 2}).at({2, 1}) == 6);
}

TEST_CASE("conv2d examples") {
  std::mt19937_64 rng(1);
  const T x = uniform({1, 1, 5, 4}, rng);
  CHECK(conv2d(constant(x), constant(T({1, 1, 1, 1}, {1.0}))).value().vec() == x.vec());

  const T small({1, 1, 2, 2}, {1, 2, 3, 4});
  const T out = conv2d(constant(small), constant(T::constant({1, 1, 2, 2}, 1.0))).value();
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  CHECK(out[0] == 10.0);
}

TEST_CASE("conv2d errors") {
  const V x(T({1, 4, 5, 5}));
  CHECK_THROWS_AS(conv2d(x, V(T({2, 3, 3, 3})), 1, 1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(x, V(T({3, 2, 3, 3})), 1, 1, 3), ShapeError);
  CHECK_THROWS_AS(conv2d(x, V(T({4, 4, 3, 3})), 0, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(x, V(T({4, 4, 3, 3})), -1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(x, V(T({4, 4, 9, 9})), 1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(V(T({4, 5, 5})), V(T({4, 4, 3, 3}))), ShapeError);
}

TEST_CASE("conv2d matches the loop oracle across strides, paddings and groups") {
  std::mt19937_64 rng(2);
  for (int draw = 0; draw < 40; ++draw) {
    const int groups = uniform_int(rng, 1, 3);
    const Index cin = groups * uniform_int(rng, 1, 3), cout = groups * uniform_int(rng, 1, 3);
    const int k = uniform_int(rng, 1, 3), stride = uniform_int(rng, 1, 2), pad = uniform_int(rng, 0, 2);
    const Index h = uniform_int(rng, k, 9), w = uniform_int(rng, k, 9), b = uniform_int(rng, 1, 2);
    const T x = uniform({b, cin, h, w}, rng), kern = uniform({cout, cin / groups, k, k}, rng);
    const T got = conv2d(constant(x), constant(kern), stride, pad, groups).value();
    REQUIRE(got.shape() == Shape{b, cout, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1});
    for (Index n = 0; n < b; ++n) {
      const ref::Feat expect = ref::conv(ref::from_tensor(x, n), kern, stride, pad, groups);
      for (Index i = 0; i < static_cast<Index>(expect.v.size()); ++i) {
        CHECK(got[n * static_cast<Index>(expect.v.size()) + i] == doctest::Approx(expect.v[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("conv2d is linear in both arguments") {
  std::mt19937_64 rng(3);
  const T x1 = uniform({2, 3, 6, 7}, rng), x2 = uniform({2, 3, 6, 7}, rng), k1 = uniform({4, 3, 3, 3}, rng),
          k2 = uniform({4, 3, 3, 3}, rng);
  const double a = 0.7, b = -1.3;
  auto conv = [](const T& x, const T& k) { return conv2d(constant(x), constant(k), 1, 1).value(); };
  const T lhs_x = conv(T(x1.shape(), a * x1.vec() + b * x2.vec()), k1);
  const T rhs_x(lhs_x.shape(), a * conv(x1, k1).vec() + b * conv(x2, k1).vec());
  CHECK(max_abs_diff(lhs_x, rhs_x) <= 1e-12);
  const T lhs_k = conv(x1, T(k1.shape(), a * k1.vec() + b * k2.vec()));
  const T rhs_k(lhs_k.shape(), a * conv(x1, k1).vec() + b * conv(x1, k2).vec());
  CHECK(max_abs_diff(lhs_k, rhs_k) <= 1e-12);
}

TEST_CASE("distributive law: mixed kernel equals mixture of convolutions") {
  std::mt19937_64 rng(4);
  for (int draw = 0; draw < 100; ++draw) {
    const int n = uniform_int(rng, 1, 8), k = uniform_int(rng, 0, 1) ? 3 : 1;
    const Index cin = uniform_int(rng, 1, 8), cout = uniform_int(rng, 1, 8);
    const double mag = std::pow(10.0, uniform_int(rng, -2, 2));
    const T x = uniform({1, cin, 7, 6}, rng, -mag, mag);
    std::vector<T> kernels;
    std::vector<double> vs;
    T mixed({cout, cin, k, k});
    T mixture({1, cout, 7, 6});
    double kmax = 0.0;
    for (int i = 0; i < n; ++i) {
      kernels.push_back(uniform({cout, cin, k, k}, rng));
      vs.push_back(uniform({1}, rng, 0.0, 1.0)[0]);
      mixed.vec() += vs.back() * kernels.back().vec();
      mixture.vec() += vs.back() * conv2d(constant(x), constant(kernels.back()), 1, k / 2).value().vec();
      kmax = std::max(kmax, max_abs(kernels.back()));
    }
    const T lhs = conv2d(constant(x), constant(mixed), 1, k / 2).value();
    CHECK(max_abs_diff(lhs, mixture) <= 1e-10 * max_abs(x) * kmax);
  }
}

TEST_CASE("global average pool") {
  CHECK(global_average_pool(V(T::constant({2, 3, 4, 5}, 1.75))).value().vec() == T::constant({2, 3}, 1.75).vec());
  const T out = global_average_pool(V(T({1, 1, 2, 2}, {1, 2, 3, 4}))).value();
  CHECK(out.shape() == Shape{1, 1});
  CHECK(out[0] == 2.5);
  std::mt19937_64 rng(5);
  for (Index s : {1, 7, 64, 96}) {
    CHECK(global_average_pool(V(uniform({2, 3, s, s + 3}, rng))).value().shape() == Shape{2, 3});
  }
  CHECK_THROWS_AS(global_average_pool(V(T({1, 2, 0, 3}))), ShapeError);
  CHECK_THROWS_AS(global_average_pool(V(T({2, 3}))), ShapeError);
}

TEST_CASE("softmax examples") {
  const T zeros = softmax(V(T({4}))).value();
  for (Index i = 0; i < 4; ++i) CHECK(zeros[i] == doctest::Approx(0.25).epsilon(1e-15));
  const T pair = softmax(V(T({2}, {0.0, std::log(3.0)}))).value();
  CHECK(pair[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(pair[1] == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(softmax(V(T({1}, {-123.4}))).value()[0] == 1.0);
  T bad({3});
  bad[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(softmax(V(bad)), std::domain_error);
}

TEST_CASE("softmax slices sum to one and stay in [0,1] for extreme logits") {
  std::mt19937_64 rng(6);
  for (int draw = 0; draw < 1000; ++draw) {
    const Index n = uniform_int(rng, 1, 16);
    const double mag = std::pow(10.0, uniform_int(rng, -3, 4));
    const T out = softmax(V(uniform({3, n}, rng, -mag, mag))).value();
    for (Index r = 0; r < 3; ++r) {
      double total = 0.0;
      for (Index i = 0; i < n; ++i) {
        const double e = out.at({r, i});
        CHECK((e >= 0.0 && e <= 1.0));
        total += e;
      }
      CHECK(std::abs(total - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("linear examples") {
  std::mt19937_64 rng(7);
  const T v = uniform({3, 4}, rng);
  T eye({4, 4});
  for (Index i = 0; i < 4; ++i) eye.at({i, i}) = 1.0;
  CHECK(linear(V(v), V(eye), std::optional<V>(V(T({4})))).value().vec() == v.vec());
  CHECK(linear(V(T({2}, {2, 3})), V(T({1, 2}, {1, 1})), std::optional<V>(V(T({1}, {0.0})))).value()[0] == 5.0);
  const T b({2}, {0.5, -2.0});
  const T out = linear(V(v), V(T({2, 4})), std::optional<V>(V(b))).value();
  for (Index r = 0; r < 3; ++r) {
    CHECK(out.at({r, 0}) == 0.5);
    CHECK(out.at({r, 1}) == -2.0);
  }
  CHECK_THROWS_AS(linear(V(v), V(T({2, 5})), std::optional<V>()), ShapeError);
  CHECK_THROWS_AS(linear(V(v), V(T({2, 4})), std::optional<V>(V(T({3})))), ShapeError);
}

TEST_CASE("primitive suite examples") {
  const T ln = layer_norm(V(T::constant({2, 5, 3, 3}, 4.2)), V(T::constant({5}, 1.0))).value();
  CHECK(max_abs(ln) == 0.0);
  CHECK(gelu(V(T({1}))).value()[0] == 0.0);
  const T g = gelu(V(T({3}, {1.0, -1.0, 2.0}))).value();
  CHECK(g[0] == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  CHECK(g[1] == doctest::Approx(-0.15865525393145707).epsilon(1e-14));
  CHECK(g[2] == doctest::Approx(1.9544997361036416).epsilon(1e-14));

  std::mt19937_64 rng(8);
  const T x = uniform({2, 3, 6, 4}, rng);
  CHECK(pixel_shuffle(pixel_unshuffle(V(x), 2), 2).value().vec() == x.vec());
  const T un = pixel_unshuffle(V(x), 2).value();
  CHECK(un.shape() == Shape{2, 12, 3, 2});
  const ref::Feat expect = ref::unshuffle2(ref::from_tensor(x, 1));
  CHECK(max_abs_diff(T({1, 12, 3, 2}, un.vec().tail(72)), ref::to_tensor(expect)) == 0.0);
  CHECK_THROWS_AS(pixel_unshuffle(V(T({1, 1, 3, 4})), 2), ShapeError);
  CHECK_THROWS_AS(pixel_shuffle(V(T({1, 3, 2, 2})), 2), ShapeError);

  const T m = matmul(V(T({2, 2}, {1, 2, 3, 4})), V(T({2, 1}, {5, 6}))).value();
  CHECK(m.vec() == T({2, 1}, {17, 39}).vec());
  CHECK_THROWS_AS(matmul(V(T({2, 3})), V(T({2, 3}))), ShapeError);
  const T tr = transpose(V(T({2, 3}, {1, 2, 3, 4, 5, 6}))).value();
  CHECK(tr.shape() == Shape{3, 2});
  CHECK(tr.vec() == T({3, 2}, {1, 4, 2, 5, 3, 6}).vec());
  CHECK(add(V(T({2}, {1, 2})), V(T({2}, {3, 4}))).value().vec() == T({2}, {4, 6}).vec());
  CHECK(mul(V(T({2}, {1, 2})), V(T({2}, {3, 4}))).value().vec() == T({2}, {3, 8}).vec());
  CHECK_THROWS_AS(add(V(T({2})), V(T({3}))), ShapeError);
  CHECK(reshape(V(x), {6, 24}).value().vec() == x.vec());
  CHECK_THROWS_AS(reshape(V(x), {5, 5}), ShapeError);
}

TEST_CASE("reflect padding mirrors without repeating the edge") {
  const T row({1, 1, 1, 3}, {1, 2, 3});
  const T padded = pad_reflect(V(row), 0, 0, 2, 4).value();
  CHECK(padded.vec() == T({1, 1, 1, 9}, {3, 2, 1, 2, 3, 2, 1, 2, 3}).vec());
  for (Index i = -7; i < 12; ++i) CHECK(reflect_index(i, 3) == ref::mirror(i, 3));
  CHECK(reflect_index(5, 1) == 0);
}

TEST_CASE("backward examples") {
  std::mt19937_64 rng(9);
  V x = param(uniform({2, 3, 4}, rng));
  backward(sum(x));
  CHECK(x.grad().vec() == T::Vector::Ones(24));

  V y = param(T({2}, {1.0, 2.0}));
  backward(sum(mul(y, y)));
  CHECK(y.grad().vec() == T({2}, {2.0, 4.0}).vec());

  V used = param(uniform({3}, rng)), unused = param(uniform({3}, rng));
  const V loss = sum(scale(used, 2.0));
  backward(loss);
  CHECK(unused.grad().vec() == T::Vector::Zero(3));
  CHECK_THROWS_AS(backward(loss), std::logic_error);
  CHECK_THROWS_AS(backward(scale(used, 2.0)), ShapeError);
}

TEST_CASE("backward visits shared nodes once and accumulates every path") {
  V x = param(T({3}, {0.5, -1.0, 2.0}));
  const V y = add(x, x);
  backward(sum(mul(y, y)));
  CHECK(x.grad().vec() == T({3}, {4.0, -8.0, 16.0}).vec());

  // Gradients accumulate across passes until zeroed.
  backward(sum(x));
  CHECK(x.grad().vec() == T({3}, {5.0, -7.0, 17.0}).vec());
  x.zero_grad();
  CHECK(x.grad().vec() == T::Vector::Zero(3));
}

TEST_CASE("backward is bit-deterministic") {
  auto grads = [] {
    std::mt19937_64 rng(10);
    V x = param(uniform({2, 3, 8, 8}, rng)), k = param(uniform({4, 3, 3, 3}, rng)),
      s = param(uniform({4}, rng, 0.5, 1.5));
    const V y = gelu(layer_norm(conv2d(x, k, 1, 1), s));
    backward(sum(mul(softmax(reshape(y, {8, 64})), reshape(y, {8, 64}))));
    return std::vector<T>{x.grad(), k.grad(), s.grad()};
  };
  const auto a = grads(), b = grads();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].vec() == b[i].vec());
}

TEST_CASE("finite_diff_check examples") {
  std::mt19937_64 rng(11);
  V p = param(uniform({12}, rng));
  GradCheckOptions opts;
  opts.rel_tol = 1e-8;
  const auto squares = finite_diff_check([&] { return sum(mul(p, p)); }, {p}, opts);
  CHECK(squares.passed);
  CHECK(squares.max_rel_err <= 1e-8);
  CHECK(squares.checked == 12);

  V x = param(uniform({1, 2, 6, 6}, rng)), k = param(uniform({3, 2, 3, 3}, rng));
  const T r = uniform({1, 3}, rng);
  const auto chain =
      finite_diff_check([&] { return sum(mul(global_average_pool(gelu(conv2d(x, k, 1, 1))), V(r))); }, {x, k});
  CHECK(chain.passed);
  CHECK(chain.max_rel_err <= 1e-5);

  V z = param(T({2}, {0.0, 1.0}));
  const auto degenerate = finite_diff_check([&] { return sum(mul(mul(z, z), mul(z, z))); }, {z});
  CHECK(degenerate.passed);
  CHECK(degenerate.max_abs_fallback_err <= 1e-8);

  V q = param(uniform({3}, rng));
  int calls = 0;
  CHECK_THROWS_AS(finite_diff_check([&] { return sum(scale(q, static_cast<double>(++calls))); }, {q}),
                  std::runtime_error);
}

TEST_CASE("every differentiable primitive passes finite differences on three random shapes") {
  std::mt19937_64 rng(12);
  using Build = std::function<V(std::vector<V>&)>;
  struct Case {
    const char* name;
    std::function<std::vector<T>(int)> inputs;  // shape variant 0..2
    Build build;
  };
  auto dims = [&](int lo, int hi) { return static_cast<Index>(uniform_int(rng, lo, hi)); };
  auto away = [&](Shape s) {
    T t = uniform(std::move(s), rng, 0.2, 1.0);
    for (Index i = 0; i < t.size(); ++i) t[i] *= uniform_int(rng, 0, 1) ? 1.0 : -1.0;
    return t;
  };

  std::vector<Case> cases{
      {"add", [&](int) { Shape s{dims(1, 3), dims(1, 4)}; return std::vector<T>{uniform(s, rng), uniform(s, rng)}; },
       [](auto& p) { return add(p[0], p[1]); }},
      {"sub", [&](int) { Shape s{dims(1, 5)}; return std::vector<T>{uniform(s, rng), uniform(s, rng)}; },
       [](auto& p) { return sub(p[0], p[1]); }},
      {"mul", [&](int) { Shape s{dims(1, 3), dims(2, 3)}; return std::vector<T>{uniform(s, rng), uniform(s, rng)}; },
       [](auto& p) { return mul(p[0], p[1]); }},
      {"scale", [&](int) { return std::vector<T>{uniform({dims(1, 6)}, rng)}; },
       [](auto& p) { return scale(p[0], -1.7); }},
      {"scale_slices",
       [&](int) {
         const Index n = dims(1, 4);
         return std::vector<T>{uniform({n, dims(1, 3), 2}, rng), uniform({n}, rng)};
       },
       [](auto& p) { return scale_slices(p[0], p[1]); }},
      {"mean", [&](int) { return std::vector<T>{uniform({dims(1, 3), dims(1, 4)}, rng)}; },
       [](auto& p) { return mean(p[0]); }},
      {"transpose", [&](int v) {
         return std::vector<T>{v == 0 ? uniform({dims(1, 4), dims(1, 4)}, rng) : uniform({dims(1, 3), dims(1, 4), dims(1, 4)}, rng)};
       },
       [](auto& p) { return transpose(p[0]); }},
      {"slice_flat", [&](int) { return std::vector<T>{uniform({dims(6, 12)}, rng)}; },
       [](auto& p) { return slice_flat(p[0], 2, {2, 2}); }},
      {"slice/concat channels",
       [&](int) {
         const Index b = dims(1, 2), h = dims(1, 3), w = dims(1, 3);
         return std::vector<T>{uniform({b, dims(2, 4), h, w}, rng), uniform({b, dims(1, 3), h, w}, rng)};
       },
       [](auto& p) { return concat_channels(slice_channels(p[0], 1, 1), p[1]); }},
      {"slice/concat batch", [&](int) { return std::vector<T>{uniform({dims(2, 3), dims(1, 3), 2, dims(1, 3)}, rng)}; },
       [](auto& p) { return concat_batch(std::vector<V>{slice_batch(p[0], 1), slice_batch(p[0], 0)}); }},
      {"conv2d",
       [&](int v) {
         const int groups = v == 2 ? 2 : 1;
         const Index cin = groups * dims(1, 2), cout = groups * dims(1, 2), k = v == 1 ? 1 : 3;
         return std::vector<T>{uniform({dims(1, 2), cin, dims(3, 6), dims(3, 6)}, rng),
                               uniform({cout, cin / groups, k, k}, rng)};
       },
       [](auto& p) {
         const int groups = static_cast<int>(p[0].dim(1) / p[1].dim(1));
         return conv2d(p[0], p[1], p[1].dim(2) == 3 ? 2 : 1, 1, groups);
       }},
      {"global_average_pool", [&](int) { return std::vector<T>{uniform({dims(1, 2), dims(1, 3), dims(1, 4), dims(1, 4)}, rng)}; },
       [](auto& p) { return global_average_pool(p[0]); }},
      {"softmax", [&](int) { return std::vector<T>{uniform({dims(1, 3), dims(1, 5)}, rng, -3.0, 3.0)}; },
       [](auto& p) { return softmax(p[0]); }},
      {"linear",
       [&](int) {
         const Index din = dims(1, 4), dout = dims(1, 4);
         return std::vector<T>{uniform({dims(1, 3), din}, rng), uniform({dout, din}, rng), uniform({dout}, rng)};
       },
       [](auto& p) { return linear(p[0], p[1], std::optional<V>(p[2])); }},
      {"layer_norm",
       [&](int) {
         const Index c = dims(2, 5);
         return std::vector<T>{uniform({dims(1, 2), c, dims(1, 3), dims(1, 3)}, rng), uniform({c}, rng)};
       },
       [](auto& p) { return layer_norm(p[0], p[1]); }},
      {"gelu", [&](int) { return std::vector<T>{uniform({dims(1, 8)}, rng, -3.0, 3.0)}; },
       [](auto& p) { return gelu(p[0]); }},
      {"relu", [&](int) { return std::vector<T>{away({dims(1, 8)})}; }, [](auto& p) { return relu(p[0]); }},
      {"matmul",
       [&](int) {
         const Index k = dims(1, 4);
         return std::vector<T>{uniform({dims(1, 4), k}, rng), uniform({k, dims(1, 4)}, rng)};
       },
       [](auto& p) { return matmul(p[0], p[1]); }},
      {"bmm transposed",
       [&](int) {
         const Index g = dims(1, 3), m = dims(1, 3), k = dims(1, 3), n = dims(1, 3);
         return std::vector<T>{uniform({g, k, m}, rng), uniform({g, n, k}, rng)};
       },
       [](auto& p) { return bmm(p[0], p[1], true, true); }},
      {"l2_normalize", [&](int) { return std::vector<T>{away({dims(1, 3), dims(2, 5)})}; },
       [](auto& p) { return l2_normalize(p[0]); }},
      {"pixel_unshuffle", [&](int) { return std::vector<T>{uniform({dims(1, 2), dims(1, 2), 2 * dims(1, 2), 2 * dims(1, 2)}, rng)}; },
       [](auto& p) { return pixel_unshuffle(p[0], 2); }},
      {"pixel_shuffle", [&](int) { return std::vector<T>{uniform({dims(1, 2), 4 * dims(1, 2), dims(1, 3), dims(1, 3)}, rng)}; },
       [](auto& p) { return pixel_shuffle(p[0], 2); }},
      {"pad_reflect/crop", [&](int) { return std::vector<T>{uniform({1, dims(1, 2), dims(2, 4), dims(2, 4)}, rng)}; },
       [](auto& p) { return crop(pad_reflect(p[0], 1, 3, 2, 1), 1, 0, p[0].dim(2), p[0].dim(3) + 1); }},
      {"l1_loss",
       [&](int) {
         Shape s{dims(1, 3), dims(1, 4)};
         const T a = uniform(s, rng);
         return std::vector<T>{a, T(s, a.vec() + away(s).vec())};
       },
       [](auto& p) { return l1_loss(p[0], p[1]); }},
  };

  for (auto& c : cases) {
    for (int variant = 0; variant < 3; ++variant) {
      CAPTURE(c.name);
      CAPTURE(variant);
      std::vector<V> params;
      for (T& t : c.inputs(variant)) params.push_back(param(std::move(t)));
      const T probe = c.build(params).value();
      const V weights(uniform(probe.shape(), rng));
      const auto report = finite_diff_check([&] { return sum(mul(c.build(params), weights)); }, params);
      CHECK(report.passed);
      CHECK(report.max_rel_err <= 1e-4);
    }
  }
}

}  // TEST_SUITE
