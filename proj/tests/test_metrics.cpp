#include "helpers.hpp"

#include "hair/degradations.hpp"
#include "hair/metrics.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

using namespace hair;
using testing::uniform;

namespace {

// Direct evaluation of the SSIM formula with one window covering the whole image.
double global_ssim(const TensorF& a, const TensorF& b) {
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Index c = a.dim(0), n = a.size() / c;
  double total = 0.0;
  for (Index ch = 0; ch < c; ++ch) {
    const Eigen::ArrayXd x = a.vec().segment(ch * n, n).cast<double>().array();
    const Eigen::ArrayXd y = b.vec().segment(ch * n, n).cast<double>().array();
    const double mx = x.mean(), my = y.mean();
    const double vx = (x - mx).square().mean(), vy = (y - my).square().mean(), cov = ((x - mx) * (y - my)).mean();
    total += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(c);
}

Eigen::VectorXd vec2(double a, double b) { return Eigen::Vector2d(a, b); }

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("PSNR examples") {
  const TensorF a = TensorF::constant({3, 8, 8}, 0.4f);
  CHECK(std::isinf(psnr(a, a)));
  CHECK(psnr(a, a) > 0);
  CHECK(format_metric(psnr(a, a)) == "inf");
  CHECK(psnr(TensorF::constant({1, 4, 4}, 100.0f), TensorF::constant({1, 4, 4}, 100.5f), 255.0) ==
        doctest::Approx(54.15).epsilon(0.01 / 54.15));
  CHECK(psnr(TensorF::constant({1, 4, 4}, 0.0f), TensorF::constant({1, 4, 4}, 1.0f)) == doctest::Approx(0.0));
  CHECK_THROWS_AS(psnr(a, TensorF::constant({3, 8, 7}, 0.4f)), ShapeError);
}

TEST_CASE("PSNR decreases with noise strength") {
  const Image clean = gen_clean(3, 64, 64);
  double previous = std::numeric_limits<double>::infinity();
  for (double sigma : {5.0, 15.0, 25.0, 50.0}) {
    const double value = psnr(add_gaussian_noise(clean, sigma, 7), clean);
    CHECK(value < previous);
    previous = value;
  }
}

TEST_CASE("SSIM examples") {
  const Image img = gen_clean(4, 32, 32);
  CHECK(ssim(img, img).value == doctest::Approx(1.0).epsilon(1e-12));
  const SsimResult pair = ssim(TensorF::constant({1, 16, 16}, 0.5f), TensorF::constant({1, 16, 16}, 0.25f));
  CHECK(!pair.global_fallback);
  // Constant images: luminance term only, (2 * 0.5 * 0.25 + C1) / (0.25 + 0.0625 + C1).
  CHECK(pair.value == doctest::Approx((0.25 + 1e-4) / (0.3125 + 1e-4)).epsilon(1e-6));
  CHECK(std::abs(pair.value - 0.8001) <= 5e-4);

  std::mt19937_64 rng(1);
  for (int draw = 0; draw < 10; ++draw) {
    const TensorF a = uniform<float>({3, 20, 24}, rng, 0, 1), b = uniform<float>({3, 20, 24}, rng, 0, 1);
    CHECK(ssim(a, b).value == doctest::Approx(ssim(b, a).value).epsilon(1e-12));
    CHECK(ssim(a, b).value <= 1.0);
  }
  CHECK(ssim(add_gaussian_noise(img, 50, 1), img).value < ssim(add_gaussian_noise(img, 5, 1), img).value);
}

TEST_CASE("SSIM on images smaller than the window uses global statistics") {
  std::mt19937_64 rng(2);
  const TensorF a = uniform<float>({3, 8, 6}, rng, 0, 1), b = uniform<float>({3, 8, 6}, rng, 0, 1);
  const SsimResult r = ssim(a, b);
  CHECK(r.global_fallback);
  CHECK(r.value == doctest::Approx(global_ssim(a, b)).epsilon(1e-6));

  // Global statistics ignore pixel order when both images share the permutation.
  std::vector<Index> perm(48);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  TensorF pa(a.shape()), pb(b.shape());
  for (Index ch = 0; ch < 3; ++ch)
    for (Index i = 0; i < 48; ++i) {
      pa.data()[ch * 48 + i] = a.data()[ch * 48 + perm[i]];
      pb.data()[ch * 48 + i] = b.data()[ch * 48 + perm[i]];
    }
  CHECK(ssim(pa, pb).value == doctest::Approx(r.value).epsilon(1e-6));
}

TEST_CASE("nearest-centroid classification examples") {
  const std::vector<LabeledGiv> train{{vec2(0, 0), "a"}, {vec2(0, 2), "a"}, {vec2(10, 0), "b"}, {vec2(10, 2), "b"}};
  const CentroidReport r = giv_centroid_classify(train, {{vec2(1, 1), "a"}, {vec2(9, 1), "b"}, {vec2(8, 1), "a"}});
  CHECK(r.labels == std::vector<std::string>{"a", "b"});
  CHECK(r.centroids[0] == vec2(0, 1));
  CHECK(r.centroids[1] == vec2(10, 1));
  CHECK(r.predictions == std::vector<std::string>{"a", "b", "b"});
  CHECK(r.accuracy == doctest::Approx(2.0 / 3.0));

  const CentroidReport tie = giv_centroid_classify(train, {{vec2(5, 1), "b"}});
  CHECK(tie.predictions.front() == "a");
  CHECK(tie.accuracy == 0.0);
  CHECK_THROWS_AS(giv_centroid_classify({}, {{vec2(0, 0), "a"}}), std::invalid_argument);
  CHECK_THROWS_AS(giv_centroid_classify(train, {{Eigen::Vector3d(0, 0, 0), "a"}}), std::invalid_argument);
}

TEST_CASE("nearest-centroid separates Gaussian clusters and is invariant to similarity transforms") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> noise(0.0, 0.3);
  const std::vector<Eigen::VectorXd> means{Eigen::VectorXd::Constant(6, 0.0), Eigen::VectorXd::Constant(6, 2.0),
                                           Eigen::VectorXd::Unit(6, 0) * 4.0};
  auto draw = [&](int per_class) {
    std::vector<LabeledGiv> out;
    for (std::size_t k = 0; k < means.size(); ++k)
      for (int i = 0; i < per_class; ++i) {
        Eigen::VectorXd g = means[k];
        for (Index j = 0; j < g.size(); ++j) g[j] += noise(rng);
        out.push_back({g, "c" + std::to_string(k)});
      }
    return out;
  };
  const auto train = draw(50), held = draw(20);
  const CentroidReport base = giv_centroid_classify(train, held);
  CHECK(base.accuracy >= 0.99);

  const Eigen::MatrixXd rot = Eigen::MatrixXd::Random(6, 6).householderQr().householderQ();
  const Eigen::VectorXd shift = Eigen::VectorXd::Random(6);
  auto transform = [&](std::vector<LabeledGiv> set) {
    for (auto& g : set) g.giv = 3.0 * rot * g.giv + shift;
    return set;
  };
  const CentroidReport moved = giv_centroid_classify(transform(train), transform(held));
  CHECK(moved.predictions == base.predictions);
}

TEST_CASE("GIV midpoint diagnostic") {
  const Eigen::VectorXd a = vec2(0, 0), b = vec2(4, 2);
  CHECK(giv_midpoint_diagnostic(a, b, vec2(2, 1)) == 0.0);
  CHECK(giv_midpoint_diagnostic(a, b, a) == doctest::Approx(0.5));
  CHECK(giv_midpoint_diagnostic(a, b, b) == doctest::Approx(0.5));
  CHECK_THROWS_AS(giv_midpoint_diagnostic(a, a, b), std::invalid_argument);

  const std::map<std::string, double> report = giv_midpoint_report(
      {{vec2(0, 0), "noise"}, {vec2(4, 0), "haze"}, {vec2(2, 0), "noise+haze"}, {vec2(1, 1), "rain+blur"}});
  CHECK(report.size() == 1);
  CHECK(report.at("noise+haze") == 0.0);
}

TEST_CASE("metrics report CSV") {
  MetricsReport report;
  report.add("noise", 30.0, 0.9);
  report.add("haze", 20.0, 0.7);
  report.add("noise", 32.0, 0.8);
  CHECK(report.row("noise").n == 2);
  CHECK(report.row("noise").mean_psnr() == 31.0);
  CHECK(report.row("noise").mean_ssim() == doctest::Approx(0.85));
  CHECK_THROWS_AS(report.row("rain"), std::out_of_range);

  std::ostringstream plain;
  report.write_csv(plain);
  std::istringstream lines(plain.str());
  std::string header, first, second;
  std::getline(lines, header);
  std::getline(lines, first);
  std::getline(lines, second);
  CHECK(header == "label,n,psnr,ssim");
  CHECK(first.starts_with("noise,2,"));
  CHECK(second.starts_with("haze,1,"));

  report.add("noise+haze", 18.0, 0.6);
  report.set_giv_midpoint("noise+haze", 0.125);
  std::ostringstream with_mid;
  report.write_csv(with_mid);
  const std::string text = with_mid.str();
  CHECK(text.starts_with("label,n,psnr,ssim,giv_midpoint\n"));
  CHECK(text.find("noise,2,") != std::string::npos);
  CHECK(text.find(",\nhaze,1,") != std::string::npos);
  CHECK(text.find("0.125") != std::string::npos);
}

}  // TEST_SUITE
