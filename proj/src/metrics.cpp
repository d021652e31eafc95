#include "hair/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace hair {

double psnr(const Tensor<float>& a, const Tensor<float>& b, double peak) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  if (a.size() == 0) throw ShapeError("psnr: empty images");
  const double mse = (a.vec().cast<double>() - b.vec().cast<double>()).squaredNorm() / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

Eigen::VectorXd gaussian_window() {
  Eigen::VectorXd g(kWindow);
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
  }
  return g / g.sum();
}

// Separable valid-mode filtering of one plane.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& plane, const Eigen::VectorXd& g) {
  const Eigen::Index h = plane.rows(), w = plane.cols(), ho = h - kWindow + 1, wo = w - kWindow + 1;
  Eigen::MatrixXd rows(h, wo);
  for (Eigen::Index x = 0; x < wo; ++x) rows.col(x) = plane.middleCols(x, kWindow) * g;
  Eigen::MatrixXd out(ho, wo);
  for (Eigen::Index y = 0; y < ho; ++y) out.row(y) = g.transpose() * rows.middleRows(y, kWindow);
  return out;
}

double ssim_from_moments(double mx, double my, double vx, double vy, double cxy) {
  return ((2.0 * mx * my + kC1) * (2.0 * cxy + kC2)) / ((mx * mx + my * my + kC1) * (vx + vy + kC2));
}

}  // namespace

SsimResult ssim(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  if (a.rank() != 3) throw ShapeError("ssim: expected [C,H,W], got " + to_string(a.shape()));
  const Index c = a.dim(0), h = a.dim(1), w = a.dim(2);
  SsimResult result;
  result.global_fallback = h < kWindow || w < kWindow;
  const Eigen::VectorXd g = gaussian_window();
  double total = 0.0;
  for (Index ch = 0; ch < c; ++ch) {
    // Row-major planes mapped as (H, W).
    const Eigen::MatrixXd x = a.matrix(h, w, ch * h * w).cast<double>();
    const Eigen::MatrixXd y = b.matrix(h, w, ch * h * w).cast<double>();
    if (result.global_fallback) {
      const double n = static_cast<double>(h * w);
      const double mx = x.mean(), my = y.mean();
      const double vx = x.cwiseProduct(x).sum() / n - mx * mx;
      const double vy = y.cwiseProduct(y).sum() / n - my * my;
      const double cxy = x.cwiseProduct(y).sum() / n - mx * my;
      total += ssim_from_moments(mx, my, vx, vy, cxy);
      continue;
    }
    const Eigen::ArrayXXd mx = filter_valid(x, g).array(), my = filter_valid(y, g).array();
    const Eigen::ArrayXXd vx = filter_valid(x.cwiseProduct(x), g).array() - mx * mx;
    const Eigen::ArrayXXd vy = filter_valid(y.cwiseProduct(y), g).array() - my * my;
    const Eigen::ArrayXXd cxy = filter_valid(x.cwiseProduct(y), g).array() - mx * my;
    const Eigen::ArrayXXd map =
        ((2.0 * mx * my + kC1) * (2.0 * cxy + kC2)) / ((mx * mx + my * my + kC1) * (vx + vy + kC2));
    total += map.mean();
  }
  result.value = total / static_cast<double>(c);
  return result;
}

std::string format_metric(double value) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << value;
  return os.str();
}

CentroidReport giv_centroid_classify(const std::vector<LabeledGiv>& train, const std::vector<LabeledGiv>& heldout) {
  if (train.empty()) throw std::invalid_argument("giv_centroid_classify: empty training set");
  CentroidReport report;
  std::vector<std::size_t> counts;
  const Eigen::Index dim = train.front().giv.size();
  for (const auto& s : train) {
    if (s.giv.size() != dim) throw ShapeError("giv_centroid_classify: GIV lengths differ");
    std::size_t k = 0;
    while (k < report.labels.size() && report.labels[k] != s.label) ++k;
    if (k == report.labels.size()) {
      report.labels.push_back(s.label);
      report.centroids.push_back(Eigen::VectorXd::Zero(dim));
      counts.push_back(0);
    }
    report.centroids[k] += s.giv;
    ++counts[k];
  }
  for (std::size_t k = 0; k < counts.size(); ++k) report.centroids[k] /= static_cast<double>(counts[k]);

  std::size_t correct = 0;
  for (const auto& s : heldout) {
    if (s.giv.size() != dim) throw ShapeError("giv_centroid_classify: GIV lengths differ");
    std::size_t best = 0;
    double best_d = (s.giv - report.centroids[0]).squaredNorm();
    for (std::size_t k = 1; k < report.centroids.size(); ++k) {
      const double d = (s.giv - report.centroids[k]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    report.predictions.push_back(report.labels[best]);
    if (report.labels[best] == s.label) ++correct;
  }
  report.accuracy = heldout.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(heldout.size());
  return report;
}

double giv_midpoint_diagnostic(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& composite) {
  if (a.size() != b.size() || a.size() != composite.size()) throw ShapeError("giv_midpoint_diagnostic: length mismatch");
  const double ab = (a - b).norm();
  if (ab == 0.0) throw std::invalid_argument("giv_midpoint_diagnostic: centroids coincide");
  return (composite - 0.5 * (a + b)).norm() / ab;
}

std::map<std::string, double> giv_midpoint_report(const std::vector<LabeledGiv>& givs) {
  std::map<std::string, Eigen::VectorXd> sums;
  std::map<std::string, double> counts;
  for (const auto& g : givs) {
    auto [it, fresh] = sums.try_emplace(g.label, Eigen::VectorXd::Zero(g.giv.size()));
    if (it->second.size() != g.giv.size()) throw ShapeError("giv_midpoint_report: GIV lengths differ");
    it->second += g.giv;
    counts[g.label] += 1.0;
  }
  std::map<std::string, double> out;
  for (const auto& [label, total] : sums) {
    const auto plus = label.find('+');
    if (plus == std::string::npos || label.find('+', plus + 1) != std::string::npos) continue;
    const std::string a = label.substr(0, plus), b = label.substr(plus + 1);
    if (!sums.contains(a) || !sums.contains(b)) continue;
    const Eigen::VectorXd ca = sums.at(a) / counts.at(a), cb = sums.at(b) / counts.at(b);
    if ((ca - cb).norm() == 0.0) continue;
    out[label] = giv_midpoint_diagnostic(ca, cb, total / counts.at(label));
  }
  return out;
}

void MetricsReport::add(const std::string& label, double psnr_db, double ssim_value) {
  for (auto& r : rows_) {
    if (r.label == label) {
      ++r.n;
      r.psnr_sum += psnr_db;
      r.ssim_sum += ssim_value;
      return;
    }
  }
  rows_.push_back({label, 1, psnr_db, ssim_value});
}

const MetricsReport::Row& MetricsReport::row(const std::string& label) const {
  for (const auto& r : rows_) {
    if (r.label == label) return r;
  }
  throw std::out_of_range("no metrics for label '" + label + "'");
}

void MetricsReport::set_giv_midpoint(const std::string& label, double ratio) { midpoints_[label] = ratio; }

void MetricsReport::write_csv(std::ostream& os) const {
  const bool diag = !midpoints_.empty();
  os << "label,n,psnr,ssim" << (diag ? ",giv_midpoint" : "") << '\n';
  for (const auto& r : rows_) {
    os << r.label << ',' << r.n << ',' << format_metric(r.mean_psnr()) << ',' << format_metric(r.mean_ssim());
    if (diag) {
      os << ',';
      if (auto it = midpoints_.find(r.label); it != midpoints_.end()) os << format_metric(it->second);
    }
    os << '\n';
  }
}

}  // namespace hair
