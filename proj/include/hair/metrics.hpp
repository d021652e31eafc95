#pragma once

#include "hair/tensor.hpp"

#include <Eigen/Dense>

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace hair {

/// 10 log10(peak^2 / MSE) over all values; +infinity for identical inputs.
double psnr(const Tensor<float>& a, const Tensor<float>& b, double peak = 1.0);

struct SsimResult {
  double value = 1.0;
  /// Set when the image is smaller than the 11x11 window and global
  /// statistics were used instead of local windows.
  bool global_fallback = false;
};

/// Mean SSIM of [C,H,W] images with dynamic range 1: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, valid windows only, averaged over
/// channels.
SsimResult ssim(const Tensor<float>& a, const Tensor<float>& b);

/// "inf" for the infinite marker, fixed-precision decimal otherwise.
std::string format_metric(double value);

struct LabeledGiv {
  Eigen::VectorXd giv;
  std::string label;
};

struct CentroidReport {
  double accuracy = 0.0;
  std::vector<std::string> labels;         // centroid order: first appearance in the training set
  std::vector<Eigen::VectorXd> centroids;  // parallel to labels
  std::vector<std::string> predictions;    // one per held-out GIV
};

/// Nearest-centroid classification (Euclidean, lowest-index tie-break).
CentroidReport giv_centroid_classify(const std::vector<LabeledGiv>& train, const std::vector<LabeledGiv>& heldout);

/// ||composite - (a + b) / 2|| / ||a - b||: 0 at the midpoint, 0.5 at either
/// endpoint. Throws when a == b.
double giv_midpoint_diagnostic(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& composite);

/// For every label "a+b" whose constituents also appear, the midpoint ratio
/// of the label centroids. Pairs with coinciding constituent centroids are
/// skipped.
std::map<std::string, double> giv_midpoint_report(const std::vector<LabeledGiv>& givs);

/// Running per-label PSNR/SSIM means.
class MetricsReport {
 public:
  struct Row {
    std::string label;
    std::size_t n = 0;
    double psnr_sum = 0.0;
    double ssim_sum = 0.0;
    double mean_psnr() const { return n ? psnr_sum / static_cast<double>(n) : 0.0; }
    double mean_ssim() const { return n ? ssim_sum / static_cast<double>(n) : 0.0; }
  };

  void add(const std::string& label, double psnr_db, double ssim_value);
  const std::vector<Row>& rows() const { return rows_; }
  const Row& row(const std::string& label) const;

  /// GIV midpoint ratio of a composite label (see giv_midpoint_diagnostic).
  void set_giv_midpoint(const std::string& label, double ratio);
  const std::map<std::string, double>& giv_midpoints() const { return midpoints_; }

  /// Header "label,n,psnr,ssim", one line per label in insertion order. When
  /// any midpoint ratio is set, a trailing "giv_midpoint" column is added
  /// (empty for labels without one).
  void write_csv(std::ostream& os) const;

 private:
  std::vector<Row> rows_;
  std::map<std::string, double> midpoints_;
};

}  // namespace hair
