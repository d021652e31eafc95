#pragma once

#include "hair/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace hair {

/// Images are [3, H, W] float tensors with values in [0, 1].
using Image = Tensor<float>;

enum class DegradationKind { noise, rain, haze, blur, lowlight };

std::string to_string(DegradationKind kind);
DegradationKind parse_degradation_kind(const std::string& text);

/// One parametric degradation.
///
/// Parameters per kind (defaults in brackets):
///   noise:    sigma (8-bit units) [25]
///   rain:     count [40], length [10], angle (degrees from vertical) [10],
///             intensity [0.7]
///   haze:     A (airlight, [0.7,1]) [0.85], t (transmission, (0,1]) [0.6]
///   blur:     length (integer line length in pixels, >= 1) [7], angle (degrees) [0]
///   lowlight: gamma (>= 1) [2], scale ((0,1]) [0.5]
struct DegradationSpec {
  DegradationKind kind = DegradationKind::noise;
  std::map<std::string, double> params;
  std::uint64_t seed = 0;

  double get(const std::string& key) const;
  /// Throws std::invalid_argument naming the first out-of-range parameter.
  void validate() const;
  /// "noise:sigma=25" style text; round-trips through parse_degradation.
  std::string serialize() const;
};

DegradationSpec make_spec(DegradationKind kind, std::map<std::string, double> params = {}, std::uint64_t seed = 0);
DegradationSpec parse_degradation(const std::string& text);
/// Composite chains are written "noise:sigma=25+haze:t=0.5".
std::vector<DegradationSpec> parse_degradation_chain(const std::string& text);
std::string serialize_chain(const std::vector<DegradationSpec>& specs);
/// "noise", "noise+haze", ...
std::string chain_label(const std::vector<DegradationSpec>& specs);

struct Sample {
  Image clean;
  Image degraded;
  std::vector<DegradationSpec> specs;
  std::string id;
};

/// Seed of stage `index` when a chain is applied with base `seed`.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// Procedural texture: smooth colour gradients, filled shapes and
/// band-limited noise, stretched to span [0.02, 0.98]. H, W >= 16.
Image gen_clean(std::uint64_t seed, Index height, Index width);

Image add_gaussian_noise(const Image& img, double sigma, std::uint64_t seed);
/// img * t + A * (1 - t) with spatially constant t.
Image apply_haze(const Image& img, double airlight, double transmission);
Image apply_rain(const Image& img, const DegradationSpec& spec, std::uint64_t seed);
Image apply_blur(const Image& img, const DegradationSpec& spec);
Image apply_lowlight(const Image& img, const DegradationSpec& spec);

/// Applies one spec with its own seed.
Image apply_degradation(const Image& img, const DegradationSpec& spec);

/// Applies `specs` in order; stage i uses derive_seed(seed, i), which is also
/// recorded in the returned sample's specs.
Sample compose(const Image& img, std::vector<DegradationSpec> specs, std::uint64_t seed, std::string id = {});

Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);
Image crop_image(const Image& img, Index top, Index left, Index height, Index width);

/// Random crop of `size` x `size` (and, when `flips`, random horizontal and
/// vertical flips) applied identically to both halves of the sample.
Sample sample_patch(const Sample& sample, Index size, std::uint64_t seed, bool flips);

Image clamp01(Image img);

}  // namespace hair
