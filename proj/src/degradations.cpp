#include "hair/degradations.hpp"

#include "hair/ops.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace hair {

namespace {

const std::map<DegradationKind, std::map<std::string, double>>& defaults() {
  static const std::map<DegradationKind, std::map<std::string, double>> table{
      {DegradationKind::noise, {{"sigma", 25.0}}},
      {DegradationKind::rain, {{"count", 40.0}, {"length", 10.0}, {"angle", 10.0}, {"intensity", 0.7}}},
      {DegradationKind::haze, {{"A", 0.85}, {"t", 0.6}}},
      {DegradationKind::blur, {{"length", 7.0}, {"angle", 0.0}}},
      {DegradationKind::lowlight, {{"gamma", 2.0}, {"scale", 0.5}}},
  };
  return table;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void check_range(const DegradationSpec& s, const std::string& key, double lo, double hi, bool lo_open = false) {
  const double v = s.get(key);
  const bool ok = std::isfinite(v) && (lo_open ? v > lo : v >= lo) && v <= hi;
  if (!ok) {
    throw std::invalid_argument(to_string(s.kind) + " parameter " + key + "=" + format_double(v) + " outside " +
                                (lo_open ? "(" : "[") + format_double(lo) + ", " + format_double(hi) + "]");
  }
}

void check_integer(const DegradationSpec& s, const std::string& key) {
  const double v = s.get(key);
  if (v != std::floor(v)) throw std::invalid_argument(to_string(s.kind) + " parameter " + key + " must be an integer");
}

Image stretch(Image img, float lo, float hi) {
  const float mn = img.vec().minCoeff(), mx = img.vec().maxCoeff();
  const float range = std::max(mx - mn, 1e-6f);
  img.array() = lo + (img.array() - mn) * ((hi - lo) / range);
  return img;
}

void require_image(const Image& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("expected a [3,H,W] image, got " + to_string(img.shape()));
}

}  // namespace

std::string to_string(DegradationKind kind) {
  switch (kind) {
    case DegradationKind::noise:
      return "noise";
    case DegradationKind::rain:
      return "rain";
    case DegradationKind::haze:
      return "haze";
    case DegradationKind::blur:
      return "blur";
    case DegradationKind::lowlight:
      return "lowlight";
  }
  return "unknown";
}

DegradationKind parse_degradation_kind(const std::string& text) {
  for (const auto& [kind, _] : defaults()) {
    if (to_string(kind) == text) return kind;
  }
  throw std::invalid_argument("unknown degradation kind '" + text + "'");
}

double DegradationSpec::get(const std::string& key) const {
  if (auto it = params.find(key); it != params.end()) return it->second;
  const auto& d = defaults().at(kind);
  if (auto it = d.find(key); it != d.end()) return it->second;
  throw std::invalid_argument(to_string(kind) + " has no parameter '" + key + "'");
}

void DegradationSpec::validate() const {
  const auto& known = defaults().at(kind);
  for (const auto& [key, _] : params) {
    if (!known.contains(key)) throw std::invalid_argument(to_string(kind) + " has no parameter '" + key + "'");
  }
  switch (kind) {
    case DegradationKind::noise:
      check_range(*this, "sigma", 0.0, 255.0);
      break;
    case DegradationKind::rain:
      check_range(*this, "count", 0.0, 10000.0);
      check_integer(*this, "count");
      check_range(*this, "length", 1.0, 256.0);
      check_range(*this, "angle", -90.0, 90.0);
      check_range(*this, "intensity", 0.0, 1.0);
      break;
    case DegradationKind::haze:
      check_range(*this, "A", 0.7, 1.0);
      check_range(*this, "t", 0.0, 1.0, true);
      break;
    case DegradationKind::blur:
      check_range(*this, "length", 1.0, 63.0);
      check_integer(*this, "length");
      check_range(*this, "angle", -360.0, 360.0);
      break;
    case DegradationKind::lowlight:
      check_range(*this, "gamma", 1.0, 10.0);
      check_range(*this, "scale", 0.0, 1.0, true);
      break;
  }
}

std::string DegradationSpec::serialize() const {
  std::string out = to_string(kind);
  char sep = ':';
  for (const auto& [key, value] : params) {
    out += sep;
    out += key + "=" + format_double(value);
    sep = ',';
  }
  return out;
}

DegradationSpec make_spec(DegradationKind kind, std::map<std::string, double> params, std::uint64_t seed) {
  DegradationSpec s{kind, std::move(params), seed};
  s.validate();
  return s;
}

DegradationSpec parse_degradation(const std::string& text) {
  const auto colon = text.find(':');
  DegradationSpec spec;
  spec.kind = parse_degradation_kind(text.substr(0, colon));
  if (colon != std::string::npos) {
    std::stringstream ss(text.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("degradation parameter '" + item + "' lacks '='");
      const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
      double v = 0.0;
      auto res = std::from_chars(val.data(), val.data() + val.size(), v);
      if (res.ec != std::errc() || res.ptr != val.data() + val.size()) {
        throw std::invalid_argument("degradation parameter '" + key + "' has non-numeric value '" + val + "'");
      }
      spec.params[key] = v;
    }
  }
  spec.validate();
  return spec;
}

std::vector<DegradationSpec> parse_degradation_chain(const std::string& text) {
  std::vector<DegradationSpec> specs;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '+')) specs.push_back(parse_degradation(part));
  if (specs.empty()) throw std::invalid_argument("empty degradation chain");
  return specs;
}

std::string serialize_chain(const std::vector<DegradationSpec>& specs) {
  std::string out;
  for (std::size_t i = 0; i < specs.size(); ++i) out += (i ? "+" : "") + specs[i].serialize();
  return out;
}

std::string chain_label(const std::vector<DegradationSpec>& specs) {
  std::string out;
  for (std::size_t i = 0; i < specs.size(); ++i) out += (i ? "+" : "") + to_string(specs[i].kind);
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the combined value.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Image clamp01(Image img) {
  img.array() = img.array().max(0.0f).min(1.0f);
  return img;
}

Image gen_clean(std::uint64_t seed, Index height, Index width) {
  if (height < 16 || width < 16) throw std::invalid_argument("gen_clean: image must be at least 16x16");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  Image img(Shape{3, height, width});
  auto at = [&](Index c, Index y, Index x) -> float& { return img[(c * height + y) * width + x]; };

  // Low-frequency colour gradients.
  for (Index c = 0; c < 3; ++c) {
    const double a = u(rng), gx = u(rng) - 0.5, gy = u(rng) - 0.5;
    const double fx = 0.5 + 1.5 * u(rng), fy = 0.5 + 1.5 * u(rng), ph = two_pi * u(rng), amp = 0.25 * u(rng);
    for (Index y = 0; y < height; ++y) {
      const double ny = static_cast<double>(y) / static_cast<double>(height);
      for (Index x = 0; x < width; ++x) {
        const double nx = static_cast<double>(x) / static_cast<double>(width);
        at(c, y, x) = static_cast<float>(a + gx * nx + gy * ny + amp * std::sin(two_pi * (fx * nx + fy * ny) + ph));
      }
    }
  }

  // Filled discs and rectangles with flat colours.
  const int shapes = 3 + static_cast<int>(u(rng) * 5.0);
  for (int s = 0; s < shapes; ++s) {
    const bool disc = u(rng) < 0.5;
    const double cy = u(rng) * static_cast<double>(height), cx = u(rng) * static_cast<double>(width);
    const double ry = (0.08 + 0.25 * u(rng)) * static_cast<double>(height);
    const double rx = (0.08 + 0.25 * u(rng)) * static_cast<double>(width);
    const double col[3] = {u(rng), u(rng), u(rng)};
    const double alpha = 0.6 + 0.4 * u(rng);
    for (Index y = 0; y < height; ++y) {
      for (Index x = 0; x < width; ++x) {
        const double dy = (static_cast<double>(y) - cy) / ry, dx = (static_cast<double>(x) - cx) / rx;
        const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        for (Index c = 0; c < 3; ++c) at(c, y, x) = static_cast<float>((1 - alpha) * at(c, y, x) + alpha * col[c]);
      }
    }
  }

  // Band-limited texture: a handful of mid-frequency plane waves.
  for (int k = 0; k < 6; ++k) {
    const double theta = two_pi * u(rng), freq = 2.0 + 6.0 * u(rng), ph = two_pi * u(rng), amp = 0.04 * u(rng);
    const double kx = freq * std::cos(theta), ky = freq * std::sin(theta);
    const double tint[3] = {0.5 + u(rng), 0.5 + u(rng), 0.5 + u(rng)};
    for (Index y = 0; y < height; ++y) {
      for (Index x = 0; x < width; ++x) {
        const double v = amp * std::sin(two_pi * (kx * static_cast<double>(x) / static_cast<double>(width) +
                                                  ky * static_cast<double>(y) / static_cast<double>(height)) +
                                         ph);
        for (Index c = 0; c < 3; ++c) at(c, y, x) += static_cast<float>(v * tint[c]);
      }
    }
  }
  return stretch(std::move(img), 0.02f, 0.98f);
}

Image add_gaussian_noise(const Image& img, double sigma, std::uint64_t seed) {
  require_image(img);
  if (!(sigma >= 0.0)) throw std::invalid_argument("noise sigma must be non-negative");
  if (sigma == 0.0) return img;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma / 255.0);
  Image out = img;
  for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<float>(out[i] + n(rng));
  return clamp01(std::move(out));
}

Image apply_haze(const Image& img, double airlight, double transmission) {
  require_image(img);
  if (!(airlight >= 0.0 && airlight <= 1.0)) throw std::invalid_argument("haze airlight must lie in [0,1]");
  if (!(transmission > 0.0 && transmission <= 1.0)) throw std::invalid_argument("haze transmission must lie in (0,1]");
  Image out = img;
  const float t = static_cast<float>(transmission);
  const float a = static_cast<float>(airlight * (1.0 - transmission));
  out.array() = out.array() * t + a;
  return clamp01(std::move(out));
}

Image apply_rain(const Image& img, const DegradationSpec& spec, std::uint64_t seed) {
  require_image(img);
  spec.validate();
  const int count = static_cast<int>(spec.get("count"));
  if (count == 0) return img;
  const Index h = img.dim(1), w = img.dim(2);
  const double length = spec.get("length"), intensity = spec.get("intensity");
  const double angle = spec.get("angle") * std::numbers::pi / 180.0;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 3.0 * std::numbers::pi / 180.0);

  Eigen::ArrayXf layer = Eigen::ArrayXf::Zero(h * w);
  for (int s = 0; s < count; ++s) {
    const double len = length * (0.7 + 0.6 * u(rng));
    const double a = angle + jitter(rng);
    const double dy = std::cos(a), dx = std::sin(a);
    // Start anywhere, including above the frame so streaks enter from the top.
    const double y0 = u(rng) * (static_cast<double>(h) + len) - len, x0 = u(rng) * static_cast<double>(w);
    const float value = static_cast<float>(intensity * (0.7 + 0.3 * u(rng)));
    for (double t = 0.0; t <= len; t += 0.5) {
      const auto y = static_cast<Index>(std::lround(y0 + t * dy));
      const auto x = static_cast<Index>(std::lround(x0 + t * dx));
      if (y < 0 || y >= h || x < 0 || x >= w) continue;
      layer[y * w + x] = std::max(layer[y * w + x], value);
    }
  }
  Image out = img;
  for (Index c = 0; c < 3; ++c) out.vec().segment(c * h * w, h * w).array() += layer;
  return clamp01(std::move(out));
}

Image apply_blur(const Image& img, const DegradationSpec& spec) {
  require_image(img);
  spec.validate();
  const auto length = static_cast<Index>(spec.get("length"));
  if (length == 1) return img;
  const Index k = 2 * (length / 2) + 1, r = k / 2;
  const double angle = spec.get("angle") * std::numbers::pi / 180.0;
  Eigen::ArrayXXd kernel = Eigen::ArrayXXd::Zero(k, k);
  const double half = (static_cast<double>(length) - 1.0) / 2.0;
  for (double t = -half; t <= half + 1e-9; t += 0.25) {
    const double y = static_cast<double>(r) + t * std::sin(angle), x = static_cast<double>(r) + t * std::cos(angle);
    const auto y0 = static_cast<Index>(std::floor(y)), x0 = static_cast<Index>(std::floor(x));
    const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const Index yy = y0 + dy, xx = x0 + dx;
        if (yy < 0 || yy >= k || xx < 0 || xx >= k) continue;
        kernel(yy, xx) += (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
      }
  }
  kernel /= kernel.sum();

  const Index h = img.dim(1), w = img.dim(2);
  Image out(img.shape());
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        double acc = 0.0;
        for (Index i = 0; i < k; ++i) {
          const Index yy = reflect_index(y + i - r, h);
          for (Index j = 0; j < k; ++j) {
            if (kernel(i, j) == 0.0) continue;
            acc += kernel(i, j) * img[(c * h + yy) * w + reflect_index(x + j - r, w)];
          }
        }
        out[(c * h + y) * w + x] = static_cast<float>(acc);
      }
  return clamp01(std::move(out));
}

Image apply_lowlight(const Image& img, const DegradationSpec& spec) {
  require_image(img);
  spec.validate();
  const double gamma = spec.get("gamma"), scale = spec.get("scale");
  if (gamma == 1.0 && scale == 1.0) return img;
  Image out = img;
  for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<float>(scale * std::pow(static_cast<double>(out[i]), gamma));
  return clamp01(std::move(out));
}

Image apply_degradation(const Image& img, const DegradationSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case DegradationKind::noise:
      return add_gaussian_noise(img, spec.get("sigma"), spec.seed);
    case DegradationKind::rain:
      return apply_rain(img, spec, spec.seed);
    case DegradationKind::haze:
      return apply_haze(img, spec.get("A"), spec.get("t"));
    case DegradationKind::blur:
      return apply_blur(img, spec);
    case DegradationKind::lowlight:
      return apply_lowlight(img, spec);
  }
  throw std::logic_error("unhandled degradation kind");
}

Sample compose(const Image& img, std::vector<DegradationSpec> specs, std::uint64_t seed, std::string id) {
  if (specs.empty()) throw std::invalid_argument("compose: empty degradation list");
  require_image(img);
  Sample s;
  s.clean = img;
  s.degraded = img;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    specs[i].seed = derive_seed(seed, i);
    s.degraded = apply_degradation(s.degraded, specs[i]);
  }
  s.specs = std::move(specs);
  s.id = std::move(id);
  return s;
}

Image flip_horizontal(const Image& img) {
  require_image(img);
  const Index h = img.dim(1), w = img.dim(2);
  Image out(img.shape());
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < h; ++y)
      out.vec().segment((c * h + y) * w, w) = img.vec().segment((c * h + y) * w, w).reverse();
  return out;
}

Image flip_vertical(const Image& img) {
  require_image(img);
  const Index h = img.dim(1), w = img.dim(2);
  Image out(img.shape());
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < h; ++y) out.vec().segment((c * h + y) * w, w) = img.vec().segment((c * h + h - 1 - y) * w, w);
  return out;
}

Image crop_image(const Image& img, Index top, Index left, Index height, Index width) {
  require_image(img);
  const Index h = img.dim(1), w = img.dim(2);
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > h || left + width > w) {
    throw std::invalid_argument("crop window outside the image");
  }
  Image out(Shape{3, height, width});
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < height; ++y)
      out.vec().segment((c * height + y) * width, width) = img.vec().segment((c * h + top + y) * w + left, width);
  return out;
}

Sample sample_patch(const Sample& sample, Index size, std::uint64_t seed, bool flips) {
  require_image(sample.clean);
  if (sample.clean.shape() != sample.degraded.shape()) throw ShapeError("sample halves differ in shape");
  const Index h = sample.clean.dim(1), w = sample.clean.dim(2);
  if (size < 1 || size > h || size > w) {
    throw std::invalid_argument("patch size " + std::to_string(size) + " larger than image " + to_string(sample.clean.shape()));
  }
  std::mt19937_64 rng(seed);
  const Index top = std::uniform_int_distribution<Index>(0, h - size)(rng);
  const Index left = std::uniform_int_distribution<Index>(0, w - size)(rng);
  Sample out;
  out.clean = crop_image(sample.clean, top, left, size, size);
  out.degraded = crop_image(sample.degraded, top, left, size, size);
  if (flips) {
    std::bernoulli_distribution coin(0.5);
    if (coin(rng)) {
      out.clean = flip_horizontal(out.clean);
      out.degraded = flip_horizontal(out.degraded);
    }
    if (coin(rng)) {
      out.clean = flip_vertical(out.clean);
      out.degraded = flip_vertical(out.degraded);
    }
  }
  out.specs = sample.specs;
  out.id = sample.id;
  return out;
}

}  // namespace hair
