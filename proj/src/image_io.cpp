#include "hair/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace hair {

namespace {

unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

class HeaderReader {
 public:
  explicit HeaderReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  std::string token() {
    skip_space();
    std::string out;
    while (pos_ < bytes_.size() && !std::isspace(bytes_[pos_]) && bytes_[pos_] != '#') out += static_cast<char>(bytes_[pos_++]);
    if (out.empty()) throw ImageIoError("ppm: truncated header");
    return out;
  }

  long number() {
    const std::string t = token();
    if (!std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::isdigit(c); }) || t.size() > 9)
      throw ImageIoError("ppm: bad header field '" + t + "'");
    return std::stol(t);
  }

  std::size_t data_start() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) throw ImageIoError("ppm: truncated header");
    return pos_ + 1;
  }

 private:
  void skip_space() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Image decode_ppm(const std::vector<unsigned char>& bytes) {
  HeaderReader reader(bytes);
  if (reader.token() != "P6") throw ImageIoError("ppm: only binary P6 files are supported");
  const long w = reader.number(), h = reader.number(), maxval = reader.number();
  if (w < 1 || h < 1) throw ImageIoError("ppm: empty image");
  if (maxval != 255) throw ImageIoError("ppm: only 8-bit files (maxval 255) are supported");
  const std::size_t start = reader.data_start();
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (bytes.size() - start < n) throw ImageIoError("ppm: truncated pixel data");
  Image img(Shape{3, h, w});
  const Index plane = h * w;
  for (Index p = 0; p < plane; ++p) {
    for (Index c = 0; c < 3; ++c) img[c * plane + p] = static_cast<float>(bytes[start + 3 * p + c]) / 255.0f;
  }
  return img;
}

std::vector<unsigned char> encode_ppm(const Image& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("ppm: expected a [3,H,W] image, got " + to_string(img.shape()));
  const Index h = img.dim(1), w = img.dim(2), plane = h * w;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(out.size() + 3 * plane);
  for (Index p = 0; p < plane; ++p) {
    for (Index c = 0; c < 3; ++c) out.push_back(to_byte(img[c * plane + p]));
  }
  return out;
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open image '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_ppm(bytes);
  } catch (const ImageIoError& e) {
    throw ImageIoError(path + ": " + e.what());
  }
}

void write_ppm(const Image& img, const std::string& path) {
  const auto bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot write image '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::ios_base::failure("write failed for '" + path + "'");
}

Image quantize8(const Image& img) {
  Image out = img;
  for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<float>(to_byte(img[i])) / 255.0f;
  return out;
}

std::vector<std::string> list_images(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::ios_base::failure("not a directory: '" + dir + "'");
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") out.push_back(entry.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace hair
