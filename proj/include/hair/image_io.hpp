#pragma once

#include "hair/degradations.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace hair {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads an 8-bit binary PPM (P6, maxval 255) into a [3, H, W] image in [0, 1].
Image read_ppm(const std::string& path);
/// Writes round(clamp(x, 0, 1) * 255) as binary PPM.
void write_ppm(const Image& img, const std::string& path);

Image decode_ppm(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> encode_ppm(const Image& img);

/// Quantizes to the 8-bit grid the files store.
Image quantize8(const Image& img);

/// Sorted *.ppm paths in a directory.
std::vector<std::string> list_images(const std::string& dir);

}  // namespace hair
