#pragma once

// Binary PPM (P6, maxval 255) read/write for [3,H,W] tensors in [0,1].

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "protolab/tensor.hpp"

namespace protolab {

inline std::uint8_t to_byte(double v) {
  const double scaled = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(scaled);
}

// round-trip error through 8 bits is at most 1/255 per pixel
inline Tensor quantize8(const Tensor& image) {
  Tensor out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i)
    out[i] = static_cast<double>(to_byte(image[i])) / 255.0;
  return out;
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  PROTOLAB_REQUIRE(image.rank() == 3 && image.extent(0) == 3,
                   "write_ppm: need [3,H,W], got ", shape_str(image));
  const std::size_t h = image.extent(1), w = image.extent(2), n = h * w;
  std::ofstream out(path, std::ios::binary);
  PROTOLAB_REQUIRE(out.good(), "write_ppm: cannot open ", path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  std::string bytes(3 * n, '\0');
  for (std::size_t i = 0; i < n; ++i) {
    bytes[3 * i] = static_cast<char>(to_byte(image[i]));
    bytes[3 * i + 1] = static_cast<char>(to_byte(image[n + i]));
    bytes[3 * i + 2] = static_cast<char>(to_byte(image[2 * n + i]));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  PROTOLAB_REQUIRE(out.good(), "write_ppm: write failed for ", path.string());
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  PROTOLAB_REQUIRE(in.good(), "read_ppm: cannot open ", path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  PROTOLAB_REQUIRE(magic == "P6" && maxval == 255 && w > 0 && h > 0,
                   "read_ppm: unsupported header in ", path.string());
  in.get();  // single whitespace after the header
  std::string bytes(3 * w * h, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  PROTOLAB_REQUIRE(in.gcount() == static_cast<std::streamsize>(bytes.size()),
                   "read_ppm: truncated payload in ", path.string());
  Tensor image({3, h, w});
  const std::size_t n = h * w;
  for (std::size_t i = 0; i < n; ++i) {
    image[i] = static_cast<std::uint8_t>(bytes[3 * i]) / 255.0;
    image[n + i] = static_cast<std::uint8_t>(bytes[3 * i + 1]) / 255.0;
    image[2 * n + i] = static_cast<std::uint8_t>(bytes[3 * i + 2]) / 255.0;
  }
  return image;
}

// FNV-1a over the 8-bit quantized pixels; used for content identity checks
inline std::uint64_t content_hash(const Tensor& image) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < image.size(); ++i) {
    h ^= to_byte(image[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace protolab
