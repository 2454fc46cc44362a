#pragma once

// Deterministic JPEG-style lossy codec: 8-bit quantization, BT.601
// full-range YCbCr, optional 2x2 chroma averaging, blockwise orthonormal
// DCT with standard quantization tables scaled by the conventional quality
// formula. Entropy coding is omitted (it is lossless); every artefact comes
// from quantization and subsampling. Output is therefore not bit-identical
// to any particular JPEG encoder, but the artefact structure is the same.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "protolab/tensor.hpp"

namespace protolab {

struct CodecConfig {
  int quality = 20;  // 1..100
  bool chroma_subsampling = true;
};

struct QuantTables {
  std::array<int, 64> luma{};
  std::array<int, 64> chroma{};
};

// ITU-T T.81 Annex K reference tables
inline constexpr std::array<int, 64> kBaseLuma = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

inline constexpr std::array<int, 64> kBaseChroma = {
    17, 18, 24, 47, 99, 99, 99, 99,  //
    18, 21, 26, 66, 99, 99, 99, 99,  //
    24, 26, 56, 99, 99, 99, 99, 99,  //
    47, 66, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99};

inline QuantTables scaled_quant_tables(int quality) {
  PROTOLAB_REQUIRE(quality >= 1 && quality <= 100,
                   "scaled_quant_tables: quality ", quality,
                   " outside [1,100]");
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  QuantTables t;
  for (int i = 0; i < 64; ++i) {
    t.luma[i] = std::clamp((kBaseLuma[i] * scale + 50) / 100, 1, 255);
    t.chroma[i] = std::clamp((kBaseChroma[i] * scale + 50) / 100, 1, 255);
  }
  return t;
}

namespace detail {

// orthonormal DCT-II basis: C[u][x] = c(u) cos((2x+1) u pi / 16)
inline const std::array<std::array<double, 8>, 8>& dct_basis() {
  static const auto basis = [] {
    std::array<std::array<double, 8>, 8> b{};
    for (int u = 0; u < 8; ++u) {
      const double cu = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x)
        b[u][x] = cu * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
    }
    return b;
  }();
  return basis;
}

}  // namespace detail

enum class DctDirection { forward, inverse };

// 2D orthonormal DCT on one 8x8 block; inverse(forward(b)) == b to 1e-10.
inline void dct8x8(const double* in, double* out, DctDirection dir) {
  const auto& c = detail::dct_basis();
  double tmp[64];
  if (dir == DctDirection::forward) {
    // rows: T = C f^T pattern via tmp[u][x-col] then cols
    for (int u = 0; u < 8; ++u)
      for (int x = 0; x < 8; ++x) {
        double s = 0.0;
        for (int k = 0; k < 8; ++k) s += c[u][k] * in[k * 8 + x];
        tmp[u * 8 + x] = s;
      }
    for (int u = 0; u < 8; ++u)
      for (int v = 0; v < 8; ++v) {
        double s = 0.0;
        for (int k = 0; k < 8; ++k) s += tmp[u * 8 + k] * c[v][k];
        out[u * 8 + v] = s;
      }
  } else {
    for (int x = 0; x < 8; ++x)
      for (int v = 0; v < 8; ++v) {
        double s = 0.0;
        for (int k = 0; k < 8; ++k) s += c[k][x] * in[k * 8 + v];
        tmp[x * 8 + v] = s;
      }
    for (int x = 0; x < 8; ++x)
      for (int y = 0; y < 8; ++y) {
        double s = 0.0;
        for (int k = 0; k < 8; ++k) s += tmp[x * 8 + k] * c[k][y];
        out[x * 8 + y] = s;
      }
  }
}

namespace detail {

// level-shift, blockwise DCT, quantize/dequantize, inverse DCT on a plane,
// replicate-padded to multiples of 8
inline void quantize_plane(std::vector<double>& plane, std::size_t h,
                           std::size_t w, const std::array<int, 64>& table) {
  const std::size_t hp = (h + 7) / 8 * 8, wp = (w + 7) / 8 * 8;
  std::vector<double> padded(hp * wp);
  for (std::size_t y = 0; y < hp; ++y) {
    const std::size_t sy = std::min(y, h - 1);
    for (std::size_t x = 0; x < wp; ++x)
      padded[y * wp + x] = plane[sy * w + std::min(x, w - 1)] - 128.0;
  }
  double block[64], coef[64];
  for (std::size_t by = 0; by < hp; by += 8) {
    for (std::size_t bx = 0; bx < wp; bx += 8) {
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
          block[y * 8 + x] = padded[(by + y) * wp + bx + x];
      dct8x8(block, coef, DctDirection::forward);
      for (int i = 0; i < 64; ++i) {
        const double q = static_cast<double>(table[i]);
        coef[i] = static_cast<double>(std::llround(coef[i] / q)) * q;
      }
      dct8x8(coef, block, DctDirection::inverse);
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
          padded[(by + y) * wp + bx + x] = block[y * 8 + x];
    }
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      plane[y * w + x] = std::clamp(padded[y * wp + x] + 128.0, 0.0, 255.0);
}

}  // namespace detail

// Full pipeline on a [3,H,W] image with values in [0,1]; output has the
// same shape and range. Deterministic.
inline Tensor compress_decompress(const Tensor& rgb, const CodecConfig& cfg) {
  PROTOLAB_REQUIRE(rgb.rank() == 3 && rgb.extent(0) == 3,
                   "compress_decompress: need [3,H,W], got ", shape_str(rgb));
  const QuantTables tables = scaled_quant_tables(cfg.quality);
  const std::size_t h = rgb.extent(1), w = rgb.extent(2), n = h * w;

  std::vector<double> yp(n), cb(n), cr(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::round(std::clamp(rgb[i], 0.0, 1.0) * 255.0);
    const double g = std::round(std::clamp(rgb[n + i], 0.0, 1.0) * 255.0);
    const double b = std::round(std::clamp(rgb[2 * n + i], 0.0, 1.0) * 255.0);
    yp[i] = 0.299 * r + 0.587 * g + 0.114 * b;
    cb[i] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    cr[i] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
  }

  detail::quantize_plane(yp, h, w, tables.luma);

  auto chroma_pass = [&](std::vector<double>& plane) {
    if (!cfg.chroma_subsampling) {
      detail::quantize_plane(plane, h, w, tables.chroma);
      return;
    }
    const std::size_t sh = (h + 1) / 2, sw = (w + 1) / 2;
    std::vector<double> sub(sh * sw);
    for (std::size_t y = 0; y < sh; ++y)
      for (std::size_t x = 0; x < sw; ++x) {
        const std::size_t y0 = 2 * y, x0 = 2 * x;
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        sub[y * sw + x] = 0.25 * (plane[y0 * w + x0] + plane[y0 * w + x1] +
                                  plane[y1 * w + x0] + plane[y1 * w + x1]);
      }
    detail::quantize_plane(sub, sh, sw, tables.chroma);
    for (std::size_t y = 0; y < h; ++y)  // nearest-neighbour upsample
      for (std::size_t x = 0; x < w; ++x)
        plane[y * w + x] = sub[(y / 2) * sw + x / 2];
  };
  chroma_pass(cb);
  chroma_pass(cr);

  Tensor out({3, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    const double cbv = cb[i] - 128.0, crv = cr[i] - 128.0;
    const double r = yp[i] + 1.402 * crv;
    const double g = yp[i] - 0.344136 * cbv - 0.714136 * crv;
    const double b = yp[i] + 1.772 * cbv;
    out[i] = std::clamp(r, 0.0, 255.0) / 255.0;
    out[n + i] = std::clamp(g, 0.0, 255.0) / 255.0;
    out[2 * n + i] = std::clamp(b, 0.0, 255.0) / 255.0;
  }
  return out;
}

// peak signal-to-noise ratio between two [0,1] images, in dB
inline double psnr(const Tensor& a, const Tensor& b) {
  PROTOLAB_REQUIRE(a.same_shape(b), "psnr: shapes ", shape_str(a), " vs ",
                   shape_str(b));
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace protolab
