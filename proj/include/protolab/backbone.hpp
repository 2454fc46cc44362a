#pragma once

// Fixed small convolutional backbone: three blocks of
// [conv 3x3 (pad 1), relu, maxpool 2x2] with channel widths 16/32/32,
// then two 1x1 convolutions (relu, then sigmoid) into the latent depth.
// The sigmoid keeps every latent value in (0,1). On 64x64 input the
// latent grid is 8x8 with an effective stride of 8 and a 22-pixel
// receptive field per cell.

#include <array>
#include <cstdint>
#include <vector>

#include "protolab/rng.hpp"
#include "protolab/tape.hpp"

namespace protolab {

struct LayerGeom {
  std::size_t kernel = 1, stride = 1, padding = 0;
};

inline constexpr std::size_t kBackboneChannels[3] = {16, 32, 32};

// spatial geometry of the stack, in forward order
inline std::vector<LayerGeom> backbone_geometry() {
  std::vector<LayerGeom> g;
  for (int block = 0; block < 3; ++block) {
    g.push_back({3, 1, 1});  // conv
    g.push_back({2, 2, 0});  // pool
  }
  g.push_back({1, 1, 0});  // add-on 1x1
  g.push_back({1, 1, 0});  // add-on 1x1
  return g;
}

inline std::size_t forward_extent(std::size_t in, const LayerGeom& g) {
  PROTOLAB_REQUIRE(in + 2 * g.padding >= g.kernel,
                   "backbone: extent ", in, " too small for kernel ",
                   g.kernel);
  return (in + 2 * g.padding - g.kernel) / g.stride + 1;
}

// latent grid (h, w) produced for an image of the given size
inline std::pair<std::size_t, std::size_t> latent_extents(std::size_t img_h,
                                                          std::size_t img_w) {
  for (const LayerGeom& g : backbone_geometry()) {
    img_h = forward_extent(img_h, g);
    img_w = forward_extent(img_w, g);
  }
  return {img_h, img_w};
}

// Inclusive input-pixel interval that feeds the output interval [lo, hi]
// along one axis, obtained by walking the layer geometry backwards. The
// result is clipped to [0, input_extent).
inline std::pair<long, long> receptive_interval(long lo, long hi,
                                                std::size_t input_extent) {
  const auto geom = backbone_geometry();
  for (auto it = geom.rbegin(); it != geom.rend(); ++it) {
    lo = lo * static_cast<long>(it->stride) - static_cast<long>(it->padding);
    hi = hi * static_cast<long>(it->stride) - static_cast<long>(it->padding) +
         static_cast<long>(it->kernel) - 1;
  }
  lo = std::max(lo, 0L);
  hi = std::min(hi, static_cast<long>(input_extent) - 1);
  return {lo, hi};
}

inline void init_conv(ParameterStore& store, Rng& rng, const std::string& name,
                      std::size_t co, std::size_t ci, std::size_t k) {
  Tensor w({co, ci, k, k});
  const double stddev = std::sqrt(2.0 / static_cast<double>(ci * k * k));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, stddev);
  store.add(name + ".w", std::move(w));
  store.add(name + ".b", Tensor({co}));
}

// Adds all backbone parameters (conv1..3, addon1..2) to the store.
inline void init_backbone_params(ParameterStore& store, std::size_t image_c,
                                 std::size_t latent_d, Rng& rng) {
  init_conv(store, rng, "conv1", kBackboneChannels[0], image_c, 3);
  init_conv(store, rng, "conv2", kBackboneChannels[1], kBackboneChannels[0], 3);
  init_conv(store, rng, "conv3", kBackboneChannels[2], kBackboneChannels[1], 3);
  init_conv(store, rng, "addon1", latent_d, kBackboneChannels[2], 1);
  init_conv(store, rng, "addon2", latent_d, latent_d, 1);
}

inline const std::array<const char*, 6> kBaseConvParams = {
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b"};
inline const std::array<const char*, 4> kAddonParams = {
    "addon1.w", "addon1.b", "addon2.w", "addon2.b"};

// Builds the backbone on the tape. When `train` is true parameters are
// lifted as store-bound leaves so backward() can flush gradients; otherwise
// they are plain constant leaves.
inline Var embed_on_tape(Tape& tape, Var image, ParameterStore& store,
                         bool train) {
  auto lift = [&](const char* name) {
    Parameter& p = store.at(name);
    return train ? tape.param(p) : tape.leaf(p.value, false);
  };
  Var x = image;
  const char* convs[3][2] = {{"conv1.w", "conv1.b"},
                             {"conv2.w", "conv2.b"},
                             {"conv3.w", "conv3.b"}};
  for (auto& c : convs) {
    x = tape.conv2d(x, lift(c[0]), lift(c[1]), 1, 1);
    x = tape.relu(x);
    x = tape.maxpool2d(x, 2, 2);
  }
  x = tape.conv2d(x, lift("addon1.w"), lift("addon1.b"), 1, 0);
  x = tape.relu(x);
  x = tape.conv2d(x, lift("addon2.w"), lift("addon2.b"), 1, 0);
  return tape.sigmoid(x);
}

}  // namespace protolab
