#pragma once

// The prototype-part classifier head: latent embedding, per-prototype
// similarity maps, max-pooled similarity scores, the final linear layer,
// prototype projection onto training patches, and the activation-map
// upsampling used for visualization.
//
// The similarity transform is s(d) = log((d + 1) / (d + epsilon_stab)),
// applied to a distance term d that is either the squared L2 distance
// between a latent pixel and a prototype (default) or its square root.
// s is maximal, log(1/epsilon_stab), exactly at d = 0 and decreases
// strictly towards 0 as d grows.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "protolab/backbone.hpp"
#include "protolab/tape.hpp"
#include "protolab/threads.hpp"

namespace protolab {

struct ModelConfig {
  std::size_t image_h = 64, image_w = 64, image_c = 3;
  std::size_t latent_h = 8, latent_w = 8, latent_d = 32;
  std::size_t classes = 10;
  std::size_t prototypes_per_class = 10;
  double epsilon_stab = 1e-4;
  DistanceMode distance_mode = DistanceMode::squared;

  std::size_t prototype_count() const { return classes * prototypes_per_class; }
  double max_similarity() const { return std::log(1.0 / epsilon_stab); }

  void validate() const {
    PROTOLAB_REQUIRE(classes >= 1 && prototypes_per_class >= 1,
                     "ModelConfig: classes and prototypes_per_class must be >= 1");
    PROTOLAB_REQUIRE(epsilon_stab > 0.0 && epsilon_stab < 1.0,
                     "ModelConfig: epsilon_stab must be in (0,1), got ",
                     epsilon_stab);
    const auto [h, w] = latent_extents(image_h, image_w);
    PROTOLAB_REQUIRE(h == latent_h && w == latent_w,
                     "ModelConfig: backbone on ", image_h, "x", image_w,
                     " yields latent ", h, "x", w, ", config says ", latent_h,
                     "x", latent_w);
  }
};

struct PrototypeProvenance {
  bool filled = false;
  std::size_t image_index = 0;  // index into the training split
  Cell cell;
};

struct PrototypeBank {
  Tensor vectors;  // [m, D]
  std::vector<std::size_t> class_of;
  std::vector<PrototypeProvenance> provenance;
};

struct Model {
  ModelConfig config;
  ParameterStore params;
  std::vector<std::size_t> proto_class;
  std::vector<PrototypeProvenance> provenance;

  Tensor& prototypes() { return params.at("prototypes").value; }
  const Tensor& prototypes() const { return params.at("prototypes").value; }
  Tensor& last_layer() { return params.at("last_layer").value; }
  const Tensor& last_layer() const { return params.at("last_layer").value; }

  PrototypeBank bank() const {
    return PrototypeBank{prototypes(), proto_class, provenance};
  }
};

// last-layer init: 1.0 on (class, own-class prototype) pairs, -0.5 elsewhere
inline Tensor initial_last_layer(const ModelConfig& cfg,
                                 const std::vector<std::size_t>& proto_class) {
  Tensor w({cfg.classes, proto_class.size()});
  for (std::size_t c = 0; c < cfg.classes; ++c)
    for (std::size_t l = 0; l < proto_class.size(); ++l)
      w[c * proto_class.size() + l] = proto_class[l] == c ? 1.0 : -0.5;
  return w;
}

inline Model make_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model model;
  model.config = cfg;
  Rng rng(derive_seed(seed, /*model init*/ 0x6d6f64656cULL));
  init_backbone_params(model.params, cfg.image_c, cfg.latent_d, rng);
  const std::size_t m = cfg.prototype_count();
  // start prototypes near the latent mean so every prototype competes in
  // the cluster term from the first epoch instead of stranding far from
  // the sigmoid-bounded patch manifold
  Tensor protos({m, cfg.latent_d});
  for (std::size_t i = 0; i < protos.size(); ++i)
    protos[i] = rng.uniform(0.4, 0.6);
  model.params.add("prototypes", std::move(protos));
  model.proto_class.resize(m);
  for (std::size_t l = 0; l < m; ++l)
    model.proto_class[l] = l / cfg.prototypes_per_class;
  model.provenance.assign(m, PrototypeProvenance{});
  model.params.add("last_layer",
                   initial_last_layer(cfg, model.proto_class));
  return model;
}

// ---- Eq-style similarity on scalars ----

inline double similarity(double distance_term, double epsilon_stab) {
  PROTOLAB_REQUIRE(distance_term >= 0.0, "similarity: negative distance ",
                   distance_term);
  PROTOLAB_REQUIRE(epsilon_stab > 0.0 && epsilon_stab < 1.0,
                   "similarity: epsilon_stab must be in (0,1), got ",
                   epsilon_stab);
  return std::log1p(distance_term) - std::log(distance_term + epsilon_stab);
}

// d/dd of the similarity transform
inline double similarity_derivative(double distance_term, double epsilon_stab) {
  return 1.0 / (distance_term + 1.0) - 1.0 / (distance_term + epsilon_stab);
}

inline double distance_term(const double* z, const double* p, std::size_t d,
                            DistanceMode mode) {
  double sq = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = z[c] - p[c];
    sq += diff * diff;
  }
  return mode == DistanceMode::squared ? sq : std::sqrt(sq);
}

// ---- taped forward pass ----

struct TapedForward {
  Var image, latent, distances, simmap, scores, logits;
};

// Builds image -> latent -> distance map -> similarity map -> pooled
// scores -> logits on the tape. `train` binds parameters to the store for
// gradient flushing; `image_grad` marks the image leaf as differentiable.
inline TapedForward forward_on_tape(Tape& tape, Model& model,
                                    const Tensor& image, bool train,
                                    bool image_grad) {
  const ModelConfig& cfg = model.config;
  PROTOLAB_REQUIRE(image.rank() == 3 && image.extent(0) == cfg.image_c &&
                       image.extent(1) == cfg.image_h &&
                       image.extent(2) == cfg.image_w,
                   "forward: image shape ", shape_str(image),
                   " does not match configured ", cfg.image_c, "x", cfg.image_h,
                   "x", cfg.image_w);
  TapedForward f;
  f.image = tape.leaf(image, image_grad);
  f.latent = embed_on_tape(tape, f.image, model.params, train);
  Parameter& protos = model.params.at("prototypes");
  Var pv = train ? tape.param(protos) : tape.leaf(protos.value, false);
  f.distances = tape.prototype_distances(f.latent, pv, cfg.distance_mode);
  f.simmap = tape.log_ratio_similarity(f.distances, cfg.epsilon_stab);
  f.scores = tape.spatial_max(f.simmap);
  Parameter& last = model.params.at("last_layer");
  Var lw = train ? tape.param(last) : tape.leaf(last.value, false);
  f.logits = tape.dense(f.scores, lw, Var{});
  return f;
}

inline std::size_t argmax_index(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;  // strict: first index wins ties
  return best;
}

// indices of the n largest entries, score descending, ties by lower index
inline std::vector<std::size_t> top_indices(std::span<const double> scores,
                                            std::size_t n) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return scores[a] > scores[b];
                   });
  order.resize(std::min(n, order.size()));
  return order;
}

// ---- convenience inference ----

struct Inference {
  Tensor latent;     // [D,h,w]
  Tensor distances;  // [m,h,w]
  Tensor simmap;     // [m,h,w]
  std::vector<double> scores;
  std::vector<Cell> score_argmax;  // spatial argmax per prototype
  std::vector<double> logits;
  std::size_t predicted = 0;
};

inline Inference infer(Model& model, const Tensor& image) {
  Tape tape;
  TapedForward f = forward_on_tape(tape, model, image, false, false);
  Inference out;
  out.latent = tape.value(f.latent);
  out.distances = tape.value(f.distances);
  out.simmap = tape.value(f.simmap);
  const Tensor& s = tape.value(f.scores);
  out.scores.assign(s.data(), s.data() + s.size());
  const auto& arg = tape.argmax_cells(f.scores);
  const std::size_t w = model.config.latent_w;
  out.score_argmax.reserve(arg.size());
  for (std::uint32_t a : arg) out.score_argmax.push_back(Cell{a / w, a % w});
  const Tensor& lg = tape.value(f.logits);
  out.logits.assign(lg.data(), lg.data() + lg.size());
  out.predicted = argmax_index(out.logits);
  return out;
}

inline std::size_t predict(Model& model, const Tensor& image) {
  return infer(model, image).predicted;
}

// ---- prototype projection ----

inline Tensor latent_of(Model& model, const Tensor& image) {
  Tape tape;
  TapedForward f = forward_on_tape(tape, model, image, false, false);
  return tape.value(f.latent);
}

// Replaces every prototype with the nearest latent patch (configured
// distance) among training images of its own class and records where that
// patch came from. Ties resolve to the earliest image, then the first cell
// in row-major order.
inline void push_prototypes_on_latents(Model& model,
                                       std::span<const std::size_t> labels,
                                       const std::vector<Tensor>& latents) {
  PROTOLAB_REQUIRE(latents.size() == labels.size(),
                   "push_prototypes: ", latents.size(), " latents vs ",
                   labels.size(), " labels");
  const ModelConfig& cfg = model.config;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    const bool present =
        std::find(labels.begin(), labels.end(), c) != labels.end();
    PROTOLAB_REQUIRE(present, "push_prototypes: class ", c,
                     " has no training images");
  }
  const std::size_t d = cfg.latent_d;
  const std::size_t n = cfg.latent_h * cfg.latent_w;
  Tensor& protos = model.prototypes();
  const std::size_t m = model.proto_class.size();
  std::vector<double> best(m, std::numeric_limits<double>::infinity());
  std::vector<PrototypeProvenance> chosen(m);
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const Tensor& z = latents[i];
    for (std::size_t l = 0; l < m; ++l) {
      if (model.proto_class[l] != labels[i]) continue;
      const double* p = protos.data() + l * d;
      for (std::size_t j = 0; j < n; ++j) {
        double sq = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = z[c * n + j] - p[c];
          sq += diff * diff;
        }
        const double dt =
            cfg.distance_mode == DistanceMode::squared ? sq : std::sqrt(sq);
        if (dt < best[l]) {
          best[l] = dt;
          chosen[l] = PrototypeProvenance{
              true, i, Cell{j / cfg.latent_w, j % cfg.latent_w}};
        }
      }
    }
  }
  for (std::size_t l = 0; l < m; ++l) {
    const Tensor& z = latents[chosen[l].image_index];
    const std::size_t j = chosen[l].cell.i * cfg.latent_w + chosen[l].cell.j;
    for (std::size_t c = 0; c < d; ++c)
      protos[l * d + c] = z[c * n + j];
    model.provenance[l] = chosen[l];
  }
}

inline void push_prototypes(Model& model, std::span<const Tensor> images,
                            std::span<const std::size_t> labels) {
  std::vector<Tensor> latents(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    latents[i] = latent_of(model, images[i]);
  });
  push_prototypes_on_latents(model, labels, latents);
}

// ---- activation upsampling ----

struct Box {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive pixel bounds
};

struct Heatmap {
  Tensor map;  // [img_h, img_w]
  Box box;
};

// Corner-aligned bilinear upsampling of one prototype's map to image
// resolution; the box is the smallest rectangle covering every pixel at or
// above the 95th percentile of the upsampled map.
inline Heatmap upsample_activation(const Tensor& map_slice, std::size_t img_h,
                                   std::size_t img_w) {
  PROTOLAB_REQUIRE(map_slice.rank() == 2, "upsample_activation: need rank 2, got ",
                   shape_str(map_slice));
  const std::size_t h = map_slice.extent(0), w = map_slice.extent(1);
  Heatmap out;
  out.map = Tensor({img_h, img_w});
  const double sy =
      img_h > 1 && h > 1
          ? static_cast<double>(h - 1) / static_cast<double>(img_h - 1)
          : 0.0;
  const double sx =
      img_w > 1 && w > 1
          ? static_cast<double>(w - 1) / static_cast<double>(img_w - 1)
          : 0.0;
  for (std::size_t y = 0; y < img_h; ++y) {
    const double fy = y * sy;
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), h - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < img_w; ++x) {
      const double fx = x * sx;
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), w - 1);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = map_slice[y0 * w + x0] * (1.0 - tx) +
                         map_slice[y0 * w + x1] * tx;
      const double bot = map_slice[y1 * w + x0] * (1.0 - tx) +
                         map_slice[y1 * w + x1] * tx;
      out.map[y * img_w + x] = top * (1.0 - ty) + bot * ty;
    }
  }
  // 95th percentile by nearest rank
  std::vector<double> sorted(out.map.data(), out.map.data() + out.map.size());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t rank = static_cast<std::size_t>(
      std::ceil(0.95 * static_cast<double>(sorted.size())));
  const double threshold = sorted[std::min(rank, sorted.size()) - 1];
  std::size_t x0 = img_w, y0 = img_h, x1 = 0, y1 = 0;
  for (std::size_t y = 0; y < img_h; ++y)
    for (std::size_t x = 0; x < img_w; ++x)
      if (out.map[y * img_w + x] >= threshold) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  out.box = Box{x0, y0, x1, y1};
  return out;
}

}  // namespace protolab
