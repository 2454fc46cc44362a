#pragma once

// Procedurally generated desk-scale dataset. Each class is defined by a
// unique (glyph shape, glyph color) part placed at a jittered location
// inside a class-specific home region, over a shared noisy gradient
// background with a class-uninformative body blob. The part bounding box is
// recorded for diagnostics only; training never sees it.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "protolab/codec.hpp"
#include "protolab/image_io.hpp"
#include "protolab/rng.hpp"
#include "protolab/threads.hpp"

namespace protolab {

struct SynthConfig {
  std::size_t classes = 10;
  std::size_t train_per_class = 160;
  std::size_t test_per_class = 40;
  std::size_t image_h = 64, image_w = 64;
  std::uint64_t seed = 7;
};

struct PartBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive
};

struct LabeledImage {
  Tensor image;  // [3,H,W] in [0,1]
  std::size_t label = 0;
  PartBox part;
  std::string id;
  bool corrupted = false;
};

struct Dataset {
  std::size_t classes = 0;
  std::vector<LabeledImage> train, test;
  std::vector<std::size_t> corrupted_classes;  // filled by corrupt_dataset
};

struct AugmentConfig {
  double horizontal_flip_prob = 0.5;
  double rotation_deg = 15.0;  // uniform in [-deg, +deg]
  bool jpeg_augment = false;
  double jpeg_prob = 0.5;
  int jpeg_quality = 20;
};

namespace synth {

enum class Glyph { circle, square, triangle, cross, ring };

struct Motif {
  Glyph shape;
  double r, g, b;
};

inline const std::vector<std::array<double, 3>>& motif_colors() {
  static const std::vector<std::array<double, 3>> colors = {
      {0.95, 0.10, 0.10}, {0.10, 0.90, 0.10}, {0.15, 0.25, 0.95},
      {0.95, 0.90, 0.10}, {0.90, 0.15, 0.90}, {0.10, 0.90, 0.90},
      {0.95, 0.55, 0.10}, {0.95, 0.95, 0.95}, {0.55, 0.15, 0.85},
      {0.45, 0.95, 0.45}};
  return colors;
}

inline std::size_t motif_combinations() { return 2 * motif_colors().size(); }

inline Motif class_motif(std::size_t klass) {
  const auto& colors = motif_colors();
  const std::size_t color = klass % colors.size();
  // second palette cycle shifts the shape so every (shape, color) pair in
  // range is distinct
  const std::size_t shape = (klass / colors.size() + klass) % 5;
  return Motif{static_cast<Glyph>(shape), colors[color][0], colors[color][1],
               colors[color][2]};
}

inline bool glyph_hit(Glyph g, long dx, long dy, long half) {
  const double r = std::sqrt(static_cast<double>(dx * dx + dy * dy));
  switch (g) {
    case Glyph::circle:
      return r <= static_cast<double>(half - 1);
    case Glyph::square:
      return std::abs(dx) <= half - 2 && std::abs(dy) <= half - 2;
    case Glyph::triangle:
      return dy >= -half + 1 && dy <= half - 1 &&
             std::abs(dx) * 2 <= dy + half;
    case Glyph::cross:
      return (std::abs(dx) <= 2 && std::abs(dy) <= half - 1) ||
             (std::abs(dy) <= 2 && std::abs(dx) <= half - 1);
    case Glyph::ring:
      return r <= static_cast<double>(half - 1) &&
             r >= static_cast<double>(half - 4);
  }
  return false;
}

// home region anchor for the class part, spread over a coarse grid
inline std::pair<long, long> class_anchor(std::size_t klass, std::size_t h,
                                          std::size_t w) {
  const long gx = static_cast<long>(klass % 4);
  const long gy = static_cast<long>(klass / 4 % 3);
  const long x = 12 + gx * static_cast<long>(w > 52 ? (w - 24) / 3 : 13);
  const long y = 12 + gy * static_cast<long>(h > 52 ? (h - 24) / 2 : 13);
  return {x, y};
}

inline LabeledImage render(const SynthConfig& cfg, std::size_t klass,
                           std::uint64_t image_seed, std::string id) {
  Rng rng(image_seed);
  const std::size_t h = cfg.image_h, w = cfg.image_w, n = h * w;
  LabeledImage out;
  out.label = klass;
  out.id = std::move(id);
  out.image = Tensor({3, h, w});
  Tensor& img = out.image;

  // gradient background with per-pixel noise, same distribution for all classes
  double c1[3], c2[3];
  for (int c = 0; c < 3; ++c) c1[c] = rng.uniform(0.25, 0.75);
  for (int c = 0; c < 3; ++c) c2[c] = rng.uniform(0.25, 0.75);
  const bool vertical = rng.bernoulli(0.5);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double t = vertical ? static_cast<double>(y) / (h - 1)
                                : static_cast<double>(x) / (w - 1);
      for (int c = 0; c < 3; ++c)
        img[c * n + y * w + x] = c1[c] + (c2[c] - c1[c]) * t;
    }
  }
  for (std::size_t i = 0; i < img.size(); ++i)
    img[i] = std::clamp(img[i] + rng.uniform(-0.08, 0.08), 0.0, 1.0);

  // class-uninformative body blob
  {
    const double cx = rng.uniform(0.3, 0.7) * w;
    const double cy = rng.uniform(0.3, 0.7) * h;
    const double rx = rng.uniform(8.0, 14.0), ry = rng.uniform(8.0, 14.0);
    double col[3];
    for (int c = 0; c < 3; ++c) col[c] = rng.uniform(0.2, 0.8);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double nx = (x - cx) / rx, ny = (y - cy) / ry;
        const double d = std::sqrt(nx * nx + ny * ny);
        const double alpha = std::clamp(1.5 * (1.0 - d), 0.0, 1.0) * 0.85;
        if (alpha <= 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          double& px = img[c * n + y * w + x];
          px = px * (1.0 - alpha) + col[c] * alpha;
        }
      }
  }

  // class-defining part
  const Motif motif = class_motif(klass);
  const long half = 7;
  auto [ax, ay] = class_anchor(klass, h, w);
  long cx = ax + static_cast<long>(rng.below(13)) - 6;
  long cy = ay + static_cast<long>(rng.below(13)) - 6;
  cx = std::clamp(cx, half + 1, static_cast<long>(w) - half - 2);
  cy = std::clamp(cy, half + 1, static_cast<long>(h) - half - 2);
  double col[3] = {std::clamp(motif.r + rng.uniform(-0.05, 0.05), 0.0, 1.0),
                   std::clamp(motif.g + rng.uniform(-0.05, 0.05), 0.0, 1.0),
                   std::clamp(motif.b + rng.uniform(-0.05, 0.05), 0.0, 1.0)};
  for (long dy = -half; dy <= half; ++dy)
    for (long dx = -half; dx <= half; ++dx) {
      if (!glyph_hit(motif.shape, dx, dy, half)) continue;
      const std::size_t x = static_cast<std::size_t>(cx + dx);
      const std::size_t y = static_cast<std::size_t>(cy + dy);
      for (int c = 0; c < 3; ++c) img[c * n + y * w + x] = col[c];
    }
  out.part = PartBox{static_cast<std::size_t>(cx - half),
                     static_cast<std::size_t>(cy - half),
                     static_cast<std::size_t>(cx + half),
                     static_cast<std::size_t>(cy + half)};
  return out;
}

}  // namespace synth

inline Dataset generate(const SynthConfig& cfg) {
  PROTOLAB_REQUIRE(cfg.classes >= 1 && cfg.train_per_class >= 1 &&
                       cfg.test_per_class >= 1,
                   "generate: class and split sizes must be positive");
  PROTOLAB_REQUIRE(cfg.classes <= synth::motif_combinations(),
                   "generate: insufficient motif palette for ", cfg.classes,
                   " classes (have ", synth::motif_combinations(), ")");
  Dataset ds;
  ds.classes = cfg.classes;
  ds.train.resize(cfg.classes * cfg.train_per_class);
  ds.test.resize(cfg.classes * cfg.test_per_class);
  parallel_for(ds.train.size(), [&](std::size_t i) {
    const std::size_t klass = i / cfg.train_per_class;
    const std::size_t idx = i % cfg.train_per_class;
    char id[32];
    std::snprintf(id, sizeof id, "train_c%02zu_i%04zu", klass, idx);
    ds.train[i] = synth::render(
        cfg, klass, derive_seed(cfg.seed, 1, klass, idx), id);
  });
  parallel_for(ds.test.size(), [&](std::size_t i) {
    const std::size_t klass = i / cfg.test_per_class;
    const std::size_t idx = i % cfg.test_per_class;
    char id[32];
    std::snprintf(id, sizeof id, "test_c%02zu_i%04zu", klass, idx);
    ds.test[i] = synth::render(
        cfg, klass, derive_seed(cfg.seed, 2, klass, idx), id);
  });
  return ds;
}

// flip, rotate, optional JPEG branch; draws from rng in a fixed order
inline Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  const std::size_t h = image.extent(1), w = image.extent(2), n = h * w;
  Tensor out = image;
  if (rng.bernoulli(cfg.horizontal_flip_prob)) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w / 2; ++x)
          std::swap(out[c * n + y * w + x], out[c * n + y * w + (w - 1 - x)]);
  }
  const double angle =
      rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * std::numbers::pi / 180.0;
  if (angle != 0.0) {
    const double cs = std::cos(angle), sn = std::sin(angle);
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
    Tensor rotated({3, h, w});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        // sample the source with edge replication
        const double sx = cx + cs * (x - cx) + sn * (y - cy);
        const double sy = cy - sn * (x - cx) + cs * (y - cy);
        const double fx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
        const double fy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
        const std::size_t x0 = static_cast<std::size_t>(fx);
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double tx = fx - x0, ty = fy - y0;
        for (std::size_t c = 0; c < 3; ++c) {
          const double top = out[c * n + y0 * w + x0] * (1 - tx) +
                             out[c * n + y0 * w + x1] * tx;
          const double bot = out[c * n + y1 * w + x0] * (1 - tx) +
                             out[c * n + y1 * w + x1] * tx;
          rotated[c * n + y * w + x] =
              std::clamp(top * (1 - ty) + bot * ty, 0.0, 1.0);
        }
      }
    out = std::move(rotated);
  }
  if (cfg.jpeg_augment && rng.bernoulli(cfg.jpeg_prob)) {
    CodecConfig codec;
    codec.quality = cfg.jpeg_quality;
    out = compress_decompress(out, codec);
  }
  return out;
}

// ---- disk layout: images/<id>.ppm + manifest.csv (+ corrupted_classes.txt) ----

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.csv");
  PROTOLAB_REQUIRE(manifest.good(), "save_dataset: cannot write manifest in ",
                   dir.string());
  manifest << "filename,class,split,corrupted,part_x0,part_y0,part_x1,part_y1\n";
  auto dump = [&](const std::vector<LabeledImage>& split, const char* name) {
    for (const LabeledImage& li : split) {
      const std::string file = li.id + ".ppm";
      write_ppm(dir / "images" / file, li.image);
      manifest << file << "," << li.label << "," << name << ","
               << (li.corrupted ? 1 : 0) << "," << li.part.x0 << ","
               << li.part.y0 << "," << li.part.x1 << "," << li.part.y1
               << "\n";
    }
  };
  dump(ds.train, "train");
  dump(ds.test, "test");
  if (!ds.corrupted_classes.empty()) {
    std::ofstream list(dir / "corrupted_classes.txt");
    for (std::size_t c : ds.corrupted_classes) list << c << "\n";
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(dir / "manifest.csv");
  PROTOLAB_REQUIRE(manifest.good(), "load_dataset: missing manifest.csv in ",
                   dir.string());
  std::string line;
  std::getline(manifest, line);  // header
  Dataset ds;
  struct Row {
    std::string file, split;
    LabeledImage li;
  };
  std::vector<Row> rows;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    Row row;
    std::size_t corrupted = 0;
    char file[128], split[16];
    const int got = std::sscanf(
        line.c_str(), "%127[^,],%zu,%15[^,],%zu,%zu,%zu,%zu,%zu", file,
        &row.li.label, split, &corrupted, &row.li.part.x0, &row.li.part.y0,
        &row.li.part.x1, &row.li.part.y1);
    PROTOLAB_REQUIRE(got == 8, "load_dataset: malformed manifest row '", line,
                     "'");
    row.file = file;
    row.split = split;
    row.li.corrupted = corrupted != 0;
    row.li.id = row.file.substr(0, row.file.rfind('.'));
    rows.push_back(std::move(row));
  }
  std::vector<LabeledImage> loaded(rows.size());
  parallel_for(rows.size(), [&](std::size_t i) {
    const fs::path p = dir / "images" / rows[i].file;
    PROTOLAB_REQUIRE(fs::exists(p), "load_dataset: missing image file ",
                     p.string());
    loaded[i] = rows[i].li;
    loaded[i].image = read_ppm(p);
  });
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ds.classes = std::max(ds.classes, loaded[i].label + 1);
    (rows[i].split == "train" ? ds.train : ds.test)
        .push_back(std::move(loaded[i]));
  }
  if (fs::exists(dir / "corrupted_classes.txt")) {
    std::ifstream list(dir / "corrupted_classes.txt");
    std::size_t c;
    while (list >> c) ds.corrupted_classes.push_back(c);
  }
  return ds;
}

}  // namespace protolab
