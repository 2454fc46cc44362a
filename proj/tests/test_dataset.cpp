#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <set>

#include "protolab/dataset.hpp"

using namespace protolab;

namespace {

SynthConfig tiny_config() {
  SynthConfig cfg;
  cfg.classes = 4;
  cfg.train_per_class = 3;
  cfg.test_per_class = 2;
  cfg.seed = 9;
  return cfg;
}

std::filesystem::path temp_dir(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "protolab_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("generation is deterministic under the seed") {
  SynthConfig cfg = tiny_config();
  Dataset a = generate(cfg);
  Dataset b = generate(cfg);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(max_abs_diff(a.train[i].image, b.train[i].image) == 0.0);
    CHECK(a.train[i].id == b.train[i].id);
  }
  SynthConfig other = cfg;
  other.seed = 10;
  Dataset c = generate(other);
  CHECK(max_abs_diff(a.train[0].image, c.train[0].image) > 0.0);
}

TEST_CASE("generation counts and ranges") {
  SynthConfig cfg;
  cfg.classes = 10;
  cfg.train_per_class = 160;
  cfg.test_per_class = 4;
  cfg.seed = 7;
  Dataset ds = generate(cfg);
  CHECK(ds.train.size() == 1600);
  CHECK(ds.test.size() == 40);
  for (const auto& li : {ds.train.front(), ds.train.back(), ds.test.front()}) {
    REQUIRE(li.image.shape() == std::vector<std::size_t>{3, 64, 64});
    for (std::size_t i = 0; i < li.image.size(); ++i) {
      CHECK(li.image[i] >= 0.0);
      CHECK(li.image[i] <= 1.0);
    }
    CHECK(li.part.x1 < 64);
    CHECK(li.part.y1 < 64);
    CHECK(li.part.x0 < li.part.x1);
  }
}

TEST_CASE("train and test splits are disjoint by content hash") {
  SynthConfig cfg = tiny_config();
  cfg.train_per_class = 20;
  cfg.test_per_class = 10;
  Dataset ds = generate(cfg);
  std::set<std::uint64_t> train_hashes;
  for (const auto& li : ds.train) train_hashes.insert(content_hash(li.image));
  CHECK(train_hashes.size() == ds.train.size());
  for (const auto& li : ds.test)
    CHECK(train_hashes.count(content_hash(li.image)) == 0);
}

TEST_CASE("insufficient motif palette is rejected") {
  SynthConfig cfg = tiny_config();
  cfg.classes = synth::motif_combinations() + 1;
  CHECK_THROWS_AS(generate(cfg), std::invalid_argument);
}

TEST_CASE("nearest-centroid baseline on part crops separates the classes") {
  SynthConfig cfg;
  cfg.classes = 10;
  cfg.train_per_class = 20;
  cfg.test_per_class = 10;
  cfg.seed = 7;
  Dataset ds = generate(cfg);

  // the part crop resized to a fixed 12x12x3 patch is the signature
  constexpr std::size_t kSide = 12;
  auto signature = [](const LabeledImage& li) {
    std::vector<double> sig(3 * kSide * kSide);
    const std::size_t n = li.image.extent(1) * li.image.extent(2);
    const std::size_t w = li.image.extent(2);
    const double sy =
        static_cast<double>(li.part.y1 - li.part.y0) / (kSide - 1);
    const double sx =
        static_cast<double>(li.part.x1 - li.part.x0) / (kSide - 1);
    for (std::size_t y = 0; y < kSide; ++y)
      for (std::size_t x = 0; x < kSide; ++x) {
        const double fy = li.part.y0 + y * sy;
        const double fx = li.part.x0 + x * sx;
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t x0 = static_cast<std::size_t>(fx);
        const std::size_t y1 = std::min(y0 + 1, li.image.extent(1) - 1);
        const std::size_t x1 = std::min(x0 + 1, li.image.extent(2) - 1);
        const double ty = fy - y0, tx = fx - x0;
        for (std::size_t c = 0; c < 3; ++c) {
          const double top = li.image[c * n + y0 * w + x0] * (1 - tx) +
                             li.image[c * n + y0 * w + x1] * tx;
          const double bot = li.image[c * n + y1 * w + x0] * (1 - tx) +
                             li.image[c * n + y1 * w + x1] * tx;
          sig[(c * kSide + y) * kSide + x] = top * (1 - ty) + bot * ty;
        }
      }
    return sig;
  };

  const std::size_t dim = 3 * kSide * kSide;
  std::vector<std::vector<double>> centroids(cfg.classes,
                                             std::vector<double>(dim, 0.0));
  std::vector<std::size_t> counts(cfg.classes, 0);
  for (const auto& li : ds.train) {
    auto sig = signature(li);
    for (std::size_t c = 0; c < dim; ++c) centroids[li.label][c] += sig[c];
    ++counts[li.label];
  }
  for (std::size_t k = 0; k < cfg.classes; ++k)
    for (std::size_t c = 0; c < dim; ++c)
      centroids[k][c] /= static_cast<double>(counts[k]);

  std::size_t correct = 0;
  for (const auto& li : ds.test) {
    auto sig = signature(li);
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < cfg.classes; ++k) {
      double d = 0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double diff = sig[c] - centroids[k][c];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    if (best == li.label) ++correct;
  }
  const double accuracy =
      static_cast<double>(correct) / static_cast<double>(ds.test.size());
  INFO("baseline accuracy " << accuracy);
  CHECK(accuracy >= 0.95);
}

TEST_CASE("augment identity and involution properties") {
  SynthConfig cfg = tiny_config();
  Dataset ds = generate(cfg);
  const Tensor& img = ds.train[0].image;

  SECTION("all probabilities zero and zero rotation range is the identity") {
    AugmentConfig acfg;
    acfg.horizontal_flip_prob = 0.0;
    acfg.rotation_deg = 0.0;
    Rng rng(1);
    CHECK(max_abs_diff(augment(img, acfg, rng), img) == 0.0);
  }
  SECTION("flipping twice is the identity") {
    AugmentConfig acfg;
    acfg.horizontal_flip_prob = 1.0;
    acfg.rotation_deg = 0.0;
    Rng rng(2);
    Tensor once = augment(img, acfg, rng);
    CHECK(max_abs_diff(once, img) > 0.0);
    Tensor twice = augment(once, acfg, rng);
    CHECK(max_abs_diff(twice, img) == 0.0);
  }
  SECTION("rotation preserves shape and range") {
    AugmentConfig acfg;
    acfg.horizontal_flip_prob = 0.0;
    acfg.rotation_deg = 15.0;
    Rng rng(3);
    Tensor rotated = augment(img, acfg, rng);
    REQUIRE(rotated.shape() == img.shape());
    for (std::size_t i = 0; i < rotated.size(); ++i) {
      CHECK(rotated[i] >= 0.0);
      CHECK(rotated[i] <= 1.0);
    }
    CHECK(max_abs_diff(rotated, img) > 0.0);
  }
  SECTION("seeded augmentation is deterministic") {
    AugmentConfig acfg;
    acfg.jpeg_augment = true;
    Rng r1(4), r2(4);
    CHECK(max_abs_diff(augment(img, acfg, r1), augment(img, acfg, r2)) == 0.0);
  }
}

TEST_CASE("dataset disk roundtrip") {
  SynthConfig cfg = tiny_config();
  Dataset ds = generate(cfg);
  ds.corrupted_classes = {1, 3};
  auto dir = temp_dir("roundtrip");
  save_dataset(ds, dir);

  SECTION("images survive up to 8-bit quantization") {
    Dataset loaded = load_dataset(dir);
    REQUIRE(loaded.train.size() == ds.train.size());
    REQUIRE(loaded.test.size() == ds.test.size());
    CHECK(loaded.classes == cfg.classes);
    CHECK(loaded.corrupted_classes == ds.corrupted_classes);
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
      CHECK(loaded.train[i].id == ds.train[i].id);
      CHECK(loaded.train[i].label == ds.train[i].label);
      CHECK(loaded.train[i].part.x0 == ds.train[i].part.x0);
      CHECK(max_abs_diff(loaded.train[i].image, ds.train[i].image) <=
            1.0 / 255.0 + 1e-12);
    }
  }
  SECTION("manifest row count equals image count") {
    std::ifstream manifest(dir / "manifest.csv");
    std::string line;
    std::size_t rows = 0;
    std::getline(manifest, line);  // header
    while (std::getline(manifest, line))
      if (!line.empty()) ++rows;
    CHECK(rows == ds.train.size() + ds.test.size());
  }
  SECTION("a missing image file is reported by name") {
    std::filesystem::remove(dir / "images" / (ds.train[2].id + ".ppm"));
    try {
      load_dataset(dir);
      FAIL("expected missing-file rejection");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find(ds.train[2].id) != std::string::npos);
    }
  }
  SECTION("a malformed manifest row is rejected") {
    auto dir2 = temp_dir("badmanifest");
    std::ofstream m(dir2 / "manifest.csv");
    m << "filename,class,split,corrupted,part_x0,part_y0,part_x1,part_y1\n";
    m << "incomplete_row,3\n";
    m.close();
    CHECK_THROWS_AS(load_dataset(dir2), std::invalid_argument);
  }
}

TEST_CASE("ppm io roundtrip is exact on the 8-bit grid") {
  Rng rng(21);
  Tensor img({3, 5, 7});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
  Tensor snapped = quantize8(img);
  auto dir = temp_dir("ppm");
  write_ppm(dir / "x.ppm", img);
  Tensor back = read_ppm(dir / "x.ppm");
  CHECK(max_abs_diff(back, snapped) == 0.0);
  CHECK(max_abs_diff(back, img) <= 0.5 / 255.0 + 1e-12);
}
