#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "protolab/compression.hpp"

using namespace protolab;
using Catch::Matchers::WithinAbs;

namespace {

Tensor noise_image(std::size_t h, std::size_t w, Rng& rng) {
  Tensor t({3, h, w});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("quality scaling of the quantization tables") {
  SECTION("quality 50 reproduces the base tables") {
    QuantTables t = scaled_quant_tables(50);
    for (int i = 0; i < 64; ++i) {
      CHECK(t.luma[i] == kBaseLuma[i]);
      CHECK(t.chroma[i] == kBaseChroma[i]);
    }
  }
  SECTION("quality 20 scales the luma DC entry 16 to 40") {
    QuantTables t = scaled_quant_tables(20);
    CHECK(t.luma[0] == 40);  // floor((16*250 + 50)/100)
  }
  SECTION("quality 100 clamps every entry to 1") {
    QuantTables t = scaled_quant_tables(100);
    for (int i = 0; i < 64; ++i) {
      CHECK(t.luma[i] == 1);
      CHECK(t.chroma[i] == 1);
    }
  }
  SECTION("entries are monotone decreasing in quality") {
    QuantTables prev = scaled_quant_tables(1);
    for (int q = 2; q <= 100; ++q) {
      QuantTables cur = scaled_quant_tables(q);
      for (int i = 0; i < 64; ++i) {
        CHECK(prev.luma[i] >= cur.luma[i]);
        CHECK(prev.chroma[i] >= cur.chroma[i]);
      }
      prev = cur;
    }
  }
  SECTION("out-of-range quality is rejected") {
    CHECK_THROWS_AS(scaled_quant_tables(0), std::invalid_argument);
    CHECK_THROWS_AS(scaled_quant_tables(101), std::invalid_argument);
  }
}

TEST_CASE("dct8x8 basics") {
  SECTION("constant block concentrates in the DC coefficient") {
    double in[64], out[64];
    for (int i = 0; i < 64; ++i) in[i] = 3.25;
    dct8x8(in, out, DctDirection::forward);
    CHECK_THAT(out[0], WithinAbs(8.0 * 3.25, 1e-12));
    for (int i = 1; i < 64; ++i) CHECK_THAT(out[i], WithinAbs(0.0, 1e-12));
  }
  SECTION("roundtrip is the identity to 1e-10") {
    Rng rng(3);
    double in[64], coef[64], back[64];
    for (int trial = 0; trial < 10; ++trial) {
      for (int i = 0; i < 64; ++i) in[i] = rng.uniform(-128.0, 128.0);
      dct8x8(in, coef, DctDirection::forward);
      dct8x8(coef, back, DctDirection::inverse);
      for (int i = 0; i < 64; ++i) CHECK_THAT(back[i], WithinAbs(in[i], 1e-10));
    }
  }
  SECTION("a single cosine block produces a single coefficient") {
    // block built from basis function (u,v) = (0,3)
    double in[64], out[64];
    const double c3 = std::sqrt(2.0 / 8.0), c0 = std::sqrt(1.0 / 8.0);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        in[y * 8 + x] =
            c0 * c3 * std::cos((2 * x + 1) * 3 * std::numbers::pi / 16.0);
    dct8x8(in, out, DctDirection::forward);
    for (int u = 0; u < 8; ++u)
      for (int v = 0; v < 8; ++v) {
        if (u == 0 && v == 3)
          CHECK_THAT(out[u * 8 + v], WithinAbs(1.0, 1e-12));
        else
          CHECK_THAT(out[u * 8 + v], WithinAbs(0.0, 1e-12));
      }
  }
}

TEST_CASE("codec pipeline properties") {
  SECTION("constant mid-gray reconstructs within 1/255 at any quality") {
    Tensor gray = Tensor::full({3, 24, 24}, 128.0 / 255.0);
    for (int q : {1, 10, 20, 50, 90, 100}) {
      CodecConfig cfg;
      cfg.quality = q;
      Tensor out = compress_decompress(gray, cfg);
      CHECK(max_abs_diff(out, gray) <= 1.0 / 255.0);
    }
  }
  SECTION("output stays in range with the input shape") {
    Rng rng(4);
    Tensor img = noise_image(31, 37, rng);  // odd extents exercise padding
    CodecConfig cfg;
    cfg.quality = 20;
    Tensor out = compress_decompress(img, cfg);
    REQUIRE(out.shape() == img.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
      CHECK(out[i] >= 0.0);
      CHECK(out[i] <= 1.0);
    }
  }
  SECTION("determinism: identical input and config give identical output") {
    Rng rng(5);
    Tensor img = noise_image(16, 16, rng);
    CodecConfig cfg;
    cfg.quality = 20;
    CHECK(max_abs_diff(compress_decompress(img, cfg),
                       compress_decompress(img, cfg)) == 0.0);
  }
  SECTION("PSNR at quality 90 beats quality 20 on a fixed 20-image set") {
    Rng rng(6);
    double p90 = 0.0, p20 = 0.0;
    for (int i = 0; i < 20; ++i) {
      Tensor img = noise_image(32, 32, rng);
      CodecConfig lo, hi;
      lo.quality = 20;
      hi.quality = 90;
      p20 += psnr(img, compress_decompress(img, lo));
      p90 += psnr(img, compress_decompress(img, hi));
    }
    CHECK(p90 / 20.0 > p20 / 20.0);
  }
  SECTION("second pass at the same quality changes less than the first") {
    Rng rng(7);
    for (int i = 0; i < 20; ++i) {
      Tensor img = noise_image(32, 32, rng);
      CodecConfig cfg;
      cfg.quality = 20;
      Tensor once = compress_decompress(img, cfg);
      Tensor twice = compress_decompress(once, cfg);
      CHECK(max_abs_diff(twice, once) <= max_abs_diff(once, img));
    }
  }
}

TEST_CASE("corrupt_dataset selects and compresses class subsets") {
  SynthConfig cfg;
  cfg.classes = 10;
  cfg.train_per_class = 2;
  cfg.test_per_class = 1;
  cfg.seed = 11;

  SECTION("fraction zero leaves the dataset unchanged") {
    Dataset ds = generate(cfg);
    Dataset copy = generate(cfg);
    corrupt_dataset(ds, 0.0, 20, 1);
    CHECK(ds.corrupted_classes.empty());
    for (std::size_t i = 0; i < ds.train.size(); ++i)
      CHECK(max_abs_diff(ds.train[i].image, copy.train[i].image) == 0.0);
  }
  SECTION("half of ten classes means exactly five, all images compressed") {
    Dataset ds = generate(cfg);
    Dataset clean = generate(cfg);
    corrupt_dataset(ds, 0.5, 20, 1);
    REQUIRE(ds.corrupted_classes.size() == 5);
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
      const bool in_list =
          std::count(ds.corrupted_classes.begin(), ds.corrupted_classes.end(),
                     ds.train[i].label) > 0;
      CHECK(ds.train[i].corrupted == in_list);
      if (in_list)
        CHECK(max_abs_diff(ds.train[i].image, clean.train[i].image) > 0.0);
      else
        CHECK(max_abs_diff(ds.train[i].image, clean.train[i].image) == 0.0);
    }
    for (const auto& li : ds.test)
      CHECK(li.corrupted ==
            (std::count(ds.corrupted_classes.begin(),
                        ds.corrupted_classes.end(), li.label) > 0));
  }
  SECTION("fraction one corrupts every non-constant image") {
    Dataset ds = generate(cfg);
    Dataset clean = generate(cfg);
    corrupt_dataset(ds, 1.0, 20, 1);
    CHECK(ds.corrupted_classes.size() == 10);
    for (std::size_t i = 0; i < ds.train.size(); ++i)
      CHECK(max_abs_diff(ds.train[i].image, clean.train[i].image) > 0.0);
  }
  SECTION("selection is deterministic in the seed") {
    Dataset a = generate(cfg), b = generate(cfg);
    corrupt_dataset(a, 0.5, 20, 3);
    corrupt_dataset(b, 0.5, 20, 3);
    CHECK(a.corrupted_classes == b.corrupted_classes);
  }
}

TEST_CASE("prototype_rank orders by score then index") {
  std::vector<double> scores = {0.5, 2.0, 2.0, 0.1};
  CHECK(prototype_rank(scores, 1) == 1);
  CHECK(prototype_rank(scores, 2) == 2);  // tie resolved to the lower index
  CHECK(prototype_rank(scores, 0) == 3);
  CHECK(prototype_rank(scores, 3) == 4);
}

TEST_CASE("consistency experiment protocol filters") {
  // tiny model over a tiny dataset; behaviour, not accuracy, is under test
  ModelConfig mcfg;
  mcfg.image_h = mcfg.image_w = 16;
  mcfg.latent_h = mcfg.latent_w = 2;
  mcfg.classes = 2;
  mcfg.prototypes_per_class = 2;
  Model model = make_model(mcfg, 3);

  SynthConfig dcfg;
  dcfg.classes = 2;
  dcfg.train_per_class = 2;
  dcfg.test_per_class = 4;
  dcfg.image_h = dcfg.image_w = 16;
  dcfg.seed = 17;
  Dataset ds = generate(dcfg);

  CodecConfig codec;
  codec.quality = 20;
  std::vector<std::size_t> corrupted = {0};

  auto records = consistency_experiment(model, ds.test, corrupted, codec);
  for (const auto& rec : records) {
    CHECK(rec.klass == 0);  // uncorrupted-class images are skipped
    CHECK(rec.pred_compressed == rec.klass);  // protocol precondition
    CHECK(rec.score_compressed > 0.0);
    CHECK(rec.score_compressed <= mcfg.max_similarity());
    CHECK(rec.score_clean > 0.0);
    CHECK(rec.rank_on_clean >= 1);
  }

  SECTION("a near-lossless codec gives near-zero relative drop") {
    // quality 100 without subsampling leaves only integer coefficient
    // rounding; scores on both versions must agree closely
    CodecConfig lossless;
    lossless.quality = 100;
    lossless.chroma_subsampling = false;
    auto recs = consistency_experiment(model, ds.test, corrupted, lossless);
    REQUIRE(!recs.empty());
    ConsistencySummary s = summarize_consistency(recs);
    CHECK(std::abs(s.median_relative_drop) < 0.01);
  }

  SECTION("identical compressed and clean inputs give zero score difference") {
    const Tensor& x = ds.test[0].image;
    Inference a = infer(model, x);
    Inference b = infer(model, x);
    const std::size_t top = argmax_index(a.scores);
    CHECK(a.scores[top] == b.scores[top]);
    CHECK(prototype_rank(b.scores, top) == 1);
  }
}

TEST_CASE("top similarity histogram pairs") {
  ModelConfig mcfg;
  mcfg.image_h = mcfg.image_w = 16;
  mcfg.latent_h = mcfg.latent_w = 2;
  mcfg.classes = 2;
  mcfg.prototypes_per_class = 3;
  Model model = make_model(mcfg, 5);
  Rng rng(19);
  Tensor x({3, 16, 16});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform();

  SECTION("identical images give identical score columns both ways") {
    HistogramData h = top_similarity_histogram(model, x, x, 75);
    CHECK(h.compressed_first.size() == 6);  // n clamps to m
    for (const auto& pair : h.compressed_first)
      CHECK(pair.score_primary == pair.score_other);
    for (const auto& pair : h.clean_first)
      CHECK(pair.score_primary == pair.score_other);
  }
  SECTION("n = 1 returns exactly the top prototype") {
    Inference inf = infer(model, x);
    HistogramData h = top_similarity_histogram(model, x, x, 1);
    REQUIRE(h.compressed_first.size() == 1);
    CHECK(h.compressed_first[0].prototype == argmax_index(inf.scores));
  }
  SECTION("ordering is by descending primary score") {
    Tensor y = compress_decompress(x, CodecConfig{20, true});
    HistogramData h = top_similarity_histogram(model, y, x, 6);
    for (std::size_t i = 1; i < h.compressed_first.size(); ++i)
      CHECK(h.compressed_first[i - 1].score_primary >=
            h.compressed_first[i].score_primary);
  }
}

TEST_CASE("consistency summary statistics") {
  std::vector<ConsistencyRecord> recs(4);
  recs[0].score_compressed = 8.0;
  recs[0].score_clean = 4.0;  // 50% drop
  recs[0].rank_on_clean = 1;
  recs[1].score_compressed = 5.0;
  recs[1].score_clean = 5.0;  // 0%
  recs[1].rank_on_clean = 2;
  recs[2].score_compressed = 10.0;
  recs[2].score_clean = 9.0;  // 10%
  recs[2].rank_on_clean = 1;
  recs[3].score_compressed = 4.0;
  recs[3].score_clean = 1.0;  // 75%
  recs[3].rank_on_clean = 5;
  ConsistencySummary s = summarize_consistency(recs);
  CHECK(s.eligible == 4);
  CHECK_THAT(s.median_relative_drop, WithinAbs(0.3, 1e-12));  // (0.1+0.5)/2
  CHECK_THAT(s.top1_change_fraction, WithinAbs(0.5, 1e-12));
}
