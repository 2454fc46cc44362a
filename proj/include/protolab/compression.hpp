#pragma once

// The compression-consistency experiment: corrupt half the classes of a
// dataset with the lossy codec, then compare how a trained model scores the
// compressed and clean versions of the same test image. Records are only
// emitted for corrupted-class images whose compressed version is classified
// correctly.

#include <algorithm>
#include <set>
#include <vector>

#include "protolab/codec.hpp"
#include "protolab/dataset.hpp"
#include "protolab/model.hpp"

namespace protolab {

// Compresses every train and test image of a seeded random fraction of the
// classes in place and records the chosen class list (sorted).
inline void corrupt_dataset(Dataset& ds, double fraction_of_classes,
                            int quality, std::uint64_t seed) {
  PROTOLAB_REQUIRE(ds.classes >= 2, "corrupt_dataset: need >= 2 classes");
  PROTOLAB_REQUIRE(fraction_of_classes >= 0.0 && fraction_of_classes <= 1.0,
                   "corrupt_dataset: fraction ", fraction_of_classes,
                   " outside [0,1]");
  const std::size_t count = static_cast<std::size_t>(
      std::llround(fraction_of_classes * static_cast<double>(ds.classes)));
  std::vector<std::size_t> ids(ds.classes);
  for (std::size_t c = 0; c < ds.classes; ++c) ids[c] = c;
  Rng rng(derive_seed(seed, /*corrupt*/ 0x636f7272ULL));
  rng.shuffle(ids);
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  ds.corrupted_classes = ids;

  const std::set<std::size_t> chosen(ids.begin(), ids.end());
  CodecConfig codec;
  codec.quality = quality;
  auto pass = [&](std::vector<LabeledImage>& split) {
    parallel_for(split.size(), [&](std::size_t i) {
      if (!chosen.count(split[i].label)) return;
      split[i].image = compress_decompress(split[i].image, codec);
      split[i].corrupted = true;
    });
  };
  pass(ds.train);
  pass(ds.test);
}

struct ConsistencyRecord {
  std::string image_id;
  std::size_t klass = 0;
  std::size_t top_prototype = 0;   // most activated prototype on compressed input
  double score_compressed = 0.0;   // its pooled score on the compressed image
  double score_clean = 0.0;        // same prototype's pooled score on the clean image
  std::size_t rank_on_clean = 0;   // 1-based rank of that prototype on the clean image
  std::size_t pred_compressed = 0;
  std::size_t pred_clean = 0;
};

// 1-based rank of prototype l under (score desc, index asc) ordering
inline std::size_t prototype_rank(std::span<const double> scores,
                                  std::size_t l) {
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i == l) continue;
    if (scores[i] > scores[l] || (scores[i] == scores[l] && i < l)) ++rank;
  }
  return rank;
}

// Protocol: for every test image of a corrupted class, compress it with the
// codec (then snap to the 8-bit grid, matching what training read from
// disk); if the compressed version is classified correctly, record the top
// prototype's scores on both versions.
inline std::vector<ConsistencyRecord> consistency_experiment(
    Model& model, std::span<const LabeledImage> clean_test,
    std::span<const std::size_t> corrupted_classes, const CodecConfig& codec) {
  const std::set<std::size_t> chosen(corrupted_classes.begin(),
                                     corrupted_classes.end());
  std::vector<bool> eligible(clean_test.size(), false);
  std::vector<ConsistencyRecord> slots(clean_test.size());
  parallel_for(clean_test.size(), [&](std::size_t i) {
    const LabeledImage& li = clean_test[i];
    if (!chosen.count(li.label)) return;  // not part of the protocol
    const Tensor compressed = quantize8(compress_decompress(li.image, codec));
    Inference on_compressed = infer(model, compressed);
    if (on_compressed.predicted != li.label) return;
    Inference on_clean = infer(model, li.image);
    ConsistencyRecord rec;
    rec.image_id = li.id;
    rec.klass = li.label;
    rec.top_prototype = argmax_index(on_compressed.scores);
    rec.score_compressed = on_compressed.scores[rec.top_prototype];
    rec.score_clean = on_clean.scores[rec.top_prototype];
    rec.rank_on_clean = prototype_rank(on_clean.scores, rec.top_prototype);
    rec.pred_compressed = on_compressed.predicted;
    rec.pred_clean = on_clean.predicted;
    slots[i] = std::move(rec);
    eligible[i] = true;
  });
  std::vector<ConsistencyRecord> records;
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (eligible[i]) records.push_back(std::move(slots[i]));
  return records;
}

struct ConsistencySummary {
  std::size_t eligible = 0;
  double median_relative_drop = 0.0;  // (compressed - clean) / compressed
  double top1_change_fraction = 0.0;  // top prototype differs on the clean image
};

inline double median(std::vector<double> v) {
  PROTOLAB_REQUIRE(!v.empty(), "median of empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline ConsistencySummary summarize_consistency(
    std::span<const ConsistencyRecord> records) {
  ConsistencySummary s;
  s.eligible = records.size();
  if (records.empty()) return s;
  std::vector<double> drops;
  std::size_t changed = 0;
  for (const auto& r : records) {
    drops.push_back((r.score_compressed - r.score_clean) / r.score_compressed);
    if (r.rank_on_clean != 1) ++changed;
  }
  s.median_relative_drop = median(std::move(drops));
  s.top1_change_fraction =
      static_cast<double>(changed) / static_cast<double>(records.size());
  return s;
}

// Paired top-n score lists in both directions (most activated prototypes on
// the compressed image scored on both versions, and vice versa).
struct HistogramPair {
  std::size_t prototype = 0;
  double score_primary = 0.0;  // on the image that defined the ordering
  double score_other = 0.0;    // same prototype on the other image
};

struct HistogramData {
  std::vector<HistogramPair> compressed_first;
  std::vector<HistogramPair> clean_first;
};

inline HistogramData top_similarity_histogram(Model& model,
                                              const Tensor& compressed,
                                              const Tensor& clean,
                                              std::size_t n = 75) {
  Inference on_compressed = infer(model, compressed);
  Inference on_clean = infer(model, clean);
  n = std::min(n, on_compressed.scores.size());
  HistogramData out;
  for (std::size_t l : top_indices(on_compressed.scores, n))
    out.compressed_first.push_back(
        {l, on_compressed.scores[l], on_clean.scores[l]});
  for (std::size_t l : top_indices(on_clean.scores, n))
    out.clean_first.push_back({l, on_clean.scores[l], on_compressed.scores[l]});
  return out;
}

}  // namespace protolab
