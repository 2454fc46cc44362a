#pragma once

// Output rendering: activation overlays (PPM), paired-score bar charts
// (SVG), CSV emitters, per-attack JSON records and their post-hoc
// constraint validator.

#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "protolab/attack.hpp"
#include "protolab/compression.hpp"
#include "protolab/image_io.hpp"
#include "protolab/train.hpp"

namespace protolab {

// ---- overlays ----

// five-stop blue -> cyan -> green -> yellow -> red map on t in [0,1]
inline std::array<double, 3> heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  static const double stops[5][3] = {{0.0, 0.0, 0.55},
                                     {0.0, 0.8, 0.9},
                                     {0.0, 0.85, 0.1},
                                     {1.0, 0.9, 0.0},
                                     {0.9, 0.05, 0.05}};
  const double pos = t * 4.0;
  const std::size_t a = std::min(static_cast<std::size_t>(pos), std::size_t{3});
  const double f = pos - static_cast<double>(a);
  return {stops[a][0] + (stops[a + 1][0] - stops[a][0]) * f,
          stops[a][1] + (stops[a + 1][1] - stops[a][1]) * f,
          stops[a][2] + (stops[a + 1][2] - stops[a][2]) * f};
}

// min-max normalized heatmap alpha-blended over the image
inline Tensor overlay_heatmap(const Tensor& image, const Tensor& heat,
                              double alpha = 0.45) {
  PROTOLAB_REQUIRE(heat.rank() == 2 && image.rank() == 3 &&
                       image.extent(1) == heat.extent(0) &&
                       image.extent(2) == heat.extent(1),
                   "overlay_heatmap: image ", shape_str(image), " vs heat ",
                   shape_str(heat));
  double lo = heat[0], hi = heat[0];
  for (std::size_t i = 0; i < heat.size(); ++i) {
    lo = std::min(lo, heat[i]);
    hi = std::max(hi, heat[i]);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  Tensor out = image;
  const std::size_t n = heat.size();
  for (std::size_t p = 0; p < n; ++p) {
    const auto rgb = heat_color((heat[p] - lo) / span);
    for (std::size_t c = 0; c < 3; ++c)
      out[c * n + p] = (1.0 - alpha) * out[c * n + p] + alpha * rgb[c];
  }
  return out;
}

// rectangle outline, inclusive pixel bounds
inline void draw_rect(Tensor& image, std::size_t x0, std::size_t y0,
                      std::size_t x1, std::size_t y1,
                      std::array<double, 3> color,
                      std::size_t thickness = 2) {
  const std::size_t h = image.extent(1), w = image.extent(2), n = h * w;
  x1 = std::min(x1, w - 1);
  y1 = std::min(y1, h - 1);
  auto paint = [&](std::size_t x, std::size_t y) {
    for (std::size_t c = 0; c < 3; ++c) image[c * n + y * w + x] = color[c];
  };
  for (std::size_t t = 0; t < thickness; ++t) {
    for (std::size_t x = x0; x <= x1; ++x) {
      if (y0 + t < h) paint(x, y0 + t);
      if (y1 >= t) paint(x, y1 - t);
    }
    for (std::size_t y = y0; y <= y1; ++y) {
      if (x0 + t < w) paint(x0 + t, y);
      if (x1 >= t) paint(x1 - t, y);
    }
  }
}

inline constexpr std::array<double, 3> kActivationBoxColor = {1.0, 0.95, 0.1};
inline constexpr std::array<double, 3> kNoiseBoxColor = {0.1, 0.95, 0.1};

// bounding box of the nonzero area of a [H,W] mask
inline Box mask_bounds(const Tensor& mask) {
  const std::size_t h = mask.extent(0), w = mask.extent(1);
  Box b{w, h, 0, 0};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (mask[y * w + x] != 0.0) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x);
        b.y1 = std::max(b.y1, y);
      }
  return b;
}

// ---- CSV ----

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_metrics_csv(const std::filesystem::path& path,
                              std::span<const EpochMetrics> metrics) {
  std::ofstream out(path);
  PROTOLAB_REQUIRE(out.good(), "metrics: cannot write ", path.string());
  out << "epoch,stage,loss_total,loss_ce,loss_cluster,loss_separation,"
         "loss_l1,train_accuracy,test_accuracy\n";
  for (const auto& m : metrics)
    out << m.epoch << "," << m.stage << "," << fmt_double(m.loss.total) << ","
        << fmt_double(m.loss.ce) << "," << fmt_double(m.loss.cluster) << ","
        << fmt_double(m.loss.separation) << "," << fmt_double(m.loss.l1)
        << "," << fmt_double(m.train_accuracy) << ","
        << fmt_double(m.test_accuracy) << "\n";
}

inline void write_consistency_csv(const std::filesystem::path& path,
                                  std::span<const ConsistencyRecord> records) {
  std::ofstream out(path);
  PROTOLAB_REQUIRE(out.good(), "consistency: cannot write ", path.string());
  out << "image_id,class,top_prototype,score_compressed,score_clean,"
         "rank_on_clean,pred_compressed,pred_clean\n";
  for (const auto& r : records)
    out << r.image_id << "," << r.klass << "," << r.top_prototype << ","
        << fmt_double(r.score_compressed) << "," << fmt_double(r.score_clean)
        << "," << r.rank_on_clean << "," << r.pred_compressed << ","
        << r.pred_clean << "\n";
}

inline void write_histogram_csv(const std::filesystem::path& path,
                                const HistogramData& data) {
  std::ofstream out(path);
  PROTOLAB_REQUIRE(out.good(), "histogram: cannot write ", path.string());
  out << "direction,rank,prototype,score_primary,score_other\n";
  for (std::size_t i = 0; i < data.compressed_first.size(); ++i) {
    const auto& p = data.compressed_first[i];
    out << "compressed_first," << i + 1 << "," << p.prototype << ","
        << fmt_double(p.score_primary) << "," << fmt_double(p.score_other)
        << "\n";
  }
  for (std::size_t i = 0; i < data.clean_first.size(); ++i) {
    const auto& p = data.clean_first[i];
    out << "clean_first," << i + 1 << "," << p.prototype << ","
        << fmt_double(p.score_primary) << "," << fmt_double(p.score_other)
        << "\n";
  }
}

// ---- SVG paired bar chart ----

// Two panels: prototypes ranked on the compressed image (left, scored on
// both versions) and ranked on the clean image (right).
inline void write_histogram_svg(const std::filesystem::path& path,
                                const HistogramData& data,
                                const std::string& title,
                                double max_score) {
  const std::size_t n =
      std::max(data.compressed_first.size(), data.clean_first.size());
  const double bar_w = 4.0, pair_w = bar_w * 2.0 + 1.0;
  const double panel_w = std::max(120.0, pair_w * static_cast<double>(n));
  const double panel_h = 220.0, margin = 40.0, gap = 50.0;
  const double width = 2.0 * panel_w + 2.0 * margin + gap;
  const double height = panel_h + 2.0 * margin + 20.0;

  std::ofstream out(path);
  PROTOLAB_REQUIRE(out.good(), "svg: cannot write ", path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  out << "<text x=\"" << margin << "\" y=\"20\" font-size=\"13\">" << title
      << "</text>\n";
  auto panel = [&](double x0, const std::vector<HistogramPair>& pairs,
                   const char* label, const char* primary_color,
                   const char* other_color) {
    out << "<text x=\"" << x0 << "\" y=\"" << margin - 6 << "\" font-size=\"11\">"
        << label << "</text>\n";
    out << "<line x1=\"" << x0 << "\" y1=\"" << margin + panel_h << "\" x2=\""
        << x0 + panel_w << "\" y2=\"" << margin + panel_h
        << "\" stroke=\"#444\"/>\n";
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const double px = x0 + pair_w * static_cast<double>(i);
      const double hp =
          panel_h * std::clamp(pairs[i].score_primary / max_score, 0.0, 1.0);
      const double ho =
          panel_h * std::clamp(pairs[i].score_other / max_score, 0.0, 1.0);
      out << "<rect x=\"" << px << "\" y=\"" << margin + panel_h - hp
          << "\" width=\"" << bar_w << "\" height=\"" << hp << "\" fill=\""
          << primary_color << "\"/>\n";
      out << "<rect x=\"" << px + bar_w << "\" y=\"" << margin + panel_h - ho
          << "\" width=\"" << bar_w << "\" height=\"" << ho << "\" fill=\""
          << other_color << "\"/>\n";
    }
  };
  panel(margin, data.compressed_first,
        "top prototypes on the compressed image (blue: compressed, orange: clean)",
        "#3a6ea5", "#e88f2a");
  panel(margin + panel_w + gap, data.clean_first,
        "top prototypes on the clean image (blue: clean, orange: compressed)",
        "#3a6ea5", "#e88f2a");
  out << "</svg>\n";
}

// ---- attack record JSON ----

inline nlohmann::json cells_json(std::span<const Cell> cells) {
  nlohmann::json j = nlohmann::json::array();
  for (const Cell& c : cells) j.push_back({c.i, c.j});
  return j;
}

inline nlohmann::json attack_attempt_json(const PrototypeAttempt& attempt,
                                          const AttackConfig& cfg,
                                          const std::string& image_id,
                                          std::size_t label,
                                          std::size_t prototype_class) {
  const AttackResult& r = attempt.result;
  nlohmann::json j;
  j["image_id"] = image_id;
  j["label"] = label;
  j["prototype"] = attempt.prototype;
  j["prototype_class"] = prototype_class;
  j["source_cells"] = cells_json(attempt.source);
  j["target_cells"] = cells_json(attempt.target);
  j["objective_start"] = r.objective_start;
  j["objective_best"] = r.objective_best;
  j["sim_source_before"] = r.sim_source_before;
  j["sim_source_after"] = r.sim_source_after;
  j["sim_target_before"] = r.sim_target_before;
  j["sim_target_after"] = r.sim_target_after;
  j["pooled_before"] = r.pooled_before;
  j["pooled_after"] = r.pooled_after;
  j["argmax_before"] = {r.argmax_before.i, r.argmax_before.j};
  j["argmax_after"] = {r.argmax_after.i, r.argmax_after.j};
  j["pred_before"] = r.pred_before;
  j["pred_after"] = r.pred_after;
  j["success"] = r.success;
  j["iterations"] = r.iterations_used;
  j["budget"] = cfg.budget;
  j["step"] = cfg.step;
  j["mask_mode"] = to_string(cfg.mask_mode);
  j["delta_linf"] = r.delta_linf;
  j["perturbed_min"] = r.perturbed_min;
  j["perturbed_max"] = r.perturbed_max;
  j["off_mask_abs_max"] = r.off_mask_abs_max;
  return j;
}

inline void append_attack_records(const std::filesystem::path& jsonl,
                                  const SusceptibilityResult& result,
                                  const AttackConfig& cfg,
                                  const Model& model) {
  std::ofstream out(jsonl, std::ios::app);
  PROTOLAB_REQUIRE(out.good(), "records: cannot write ", jsonl.string());
  for (const auto& rec : result.records)
    for (const auto& attempt : rec.attempts)
      out << attack_attempt_json(attempt, cfg, rec.image_id, rec.label,
                                 model.proto_class[attempt.prototype])
                 .dump()
          << "\n";
}

// ---- post-hoc record validation ----

struct RecordValidation {
  std::size_t checked = 0;
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

// Re-checks the budget, range and mask constraints of every record in a
// JSONL file of attack records.
inline RecordValidation validate_attack_records(
    const std::filesystem::path& jsonl, double tolerance = 1e-12) {
  std::ifstream in(jsonl);
  PROTOLAB_REQUIRE(in.good(), "validate: cannot open ", jsonl.string());
  RecordValidation v;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    ++v.checked;
    auto fail = [&](const std::string& what) {
      v.violations.push_back(detail::cat(jsonl.string(), ":", line_no, ": ",
                                         what, " (image ",
                                         j.value("image_id", "?"), ")"));
    };
    const double budget = j.at("budget").get<double>();
    if (j.at("delta_linf").get<double>() > budget + tolerance)
      fail("delta exceeds budget");
    if (j.at("perturbed_min").get<double>() < -tolerance)
      fail("perturbed image below 0");
    if (j.at("perturbed_max").get<double>() > 1.0 + tolerance)
      fail("perturbed image above 1");
    if (j.at("off_mask_abs_max").get<double>() != 0.0)
      fail("nonzero perturbation off the mask");
  }
  return v;
}

}  // namespace protolab
