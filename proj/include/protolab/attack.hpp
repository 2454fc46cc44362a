#pragma once

// Location-shift attack on the similarity maps: bounded, localized input
// noise that moves a prototype's peak activation from its source cells S
// to a target region S_noisy without retraining. The objective is
//   mean over S_noisy of g  -  mean over S of g
// maximized by signed-gradient ascent under an L-inf budget, with the
// perturbation confined to the receptive field of S union S_noisy and the
// image clamped to [0,1]. The best iterate by objective value is returned.
//
// The susceptibility rate repeats the attack for the top-k prototypes of
// each sampled, correctly classified test image with S_noisy = all cells
// except S; an image counts as susceptible if any prototype's peak moves.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "protolab/dataset.hpp"
#include "protolab/model.hpp"
#include "protolab/threads.hpp"

namespace protolab {

// experiment precondition violated (e.g. misclassified source image)
struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class MaskMode { receptive_field, full_image };
enum class SourceRule { argmax_ties, top_n };

inline const char* to_string(MaskMode m) {
  return m == MaskMode::receptive_field ? "receptive_field" : "full_image";
}

struct AttackConfig {
  double budget = 8.0 / 255.0;
  double step = 2.0 / 255.0;
  std::size_t iterations = 40;  // 10..40 in practice; 0 means evaluate only
  MaskMode mask_mode = MaskMode::receptive_field;
  SourceRule source_rule = SourceRule::argmax_ties;
  std::size_t top_n = 1;

  void validate() const {
    PROTOLAB_REQUIRE(budget >= 0.0, "AttackConfig: negative budget");
    PROTOLAB_REQUIRE(step > 0.0, "AttackConfig: step must be positive");
    PROTOLAB_REQUIRE(budget == 0.0 || step <= budget + 1e-15,
                     "AttackConfig: step ", step, " exceeds budget ", budget);
  }
};

struct AttackResult {
  Tensor delta;  // image-shaped, zero off-mask
  double objective_start = 0.0;  // at delta = 0
  double objective_best = 0.0;
  double sim_source_before = 0.0, sim_source_after = 0.0;    // max over S
  double sim_target_before = 0.0, sim_target_after = 0.0;    // max over S_noisy
  double pooled_before = 0.0, pooled_after = 0.0;
  Cell argmax_before, argmax_after;
  std::size_t pred_before = 0, pred_after = 0;
  bool success = false;
  std::size_t iterations_used = 0;
  // constraint audit, filled after the run
  double delta_linf = 0.0;
  double perturbed_min = 0.0, perturbed_max = 0.0;
  double off_mask_abs_max = 0.0;
};

// ---- source patch selection ----

// All cells attaining the spatial max (argmax_ties) or the top_n cells
//(value desc, row-major asc). The image must be correctly classified.
inline std::vector<Cell> select_source_patch(Model& model, const Tensor& image,
                                             std::size_t label,
                                             std::size_t prototype,
                                             const AttackConfig& cfg,
                                             const Inference* precomputed =
                                                 nullptr) {
  Inference local;
  if (!precomputed) {
    local = infer(model, image);
    precomputed = &local;
  }
  if (precomputed->predicted != label)
    throw ProtocolError(detail::cat(
        "select_source_patch: image classified as ", precomputed->predicted,
        ", not its label ", label));
  PROTOLAB_REQUIRE(prototype < model.proto_class.size(),
                   "select_source_patch: prototype ", prototype,
                   " out of range");
  const std::size_t h = model.config.latent_h, w = model.config.latent_w;
  const std::size_t n = h * w;
  const double* row = precomputed->simmap.data() + prototype * n;
  std::vector<Cell> cells;
  if (cfg.source_rule == SourceRule::argmax_ties) {
    double best = row[0];
    for (std::size_t j = 1; j < n; ++j) best = std::max(best, row[j]);
    for (std::size_t j = 0; j < n; ++j)
      if (row[j] == best) cells.push_back(Cell{j / w, j % w});
  } else {
    std::vector<std::size_t> order(n);
    for (std::size_t j = 0; j < n; ++j) order[j] = j;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       return row[a] > row[b];
                     });
    const std::size_t take = std::min(cfg.top_n, n);
    for (std::size_t k = 0; k < take; ++k)
      cells.push_back(Cell{order[k] / w, order[k] % w});
  }
  return cells;
}

inline std::vector<Cell> complement_cells(std::span<const Cell> cells,
                                          std::size_t h, std::size_t w) {
  std::vector<std::uint8_t> taken(h * w, 0);
  for (const Cell& c : cells) taken[c.i * w + c.j] = 1;
  std::vector<Cell> rest;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      if (!taken[i * w + j]) rest.push_back(Cell{i, j});
  return rest;
}

inline bool cells_overlap(std::span<const Cell> a, std::span<const Cell> b) {
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const Cell& c : a) seen.emplace(c.i, c.j);
  for (const Cell& c : b)
    if (seen.count({c.i, c.j})) return true;
  return false;
}

// ---- objective ----

// mean of the prototype's similarity map over target cells minus its mean
// over source cells, evaluated at the given image
inline double location_shift_objective(Model& model, const Tensor& image,
                                       std::span<const Cell> source,
                                       std::span<const Cell> target,
                                       std::size_t prototype) {
  PROTOLAB_REQUIRE(!cells_overlap(source, target),
                   "location_shift_objective: source and target overlap");
  Inference inf = infer(model, image);
  const std::size_t w = model.config.latent_w;
  const std::size_t n = model.config.latent_h * w;
  const double* row = inf.simmap.data() + prototype * n;
  double st = 0.0, ss = 0.0;
  for (const Cell& c : target) st += row[c.i * w + c.j];
  for (const Cell& c : source) ss += row[c.i * w + c.j];
  return st / static_cast<double>(target.size()) -
         ss / static_cast<double>(source.size());
}

// ---- mask geometry ----

// Union of the exact input receptive fields of the given latent cells,
// as a [H,W] 0/1 mask.
inline Tensor receptive_field_mask(std::span<const Cell> cells, std::size_t img_h,
                                   std::size_t img_w) {
  Tensor mask({img_h, img_w});
  for (const Cell& c : cells) {
    const auto [y0, y1] = receptive_interval(static_cast<long>(c.i),
                                             static_cast<long>(c.i), img_h);
    const auto [x0, x1] = receptive_interval(static_cast<long>(c.j),
                                             static_cast<long>(c.j), img_w);
    for (long y = y0; y <= y1; ++y)
      for (long x = x0; x <= x1; ++x)
        mask[static_cast<std::size_t>(y) * img_w +
             static_cast<std::size_t>(x)] = 1.0;
  }
  return mask;
}

// ---- the attack ----

inline AttackResult pgd_location_shift(Model& model, const Tensor& image,
                                       std::size_t prototype,
                                       std::span<const Cell> source,
                                       std::span<const Cell> target,
                                       const AttackConfig& cfg) {
  PROTOLAB_REQUIRE(!source.empty() && !target.empty(),
                   "pgd_location_shift: empty cell set");
  PROTOLAB_REQUIRE(!cells_overlap(source, target),
                   "pgd_location_shift: source and target overlap");
  const std::size_t img_h = model.config.image_h;
  const std::size_t img_w = model.config.image_w;
  const std::size_t hw = img_h * img_w;

  std::vector<Cell> all_cells(source.begin(), source.end());
  all_cells.insert(all_cells.end(), target.begin(), target.end());
  Tensor mask = cfg.mask_mode == MaskMode::receptive_field
                    ? receptive_field_mask(all_cells, img_h, img_w)
                    : Tensor::full({img_h, img_w}, 1.0);

  const std::size_t w = model.config.latent_w;
  auto project = [&](Tensor& delta) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t i = c * hw + p;
        double d = delta[i] * mask[p];
        d = std::clamp(d, -cfg.budget, cfg.budget);
        d = std::clamp(image[i] + d, 0.0, 1.0) - image[i];
        delta[i] = d;
      }
  };

  // one taped pass: objective value and its image gradient at x + delta
  auto objective_pass = [&](const Tensor& delta, Tensor* grad_out) {
    Tensor perturbed(image.shape());
    for (std::size_t i = 0; i < perturbed.size(); ++i)
      perturbed[i] = image[i] + delta[i];
    Tape tape;
    TapedForward f =
        forward_on_tape(tape, model, perturbed, false, grad_out != nullptr);
    Var obj = tape.sub(tape.region_mean(f.simmap, prototype, target),
                       tape.region_mean(f.simmap, prototype, source));
    const double value = tape.value(obj).item();
    if (grad_out) {
      tape.backward(obj);
      *grad_out = tape.grad(f.image);
    }
    return value;
  };

  AttackResult result;
  Tensor delta({3, img_h, img_w});
  Tensor best_delta = delta;
  double best_obj = -std::numeric_limits<double>::infinity();

  for (std::size_t it = 0; it <= cfg.iterations; ++it) {
    const bool last = it == cfg.iterations;
    Tensor grad;
    const double obj = objective_pass(delta, last ? nullptr : &grad);
    if (it == 0) result.objective_start = obj;
    if (obj > best_obj) {
      best_obj = obj;
      best_delta = delta;
    }
    if (last) break;
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const double g = grad[i];
      delta[i] += cfg.step * (g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0));
    }
    project(delta);
    ++result.iterations_used;
  }
  result.objective_best = best_obj;
  result.delta = best_delta;

  // before/after bookkeeping on the clean and best perturbed image
  Inference before = infer(model, image);
  Tensor perturbed(image.shape());
  for (std::size_t i = 0; i < perturbed.size(); ++i)
    perturbed[i] = image[i] + best_delta[i];
  Inference after = infer(model, perturbed);

  const std::size_t n = model.config.latent_h * w;
  auto region_max = [&](const Inference& inf, std::span<const Cell> cells) {
    double best = -std::numeric_limits<double>::infinity();
    for (const Cell& c : cells)
      best = std::max(best, inf.simmap[prototype * n + c.i * w + c.j]);
    return best;
  };
  result.sim_source_before = region_max(before, source);
  result.sim_source_after = region_max(after, source);
  result.sim_target_before = region_max(before, target);
  result.sim_target_after = region_max(after, target);
  result.pooled_before = before.scores[prototype];
  result.pooled_after = after.scores[prototype];
  result.argmax_before = before.score_argmax[prototype];
  result.argmax_after = after.score_argmax[prototype];
  result.pred_before = before.predicted;
  result.pred_after = after.predicted;
  result.success = result.sim_target_after > result.sim_source_after;

  // constraint audit; violations are implementation bugs
  result.delta_linf = 0.0;
  result.off_mask_abs_max = 0.0;
  result.perturbed_min = std::numeric_limits<double>::infinity();
  result.perturbed_max = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t i = c * hw + p;
      result.delta_linf = std::max(result.delta_linf,
                                   std::abs(result.delta[i]));
      if (mask[p] == 0.0)
        result.off_mask_abs_max =
            std::max(result.off_mask_abs_max, std::abs(result.delta[i]));
      result.perturbed_min = std::min(result.perturbed_min, perturbed[i]);
      result.perturbed_max = std::max(result.perturbed_max, perturbed[i]);
    }
  if (result.delta_linf > cfg.budget + 1e-12 ||
      result.off_mask_abs_max != 0.0 || result.perturbed_min < -1e-12 ||
      result.perturbed_max > 1.0 + 1e-12)
    throw std::logic_error("pgd_location_shift: constraint violation");
  return result;
}

// ---- susceptibility ----

struct SusceptibilityConfig {
  std::size_t top_k = 5;
  std::size_t n_images = 50;
  AttackConfig attack;  // 2/255 step, 8/255 budget, 40 iterations
  std::uint64_t seed = 7;
};

struct PrototypeAttempt {
  std::size_t prototype = 0;
  std::vector<Cell> source, target;
  AttackResult result;
};

struct ImageAttackRecord {
  std::string image_id;
  std::size_t label = 0;
  std::vector<PrototypeAttempt> attempts;  // stops after the first success
  bool success = false;
};

struct SusceptibilityResult {
  std::size_t n_images = 0;  // actually attacked
  std::size_t successes = 0;
  double rate = 0.0;
  std::vector<ImageAttackRecord> records;
};

// Attacks the top-k prototypes of up to n_images correctly classified test
// images (uniformly sampled, seeded) with S_noisy = all cells except S.
inline SusceptibilityResult susceptibility_rate(
    Model& model, std::span<const LabeledImage> test_set,
    const SusceptibilityConfig& cfg) {
  cfg.attack.validate();
  std::vector<std::uint8_t> correct(test_set.size(), 0);
  parallel_for(test_set.size(), [&](std::size_t i) {
    correct[i] = predict(model, test_set[i].image) == test_set[i].label;
  });
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < test_set.size(); ++i)
    if (correct[i]) eligible.push_back(i);
  Rng rng(derive_seed(cfg.seed, 0x73757363ULL));
  rng.shuffle(eligible);
  if (eligible.size() > cfg.n_images) eligible.resize(cfg.n_images);
  std::sort(eligible.begin(), eligible.end());

  const std::size_t h = model.config.latent_h, w = model.config.latent_w;
  SusceptibilityResult out;
  out.records.resize(eligible.size());
  parallel_for(eligible.size(), [&](std::size_t k) {
    const LabeledImage& li = test_set[eligible[k]];
    ImageAttackRecord rec;
    rec.image_id = li.id;
    rec.label = li.label;
    Inference inf = infer(model, li.image);
    const auto ranked = top_indices(inf.scores, cfg.top_k);
    for (std::size_t prototype : ranked) {
      PrototypeAttempt attempt;
      attempt.prototype = prototype;
      attempt.source = select_source_patch(model, li.image, li.label,
                                           prototype, cfg.attack, &inf);
      attempt.target = complement_cells(attempt.source, h, w);
      if (attempt.target.empty()) continue;  // constant map, nothing to move
      attempt.result = pgd_location_shift(model, li.image, prototype,
                                          attempt.source, attempt.target,
                                          cfg.attack);
      const bool success = attempt.result.success;
      rec.attempts.push_back(std::move(attempt));
      if (success) {
        rec.success = true;
        break;
      }
    }
    out.records[k] = std::move(rec);
  });
  out.n_images = out.records.size();
  for (const auto& rec : out.records)
    if (rec.success) ++out.successes;
  out.rate = out.n_images == 0
                 ? 0.0
                 : static_cast<double>(out.successes) /
                       static_cast<double>(out.n_images);
  return out;
}

}  // namespace protolab
