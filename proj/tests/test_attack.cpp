#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "protolab/attack.hpp"
#include "protolab/gradcheck.hpp"
#include "protolab/train.hpp"

using namespace protolab;
using Catch::Matchers::WithinAbs;

namespace {

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 24;
  cfg.latent_h = cfg.latent_w = 3;
  cfg.classes = 2;
  cfg.prototypes_per_class = 2;
  return cfg;
}

struct TinyLab {
  Dataset ds;
  Model model;
};

// one shared lightly trained model for attack behaviour tests
TinyLab& trained_lab() {
  static TinyLab lab = [] {
    SynthConfig dcfg;
    dcfg.classes = 2;
    dcfg.train_per_class = 12;
    dcfg.test_per_class = 8;
    dcfg.image_h = dcfg.image_w = 24;
    dcfg.seed = 13;
    TinyLab out{generate(dcfg), make_model(tiny_model_config(), 95)};
    TrainConfig tcfg;
    tcfg.warmup_epochs = 3;
    tcfg.joint_epochs = 3;
    tcfg.last_layer_iters = 3;
    tcfg.batch_size = 8;
    tcfg.seed = 5;
    AugmentConfig aug;
    aug.horizontal_flip_prob = 0.0;
    aug.rotation_deg = 0.0;
    train_schedule(out.model, out.ds, tcfg, aug, Regime::standard);
    return out;
  }();
  return lab;
}

// first test image the model classifies correctly
const LabeledImage& correctly_classified_image() {
  TinyLab& lab = trained_lab();
  for (const auto& li : lab.ds.test)
    if (predict(lab.model, li.image) == li.label) return li;
  FAIL("tiny model classifies nothing correctly");
  return lab.ds.test[0];
}

}  // namespace

TEST_CASE("select_source_patch") {
  TinyLab& lab = trained_lab();
  const LabeledImage& li = correctly_classified_image();
  Inference inf = infer(lab.model, li.image);
  AttackConfig cfg;

  SECTION("unique max gives a singleton set at the argmax cell") {
    const std::size_t proto = top_indices(inf.scores, 1)[0];
    auto cells = select_source_patch(lab.model, li.image, li.label, proto,
                                     cfg, &inf);
    REQUIRE(cells.size() == 1);
    CHECK(cells[0] == inf.score_argmax[proto]);
  }
  SECTION("misclassified input is rejected") {
    const std::size_t wrong = (li.label + 1) % lab.model.config.classes;
    CHECK_THROWS_AS(
        select_source_patch(lab.model, li.image, wrong, 0, cfg, &inf),
        ProtocolError);
  }
  SECTION("top_n returns the n best cells, verified against a sort oracle") {
    AttackConfig topn = cfg;
    topn.source_rule = SourceRule::top_n;
    topn.top_n = 3;
    const std::size_t proto = 1;
    auto cells = select_source_patch(lab.model, li.image, li.label, proto,
                                     topn, &inf);
    REQUIRE(cells.size() == 3);
    const std::size_t w = lab.model.config.latent_w;
    const std::size_t n = lab.model.config.latent_h * w;
    std::vector<double> values(inf.simmap.data() + proto * n,
                               inf.simmap.data() + (proto + 1) * n);
    std::vector<double> sorted = values;
    std::sort(sorted.rbegin(), sorted.rend());
    for (std::size_t k = 0; k < 3; ++k)
      CHECK(values[cells[k].i * w + cells[k].j] == sorted[k]);
  }
  SECTION("a constant map under argmax_ties returns every cell") {
    // constant similarity maps arise from a constant latent; emulate by
    // checking the tie rule on the raw selector
    Model model = make_model(tiny_model_config(), 7);
    // prototype equal across cells: use a synthetic inference
    Inference fake;
    fake.predicted = 0;
    fake.simmap = Tensor::full(
        {model.proto_class.size(), 3, 3}, 1.25);
    fake.scores.assign(model.proto_class.size(), 1.25);
    fake.score_argmax.assign(model.proto_class.size(), Cell{0, 0});
    Tensor dummy({3, 24, 24});
    auto cells = select_source_patch(model, dummy, 0, 2, cfg, &fake);
    CHECK(cells.size() == 9);
  }
}

TEST_CASE("location shift objective") {
  TinyLab& lab = trained_lab();
  const LabeledImage& li = correctly_classified_image();
  Inference inf = infer(lab.model, li.image);
  const std::size_t w = lab.model.config.latent_w;
  const std::size_t n = lab.model.config.latent_h * w;

  SECTION("two-cell case equals the map difference") {
    const std::vector<Cell> s = {Cell{0, 0}};
    const std::vector<Cell> t = {Cell{1, 1}};
    const double expect = inf.simmap[0 * n + 1 * w + 1] - inf.simmap[0];
    CHECK_THAT(location_shift_objective(lab.model, li.image, s, t, 0),
               WithinAbs(expect, 1e-12));
  }
  SECTION("overlapping sets are rejected") {
    const std::vector<Cell> s = {Cell{0, 0}, Cell{1, 1}};
    const std::vector<Cell> t = {Cell{1, 1}};
    CHECK_THROWS_AS(location_shift_objective(lab.model, li.image, s, t, 0),
                    std::invalid_argument);
  }
  SECTION("identical means cancel to zero") {
    // same-mean regions via symmetric sampling of one region's cells:
    // compare mean over {a} minus mean over {a} computed without the
    // overlap check by using the raw map values
    const double v = inf.simmap[0];
    CHECK_THAT(v - v, WithinAbs(0.0, 1e-15));
  }
  SECTION("gradient w.r.t. the image matches finite differences") {
    // downscaled random models keep the probes away from the relu and
    // maxpool kinks a trained model accumulates
    for (int seed = 1; seed <= 3; ++seed) {
      Model model = make_model(tiny_model_config(), seed);
      Rng rng(100 + seed);
      Tensor img({3, 24, 24});
      for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
      const std::vector<Cell> s = {Cell{0, 0}};
      const std::vector<Cell> t = {Cell{2, 2}};
      const std::size_t proto = 1;
      auto build = [&](Tape& tape, const Tensor& x) {
        TapedForward f = forward_on_tape(tape, model, x, false, true);
        return std::pair{f.image,
                         tape.sub(tape.region_mean(f.simmap, proto, t),
                                  tape.region_mean(f.simmap, proto, s))};
      };
      Tape tape;
      auto [iv, obj] = build(tape, img);
      tape.backward(obj);
      auto f = [&](const Tensor& x) {
        Tape tp;
        return tp.value(build(tp, x).second).item();
      };
      Rng pick(17);
      std::vector<std::size_t> subset;
      for (int k = 0; k < 60; ++k) subset.push_back(pick.below(img.size()));
      auto rep = finite_difference_check(f, img, tape.grad(iv), 1e-5, 1e-3,
                                         subset);
      INFO("seed " << seed << " max error " << rep.max_error);
      CHECK(rep.ok());
    }
  }
}

TEST_CASE("receptive field masks") {
  ModelConfig cfg;  // 64x64 reference geometry
  SECTION("full latent grid covers the whole image") {
    std::vector<Cell> all;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) all.push_back(Cell{i, j});
    Tensor mask = receptive_field_mask(all, 64, 64);
    for (std::size_t i = 0; i < mask.size(); ++i) CHECK(mask[i] == 1.0);
  }
  SECTION("an interior cell covers its 22x22 receptive field") {
    const std::vector<Cell> one = {Cell{3, 4}};
    Tensor mask = receptive_field_mask(one, 64, 64);
    std::size_t count = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) count += mask[i] == 1.0;
    CHECK(count == 22 * 22);
    CHECK(mask[(3 * 8 - 7) * 64 + (4 * 8 - 7)] == 1.0);
    CHECK(mask[(3 * 8 - 8) * 64 + (4 * 8 - 7)] == 0.0);
  }
  SECTION("distant cells give a union of two rectangles") {
    const std::vector<Cell> two = {Cell{0, 0}, Cell{7, 7}};
    Tensor mask = receptive_field_mask(two, 64, 64);
    std::size_t count = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) count += mask[i] == 1.0;
    CHECK(count == 15 * 15 * 2);  // both corner fields clip to 15 wide
    CHECK(mask[0] == 1.0);
    CHECK(mask[63 * 64 + 63] == 1.0);
    CHECK(mask[32 * 64 + 32] == 0.0);
  }
}

TEST_CASE("pgd location shift") {
  TinyLab& lab = trained_lab();
  const LabeledImage& li = correctly_classified_image();
  Inference inf = infer(lab.model, li.image);
  AttackConfig cfg;
  cfg.iterations = 12;
  const std::size_t proto = top_indices(inf.scores, 1)[0];
  auto source = select_source_patch(lab.model, li.image, li.label, proto,
                                    cfg, &inf);
  auto target = complement_cells(source, 3, 3);

  SECTION("zero iterations keep delta at zero and the objective unchanged") {
    AttackConfig zero = cfg;
    zero.iterations = 0;
    AttackResult r = pgd_location_shift(lab.model, li.image, proto, source,
                                        target, zero);
    CHECK(r.iterations_used == 0);
    CHECK(r.delta_linf == 0.0);
    CHECK_THAT(r.objective_best, WithinAbs(r.objective_start, 1e-15));
    CHECK_THAT(
        r.objective_start,
        WithinAbs(location_shift_objective(lab.model, li.image, source,
                                           target, proto),
                  1e-12));
  }
  SECTION("every iterate satisfies budget, range and mask constraints") {
    AttackResult r = pgd_location_shift(lab.model, li.image, proto, source,
                                        target, cfg);
    CHECK(r.delta_linf <= cfg.budget + 1e-12);
    CHECK(r.off_mask_abs_max == 0.0);
    CHECK(r.perturbed_min >= 0.0);
    CHECK(r.perturbed_max <= 1.0);
  }
  SECTION("best-iterate reporting never loses to the zero start") {
    AttackResult r = pgd_location_shift(lab.model, li.image, proto, source,
                                        target, cfg);
    CHECK(r.objective_best >= r.objective_start);
  }
  SECTION("attack raises the objective strictly on the trained model") {
    AttackConfig strong = cfg;
    strong.iterations = 40;
    AttackResult r = pgd_location_shift(lab.model, li.image, proto, source,
                                        target, strong);
    CHECK(r.objective_best > r.objective_start);
  }
  SECTION("success flag equals argmax leaving the source region") {
    AttackConfig strong = cfg;
    strong.iterations = 40;
    AttackResult r = pgd_location_shift(lab.model, li.image, proto, source,
                                        target, strong);
    bool argmax_outside = true;
    for (const Cell& c : source)
      if (c == r.argmax_after) argmax_outside = false;
    CHECK(r.success == argmax_outside);
  }
  SECTION("zero budget cannot change anything") {
    AttackConfig zero = cfg;
    zero.budget = 0.0;
    AttackResult r = pgd_location_shift(lab.model, li.image, proto, source,
                                        target, zero);
    CHECK(r.delta_linf == 0.0);
    CHECK_FALSE(r.success);
  }
  SECTION("masked attack leaves off-mask pixels untouched") {
    const std::vector<Cell> small_target = {Cell{2, 2}};
    auto small_source = source;
    AttackResult r = pgd_location_shift(lab.model, li.image, proto,
                                        small_source, small_target, cfg);
    Tensor mask = receptive_field_mask(
        [&] {
          std::vector<Cell> cells = small_source;
          cells.push_back(small_target[0]);
          return cells;
        }(),
        24, 24);
    const std::size_t hw = 24 * 24;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < hw; ++p)
        if (mask[p] == 0.0) CHECK(r.delta[c * hw + p] == 0.0);
  }
  SECTION("reproducibility: identical runs give identical results") {
    AttackResult a = pgd_location_shift(lab.model, li.image, proto, source,
                                        target, cfg);
    AttackResult b = pgd_location_shift(lab.model, li.image, proto, source,
                                        target, cfg);
    CHECK(max_abs_diff(a.delta, b.delta) == 0.0);
    CHECK(a.objective_best == b.objective_best);
    CHECK(a.success == b.success);
  }
}

TEST_CASE("susceptibility rate") {
  TinyLab& lab = trained_lab();

  SECTION("zero budget gives rate zero") {
    SusceptibilityConfig cfg;
    cfg.n_images = 4;
    cfg.top_k = 2;
    cfg.attack.budget = 0.0;
    cfg.attack.iterations = 3;
    SusceptibilityResult r = susceptibility_rate(lab.model, lab.ds.test, cfg);
    CHECK(r.rate == 0.0);
    CHECK(r.successes == 0);
  }
  SECTION("fewer eligible images than requested runs on what exists") {
    SusceptibilityConfig cfg;
    cfg.n_images = 10000;
    cfg.top_k = 1;
    cfg.attack.iterations = 2;
    SusceptibilityResult r = susceptibility_rate(lab.model, lab.ds.test, cfg);
    CHECK(r.n_images <= lab.ds.test.size());
    CHECK(r.n_images == r.records.size());
    for (const auto& rec : r.records) {
      // every attacked image was correctly classified up front
      bool found = false;
      for (const auto& li : lab.ds.test)
        if (li.id == rec.image_id) {
          CHECK(predict(lab.model, li.image) == li.label);
          found = true;
        }
      CHECK(found);
    }
  }
  SECTION("records satisfy the constraint suite and the success rule") {
    SusceptibilityConfig cfg;
    cfg.n_images = 6;
    cfg.top_k = 2;
    cfg.attack.iterations = 10;
    SusceptibilityResult r = susceptibility_rate(lab.model, lab.ds.test, cfg);
    std::size_t successes = 0;
    for (const auto& rec : r.records) {
      for (const auto& attempt : rec.attempts) {
        CHECK(attempt.result.delta_linf <= cfg.attack.budget + 1e-12);
        CHECK(attempt.result.off_mask_abs_max == 0.0);
        CHECK(attempt.result.perturbed_min >= 0.0);
        CHECK(attempt.result.perturbed_max <= 1.0);
        CHECK(attempt.source.size() + attempt.target.size() == 9);
      }
      if (rec.success) {
        ++successes;
        CHECK(rec.attempts.back().result.success);
      }
    }
    CHECK(successes == r.successes);
    CHECK_THAT(r.rate,
               WithinAbs(static_cast<double>(r.successes) /
                             static_cast<double>(r.n_images),
                         1e-15));
  }
  SECTION("deterministic under the seed") {
    SusceptibilityConfig cfg;
    cfg.n_images = 4;
    cfg.top_k = 1;
    cfg.attack.iterations = 4;
    SusceptibilityResult a = susceptibility_rate(lab.model, lab.ds.test, cfg);
    SusceptibilityResult b = susceptibility_rate(lab.model, lab.ds.test, cfg);
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
      CHECK(a.records[i].image_id == b.records[i].image_id);
      CHECK(a.records[i].success == b.records[i].success);
    }
    CHECK(a.rate == b.rate);
  }
}

TEST_CASE("attack config validation") {
  AttackConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  AttackConfig bad = cfg;
  bad.step = 0.1;  // exceeds the 8/255 budget
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  AttackConfig zero_budget = cfg;
  zero_budget.budget = 0.0;  // evaluation-only configuration stays valid
  CHECK_NOTHROW(zero_budget.validate());
}
