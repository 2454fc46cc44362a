#pragma once

// Staged training: warmup (add-on layers + prototypes, base convolutions
// frozen), joint training with per-group learning rates, prototype
// projection, then last-layer-only fine-tuning on cached similarity scores.
// The composite loss is CE + lambda_cluster * Clst + lambda_separation * Sep
// + lambda_l1 * ||off-class last-layer weights||_1, where Clst (Sep) is the
// batch mean over images of the minimum distance term between any latent
// patch and any same-class (other-class) prototype.
//
// Determinism: all randomness is derived from TrainConfig::seed; per-image
// gradient contributions are flushed in index order, so two runs with the
// same seed produce bitwise-identical parameters.

#include <functional>
#include <string>
#include <vector>

#include "protolab/dataset.hpp"
#include "protolab/model.hpp"
#include "protolab/threads.hpp"

namespace protolab {

struct TrainConfig {
  std::size_t warmup_epochs = 5;
  std::size_t joint_epochs = 6;
  std::size_t last_layer_iters = 20;
  double lr_warmup = 0.003;
  double lr_joint_backbone = 0.0001;
  double lr_joint_prototypes = 0.003;
  double lr_last_layer = 0.0001;
  double lambda_cluster = 0.8;
  double lambda_separation = -0.08;
  double lambda_l1 = 0.0001;
  std::size_t batch_size = 32;
  std::uint64_t seed = 7;

  void validate() const {
    PROTOLAB_REQUIRE(lr_warmup > 0 && lr_joint_backbone > 0 &&
                         lr_joint_prototypes > 0 && lr_last_layer > 0,
                     "TrainConfig: learning rates must be positive");
    PROTOLAB_REQUIRE(lambda_separation < 0,
                     "TrainConfig: lambda_separation must be negative, got ",
                     lambda_separation);
    PROTOLAB_REQUIRE(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  }
};

struct AdvTrainConfig {
  double step = 10.0 / 255.0;    // FGSM step alpha
  double budget = 8.0 / 255.0;   // L-inf radius
  std::size_t epochs = 10;       // total warmup + joint epochs

  void validate() const {
    PROTOLAB_REQUIRE(budget > 0 && step > 0,
                     "AdvTrainConfig: step and budget must be positive");
  }
};

struct PgdEvalConfig {
  double step = 2.0 / 255.0;
  double budget = 8.0 / 255.0;
  std::size_t iterations = 10;
};

enum class Regime { standard, adversarial, jpeg_augmented };

// non-finite loss; carries stage and epoch context
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::standard: return "standard";
    case Regime::adversarial: return "adv";
    case Regime::jpeg_augmented: return "jpeg-aug";
  }
  return "?";
}

// ---- Adam ----

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t step_count = 0;
  std::unordered_map<std::string, std::pair<Tensor, Tensor>> moments;
};

struct ParamGroup {
  std::vector<std::string> names;
  double lr = 0.0;
};

// Standard Adam with bias correction over the given groups; gradients are
// consumed (zeroed) by the step.
inline void adam_step(ParameterStore& store, AdamState& state,
                      std::span<const ParamGroup> groups) {
  ++state.step_count;
  const double bc1 =
      1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 =
      1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (const ParamGroup& group : groups) {
    for (const std::string& name : group.names) {
      Parameter& p = store.at(name);
      auto [it, fresh] = state.moments.try_emplace(
          name, std::pair{Tensor(p.value.shape()), Tensor(p.value.shape())});
      Tensor& m = it->second.first;
      Tensor& v = it->second.second;
      PROTOLAB_REQUIRE(m.same_shape(p.value), "adam_step: moment shape ",
                       shape_str(m), " vs parameter ", shape_str(p.value));
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.value[i] -= group.lr * mhat / (std::sqrt(vhat) + state.eps);
      }
      p.grad.fill(0.0);
    }
  }
}

// ---- loss terms ----

struct LossTerms {
  double total = 0.0, ce = 0.0, cluster = 0.0, separation = 0.0, l1 = 0.0;
};

inline std::vector<std::size_t> prototype_rows_of_class(
    const std::vector<std::size_t>& proto_class, std::size_t klass,
    bool same) {
  std::vector<std::size_t> rows;
  for (std::size_t l = 0; l < proto_class.size(); ++l)
    if ((proto_class[l] == klass) == same) rows.push_back(l);
  return rows;
}

// mean over images of min over same-class prototypes of min over patches
// of the distance term
inline double cluster_cost(Model& model, std::span<const Tensor> latents,
                           std::span<const std::size_t> labels) {
  PROTOLAB_REQUIRE(!latents.empty(), "cluster_cost: empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    Tape tape;
    Var d = tape.prototype_distances(tape.leaf(latents[i]),
                                     tape.leaf(model.prototypes()),
                                     model.config.distance_mode);
    const auto rows =
        prototype_rows_of_class(model.proto_class, labels[i], true);
    sum += tape.value(tape.masked_min(d, rows)).item();
  }
  return sum / static_cast<double>(latents.size());
}

// mean over images of min over other-class prototypes; enters the total
// loss with a negative weight
inline double separation_cost(Model& model, std::span<const Tensor> latents,
                              std::span<const std::size_t> labels) {
  PROTOLAB_REQUIRE(!latents.empty(), "separation_cost: empty batch");
  PROTOLAB_REQUIRE(model.config.classes >= 2,
                   "separation_cost: needs a bank with >= 2 classes");
  double sum = 0.0;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    Tape tape;
    Var d = tape.prototype_distances(tape.leaf(latents[i]),
                                     tape.leaf(model.prototypes()),
                                     model.config.distance_mode);
    const auto rows =
        prototype_rows_of_class(model.proto_class, labels[i], false);
    sum += tape.value(tape.masked_min(d, rows)).item();
  }
  return sum / static_cast<double>(latents.size());
}

// off-class entries of the last layer (weight from class row c to a
// prototype of a different class)
inline std::shared_ptr<std::vector<std::uint8_t>> offclass_mask(
    const Model& model) {
  const std::size_t c = model.config.classes;
  const std::size_t m = model.proto_class.size();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(c * m, 0);
  for (std::size_t row = 0; row < c; ++row)
    for (std::size_t l = 0; l < m; ++l)
      (*mask)[row * m + l] = model.proto_class[l] != row ? 1 : 0;
  return mask;
}

inline double l1_offclass(const Model& model) {
  const auto mask = offclass_mask(model);
  const Tensor& w = model.last_layer();
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i)
    if ((*mask)[i]) sum += std::abs(w[i]);
  return sum;
}

// CE + lambda_cluster * Clst + lambda_separation * Sep + lambda_l1 * L1.
// With `with_grads`, gradients (scaled for the batch mean) are accumulated
// into the store in image-index order; existing gradients are cleared.
inline LossTerms total_loss(Model& model, std::span<const Tensor> images,
                            std::span<const std::size_t> labels,
                            const TrainConfig& cfg, bool with_grads,
                            std::vector<std::size_t>* predictions = nullptr) {
  PROTOLAB_REQUIRE(!images.empty() && images.size() == labels.size(),
                   "total_loss: need a non-empty batch with matching labels");
  if (with_grads) model.params.zero_grads();
  const std::size_t n = images.size();
  const double inv = 1.0 / static_cast<double>(n);
  LossTerms terms;
  if (predictions) predictions->assign(n, 0);

  const std::size_t chunk = std::max<std::size_t>(1, max_threads());
  std::vector<std::unique_ptr<Tape>> tapes(n);
  std::vector<Var> roots(n);
  std::vector<std::array<double, 3>> parts(n);  // ce, cluster, separation

  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t stop = std::min(n, start + chunk);
    parallel_for(stop - start, [&](std::size_t k) {
      const std::size_t i = start + k;
      auto tape = std::make_unique<Tape>();
      TapedForward f =
          forward_on_tape(*tape, model, images[i], with_grads, false);
      Var ce = tape->softmax_cross_entropy(f.logits, labels[i]);
      const auto same =
          prototype_rows_of_class(model.proto_class, labels[i], true);
      const auto other =
          prototype_rows_of_class(model.proto_class, labels[i], false);
      PROTOLAB_REQUIRE(!other.empty(),
                       "total_loss: separation needs >= 2 classes");
      Var clst = tape->masked_min(f.distances, same);
      Var sep = tape->masked_min(f.distances, other);
      const std::array<std::pair<double, Var>, 3> combo = {
          std::pair{1.0, ce}, std::pair{cfg.lambda_cluster, clst},
          std::pair{cfg.lambda_separation, sep}};
      Var root = tape->affine(combo);
      if (with_grads) tape->backward(root, 1.0);
      parts[i] = {tape->value(ce).item(), tape->value(clst).item(),
                  tape->value(sep).item()};
      if (predictions) {
        const Tensor& lg = tape->value(f.logits);
        (*predictions)[i] = argmax_index({lg.data(), lg.size()});
      }
      roots[i] = root;
      tapes[i] = std::move(tape);
    });
    if (with_grads) {
      for (std::size_t i = start; i < stop; ++i) {
        tapes[i]->flush_param_grads(inv);
        tapes[i].reset();
      }
    } else {
      for (std::size_t i = start; i < stop; ++i) tapes[i].reset();
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    terms.ce += parts[i][0] * inv;
    terms.cluster += parts[i][1] * inv;
    terms.separation += parts[i][2] * inv;
  }

  // last-layer L1 on its own small tape
  {
    Tape tape;
    Var w = with_grads ? tape.param(model.params.at("last_layer"))
                       : tape.leaf(model.last_layer(), false);
    Var l1 = tape.l1_masked(w, offclass_mask(model));
    terms.l1 = tape.value(l1).item();
    if (with_grads && tape.needs_grad(l1)) {
      tape.backward(l1, 1.0);
      tape.flush_param_grads(cfg.lambda_l1);
    }
  }

  terms.total = terms.ce + cfg.lambda_cluster * terms.cluster +
                cfg.lambda_separation * terms.separation +
                cfg.lambda_l1 * terms.l1;
  return terms;
}

// ---- adversarial batches and evaluation ----

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// FGSM with random init: delta0 ~ U(-eps, eps); one signed gradient step of
// size alpha from x + delta0; the perturbation is re-clamped to the budget
// and the image to [0,1].
inline Tensor fgsm_perturb(Model& model, const Tensor& image,
                           std::size_t label, const AdvTrainConfig& cfg,
                           Rng& rng) {
  const double eps = cfg.budget;
  Tensor start(image.shape());
  for (std::size_t i = 0; i < start.size(); ++i)
    start[i] =
        std::clamp(image[i] + rng.uniform(-eps, eps), 0.0, 1.0);

  Tape tape;
  TapedForward f = forward_on_tape(tape, model, start, false, true);
  tape.backward(tape.softmax_cross_entropy(f.logits, label));
  const Tensor& g = tape.grad(f.image);

  Tensor out(image.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double delta = std::clamp(
        (start[i] - image[i]) + cfg.step * sign(g[i]), -eps, eps);
    out[i] = std::clamp(image[i] + delta, 0.0, 1.0);
  }
  return out;
}

// Untargeted CE-maximizing PGD from a zero start, used for adversarial
// accuracy. Returns the perturbed image.
inline Tensor pgd_misclassify(Model& model, const Tensor& image,
                              std::size_t label, const PgdEvalConfig& cfg) {
  Tensor current = image;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Tape tape;
    TapedForward f = forward_on_tape(tape, model, current, false, true);
    tape.backward(tape.softmax_cross_entropy(f.logits, label));
    const Tensor& g = tape.grad(f.image);
    for (std::size_t i = 0; i < current.size(); ++i) {
      const double delta = std::clamp(
          current[i] + cfg.step * sign(g[i]) - image[i], -cfg.budget,
          cfg.budget);
      current[i] = std::clamp(image[i] + delta, 0.0, 1.0);
    }
  }
  return current;
}

// clean accuracy, or accuracy under PGD when a config is given
inline double evaluate_accuracy(Model& model,
                                std::span<const LabeledImage> split,
                                const PgdEvalConfig* attack = nullptr) {
  if (split.empty()) return 0.0;
  std::vector<std::uint8_t> correct(split.size(), 0);
  parallel_for(split.size(), [&](std::size_t i) {
    const Tensor* image = &split[i].image;
    Tensor perturbed;
    if (attack) {
      perturbed = pgd_misclassify(model, *image, split[i].label, *attack);
      image = &perturbed;
    }
    correct[i] = predict(model, *image) == split[i].label ? 1 : 0;
  });
  std::size_t sum = 0;
  for (auto c : correct) sum += c;
  return static_cast<double>(sum) / static_cast<double>(split.size());
}

// ---- the schedule ----

struct EpochMetrics {
  std::size_t epoch = 0;  // within its stage
  std::string stage;      // warmup | joint | push | last_layer
  LossTerms loss;
  double train_accuracy = 0.0;  // on the images as trained
  double test_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  double best_test_accuracy = 0.0;  // over the last-layer iterates
};

using StageCallback = std::function<void(const std::string&, Model&)>;

namespace detail {

struct EpochPlan {
  Regime regime;
  const AugmentConfig* augment;
  const AdvTrainConfig* adv;
  const TrainConfig* cfg;
};

inline EpochMetrics run_epoch(Model& model, const Dataset& ds,
                              const EpochPlan& plan, AdamState& opt,
                              std::span<const ParamGroup> groups,
                              std::uint64_t stage_tag, const char* stage_name,
                              std::size_t epoch) {
  const TrainConfig& cfg = *plan.cfg;
  std::vector<std::size_t> order(ds.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng(derive_seed(cfg.seed, 0x73687566ULL, stage_tag, epoch));
  shuffle_rng.shuffle(order);

  LossTerms epoch_loss;
  std::size_t batches = 0, correct = 0;
  for (std::size_t start = 0; start < order.size();
       start += cfg.batch_size) {
    const std::size_t stop =
        std::min(order.size(), start + cfg.batch_size);
    const std::size_t b = stop - start;
    std::vector<Tensor> images(b);
    std::vector<std::size_t> labels(b);
    parallel_for(b, [&](std::size_t k) {
      const LabeledImage& li = ds.train[order[start + k]];
      Rng aug_rng(
          derive_seed(cfg.seed, 0x617567ULL, stage_tag, epoch, start + k));
      images[k] = augment(li.image, *plan.augment, aug_rng);
      labels[k] = li.label;
    });
    if (plan.regime == Regime::adversarial && plan.adv) {
      std::vector<Tensor> perturbed(b);
      parallel_for(b, [&](std::size_t k) {
        Rng adv_rng(derive_seed(cfg.seed, 0x66677366ULL, stage_tag, epoch,
                                start + k));
        perturbed[k] =
            fgsm_perturb(model, images[k], labels[k], *plan.adv, adv_rng);
      });
      images = std::move(perturbed);
    }
    std::vector<std::size_t> predictions;
    LossTerms batch_terms =
        total_loss(model, images, labels, cfg, true, &predictions);
    if (!std::isfinite(batch_terms.total))
      throw DivergenceError(detail::cat("training diverged: non-finite loss at stage ",
                                        stage_name, " epoch ", epoch));
    adam_step(model.params, opt, groups);
    epoch_loss.total += batch_terms.total;
    epoch_loss.ce += batch_terms.ce;
    epoch_loss.cluster += batch_terms.cluster;
    epoch_loss.separation += batch_terms.separation;
    epoch_loss.l1 += batch_terms.l1;
    ++batches;
    for (std::size_t k = 0; k < b; ++k)
      if (predictions[k] == labels[k]) ++correct;
  }
  EpochMetrics m;
  m.epoch = epoch;
  const double inv = 1.0 / static_cast<double>(batches);
  m.loss = {epoch_loss.total * inv, epoch_loss.ce * inv,
            epoch_loss.cluster * inv, epoch_loss.separation * inv,
            epoch_loss.l1 * inv};
  m.train_accuracy =
      static_cast<double>(correct) / static_cast<double>(ds.train.size());
  m.test_accuracy = evaluate_accuracy(model, ds.test);
  return m;
}

}  // namespace detail

// Runs the full staged schedule in place and reports per-epoch metrics.
// Stage boundaries invoke the callback with "warmup", "joint", "push" and
// "final" so callers can persist checkpoints.
inline TrainResult train_schedule(Model& model, const Dataset& ds,
                                  const TrainConfig& cfg,
                                  const AugmentConfig& aug, Regime regime,
                                  const AdvTrainConfig* adv = nullptr,
                                  const StageCallback& on_stage = {}) {
  cfg.validate();
  PROTOLAB_REQUIRE(!ds.train.empty() && !ds.test.empty(),
                   "train_schedule: dataset needs train and test splits");
  AdvTrainConfig adv_default;
  if (regime == Regime::adversarial && !adv) adv = &adv_default;
  if (adv) adv->validate();

  std::size_t warmup = cfg.warmup_epochs, joint = cfg.joint_epochs;
  if (regime == Regime::adversarial && adv) {
    // the adversarial regime trains for adv->epochs total before the push;
    // warmup keeps its configured share
    warmup = std::min(cfg.warmup_epochs, adv->epochs);
    joint = adv->epochs - warmup;
  }

  AugmentConfig effective_aug = aug;
  if (regime == Regime::jpeg_augmented) effective_aug.jpeg_augment = true;

  detail::EpochPlan plan{regime, &effective_aug, adv, &cfg};
  TrainResult result;

  std::vector<std::string> addon_and_protos = {"addon1.w", "addon1.b",
                                               "addon2.w", "addon2.b",
                                               "prototypes"};
  std::vector<std::string> backbone_all = {
      "conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w",
      "conv3.b", "addon1.w", "addon1.b", "addon2.w", "addon2.b"};

  // stage 1: warmup
  {
    model.params.set_all_trainable(false);
    for (const auto& n : addon_and_protos)
      model.params.at(n).trainable = true;
    AdamState opt;
    std::vector<ParamGroup> groups = {{addon_and_protos, cfg.lr_warmup}};
    for (std::size_t e = 0; e < warmup; ++e) {
      EpochMetrics m = detail::run_epoch(model, ds, plan, opt, groups, 1, "warmup", e);
      m.stage = "warmup";
      result.metrics.push_back(std::move(m));
    }
    if (on_stage) on_stage("warmup", model);
  }

  // stage 2: joint
  {
    model.params.set_all_trainable(false);
    for (const auto& n : backbone_all) model.params.at(n).trainable = true;
    model.params.at("prototypes").trainable = true;
    AdamState opt;
    std::vector<ParamGroup> groups = {
        {backbone_all, cfg.lr_joint_backbone},
        {{"prototypes"}, cfg.lr_joint_prototypes}};
    for (std::size_t e = 0; e < joint; ++e) {
      EpochMetrics m = detail::run_epoch(model, ds, plan, opt, groups, 2, "joint", e);
      m.stage = "joint";
      result.metrics.push_back(std::move(m));
    }
    if (on_stage) on_stage("joint", model);
  }

  // push: project prototypes onto clean training patches
  std::vector<std::size_t> train_labels(ds.train.size());
  for (std::size_t i = 0; i < ds.train.size(); ++i)
    train_labels[i] = ds.train[i].label;
  std::vector<Tensor> train_latents(ds.train.size());
  parallel_for(ds.train.size(), [&](std::size_t i) {
    train_latents[i] = latent_of(model, ds.train[i].image);
  });
  push_prototypes_on_latents(model, train_labels, train_latents);

  // after the push the backbone and prototypes are frozen, so every
  // similarity score is fixed; cache them for the last-layer stage
  auto scores_of_latent = [&](const Tensor& latent) {
    Tape tape;
    Var sim = tape.log_ratio_similarity(
        tape.prototype_distances(tape.leaf(latent),
                                 tape.leaf(model.prototypes()),
                                 model.config.distance_mode),
        model.config.epsilon_stab);
    const Tensor& s = tape.value(tape.spatial_max(sim));
    return Tensor(s.shape(),
                  std::vector<double>(s.data(), s.data() + s.size()));
  };
  std::vector<Tensor> train_scores(ds.train.size());
  parallel_for(ds.train.size(), [&](std::size_t i) {
    train_scores[i] = scores_of_latent(train_latents[i]);
  });
  std::vector<Tensor> test_scores(ds.test.size());
  parallel_for(ds.test.size(), [&](std::size_t i) {
    test_scores[i] = scores_of_latent(latent_of(model, ds.test[i].image));
  });

  auto accuracy_from_scores = [&](std::span<const Tensor> scores,
                                  const std::vector<LabeledImage>& split) {
    std::size_t correct = 0;
    const Tensor& w = model.last_layer();
    const std::size_t c = model.config.classes;
    const std::size_t m = model.proto_class.size();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      std::vector<double> logits(c, 0.0);
      for (std::size_t row = 0; row < c; ++row)
        for (std::size_t l = 0; l < m; ++l)
          logits[row] += w[row * m + l] * scores[i][l];
      if (argmax_index(logits) == split[i].label) ++correct;
    }
    return static_cast<double>(correct) /
           static_cast<double>(scores.size());
  };

  {
    EpochMetrics m;
    m.epoch = 0;
    m.stage = "push";
    m.loss.cluster = cluster_cost(model, train_latents, train_labels);
    m.loss.separation = separation_cost(model, train_latents, train_labels);
    m.loss.l1 = l1_offclass(model);
    double ce = 0.0;
    for (std::size_t i = 0; i < train_scores.size(); ++i) {
      Tape tape;
      Var logits = tape.dense(tape.leaf(train_scores[i]),
                              tape.leaf(model.last_layer()), Var{});
      ce += tape.value(tape.softmax_cross_entropy(logits, train_labels[i]))
                .item();
    }
    m.loss.ce = ce / static_cast<double>(train_scores.size());
    m.loss.total = m.loss.ce + cfg.lambda_cluster * m.loss.cluster +
                   cfg.lambda_separation * m.loss.separation +
                   cfg.lambda_l1 * m.loss.l1;
    m.train_accuracy = accuracy_from_scores(train_scores, ds.train);
    m.test_accuracy = accuracy_from_scores(test_scores, ds.test);
    result.metrics.push_back(std::move(m));
  }
  if (on_stage) on_stage("push", model);

  // stage 3: last layer only, on the cached scores; the best test-accuracy
  // iterate (including the post-push state) is kept
  {
    model.params.set_all_trainable(false);
    model.params.at("last_layer").trainable = true;
    AdamState opt;
    std::vector<ParamGroup> groups = {{{"last_layer"}, cfg.lr_last_layer}};
    Tensor best_weights = model.last_layer();
    double best_acc = accuracy_from_scores(test_scores, ds.test);
    result.best_test_accuracy = best_acc;

    for (std::size_t iter = 0; iter < cfg.last_layer_iters; ++iter) {
      std::vector<std::size_t> order(ds.train.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng shuffle_rng(derive_seed(cfg.seed, 0x73687566ULL, 3, iter));
      shuffle_rng.shuffle(order);

      LossTerms iter_loss;
      std::size_t batches = 0, correct = 0;
      for (std::size_t start = 0; start < order.size();
           start += cfg.batch_size) {
        const std::size_t stop =
            std::min(order.size(), start + cfg.batch_size);
        const double inv = 1.0 / static_cast<double>(stop - start);
        model.params.zero_grads();
        double ce_sum = 0.0;
        for (std::size_t k = start; k < stop; ++k) {
          const std::size_t i = order[k];
          Tape tape;
          Var logits =
              tape.dense(tape.leaf(train_scores[i]),
                         tape.param(model.params.at("last_layer")), Var{});
          Var ce = tape.softmax_cross_entropy(logits, train_labels[i]);
          tape.backward(ce, 1.0);
          tape.flush_param_grads(inv);
          ce_sum += tape.value(ce).item();
          const Tensor& lg = tape.value(logits);
          if (argmax_index({lg.data(), lg.size()}) == train_labels[i])
            ++correct;
        }
        {
          Tape tape;
          Var l1 = tape.l1_masked(tape.param(model.params.at("last_layer")),
                                  offclass_mask(model));
          tape.backward(l1, 1.0);
          tape.flush_param_grads(cfg.lambda_l1);
          iter_loss.l1 += tape.value(l1).item();
        }
        adam_step(model.params, opt, groups);
        iter_loss.ce += ce_sum * inv;
        ++batches;
      }
      EpochMetrics m;
      m.epoch = iter;
      m.stage = "last_layer";
      const double binv = 1.0 / static_cast<double>(batches);
      m.loss.ce = iter_loss.ce * binv;
      m.loss.l1 = iter_loss.l1 * binv;
      m.loss.total = m.loss.ce + cfg.lambda_l1 * m.loss.l1;
      m.train_accuracy = static_cast<double>(correct) /
                         static_cast<double>(ds.train.size());
      m.test_accuracy = accuracy_from_scores(test_scores, ds.test);
      if (m.test_accuracy > best_acc) {
        best_acc = m.test_accuracy;
        best_weights = model.last_layer();
      }
      result.metrics.push_back(std::move(m));
    }
    model.last_layer() = best_weights;
    result.best_test_accuracy = best_acc;
  }
  if (on_stage) on_stage("final", model);

  return result;
}

}  // namespace protolab
