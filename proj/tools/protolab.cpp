// protolab: command-line front end for the prototype-similarity lab.
//
// Subcommands: gen-data, corrupt-data, train, attack, susceptibility,
// jpeg-exp, gradcheck. Every command writes a run_manifest.json with its
// resolved configuration, seed, code version and emitted files.
//
// Exit codes: 0 success, 1 gradcheck failure, 2 usage error, 3 training
// divergence, 4 protocol precondition violated, 5 artifact mismatch.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "protolab/attack.hpp"
#include "protolab/checkpoint.hpp"
#include "protolab/compression.hpp"
#include "protolab/dataset.hpp"
#include "protolab/gradcheck_suite.hpp"
#include "protolab/manifest.hpp"
#include "protolab/report.hpp"
#include "protolab/train.hpp"

namespace fs = std::filesystem;
using namespace protolab;

namespace {

struct ArtifactMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string rel_or_abs(const fs::path& p) { return p.string(); }

void finalize_manifest(RunManifest& manifest, const fs::path& out_dir) {
  manifest.finish();
  manifest.outputs.push_back((out_dir / "run_manifest.json").string());
  manifest.write(out_dir / "run_manifest.json");
}

ModelConfig model_config_for(const Dataset& ds, std::size_t protos_per_class,
                             double epsilon, const std::string& mode) {
  PROTOLAB_REQUIRE(!ds.train.empty(), "dataset has no training images");
  ModelConfig cfg;
  cfg.image_c = ds.train[0].image.extent(0);
  cfg.image_h = ds.train[0].image.extent(1);
  cfg.image_w = ds.train[0].image.extent(2);
  const auto [lh, lw] = latent_extents(cfg.image_h, cfg.image_w);
  cfg.latent_h = lh;
  cfg.latent_w = lw;
  cfg.classes = ds.classes;
  cfg.prototypes_per_class = protos_per_class;
  cfg.epsilon_stab = epsilon;
  cfg.distance_mode =
      mode == "euclidean" ? DistanceMode::euclidean : DistanceMode::squared;
  cfg.validate();
  return cfg;
}

void write_checkpoint_sidecar(const fs::path& ckpt, const std::string& regime,
                              std::uint64_t seed, const fs::path& data_dir,
                              const Dataset& ds) {
  nlohmann::json j;
  j["regime"] = regime;
  j["seed"] = seed;
  j["data_dir"] = data_dir.string();
  j["classes"] = ds.classes;
  j["corrupted_classes"] = ds.corrupted_classes;
  std::ofstream out(ckpt.string() + ".json");
  out << j.dump(2) << "\n";
}

nlohmann::json read_sidecar(const fs::path& ckpt) {
  const fs::path side = ckpt.string() + ".json";
  if (!fs::exists(side)) return {};
  std::ifstream in(side);
  nlohmann::json j;
  in >> j;
  return j;
}

// ---- gen-data ----

struct GenDataOpts {
  std::string out;
  SynthConfig synth;
};

int cmd_gen_data(const GenDataOpts& opt) {
  RunManifest manifest;
  manifest.command = "gen-data";
  manifest.seed = opt.synth.seed;
  manifest.config = {{"classes", opt.synth.classes},
                     {"train_per_class", opt.synth.train_per_class},
                     {"test_per_class", opt.synth.test_per_class},
                     {"image_h", opt.synth.image_h},
                     {"image_w", opt.synth.image_w},
                     {"seed", opt.synth.seed}};
  Dataset ds = generate(opt.synth);
  const fs::path dir(opt.out);
  save_dataset(ds, dir);
  manifest.outputs.push_back((dir / "manifest.csv").string());
  for (const auto& li : ds.train)
    manifest.outputs.push_back((dir / "images" / (li.id + ".ppm")).string());
  for (const auto& li : ds.test)
    manifest.outputs.push_back((dir / "images" / (li.id + ".ppm")).string());
  finalize_manifest(manifest, dir);
  std::cout << "gen-data: wrote " << ds.train.size() << " train + "
            << ds.test.size() << " test images to " << opt.out << "\n";
  return 0;
}

// ---- corrupt-data ----

struct CorruptOpts {
  std::string data, out;
  double fraction = 0.5;
  int quality = 20;
  std::uint64_t seed = 1;
};

int cmd_corrupt_data(const CorruptOpts& opt) {
  RunManifest manifest;
  manifest.command = "corrupt-data";
  manifest.seed = opt.seed;
  manifest.config = {{"data", opt.data},
                     {"fraction", opt.fraction},
                     {"quality", opt.quality},
                     {"seed", opt.seed}};
  Dataset ds = load_dataset(opt.data);
  corrupt_dataset(ds, opt.fraction, opt.quality, opt.seed);
  const fs::path dir(opt.out);
  save_dataset(ds, dir);
  manifest.outputs.push_back((dir / "manifest.csv").string());
  manifest.outputs.push_back((dir / "corrupted_classes.txt").string());
  for (const auto& li : ds.train)
    manifest.outputs.push_back((dir / "images" / (li.id + ".ppm")).string());
  for (const auto& li : ds.test)
    manifest.outputs.push_back((dir / "images" / (li.id + ".ppm")).string());
  finalize_manifest(manifest, dir);
  std::cout << "corrupt-data: compressed " << ds.corrupted_classes.size()
            << " of " << ds.classes << " classes at quality " << opt.quality
            << "\n";
  return 0;
}

// ---- train ----

struct TrainOpts {
  std::string data, out;
  std::string regime = "standard";
  TrainConfig train;
  AugmentConfig augment;
  AdvTrainConfig adv;
  std::size_t protos_per_class = 10;
  double epsilon = 1e-4;
  std::string distance_mode = "squared";
};

int cmd_train(const TrainOpts& opt) {
  RunManifest manifest;
  manifest.command = "train";
  manifest.seed = opt.train.seed;
  manifest.config = {{"data", opt.data},
                     {"regime", opt.regime},
                     {"warmup_epochs", opt.train.warmup_epochs},
                     {"joint_epochs", opt.train.joint_epochs},
                     {"last_layer_iters", opt.train.last_layer_iters},
                     {"batch_size", opt.train.batch_size},
                     {"lr_warmup", opt.train.lr_warmup},
                     {"lr_joint_backbone", opt.train.lr_joint_backbone},
                     {"lr_joint_prototypes", opt.train.lr_joint_prototypes},
                     {"lr_last_layer", opt.train.lr_last_layer},
                     {"lambda_cluster", opt.train.lambda_cluster},
                     {"lambda_separation", opt.train.lambda_separation},
                     {"lambda_l1", opt.train.lambda_l1},
                     {"flip_prob", opt.augment.horizontal_flip_prob},
                     {"rotation_deg", opt.augment.rotation_deg},
                     {"jpeg_aug_prob", opt.augment.jpeg_prob},
                     {"jpeg_aug_quality", opt.augment.jpeg_quality},
                     {"adv_step", opt.adv.step},
                     {"adv_budget", opt.adv.budget},
                     {"adv_epochs", opt.adv.epochs},
                     {"prototypes_per_class", opt.protos_per_class},
                     {"epsilon_stab", opt.epsilon},
                     {"distance_mode", opt.distance_mode},
                     {"seed", opt.train.seed}};
  Regime regime = Regime::standard;
  if (opt.regime == "adv") regime = Regime::adversarial;
  else if (opt.regime == "jpeg-aug") regime = Regime::jpeg_augmented;
  else PROTOLAB_REQUIRE(opt.regime == "standard", "unknown regime '",
                        opt.regime, "'");

  Dataset ds = load_dataset(opt.data);
  ModelConfig mc = model_config_for(ds, opt.protos_per_class, opt.epsilon,
                                    opt.distance_mode);
  Model model = make_model(mc, opt.train.seed);
  const fs::path dir(opt.out);
  fs::create_directories(dir);

  TrainResult result = train_schedule(
      model, ds, opt.train, opt.augment, regime,
      regime == Regime::adversarial ? &opt.adv : nullptr,
      [&](const std::string& stage, Model& m) {
        const fs::path ckpt = dir / (stage + ".ckpt");
        save_model(m, ckpt);
        manifest.outputs.push_back(ckpt.string());
      });
  write_metrics_csv(dir / "metrics.csv", result.metrics);
  manifest.outputs.push_back((dir / "metrics.csv").string());
  write_checkpoint_sidecar(dir / "final.ckpt", opt.regime, opt.train.seed,
                           opt.data, ds);
  manifest.outputs.push_back((dir / "final.ckpt.json").string());
  finalize_manifest(manifest, dir);
  std::cout << "train: regime " << opt.regime << ", best test accuracy "
            << result.best_test_accuracy << "\n";
  return 0;
}

// ---- attack ----

struct AttackOpts {
  std::string checkpoint, data, out, image_id;
  long prototype = -1;  // -1: most activated
  AttackConfig attack;
  std::string mask_mode = "receptive_field";
  std::string rule = "argmax_ties";
  std::string target_cells;  // "i,j;i,j" or empty for the complement
};

std::vector<Cell> parse_cells(const std::string& text) {
  std::vector<Cell> cells;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ';')) {
    std::size_t i = 0, j = 0;
    PROTOLAB_REQUIRE(std::sscanf(part.c_str(), "%zu,%zu", &i, &j) == 2,
                     "bad cell '", part, "' (expected i,j)");
    cells.push_back(Cell{i, j});
  }
  return cells;
}

int cmd_attack(const AttackOpts& opt) {
  RunManifest manifest;
  manifest.command = "attack";
  manifest.config = {{"checkpoint", opt.checkpoint},
                     {"data", opt.data},
                     {"image_id", opt.image_id},
                     {"prototype", opt.prototype},
                     {"iterations", opt.attack.iterations},
                     {"budget", opt.attack.budget},
                     {"step", opt.attack.step},
                     {"mask_mode", opt.mask_mode},
                     {"source_rule", opt.rule},
                     {"target_cells", opt.target_cells}};
  Model model = load_model(opt.checkpoint);
  Dataset ds = load_dataset(opt.data);

  AttackConfig cfg = opt.attack;
  cfg.mask_mode = opt.mask_mode == "full_image" ? MaskMode::full_image
                                                : MaskMode::receptive_field;
  cfg.source_rule =
      opt.rule == "top_n" ? SourceRule::top_n : SourceRule::argmax_ties;
  cfg.validate();

  const LabeledImage* target_image = nullptr;
  for (const auto& li : ds.test)
    if (li.id == opt.image_id) target_image = &li;
  for (const auto& li : ds.train)
    if (!target_image && li.id == opt.image_id) target_image = &li;
  PROTOLAB_REQUIRE(target_image, "image id '", opt.image_id,
                   "' not found in ", opt.data);

  Inference inf = infer(model, target_image->image);
  if (inf.predicted != target_image->label)
    throw ProtocolError(detail::cat("image ", opt.image_id,
                                    " is classified as ", inf.predicted,
                                    ", not its label ", target_image->label));
  const std::size_t prototype =
      opt.prototype >= 0 ? static_cast<std::size_t>(opt.prototype)
                         : top_indices(inf.scores, 1)[0];
  auto source = select_source_patch(model, target_image->image,
                                    target_image->label, prototype, cfg, &inf);
  auto target =
      opt.target_cells.empty()
          ? complement_cells(source, model.config.latent_h,
                             model.config.latent_w)
          : parse_cells(opt.target_cells);
  AttackResult result = pgd_location_shift(model, target_image->image,
                                           prototype, source, target, cfg);

  const fs::path dir(opt.out);
  fs::create_directories(dir);
  const std::size_t n = model.config.latent_h * model.config.latent_w;
  const std::size_t w = model.config.latent_w;

  // overlays: clean and attacked activation maps with their boxes
  auto map_slice = [&](const Inference& i) {
    Tensor slice({model.config.latent_h, model.config.latent_w});
    for (std::size_t j = 0; j < n; ++j)
      slice[j] = i.simmap[prototype * n + j];
    return slice;
  };
  Tensor perturbed(target_image->image.shape());
  for (std::size_t i = 0; i < perturbed.size(); ++i)
    perturbed[i] = target_image->image[i] + result.delta[i];
  Inference after = infer(model, perturbed);

  Heatmap clean_heat = upsample_activation(map_slice(inf), model.config.image_h,
                                         model.config.image_w);
  Heatmap attacked_heat = upsample_activation(
      map_slice(after), model.config.image_h, model.config.image_w);

  Tensor clean_overlay = overlay_heatmap(target_image->image, clean_heat.map);
  draw_rect(clean_overlay, clean_heat.box.x0, clean_heat.box.y0, clean_heat.box.x1,
            clean_heat.box.y1, kActivationBoxColor);
  write_ppm(dir / "clean_overlay.ppm", clean_overlay);

  std::vector<Cell> mask_cells(source.begin(), source.end());
  mask_cells.insert(mask_cells.end(), target.begin(), target.end());
  Tensor mask = cfg.mask_mode == MaskMode::receptive_field
                    ? receptive_field_mask(mask_cells, model.config.image_h,
                                           model.config.image_w)
                    : Tensor::full(
                          {model.config.image_h, model.config.image_w}, 1.0);
  Box noise_box = mask_bounds(mask);

  Tensor attacked_overlay = overlay_heatmap(perturbed, attacked_heat.map);
  draw_rect(attacked_overlay, attacked_heat.box.x0, attacked_heat.box.y0,
            attacked_heat.box.x1, attacked_heat.box.y1, kActivationBoxColor);
  draw_rect(attacked_overlay, noise_box.x0, noise_box.y0, noise_box.x1,
            noise_box.y1, kNoiseBoxColor, 1);
  write_ppm(dir / "attacked_overlay.ppm", attacked_overlay);
  write_ppm(dir / "perturbed.ppm", perturbed);

  // prototype source visualization from its push provenance
  if (model.provenance[prototype].filled &&
      model.provenance[prototype].image_index < ds.train.size()) {
    const auto& prov = model.provenance[prototype];
    Tensor src = ds.train[prov.image_index].image;
    const auto [y0, y1] =
        receptive_interval(static_cast<long>(prov.cell.i),
                           static_cast<long>(prov.cell.i),
                           model.config.image_h);
    const auto [x0, x1] =
        receptive_interval(static_cast<long>(prov.cell.j),
                           static_cast<long>(prov.cell.j),
                           model.config.image_w);
    draw_rect(src, static_cast<std::size_t>(x0), static_cast<std::size_t>(y0),
              static_cast<std::size_t>(x1), static_cast<std::size_t>(y1),
              kActivationBoxColor);
    write_ppm(dir / "source_prototype.ppm", src);
    manifest.outputs.push_back((dir / "source_prototype.ppm").string());
  }

  PrototypeAttempt attempt;
  attempt.prototype = prototype;
  attempt.source = source;
  attempt.target = target;
  attempt.result = result;
  nlohmann::json record = attack_attempt_json(
      attempt, cfg, target_image->id, target_image->label,
      model.proto_class[prototype]);
  record["activation_box_before"] = {clean_heat.box.x0, clean_heat.box.y0,
                                     clean_heat.box.x1, clean_heat.box.y1};
  record["activation_box_after"] = {attacked_heat.box.x0, attacked_heat.box.y0,
                                    attacked_heat.box.x1, attacked_heat.box.y1};
  record["noise_box"] = {noise_box.x0, noise_box.y0, noise_box.x1,
                         noise_box.y1};
  {
    std::ofstream out(dir / "attack.json");
    out << record.dump(2) << "\n";
  }
  for (const char* f :
       {"attack.json", "clean_overlay.ppm", "attacked_overlay.ppm",
        "perturbed.ppm"})
    manifest.outputs.push_back((dir / f).string());
  finalize_manifest(manifest, dir);
  std::cout << "attack: prototype " << prototype << " success="
            << (result.success ? "true" : "false") << " objective "
            << result.objective_start << " -> " << result.objective_best
            << "\n";
  return 0;
}

// ---- susceptibility ----

struct SusceptibilityOpts {
  std::string data, out;
  std::vector<std::string> checkpoints;
  SusceptibilityConfig config;
  bool adv_eval = true;
};

int cmd_susceptibility(const SusceptibilityOpts& opt) {
  RunManifest manifest;
  manifest.command = "susceptibility";
  manifest.seed = opt.config.seed;
  manifest.config = {{"data", opt.data},
                     {"checkpoints", opt.checkpoints},
                     {"n_images", opt.config.n_images},
                     {"top_k", opt.config.top_k},
                     {"iterations", opt.config.attack.iterations},
                     {"budget", opt.config.attack.budget},
                     {"step", opt.config.attack.step},
                     {"adv_eval", opt.adv_eval},
                     {"seed", opt.config.seed}};
  Dataset ds = load_dataset(opt.data);
  const fs::path dir(opt.out);
  fs::create_directories(dir);
  std::ofstream csv(dir / "susceptibility.csv");
  csv << "checkpoint,regime,n_images,clean_accuracy,adversarial_accuracy,"
         "success_rate,successful_still_correct\n";
  manifest.outputs.push_back((dir / "susceptibility.csv").string());

  for (const std::string& path : opt.checkpoints) {
    Model model = load_model(path);
    const nlohmann::json side = read_sidecar(path);
    const std::string regime = side.value("regime", "unknown");
    const double clean = evaluate_accuracy(model, ds.test);
    double adv_acc = std::numeric_limits<double>::quiet_NaN();
    if (opt.adv_eval) {
      PgdEvalConfig pgd;
      adv_acc = evaluate_accuracy(model, ds.test, &pgd);
    }
    SusceptibilityResult result =
        susceptibility_rate(model, ds.test, opt.config);
    std::size_t still_correct = 0;
    for (const auto& rec : result.records)
      if (rec.success &&
          rec.attempts.back().result.pred_after == rec.label)
        ++still_correct;
    const double still_fraction =
        result.successes == 0
            ? 1.0
            : static_cast<double>(still_correct) /
                  static_cast<double>(result.successes);
    const fs::path records =
        dir / (fs::path(path).stem().string() + "_" + regime +
               "_records.jsonl");
    std::ofstream clear(records, std::ios::trunc);
    clear.close();
    append_attack_records(records, result, opt.config.attack, model);
    manifest.outputs.push_back(records.string());
    csv << path << "," << regime << "," << result.n_images << ","
        << fmt_double(clean) << "," << fmt_double(adv_acc) << ","
        << fmt_double(result.rate) << "," << fmt_double(still_fraction)
        << "\n";
    std::cout << "susceptibility: " << path << " (" << regime << ") rate "
              << result.rate << " over " << result.n_images
              << " images, clean acc " << clean << "\n";
  }
  finalize_manifest(manifest, dir);
  return 0;
}

// ---- jpeg-exp ----

struct JpegExpOpts {
  std::string checkpoint, data, corrupted_classes, out;
  CodecConfig codec;
  std::size_t top_n = 75;
  std::size_t histogram_images = 3;
};

int cmd_jpeg_exp(const JpegExpOpts& opt) {
  RunManifest manifest;
  manifest.command = "jpeg-exp";
  manifest.config = {{"checkpoint", opt.checkpoint},
                     {"data", opt.data},
                     {"corrupted_classes", opt.corrupted_classes},
                     {"quality", opt.codec.quality},
                     {"chroma_subsampling", opt.codec.chroma_subsampling},
                     {"top_n", opt.top_n},
                     {"histogram_images", opt.histogram_images}};
  Model model = load_model(opt.checkpoint);
  Dataset ds = load_dataset(opt.data);

  std::vector<std::size_t> corrupted;
  {
    std::ifstream in(opt.corrupted_classes);
    PROTOLAB_REQUIRE(in.good(), "cannot open corrupted-class list ",
                     opt.corrupted_classes);
    std::size_t c;
    while (in >> c) corrupted.push_back(c);
  }
  for (std::size_t c : corrupted)
    if (c >= ds.classes)
      throw ArtifactMismatchError(detail::cat(
          "corrupted class ", c, " out of range for dataset with ",
          ds.classes, " classes"));
  const nlohmann::json side = read_sidecar(opt.checkpoint);
  if (side.contains("corrupted_classes")) {
    const auto trained =
        side["corrupted_classes"].get<std::vector<std::size_t>>();
    if (trained != corrupted)
      throw ArtifactMismatchError(
          "corrupted-class list does not match the checkpoint's training run");
  }

  const fs::path dir(opt.out);
  fs::create_directories(dir);
  auto records = consistency_experiment(model, ds.test, corrupted, opt.codec);
  write_consistency_csv(dir / "consistency.csv", records);
  manifest.outputs.push_back((dir / "consistency.csv").string());
  const ConsistencySummary summary = summarize_consistency(records);

  nlohmann::json sj = {{"eligible", summary.eligible},
                       {"median_relative_drop", summary.median_relative_drop},
                       {"top1_change_fraction", summary.top1_change_fraction}};
  {
    std::ofstream out(dir / "summary.json");
    out << sj.dump(2) << "\n";
  }
  manifest.outputs.push_back((dir / "summary.json").string());

  const std::size_t hist_count =
      std::min<std::size_t>(opt.histogram_images, records.size());
  for (std::size_t k = 0; k < hist_count; ++k) {
    const auto& rec = records[k];
    const LabeledImage* li = nullptr;
    for (const auto& cand : ds.test)
      if (cand.id == rec.image_id) li = &cand;
    if (!li) continue;
    const Tensor compressed =
        quantize8(compress_decompress(li->image, opt.codec));
    HistogramData hist =
        top_similarity_histogram(model, compressed, li->image, opt.top_n);
    const std::string base = "histogram_" + rec.image_id;
    write_histogram_svg(dir / (base + ".svg"), hist,
                        "paired similarity scores, image " + rec.image_id,
                        model.config.max_similarity());
    write_histogram_csv(dir / (base + ".csv"), hist);
    manifest.outputs.push_back((dir / (base + ".svg")).string());
    manifest.outputs.push_back((dir / (base + ".csv")).string());
  }
  finalize_manifest(manifest, dir);
  std::cout << "jpeg-exp: " << summary.eligible
            << " eligible images, median relative drop "
            << summary.median_relative_drop << ", top-1 change fraction "
            << summary.top1_change_fraction << "\n";
  return 0;
}

// ---- gradcheck ----

struct GradcheckOpts {
  std::uint64_t seed = 7;
  std::size_t instances = 10;
  bool inject_fault = false;
};

int cmd_gradcheck(const GradcheckOpts& opt) {
  const auto checks =
      run_gradcheck_suite(opt.seed, opt.instances, opt.inject_fault);
  std::cout << "primitive                          max_error    tolerance  "
               "status\n";
  for (const auto& c : checks) {
    std::printf("%-34s %11.3e %11.1e  %s\n", c.name.c_str(), c.max_error,
                c.tolerance, c.pass ? "PASS" : "FAIL");
  }
  if (!gradcheck_all_pass(checks)) {
    std::cout << "gradcheck: FAIL\n";
    return 1;
  }
  std::cout << "gradcheck: all " << checks.size() << " checks passed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prototype-similarity lab: data synthesis, training, "
               "location-shift attacks and compression experiments"};
  app.require_subcommand(1);

  GenDataOpts gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--classes", gen.synth.classes, "number of classes");
  gen_cmd->add_option("--train-per-class", gen.synth.train_per_class,
                      "training images per class");
  gen_cmd->add_option("--test-per-class", gen.synth.test_per_class,
                      "test images per class");
  gen_cmd->add_option("--image-size", gen.synth.image_h,
                      "square image extent");
  gen_cmd->add_option("--seed", gen.synth.seed, "master seed");

  CorruptOpts corrupt;
  auto* corrupt_cmd = app.add_subcommand(
      "corrupt-data", "compress a random class subset of a dataset");
  corrupt_cmd->add_option("--data", corrupt.data, "clean dataset directory")
      ->required();
  corrupt_cmd->add_option("--out", corrupt.out, "output directory")
      ->required();
  corrupt_cmd->add_option("--fraction", corrupt.fraction,
                          "fraction of classes to corrupt");
  corrupt_cmd->add_option("--quality", corrupt.quality, "codec quality");
  corrupt_cmd->add_option("--seed", corrupt.seed, "class selection seed");

  TrainOpts train;
  auto* train_cmd = app.add_subcommand("train", "run the training schedule");
  train_cmd->add_option("--data", train.data, "dataset directory")->required();
  train_cmd->add_option("--out", train.out, "output directory")->required();
  train_cmd->add_option("--regime", train.regime,
                        "standard | adv | jpeg-aug");
  train_cmd->add_option("--seed", train.train.seed, "master seed");
  train_cmd->add_option("--warmup-epochs", train.train.warmup_epochs, "");
  train_cmd->add_option("--joint-epochs", train.train.joint_epochs, "");
  train_cmd->add_option("--last-layer-iters", train.train.last_layer_iters,
                        "");
  train_cmd->add_option("--batch-size", train.train.batch_size, "");
  train_cmd->add_option("--lr-warmup", train.train.lr_warmup, "");
  train_cmd->add_option("--lr-joint-backbone", train.train.lr_joint_backbone,
                        "");
  train_cmd->add_option("--lr-joint-prototypes",
                        train.train.lr_joint_prototypes, "");
  train_cmd->add_option("--lr-last-layer", train.train.lr_last_layer, "");
  train_cmd->add_option("--lambda-cluster", train.train.lambda_cluster, "");
  train_cmd->add_option("--lambda-separation", train.train.lambda_separation,
                        "");
  train_cmd->add_option("--lambda-l1", train.train.lambda_l1, "");
  train_cmd->add_option("--flip-prob", train.augment.horizontal_flip_prob,
                        "");
  train_cmd->add_option("--rotation-deg", train.augment.rotation_deg, "");
  train_cmd->add_option("--jpeg-aug-prob", train.augment.jpeg_prob, "");
  train_cmd->add_option("--jpeg-aug-quality", train.augment.jpeg_quality, "");
  train_cmd->add_option("--adv-step", train.adv.step, "FGSM step");
  train_cmd->add_option("--adv-budget", train.adv.budget, "FGSM budget");
  train_cmd->add_option("--adv-epochs", train.adv.epochs,
                        "total epochs for the adversarial regime");
  train_cmd->add_option("--prototypes-per-class", train.protos_per_class, "");
  train_cmd->add_option("--epsilon-stab", train.epsilon, "");
  train_cmd->add_option("--distance-mode", train.distance_mode,
                        "squared | euclidean");

  AttackOpts attack;
  auto* attack_cmd =
      app.add_subcommand("attack", "run one location-shift attack");
  attack_cmd->add_option("--checkpoint", attack.checkpoint, "")->required();
  attack_cmd->add_option("--data", attack.data, "")->required();
  attack_cmd->add_option("--out", attack.out, "")->required();
  attack_cmd->add_option("--image-id", attack.image_id, "")->required();
  attack_cmd->add_option("--prototype", attack.prototype,
                         "prototype id (default: most activated)");
  attack_cmd->add_option("--iterations", attack.attack.iterations, "");
  attack_cmd->add_option("--budget", attack.attack.budget, "L-inf budget");
  attack_cmd->add_option("--step", attack.attack.step, "");
  attack_cmd->add_option("--mask", attack.mask_mode,
                         "receptive_field | full_image");
  attack_cmd->add_option("--rule", attack.rule, "argmax_ties | top_n");
  attack_cmd->add_option("--top-n", attack.attack.top_n, "");
  attack_cmd->add_option("--target-cells", attack.target_cells,
                         "i,j;i,j (default: complement of the source)");

  SusceptibilityOpts susc;
  auto* susc_cmd = app.add_subcommand(
      "susceptibility", "success rate of the location-shift attack");
  susc_cmd->add_option("--data", susc.data, "")->required();
  susc_cmd->add_option("--out", susc.out, "")->required();
  susc_cmd->add_option("--checkpoint", susc.checkpoints,
                       "checkpoint file (repeatable)");
  susc_cmd->add_option("--n-images", susc.config.n_images, "");
  susc_cmd->add_option("--k", susc.config.top_k, "top prototypes per image");
  susc_cmd->add_option("--iterations", susc.config.attack.iterations, "");
  susc_cmd->add_option("--budget", susc.config.attack.budget, "");
  susc_cmd->add_option("--step", susc.config.attack.step, "");
  susc_cmd->add_option("--seed", susc.config.seed, "");
  susc_cmd->add_flag("!--no-adv-eval", susc.adv_eval,
                     "skip the PGD adversarial-accuracy column");

  JpegExpOpts jpeg;
  auto* jpeg_cmd = app.add_subcommand(
      "jpeg-exp", "compression-consistency experiment and histograms");
  jpeg_cmd->add_option("--checkpoint", jpeg.checkpoint, "")->required();
  jpeg_cmd->add_option("--data", jpeg.data, "clean dataset directory")
      ->required();
  jpeg_cmd->add_option("--corrupted-classes", jpeg.corrupted_classes,
                       "class list file from corrupt-data")
      ->required();
  jpeg_cmd->add_option("--out", jpeg.out, "")->required();
  jpeg_cmd->add_option("--quality", jpeg.codec.quality, "");
  jpeg_cmd->add_flag("!--no-chroma-subsampling",
                     jpeg.codec.chroma_subsampling, "");
  jpeg_cmd->add_option("--n", jpeg.top_n, "prototypes per histogram");
  jpeg_cmd->add_option("--histogram-images", jpeg.histogram_images,
                       "eligible images to chart");

  GradcheckOpts grad;
  auto* grad_cmd = app.add_subcommand(
      "gradcheck", "finite-difference checks for every primitive");
  grad_cmd->add_option("--seed", grad.seed, "");
  grad_cmd->add_option("--instances", grad.instances, "");
  grad_cmd->add_flag("--inject-fault", grad.inject_fault,
                     "corrupt one gradient to exercise failure reporting");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*corrupt_cmd) return cmd_corrupt_data(corrupt);
    if (*train_cmd) return cmd_train(train);
    if (*attack_cmd) return cmd_attack(attack);
    if (*susc_cmd) return cmd_susceptibility(susc);
    if (*jpeg_cmd) return cmd_jpeg_exp(jpeg);
    if (*grad_cmd) return cmd_gradcheck(grad);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ProtocolError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const ArtifactMismatchError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
