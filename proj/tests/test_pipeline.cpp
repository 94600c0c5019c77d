#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "maskadapter/pipeline.hpp"

using namespace maskadapter;

namespace {

Matrix random_probs(int rows, int cols, std::uint64_t seed) {
  Matrix m(rows, cols);
  Rng rng(seed);
  for (int i = 0; i < rows; ++i) {
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      m.at(i, j) = rng.uniform() + 1e-3;
      sum += m.at(i, j);
    }
    for (int j = 0; j < cols; ++j) m.at(i, j) /= sum;
  }
  return m;
}

TrainConfig tiny_config(Stage stage, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.epochs = stage == Stage::warmup ? 8 : 5;
  cfg.batch_scenes = 2;
  cfg.learning_rate = 0.05;
  cfg.seed = seed;
  cfg.maps = 4;
  cfg.world.categories = 8;
  cfg.world.channels = 16;
  cfg.world.height = 32;
  cfg.world.width = 32;
  cfg.world.regions_min = 2;
  cfg.world.regions_max = 3;
  return cfg;
}

CategoryBank bank_for(const TrainConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return make_category_bank(cfg.world.categories, cfg.world.channels, cfg.world.seen_fraction,
                            rng);
}

}  // namespace

TEST_CASE("geometric_ensemble matches direct elementwise computation") {
  const Matrix y_in = random_probs(4, 6, 1);
  const Matrix y_out = random_probs(4, 6, 2);
  EnsembleConfig cfg;
  cfg.alpha = 0.7;
  cfg.beta = 0.9;
  cfg.seen_flags = {1, 1, 1, 0, 0, 1};
  const Matrix fused = geometric_ensemble(y_in, y_out, cfg);
  for (int i = 0; i < 4; ++i) {
    double sum = 0.0;
    std::vector<double> direct(6);
    for (int j = 0; j < 6; ++j) {
      const double w = cfg.seen_flags[j] ? cfg.alpha : cfg.beta;
      direct[j] = std::pow(y_in.at(i, j), 1.0 - w) * std::pow(y_out.at(i, j), w);
      sum += direct[j];
    }
    for (int j = 0; j < 6; ++j)
      REQUIRE(fused.at(i, j) == Catch::Approx(direct[j] / sum).margin(1e-9));
  }
}

TEST_CASE("geometric_ensemble endpoint weights reduce to one branch") {
  const Matrix y_in = random_probs(3, 5, 3);
  const Matrix y_out = random_probs(3, 5, 4);
  EnsembleConfig zero{0.0, 0.0, std::vector<std::uint8_t>{1, 0, 1, 0, 1}};
  const Matrix a = geometric_ensemble(y_in, y_out, zero);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) REQUIRE(a.at(i, j) == Catch::Approx(y_in.at(i, j)).margin(1e-12));
  EnsembleConfig one{1.0, 1.0, std::vector<std::uint8_t>{1, 0, 1, 0, 1}};
  const Matrix b = geometric_ensemble(y_in, y_out, one);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) REQUIRE(b.at(i, j) == Catch::Approx(y_out.at(i, j)).margin(1e-12));
}

TEST_CASE("geometric_ensemble swap symmetry of the weighted mean") {
  const Matrix y_in = random_probs(5, 4, 5);
  const Matrix y_out = random_probs(5, 4, 6);
  const std::vector<std::uint8_t> flags{1, 1, 0, 0};
  const Matrix fwd = geometric_ensemble(y_in, y_out, {0.3, 0.3, flags});
  const Matrix swapped = geometric_ensemble(y_out, y_in, {0.7, 0.7, flags});
  for (int i = 0; i < 5; ++i)
    REQUIRE(argmax_row(fwd.row(i)) == argmax_row(swapped.row(i)));
}

TEST_CASE("geometric_ensemble rejects negative probabilities") {
  Matrix y_in = random_probs(1, 3, 7);
  Matrix y_out = random_probs(1, 3, 8);
  y_in.at(0, 1) = -0.1;
  CHECK_THROWS_AS(geometric_ensemble(y_in, y_out, {0.5, 0.5, {1, 0, 1}}),
                  std::invalid_argument);
}

TEST_CASE("semantic_inference basic assembly") {
  BinaryMaskBatch masks(1, 4, 4);
  for (auto& px : masks.data) px = 1;
  Matrix scores(1, 5);
  scores.at(0, 3) = 1.0;
  const auto labels = semantic_inference(masks, scores);
  for (int v : labels) CHECK(v == 3);
}

TEST_CASE("semantic_inference two disjoint masks") {
  BinaryMaskBatch masks(2, 4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 2; ++x) masks.at(0, y, x) = 1;
  for (int y = 0; y < 4; ++y)
    for (int x = 2; x < 4; ++x) masks.at(1, y, x) = 1;
  Matrix scores(2, 4);
  scores.at(0, 1) = 0.9;
  scores.at(1, 2) = 0.8;
  const auto labels = semantic_inference(masks, scores);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) CHECK(labels[y * 4 + x] == (x < 2 ? 1 : 2));
}

TEST_CASE("semantic_inference overlapping masks match a per-pixel loop oracle") {
  Rng rng(9);
  BinaryMaskBatch masks(3, 4, 4);
  for (auto& px : masks.data) px = rng.uniform() < 0.55 ? 1 : 0;
  Matrix scores(3, 4);
  for (auto& v : scores.data) v = rng.uniform();
  const auto labels = semantic_inference(masks, scores);
  for (int px = 0; px < 16; ++px) {
    std::vector<double> acc(4, 0.0);
    bool covered = false;
    for (int n = 0; n < 3; ++n)
      if (masks.data[n * 16 + px]) {
        covered = true;
        for (int c = 0; c < 4; ++c) acc[c] += scores.at(n, c);
      }
    int expected = kVoidLabel;
    if (covered) {
      expected = 0;
      for (int c = 1; c < 4; ++c)
        if (acc[c] > acc[expected]) expected = c;
    }
    REQUIRE(labels[px] == expected);
  }
}

TEST_CASE("semantic_inference leaves uncovered pixels void and breaks ties low") {
  BinaryMaskBatch masks(2, 2, 2);
  masks.at(0, 0, 0) = 1;
  masks.at(1, 0, 0) = 1;  // overlapping; identical scores -> tie
  Matrix scores(2, 3);
  scores.at(0, 2) = 0.5;
  scores.at(1, 1) = 0.5;  // pixel (0,0): class1 = 0.5, class2 = 0.5 -> tie -> 1
  const auto labels = semantic_inference(masks, scores);
  CHECK(labels[0] == 1);
  CHECK(labels[1] == kVoidLabel);
  CHECK(labels[2] == kVoidLabel);
  CHECK(labels[3] == kVoidLabel);
}

TEST_CASE("train_warmup reduces the classification loss on a tiny world") {
  const TrainConfig cfg = tiny_config(Stage::warmup, 11);
  const CategoryBank bank = bank_for(cfg, 11);
  Rng prng(12);
  AdapterParams params = init_params(cfg.world.channels, cfg.maps, prng);
  auto [trained, log] = train_warmup(cfg, bank, std::move(params));
  REQUIRE(log.size() == static_cast<std::size_t>(cfg.epochs));
  CHECK(log.back().ce < log.front().ce);
}

TEST_CASE("train_warmup with zero learning rate keeps params bit-identical") {
  TrainConfig cfg = tiny_config(Stage::warmup, 13);
  cfg.learning_rate = 0.0;
  cfg.epochs = 3;
  const CategoryBank bank = bank_for(cfg, 13);
  Rng prng(14);
  const AdapterParams params = init_params(cfg.world.channels, cfg.maps, prng);
  AdapterParams copy = params;
  auto [trained, log] = train_warmup(cfg, bank, std::move(copy));
  auto ra = tensor_refs(const_cast<AdapterParams&>(params));
  auto rb = tensor_refs(trained);
  for (std::size_t t = 0; t < ra.size(); ++t) REQUIRE(*ra[t].data == *rb[t].data);
}

TEST_CASE("training is deterministic per seed") {
  const TrainConfig cfg = tiny_config(Stage::warmup, 15);
  const CategoryBank bank = bank_for(cfg, 15);
  Rng a(16), b(16);
  auto [pa, la] = train_warmup(cfg, bank, init_params(cfg.world.channels, cfg.maps, a));
  auto [pb, lb] = train_warmup(cfg, bank, init_params(cfg.world.channels, cfg.maps, b));
  REQUIRE(la.size() == lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    REQUIRE(la[i].total == lb[i].total);
    REQUIRE(la[i].ce == lb[i].ce);
  }
  auto ra = tensor_refs(pa);
  auto rb = tensor_refs(pb);
  for (std::size_t t = 0; t < ra.size(); ++t) REQUIRE(*ra[t].data == *rb[t].data);
}

TEST_CASE("train_mixed with perturb target 1.0 keeps consistency loss near zero") {
  TrainConfig cfg = tiny_config(Stage::mixed, 17);
  cfg.perturb_iou_targets = {1.0};  // predicted masks equal GT
  cfg.epochs = 3;
  const CategoryBank bank = bank_for(cfg, 17);
  Rng prng(18);
  AdapterParams params = init_params(cfg.world.channels, cfg.maps, prng);
  auto [trained, log] = train_mixed(cfg, bank, std::move(params));
  for (const StepLog& s : log) {
    REQUIRE(s.n_matches > 0);
    REQUIRE(s.cos == Catch::Approx(0.0).margin(1e-9));
  }
}

TEST_CASE("train_mixed runs with both matchers under identical seeds") {
  TrainConfig cfg = tiny_config(Stage::mixed, 19);
  cfg.epochs = 3;
  const CategoryBank bank = bank_for(cfg, 19);
  Rng a(20), b(20);
  cfg.matcher = MatcherKind::iou;
  auto [p_iou, log_iou] = train_mixed(cfg, bank, init_params(cfg.world.channels, cfg.maps, a));
  cfg.matcher = MatcherKind::hungarian;
  auto [p_hun, log_hun] =
      train_mixed(cfg, bank, init_params(cfg.world.channels, cfg.maps, b));
  CHECK(log_iou.size() == log_hun.size());
}

TEST_CASE("stage composition: warmup then mixed on the default-shaped config") {
  TrainConfig warm = tiny_config(Stage::warmup, 21);
  TrainConfig mixed = tiny_config(Stage::mixed, 21);
  const CategoryBank bank = bank_for(warm, 21);
  Rng prng(22);
  auto [after_warm, wlog] =
      train_warmup(warm, bank, init_params(warm.world.channels, warm.maps, prng));
  auto [after_mixed, mlog] = train_mixed(mixed, bank, std::move(after_warm));
  CHECK(mlog.size() == static_cast<std::size_t>(mixed.epochs));
}

TEST_CASE("stage guards reject mismatched configs") {
  const TrainConfig warm = tiny_config(Stage::warmup, 23);
  const TrainConfig mixed = tiny_config(Stage::mixed, 23);
  const CategoryBank bank = bank_for(warm, 23);
  Rng prng(24);
  AdapterParams params = init_params(warm.world.channels, warm.maps, prng);
  CHECK_THROWS_AS(train_warmup(mixed, bank, params), std::invalid_argument);
  CHECK_THROWS_AS(train_mixed(warm, bank, params), std::invalid_argument);
}

TEST_CASE("lr schedule applies multi-step decay at the milestone fractions") {
  TrainConfig cfg;
  cfg.epochs = 100;
  cfg.learning_rate = 1.0;
  cfg.lr_milestones = {0.9, 0.95};
  cfg.lr_decay = 0.1;
  CHECK(lr_at_step(cfg, 0) == 1.0);
  CHECK(lr_at_step(cfg, 89) == 1.0);
  CHECK(lr_at_step(cfg, 90) == Catch::Approx(0.1));
  CHECK(lr_at_step(cfg, 95) == Catch::Approx(0.01));
  CHECK(lr_at_step(cfg, 99) == Catch::Approx(0.01));
}

TEST_CASE("zero-noise evaluation with mask pooling is perfect") {
  WorldConfig world;
  world.categories = 8;
  world.channels = 16;
  world.height = 32;
  world.width = 32;
  world.noise_sigma = 0.0;
  world.regions_min = 2;
  world.regions_max = 4;
  Rng rng(25);
  const CategoryBank bank =
      make_category_bank(world.categories, world.channels, world.seen_fraction, rng);
  const std::vector<Scene> scenes = make_eval_scenes(bank, world, 6, 26);
  EvalOptions opts;
  opts.perturb_targets = {1.0};  // keep masks exact so the maps reconstruct fully
  const EvalReport report = evaluate(scenes, nullptr, bank, Extractor::pool, std::nullopt, opts);
  CHECK(report.mask_acc == 1.0);
  CHECK(report.miou == 1.0);
}

TEST_CASE("evaluate confusion equals a per-pixel loop oracle") {
  WorldConfig world;
  world.categories = 6;
  world.channels = 16;
  world.height = 32;
  world.width = 32;
  world.noise_sigma = 0.4;
  world.regions_min = 2;
  world.regions_max = 3;
  Rng rng(27);
  const CategoryBank bank =
      make_category_bank(world.categories, world.channels, world.seen_fraction, rng);
  const std::vector<Scene> scenes = make_eval_scenes(bank, world, 3, 28);
  EvalOptions opts;
  opts.seed = 29;

  const EvalReport report = evaluate(scenes, nullptr, bank, Extractor::pool, std::nullopt, opts);

  // Oracle: replay the same per-scene pipeline sequentially and accumulate
  // the confusion matrix with explicit loops.
  const int L = bank.size();
  std::vector<long> confusion(static_cast<std::size_t>(L) * L, 0);
  for (int si = 0; si < static_cast<int>(scenes.size()); ++si) {
    const Scene& scene = scenes[si];
    Rng scene_rng(Rng::mix(opts.seed, static_cast<std::uint64_t>(si)));
    BinaryMaskBatch pred_masks(0, scene.height, scene.width);
    for (int i = 0; i < scene.gt_masks.count; ++i) {
      const double target =
          opts.perturb_targets[scene_rng.uniform_int(static_cast<int>(opts.perturb_targets.size()))];
      pred_masks.append(perturb_mask(scene.gt_masks.mask(i), target, scene_rng).view());
    }
    const EmbeddingBatch e = mask_pool(downsample_masks(pred_masks, kFeatureStride), scene.features);
    const Matrix scores = classify(e, bank, opts.logit_scale);
    const auto labels = semantic_inference(pred_masks, scores);
    for (std::size_t px = 0; px < labels.size(); ++px) {
      if (labels[px] == kVoidLabel) continue;
      ++confusion[static_cast<std::size_t>(scene.label_map[px]) * L + labels[px]];
    }
  }
  double sum_iou = 0.0;
  int present = 0;
  for (int c = 0; c < L; ++c) {
    long row = 0, col = 0;
    for (int j = 0; j < L; ++j) {
      row += confusion[static_cast<std::size_t>(c) * L + j];
      col += confusion[static_cast<std::size_t>(j) * L + c];
    }
    if (row == 0) {
      REQUIRE(report.per_class_iou[c] == kAbsentClass);
      continue;
    }
    const long tp = confusion[static_cast<std::size_t>(c) * L + c];
    const double iou_c = static_cast<double>(tp) / (row + col - tp);
    REQUIRE(report.per_class_iou[c] == Catch::Approx(iou_c).margin(1e-12));
    sum_iou += iou_c;
    ++present;
  }
  REQUIRE(report.miou == Catch::Approx(sum_iou / present).margin(1e-12));
}

TEST_CASE("evaluate miou satisfies the count-weighted split identity") {
  WorldConfig world;
  world.categories = 9;
  world.channels = 16;
  world.height = 32;
  world.width = 32;
  world.regions_min = 2;
  world.regions_max = 4;
  Rng rng(30);
  const CategoryBank bank =
      make_category_bank(world.categories, world.channels, world.seen_fraction, rng);
  const std::vector<Scene> scenes = make_eval_scenes(bank, world, 8, 31);
  const EvalReport report = evaluate(scenes, nullptr, bank, Extractor::pool);
  int n_seen = 0, n_unseen = 0;
  for (int c = 0; c < bank.size(); ++c) {
    if (report.per_class_iou[c] == kAbsentClass) continue;
    if (bank.seen_flags[c])
      ++n_seen;
    else
      ++n_unseen;
  }
  REQUIRE(n_seen + n_unseen > 0);
  const double weighted =
      (n_seen * report.miou_seen + n_unseen * report.miou_unseen) / (n_seen + n_unseen);
  REQUIRE(report.miou == Catch::Approx(weighted).margin(1e-9));
}

TEST_CASE("evaluate is independent of the thread count") {
  WorldConfig world;
  world.categories = 6;
  world.channels = 16;
  world.height = 32;
  world.width = 32;
  world.regions_min = 2;
  world.regions_max = 3;
  Rng rng(32);
  const CategoryBank bank =
      make_category_bank(world.categories, world.channels, world.seen_fraction, rng);
  const std::vector<Scene> scenes = make_eval_scenes(bank, world, 6, 33);
  EvalOptions serial;
  serial.max_threads = 1;
  EvalOptions parallel;
  parallel.max_threads = 4;
  const EvalReport a = evaluate(scenes, nullptr, bank, Extractor::pool, std::nullopt, serial);
  const EvalReport b = evaluate(scenes, nullptr, bank, Extractor::pool, std::nullopt, parallel);
  CHECK(a.mask_acc == b.mask_acc);
  CHECK(a.miou == b.miou);
  CHECK(a.per_class_iou == b.per_class_iou);
}

TEST_CASE("evaluate requires params for the adapter extractor") {
  WorldConfig world;
  world.categories = 6;
  world.channels = 16;
  world.height = 32;
  world.width = 32;
  Rng rng(34);
  const CategoryBank bank =
      make_category_bank(world.categories, world.channels, world.seen_fraction, rng);
  const std::vector<Scene> scenes = make_eval_scenes(bank, world, 1, 35);
  CHECK_THROWS_AS(evaluate(scenes, nullptr, bank, Extractor::adapter), std::invalid_argument);
  CHECK_THROWS_AS(evaluate({}, nullptr, bank, Extractor::pool), std::invalid_argument);
}

TEST_CASE("evaluate with a one-hot in-vocabulary ensemble lifts accuracy") {
  WorldConfig world;
  world.categories = 8;
  world.channels = 16;
  world.height = 32;
  world.width = 32;
  world.noise_sigma = 1.2;  // make the base classifier imperfect
  world.regions_min = 2;
  world.regions_max = 3;
  Rng rng(36);
  const CategoryBank bank =
      make_category_bank(world.categories, world.channels, world.seen_fraction, rng);
  const std::vector<Scene> scenes = make_eval_scenes(bank, world, 10, 37);
  EvalOptions opts;
  opts.in_source = EnsembleInSource::onehot_gt;
  EnsembleConfig ens{0.1, 0.1, bank.seen_flags};  // lean hard on the one-hot branch
  const EvalReport base = evaluate(scenes, nullptr, bank, Extractor::pool, std::nullopt, opts);
  const EvalReport fused = evaluate(scenes, nullptr, bank, Extractor::pool, ens, opts);
  CHECK(fused.mask_acc >= base.mask_acc);
  CHECK(fused.mask_acc > 0.99);
}
