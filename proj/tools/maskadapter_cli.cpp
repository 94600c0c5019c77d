// Command-line front end: train / eval / visualize on the synthetic world.
//
// Exit codes: 0 success, 2 usage or config error, 3 numerical divergence.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "maskadapter/maskadapter.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace maskadapter;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

/// Config-file error with a "path:line: message" prefix where possible.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

int line_of_offset(const std::string& text, std::size_t offset) {
  int line = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

int line_of_key(const std::string& text, const std::string& key) {
  const auto pos = text.find("\"" + key + "\"");
  return pos == std::string::npos ? 1 : line_of_offset(text, pos);
}

/// Recursively rejects keys outside the declared schema.
void reject_unknown_keys(const json& node, const json& schema, const std::string& path,
                         const std::string& raw, const std::string& file) {
  if (!node.is_object()) return;
  for (const auto& [key, value] : node.items()) {
    if (!schema.contains(key))
      throw ConfigError(file + ":" + std::to_string(line_of_key(raw, key)) +
                        ": unknown config key '" + path + key + "'");
    if (value.is_object()) reject_unknown_keys(value, schema.at(key), path + key + ".", raw, file);
  }
}

json config_schema() {
  const json stage_schema = {{"epochs", true},
                             {"batch_scenes", true},
                             {"learning_rate", true},
                             {"weight_decay", true},
                             {"lr_milestones", true},
                             {"lr_decay", true},
                             {"iou_threshold", true},
                             {"lambda_ce", true},
                             {"lambda_cos", true},
                             {"perturb_iou_targets", true},
                             {"mix_ratio", true},
                             {"matcher", true}};
  return {{"seed", true},
          {"world",
           {{"categories", true},
            {"channels", true},
            {"height", true},
            {"width", true},
            {"seen_fraction", true},
            {"noise_sigma", true},
            {"regions_min", true},
            {"regions_max", true},
            {"logit_scale", true}}},
          {"adapter", {{"maps", true}}},
          {"warmup", stage_schema},
          {"mixed", stage_schema},
          {"eval",
           {{"scenes", true},
            {"perturb_iou_targets", true},
            {"seed", true}}}};
}

struct AppConfig {
  std::uint64_t seed = 0;
  WorldConfig world;
  int maps = 16;
  TrainConfig warmup;
  TrainConfig mixed;
  int eval_scenes = 96;
  std::vector<double> eval_perturb_targets{0.7, 0.8, 0.9};
  std::uint64_t eval_seed = 0x45564143;
};

template <typename T>
void load_field(const json& node, const char* key, T& out) {
  if (node.contains(key)) out = node.at(key).get<T>();
}

void load_stage(const json& node, TrainConfig& cfg) {
  load_field(node, "epochs", cfg.epochs);
  load_field(node, "batch_scenes", cfg.batch_scenes);
  load_field(node, "learning_rate", cfg.learning_rate);
  load_field(node, "weight_decay", cfg.weight_decay);
  load_field(node, "lr_milestones", cfg.lr_milestones);
  load_field(node, "lr_decay", cfg.lr_decay);
  load_field(node, "iou_threshold", cfg.iou_threshold);
  load_field(node, "lambda_ce", cfg.lambda_ce);
  load_field(node, "lambda_cos", cfg.lambda_cos);
  load_field(node, "perturb_iou_targets", cfg.perturb_iou_targets);
  load_field(node, "mix_ratio", cfg.mix_ratio);
  if (node.contains("matcher")) {
    const std::string m = node.at("matcher").get<std::string>();
    if (m == "iou")
      cfg.matcher = MatcherKind::iou;
    else if (m == "hungarian")
      cfg.matcher = MatcherKind::hungarian;
    else
      throw ConfigError("matcher must be 'iou' or 'hungarian', got '" + m + "'");
  }
}

AppConfig parse_app_config(const json& root, const std::string& raw, const std::string& file) {
  reject_unknown_keys(root, config_schema(), "", raw, file);
  AppConfig cfg;
  load_field(root, "seed", cfg.seed);
  if (root.contains("world")) {
    const json& w = root.at("world");
    load_field(w, "categories", cfg.world.categories);
    load_field(w, "channels", cfg.world.channels);
    load_field(w, "height", cfg.world.height);
    load_field(w, "width", cfg.world.width);
    load_field(w, "seen_fraction", cfg.world.seen_fraction);
    load_field(w, "noise_sigma", cfg.world.noise_sigma);
    load_field(w, "regions_min", cfg.world.regions_min);
    load_field(w, "regions_max", cfg.world.regions_max);
    load_field(w, "logit_scale", cfg.world.logit_scale);
  }
  if (root.contains("adapter")) load_field(root.at("adapter"), "maps", cfg.maps);

  cfg.warmup.stage = Stage::warmup;
  cfg.warmup.epochs = 200;
  cfg.mixed.stage = Stage::mixed;
  cfg.mixed.epochs = 100;
  if (root.contains("warmup")) load_stage(root.at("warmup"), cfg.warmup);
  if (root.contains("mixed")) load_stage(root.at("mixed"), cfg.mixed);

  if (root.contains("eval")) {
    const json& e = root.at("eval");
    load_field(e, "scenes", cfg.eval_scenes);
    load_field(e, "perturb_iou_targets", cfg.eval_perturb_targets);
    load_field(e, "seed", cfg.eval_seed);
  }

  cfg.warmup.world = cfg.world;
  cfg.mixed.world = cfg.world;
  cfg.warmup.maps = cfg.maps;
  cfg.mixed.maps = cfg.maps;
  cfg.warmup.seed = cfg.seed;
  cfg.mixed.seed = cfg.seed;
  validate_train_config(cfg.warmup);
  validate_train_config(cfg.mixed);
  return cfg;
}

struct LoadedConfig {
  json root;
  std::string raw;
  std::string file;
};

LoadedConfig load_config_file(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError(path + ": config file not found");
  const std::string raw = io::read_file(path);
  try {
    return {json::parse(raw), raw, path};
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ":" + std::to_string(line_of_offset(raw, e.byte)) + ": " + e.what());
  }
}

json world_json(const WorldConfig& w, std::uint64_t bank_seed) {
  return {{"categories", w.categories}, {"channels", w.channels},
          {"height", w.height},         {"width", w.width},
          {"seen_fraction", w.seen_fraction}, {"noise_sigma", w.noise_sigma},
          {"regions_min", w.regions_min},     {"regions_max", w.regions_max},
          {"logit_scale", w.logit_scale},     {"bank_seed", bank_seed}};
}

WorldConfig world_from_json(const json& j, std::uint64_t& bank_seed) {
  WorldConfig w;
  load_field(j, "categories", w.categories);
  load_field(j, "channels", w.channels);
  load_field(j, "height", w.height);
  load_field(j, "width", w.width);
  load_field(j, "seen_fraction", w.seen_fraction);
  load_field(j, "noise_sigma", w.noise_sigma);
  load_field(j, "regions_min", w.regions_min);
  load_field(j, "regions_max", w.regions_max);
  load_field(j, "logit_scale", w.logit_scale);
  load_field(j, "bank_seed", bank_seed);
  return w;
}

std::uint64_t bank_seed_for(std::uint64_t seed) { return Rng::mix(seed, 0xBA); }

int run_single_train(const AppConfig& cfg, const fs::path& out_dir, const std::string& stage_flag,
                     const std::string& config_path) {
  fs::create_directories(out_dir);
  const std::uint64_t bank_seed = bank_seed_for(cfg.seed);
  Rng bank_rng(bank_seed);
  const CategoryBank bank =
      make_category_bank(cfg.world.categories, cfg.world.channels, cfg.world.seen_fraction,
                         bank_rng);
  Rng param_rng(Rng::mix(cfg.seed, 0x1417));
  AdapterParams params = init_params(cfg.world.channels, cfg.maps, param_rng);

  io::RunManifest manifest;
  manifest.command = "train";
  manifest.config_path = config_path;
  manifest.seed = cfg.seed;
  manifest.output_dir = out_dir.string();

  io::save_bank_json(out_dir / "bank.json", bank);
  manifest.add_file(out_dir, out_dir / "bank.json");

  const json world = world_json(cfg.world, bank_seed);
  const bool do_warmup = stage_flag == "both" || stage_flag == "warmup";
  const bool do_mixed = stage_flag == "both" || stage_flag == "mixed";

  if (do_warmup) {
    auto [trained, log] = train_warmup(cfg.warmup, bank, std::move(params));
    params = std::move(trained);
    io::save_checkpoint(out_dir / "warmup.ckpt", params,
                        {cfg.world.channels, cfg.maps, cfg.seed, "warmup", world});
    io::write_file(out_dir / "warmup_log.csv", io::train_log_csv(log));
    manifest.add_file(out_dir, out_dir / "warmup.ckpt");
    manifest.add_file(out_dir, out_dir / "warmup_log.csv");
  }
  if (do_mixed) {
    auto [trained, log] = train_mixed(cfg.mixed, bank, std::move(params));
    params = std::move(trained);
    io::save_checkpoint(out_dir / "mixed.ckpt", params,
                        {cfg.world.channels, cfg.maps, cfg.seed, "mixed", world});
    io::write_file(out_dir / "mixed_log.csv", io::train_log_csv(log));
    manifest.add_file(out_dir, out_dir / "mixed.ckpt");
    manifest.add_file(out_dir, out_dir / "mixed_log.csv");
  }

  io::write_file(out_dir / "manifest.json", manifest.to_json().dump(2) + "\n");
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& stage_flag, std::optional<std::uint64_t> seed_override) {
  const LoadedConfig loaded = load_config_file(config_path);

  // A sweep file holds a base config plus named patch entries.
  if (loaded.root.contains("sweep")) {
    json base = loaded.root.value("base", json::object());
    for (const json& entry : loaded.root.at("sweep")) {
      if (!entry.contains("name"))
        throw ConfigError(config_path + ": sweep entries need a 'name'");
      json merged = base;
      json patch = entry;
      patch.erase("name");
      merged.merge_patch(patch);
      AppConfig cfg = parse_app_config(merged, loaded.raw, config_path);
      if (seed_override) {
        cfg.seed = *seed_override;
        cfg.warmup.seed = *seed_override;
        cfg.mixed.seed = *seed_override;
      }
      const int rc = run_single_train(cfg, fs::path(out_dir) / entry.at("name").get<std::string>(),
                                      stage_flag, config_path);
      if (rc != kExitOk) return rc;
    }
    return kExitOk;
  }

  AppConfig cfg = parse_app_config(loaded.root, loaded.raw, config_path);
  if (seed_override) {
    cfg.seed = *seed_override;
    cfg.warmup.seed = *seed_override;
    cfg.mixed.seed = *seed_override;
  }
  return run_single_train(cfg, out_dir, stage_flag, config_path);
}

struct EnsembleFlag {
  double alpha = 0.7;
  double beta = 0.9;
};

EnsembleFlag parse_ensemble_tokens(const std::vector<std::string>& tokens) {
  EnsembleFlag flag;
  for (const std::string& tok : tokens) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--ensemble expects alpha=A beta=B, got '" + tok + "'");
    const std::string key = tok.substr(0, eq);
    const double value = std::stod(tok.substr(eq + 1));
    if (key == "alpha")
      flag.alpha = value;
    else if (key == "beta")
      flag.beta = value;
    else
      throw ConfigError("--ensemble expects alpha=A beta=B, got '" + tok + "'");
  }
  return flag;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             const std::string& extractor_flag, const std::vector<std::string>& ensemble_tokens,
             const std::string& out_dir) {
  if (!fs::exists(checkpoint_path))
    throw ConfigError(checkpoint_path + ": checkpoint not found");
  auto [params, meta] = io::load_checkpoint(checkpoint_path);

  const LoadedConfig loaded = load_config_file(config_path);
  const AppConfig cfg = parse_app_config(loaded.root, loaded.raw, config_path);

  // The world and bank come from the checkpoint so the evaluation matches
  // the vocabulary the adapter was trained against.
  std::uint64_t bank_seed = bank_seed_for(meta.seed);
  WorldConfig world = meta.world.is_null() ? cfg.world : world_from_json(meta.world, bank_seed);
  if (world.channels != params.channels)
    throw ConfigError(checkpoint_path + ": checkpoint channels do not match its world block");
  Rng bank_rng(bank_seed);
  const CategoryBank bank =
      make_category_bank(world.categories, world.channels, world.seen_fraction, bank_rng);

  const std::vector<Scene> scenes = make_eval_scenes(bank, world, cfg.eval_scenes, cfg.eval_seed);

  EvalOptions opts;
  opts.perturb_targets = cfg.eval_perturb_targets;
  opts.seed = cfg.eval_seed;
  opts.logit_scale = world.logit_scale;

  std::optional<EnsembleConfig> ensemble;
  if (!ensemble_tokens.empty()) {
    const EnsembleFlag flag = parse_ensemble_tokens(ensemble_tokens);
    ensemble = EnsembleConfig{flag.alpha, flag.beta, bank.seen_flags};
  }

  std::vector<std::pair<std::string, Extractor>> targets;
  if (extractor_flag == "all") {
    targets = {{"pool", Extractor::pool}, {"crop", Extractor::crop},
               {"adapter", Extractor::adapter}};
  } else if (extractor_flag == "pool") {
    targets = {{"pool", Extractor::pool}};
  } else if (extractor_flag == "crop") {
    targets = {{"crop", Extractor::crop}};
  } else if (extractor_flag == "adapter") {
    targets = {{"adapter", Extractor::adapter}};
  } else {
    throw ConfigError("--extractor must be pool|crop|adapter|all");
  }

  fs::create_directories(out_dir);
  io::RunManifest manifest;
  manifest.command = "eval";
  manifest.config_path = config_path;
  manifest.seed = meta.seed;
  manifest.output_dir = out_dir;

  std::string csv = "extractor,mask_acc,mask_acc_perturbed,miou,miou_s,miou_u";
  if (ensemble) csv += ",ensemble,mask_acc_ens,miou_ens";
  csv += "\n";
  for (const auto& [name, extractor] : targets) {
    const EvalReport report = evaluate(scenes, &params, bank, extractor, std::nullopt, opts);
    json j = io::eval_report_json(report);
    csv += name + "," + io::format_double(report.mask_acc) + "," +
           io::format_double(report.mask_acc_perturbed) + "," + io::format_double(report.miou) +
           "," + io::format_double(report.miou_seen) + "," + io::format_double(report.miou_unseen);
    if (ensemble) {
      const EvalReport fused = evaluate(scenes, &params, bank, extractor, ensemble, opts);
      j["ensemble"] = {{"alpha", ensemble->alpha},
                       {"beta", ensemble->beta},
                       {"report", io::eval_report_json(fused)}};
      csv += ",alpha=" + io::format_double(ensemble->alpha) +
             ";beta=" + io::format_double(ensemble->beta) + "," +
             io::format_double(fused.mask_acc) + "," + io::format_double(fused.miou);
    }
    csv += "\n";
    const fs::path report_path = fs::path(out_dir) / ("eval_" + name + ".json");
    io::write_file(report_path, j.dump(2) + "\n");
    manifest.add_file(out_dir, report_path);
  }
  if (targets.size() > 1) {
    io::write_file(fs::path(out_dir) / "comparison.csv", csv);
    manifest.add_file(out_dir, fs::path(out_dir) / "comparison.csv");
  }
  io::write_file(fs::path(out_dir) / "manifest.json", manifest.to_json().dump(2) + "\n");
  return kExitOk;
}

int cmd_visualize(const std::string& checkpoint_path, std::uint64_t scene_seed,
                  const std::string& out_dir) {
  if (!fs::exists(checkpoint_path))
    throw ConfigError(checkpoint_path + ": checkpoint not found");
  auto [params, meta] = io::load_checkpoint(checkpoint_path);
  std::uint64_t bank_seed = bank_seed_for(meta.seed);
  WorldConfig world;
  if (!meta.world.is_null()) world = world_from_json(meta.world, bank_seed);
  Rng bank_rng(bank_seed);
  const CategoryBank bank =
      make_category_bank(world.categories, world.channels, world.seen_fraction, bank_rng);

  Rng scene_rng(scene_seed);
  const int regions = std::min(world.regions_max, bank.size());
  const Scene scene = generate_scene(bank, world.height, world.width, regions, world.noise_sigma,
                                     scene_rng);
  const auto fwd = adapter_forward(params, scene.gt_masks, scene.features, false);

  fs::create_directories(out_dir);
  io::RunManifest manifest;
  manifest.command = "visualize";
  manifest.config_path = checkpoint_path;
  manifest.seed = scene_seed;
  manifest.output_dir = out_dir;

  const int hw = fwd.activations.height * fwd.activations.width;
  for (int n = 0; n < fwd.activations.count; ++n) {
    for (int k = 0; k < fwd.activations.maps; ++k) {
      const double* slice = fwd.activations.slice(n, k);
      double lo = slice[0], hi = slice[0];
      for (int i = 1; i < hw; ++i) {
        lo = std::min(lo, slice[i]);
        hi = std::max(hi, slice[i]);
      }
      std::vector<std::uint8_t> px(hw);
      const double span = hi > lo ? hi - lo : 1.0;
      for (int i = 0; i < hw; ++i)
        px[i] = static_cast<std::uint8_t>(std::lround(255.0 * (slice[i] - lo) / span));
      char name[64];
      std::snprintf(name, sizeof(name), "mask%03d_map%02d.pgm", n, k);
      const fs::path path = fs::path(out_dir) / name;
      io::write_pgm(path, px.data(), fwd.activations.height, fwd.activations.width);
      manifest.add_file(out_dir, path);
    }
    char name[64];
    std::snprintf(name, sizeof(name), "mask%03d_overlay.pgm", n);
    const fs::path path = fs::path(out_dir) / name;
    io::save_mask_pgm(path, scene.gt_masks.mask(n));
    manifest.add_file(out_dir, path);
  }
  io::write_file(fs::path(out_dir) / "manifest.json", manifest.to_json().dump(2) + "\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary mask classification on a synthetic world"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path;
  std::string stage_flag = "both";
  std::string extractor_flag = "adapter";
  std::vector<std::string> ensemble_tokens;
  std::uint64_t scene_seed = 0;
  std::optional<std::uint64_t> seed_override;
  std::uint64_t seed_value = 0;

  CLI::App* train = app.add_subcommand("train", "Run the two-stage training schedule");
  train->add_option("--config", config_path, "JSON config")->required();
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_option("--stage", stage_flag, "warmup|mixed|both")
      ->check(CLI::IsMember({"warmup", "mixed", "both"}));
  CLI::Option* seed_opt = train->add_option("--seed", seed_value, "Seed override");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  eval->add_option("--config", config_path, "JSON config")->required();
  eval->add_option("--extractor", extractor_flag, "pool|crop|adapter|all");
  eval->add_option("--ensemble", ensemble_tokens, "alpha=A beta=B")->expected(0, 2);
  eval->add_option("--out", out_dir, "Output directory")->required();

  CLI::App* visualize = app.add_subcommand("visualize", "Dump activation maps for one scene");
  visualize->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  visualize->add_option("--scene-seed", scene_seed, "Scene seed");
  visualize->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (seed_opt->count() > 0) seed_override = seed_value;
    if (train->parsed()) return cmd_train(config_path, out_dir, stage_flag, seed_override);
    if (eval->parsed())
      return cmd_eval(checkpoint_path, config_path, extractor_flag, ensemble_tokens, out_dir);
    if (visualize->parsed()) return cmd_visualize(checkpoint_path, scene_seed, out_dir);
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
