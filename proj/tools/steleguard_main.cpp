#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "steleguard/config.hpp"
#include "steleguard/evalkit.hpp"
#include "steleguard/postprocess.hpp"
#include "steleguard/preprocess.hpp"
#include "steleguard/rng.hpp"
#include "steleguard/trainer.hpp"
#include "steleguard/watch.hpp"

namespace fs = std::filesystem;
using namespace steleguard;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitAnomaly = 1;
constexpr int kExitError = 2;

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

struct CommonOpts {
  std::string config_path;
  std::optional<uint64_t> seed;
  bool dump_config = false;
};

AppConfig make_config(const CommonOpts& c) {
  AppConfig cfg = c.config_path.empty() ? AppConfig{} : AppConfig::load(c.config_path);
  cfg.apply_env_overrides();
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.train.seed = *c.seed;
  }
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& c) {
  cmd->add_option("--config", c.config_path, "JSON config file")->envname("STELEGUARD_CONFIG");
  cmd->add_option("--seed", c.seed, "Seed override (also sets the training seed)");
  cmd->add_flag("--dump-config", c.dump_config, "Print the effective config and exit");
}

int maybe_dump(const CommonOpts& c, const AppConfig& cfg) {
  if (!c.dump_config) return -1;
  std::cout << cfg.to_json();
  return kExitOk;
}

std::vector<std::pair<int, std::string>> find_checkpoints(const std::string& dir) {
  std::vector<std::pair<int, std::string>> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".ckpt") continue;
    const std::string name = entry.path().filename().string();
    if (name.rfind("region_", 0) != 0) continue;
    const int region = std::stoi(name.substr(7));
    out.emplace_back(region, entry.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_report_files(const DetectionReport& rep, const std::string& out_dir,
                        const std::string& stem, bool dump_intermediates) {
  fs::create_directories(out_dir);
  std::ofstream rj(out_dir + "/" + stem + ".report.json");
  rj << rep.to_json();
  save_mask(rep.final_mask, out_dir + "/" + stem + ".mask.png");
  if (dump_intermediates) {
    save_mask(rep.ms_mask, out_dir + "/" + stem + ".ms_mask.png");
    save_mask(rep.ssim_mask, out_dir + "/" + stem + ".ssim_mask.png");
    save_image(similarity_heatmap(rep.ms_map), out_dir + "/" + stem + ".ms_heat.png");
    save_image(similarity_heatmap(rep.ssim_values), out_dir + "/" + stem + ".ssim_heat.png");
  }
}

// ---------------------------------------------------------- build-dataset

int cmd_build_dataset(const CommonOpts& common, const std::string& source,
                      const std::string& exclusions, const std::string& out_path, int n_aug,
                      int held_out) {
  AppConfig cfg = make_config(common);
  if (int rc = maybe_dump(common, cfg); rc >= 0) return rc;
  DatasetManifest m = build_dataset(source.empty() ? cfg.paths.data_dir : source, exclusions,
                                    cfg.region, n_aug, held_out, cfg.seed, cfg.augment);
  m.save(out_path);
  std::cout << "manifest: " << out_path << "\n";
  std::cout << "excluded: " << m.excluded.size() << "\n";
  std::cout << "train: " << m.train_items.size() << ", held-out: " << m.held_out.size() << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ train

int cmd_train(const CommonOpts& common, const std::string& manifest_path, int region,
              const std::string& out_dir, bool quiet) {
  AppConfig cfg = make_config(common);
  if (int rc = maybe_dump(common, cfg); rc >= 0) return rc;
  const DatasetManifest manifest = DatasetManifest::load(manifest_path);
  fs::create_directories(out_dir.empty() ? cfg.paths.checkpoint_dir : out_dir);
  const std::string dir = out_dir.empty() ? cfg.paths.checkpoint_dir : out_dir;

  std::vector<int> regions;
  if (region >= 0)
    regions.push_back(region);
  else
    for (int r = 0; r < manifest.spec.region_count(); ++r) regions.push_back(r);

  int failures = 0;
  for (int r : regions) {
    try {
      std::ofstream csv(dir + "/erec_region_" + std::to_string(r) + ".csv");
      csv << "epoch,e_rec\n";
      auto cb = [&](int epoch, double gen, double disc, double erec) {
        if (!std::isnan(erec)) csv << epoch << "," << erec << "\n";
        if (!quiet && (epoch == 1 || epoch % 10 == 0))
          std::cout << "region " << r << " epoch " << epoch << " gen " << gen << " disc " << disc
                    << (std::isnan(erec) ? "" : " e_rec " + std::to_string(erec)) << "\n";
      };
      NetworkConfig net = cfg.network;
      net.input_width = manifest.spec.target_width;
      net.input_height = manifest.spec.target_height;
      ModelCheckpoint ckpt = train(manifest, r, net, cfg.train, cb);
      const std::string path = dir + "/region_" + std::to_string(r) + ".ckpt";
      save_checkpoint(ckpt, path);
      std::cout << "region " << r << ": " << path;
      if (!ckpt.erec_history.empty())
        std::cout << " (final e_rec " << ckpt.erec_history.back().e_rec << "%)";
      std::cout << "\n";
    } catch (const std::exception& e) {
      std::cerr << "region " << r << " failed: " << e.what() << "\n";
      ++failures;  // keep whatever other regions produce
    }
  }
  return failures == 0 ? kExitOk : kExitError;
}

// ----------------------------------------------------------------- detect

int cmd_detect(const CommonOpts& common, const std::vector<std::string>& images,
               const std::string& checkpoint_dir, const std::vector<std::string>& checkpoints,
               const std::string& out_dir, bool dump_intermediates) {
  AppConfig cfg = make_config(common);
  if (int rc = maybe_dump(common, cfg); rc >= 0) return rc;

  std::vector<std::pair<int, std::string>> ckpt_files;
  for (const auto& c : checkpoints) ckpt_files.emplace_back(-1, c);
  if (!checkpoint_dir.empty())
    for (auto& p : find_checkpoints(checkpoint_dir)) ckpt_files.push_back(p);
  if (ckpt_files.empty()) throw TrainerError("no checkpoints given (use --checkpoint or --checkpoint-dir)");

  std::map<int, std::unique_ptr<GanomalyModel>> models;
  std::map<int, NetworkConfig> nets;
  for (const auto& [hint, path] : ckpt_files) {
    ModelCheckpoint c = load_checkpoint(path);
    models[c.region_index] = c.restore_model();
    nets[c.region_index] = c.network;
  }

  const std::string dir = out_dir.empty() ? cfg.paths.output_dir : out_dir;
  bool any_anomaly = false;
  for (const std::string& image_path : images) {
    const ImageTensor frame = load_image(image_path);
    const auto& net0 = nets.begin()->second;
    const bool tile_mode = frame.height == net0.input_height && frame.width == net0.input_width;
    if (tile_mode) {
      for (auto& [region, model] : models) {
        DetectionReport rep = detect(frame, *model, cfg.postprocess);
        rep.source = image_path;
        rep.region_index = region;
        any_anomaly |= rep.anomaly_present;
        write_report_files(rep, dir, stem_of(image_path) + ".region" + std::to_string(region),
                           dump_intermediates);
        std::cout << image_path << " region " << region << ": "
                  << (rep.anomaly_present ? "ANOMALY" : "ok") << " (mask area "
                  << rep.final_mask.area() << ")\n";
      }
    } else {
      auto tiles = partition_regions(frame, cfg.region);
      for (auto& [region, model] : models) {
        if (region < 0 || region >= static_cast<int>(tiles.size()))
          throw PostprocessError("checkpoint region " + std::to_string(region) +
                                 " outside the configured grid");
        ImageTensor tile =
            resize_region(tiles[region], cfg.region.target_width, cfg.region.target_height);
        DetectionReport rep = detect(tile, *model, cfg.postprocess);
        rep.source = image_path;
        rep.region_index = region;
        any_anomaly |= rep.anomaly_present;
        write_report_files(rep, dir, stem_of(image_path) + ".region" + std::to_string(region),
                           dump_intermediates);
        std::cout << image_path << " region " << region << ": "
                  << (rep.anomaly_present ? "ANOMALY" : "ok") << " (mask area "
                  << rep.final_mask.area() << ")\n";
      }
    }
  }
  return any_anomaly ? kExitAnomaly : kExitOk;
}

// ----------------------------------------------------------------- inject

int cmd_inject(const CommonOpts& common, const std::vector<std::string>& images,
               const std::string& out_dir, std::vector<std::string> categories) {
  AppConfig cfg = make_config(common);
  if (int rc = maybe_dump(common, cfg); rc >= 0) return rc;
  if (categories.empty())
    for (AnomalyCategory c : all_anomaly_categories()) categories.push_back(category_name(c));
  fs::create_directories(out_dir);
  int count = 0;
  for (const std::string& image_path : images) {
    const ImageTensor img = load_image(image_path);
    for (const std::string& cat : categories) {
      AnomalySpec spec;
      spec.category = category_from_name(cat);
      spec.seed = derive_seed(cfg.seed, std::hash<std::string>{}(stem_of(image_path) + cat));
      auto [anomalous, mask] = inject_anomaly(img, spec);
      const std::string stem = out_dir + "/" + stem_of(image_path) + "." + cat;
      save_image(anomalous, stem + ".png");
      save_mask(mask, stem + ".mask.png");
      ++count;
    }
  }
  std::cout << "injected " << count << " anomaly images into " << out_dir << "\n";
  return kExitOk;
}

// --------------------------------------------------------------- evaluate

int cmd_evaluate(const CommonOpts& common, const std::string& manifest_path,
                 const std::string& checkpoint_dir, int region, const std::string& out_dir,
                 bool calibrate, bool panels) {
  AppConfig cfg = make_config(common);
  if (int rc = maybe_dump(common, cfg); rc >= 0) return rc;
  const DatasetManifest manifest = DatasetManifest::load(manifest_path);
  if (manifest.held_out.empty()) throw EvalError("manifest has no held-out images");

  const std::string ckpt_path = checkpoint_dir + "/region_" + std::to_string(region) + ".ckpt";
  ModelCheckpoint ckpt = load_checkpoint(ckpt_path);
  auto model = ckpt.restore_model();

  TileLoader loader(manifest, region);
  std::vector<ImageTensor> normals;
  for (const auto& file : manifest.held_out) normals.push_back(loader.tile_for_file(file));

  PostprocessConfig post = cfg.postprocess;
  if (calibrate) {
    const CalibrationResult cal = calibrate_thresholds(normals, *model, post);
    post.tau_ms = cal.tau_ms;
    post.tau_ssim = cal.tau_ssim;
    std::cout << "calibrated thresholds: tau_ms " << cal.tau_ms << ", tau_ssim " << cal.tau_ssim
              << "\n";
  }

  std::vector<DetectionReport> reports;
  std::vector<std::optional<BinaryMask>> truths;
  std::vector<std::string> ids, cats;
  fs::create_directories(out_dir);

  for (size_t i = 0; i < normals.size(); ++i) {
    DetectionReport rep = detect(normals[i], *model, post);
    rep.source = manifest.held_out[i];
    reports.push_back(rep);
    truths.push_back(std::nullopt);
    ids.push_back(manifest.held_out[i]);
    cats.push_back("");
    for (AnomalyCategory cat : all_anomaly_categories()) {
      AnomalySpec spec;
      spec.category = cat;
      spec.seed = derive_seed(cfg.seed, i * 131 + static_cast<uint64_t>(cat));
      auto [anomalous, mask] = inject_anomaly(normals[i], spec);
      DetectionReport arep = detect(anomalous, *model, post);
      arep.source = manifest.held_out[i] + ":" + category_name(cat);
      if (panels) {
        const ImageTensor recon = model->reconstruct(anomalous);
        const ImageTensor panel = compose_panel(
            {anomalous, recon, similarity_heatmap(arep.ms_map), similarity_heatmap(arep.ssim_values),
             mask_to_image(arep.ms_mask), mask_to_image(arep.ssim_mask),
             mask_to_image(arep.final_mask), mask_to_image(mask)});
        save_image(panel, out_dir + "/" + stem_of(manifest.held_out[i]) + "." + category_name(cat) +
                              ".panel.png");
      }
      reports.push_back(std::move(arep));
      truths.push_back(std::move(mask));
      ids.push_back(manifest.held_out[i] + ":" + category_name(cat));
      cats.push_back(category_name(cat));
    }
  }

  const EvalResult result = evaluate_detection(reports, truths, ids, cats);
  std::ofstream out(out_dir + "/eval_result.json");
  out << result.to_json();

  std::cout << "evaluation images: " << reports.size() << " (" << result.clean_images
            << " clean)\n";
  std::cout << "false alarms: " << result.false_alarms << "\n";
  std::cout << "category          det    precision  recall   iou\n";
  for (const auto& [name, agg] : result.per_class) {
    std::printf("%-16s %2d/%-2d   %6.3f   %6.3f  %6.3f\n", name.c_str(), agg.detected, agg.images,
                agg.mean_precision, agg.mean_recall, agg.mean_iou);
  }
  std::cout << "results: " << out_dir << "/eval_result.json\n";
  return kExitOk;
}

// ------------------------------------------------------------------ watch

int cmd_watch(const CommonOpts& common, const std::string& dir, const std::string& checkpoint_dir,
              const std::string& alert_log, const std::string& ledger, double interval,
              int workers, bool once, int max_scans, const std::string& out_dir) {
  AppConfig cfg = make_config(common);
  if (int rc = maybe_dump(common, cfg); rc >= 0) return rc;
  WatchOptions opts;
  opts.watch_dir = dir;
  opts.checkpoint_dir = checkpoint_dir.empty() ? cfg.paths.checkpoint_dir : checkpoint_dir;
  opts.alert_log = alert_log;
  opts.ledger = ledger;
  opts.poll_seconds = interval;
  opts.workers = workers;
  opts.output_dir = out_dir;
  if (!out_dir.empty()) fs::create_directories(out_dir);
  opts.max_scans = once ? 1 : max_scans;
  const WatchStats stats = run_watch(cfg, opts);
  std::cout << "frames: " << stats.frames << ", reports: " << stats.reports
            << ", anomalies: " << stats.anomalies << ", errors: " << stats.errors << "\n";
  if (once) return stats.anomalies > 0 ? kExitAnomaly : kExitOk;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surface anomaly monitoring: reconstruction-based detection pipeline"};
  app.require_subcommand(1);

  // build-dataset
  CommonOpts c_build;
  std::string bd_source, bd_exclusions, bd_out = "manifest.json";
  int bd_naug = 2, bd_held = 9;
  auto* build = app.add_subcommand("build-dataset", "Scan a directory and emit a dataset manifest");
  add_common(build, c_build);
  build->add_option("--source", bd_source, "Directory of normal-state PNG frames");
  build->add_option("--exclusions", bd_exclusions, "Text file of frames to drop (one per line)");
  build->add_option("--out", bd_out, "Manifest output path");
  build->add_option("--n-aug", bd_naug, "Photometric variants per image");
  build->add_option("--held-out", bd_held, "Originals reserved for evaluation");

  // train
  CommonOpts c_train;
  std::string tr_manifest, tr_out;
  int tr_region = -1;
  bool tr_quiet = false;
  auto* train_cmd = app.add_subcommand("train", "Train one model per region");
  add_common(train_cmd, c_train);
  train_cmd->add_option("--manifest", tr_manifest, "Dataset manifest")->required();
  train_cmd->add_option("--region", tr_region, "Train a single region (default: all)");
  train_cmd->add_option("--out", tr_out, "Checkpoint directory");
  train_cmd->add_flag("--quiet", tr_quiet, "Suppress per-epoch progress");

  // detect
  CommonOpts c_detect;
  std::vector<std::string> dt_images, dt_ckpts;
  std::string dt_ckpt_dir, dt_out;
  bool dt_dump = false;
  auto* detect_cmd = app.add_subcommand("detect", "Run detection on image(s)");
  add_common(detect_cmd, c_detect);
  detect_cmd->add_option("--image", dt_images, "Input image(s)")->required();
  detect_cmd->add_option("--checkpoint", dt_ckpts, "Checkpoint file(s)");
  detect_cmd->add_option("--checkpoint-dir", dt_ckpt_dir, "Directory of region_<i>.ckpt files");
  detect_cmd->add_option("--out", dt_out, "Report/mask output directory");
  detect_cmd->add_flag("--dump-intermediates", dt_dump,
                       "Also write similarity heatmaps and per-method masks");

  // inject
  CommonOpts c_inject;
  std::vector<std::string> in_images, in_cats;
  std::string in_out = "injected";
  auto* inject_cmd = app.add_subcommand("inject", "Render synthetic anomalies into clean images");
  add_common(inject_cmd, c_inject);
  inject_cmd->add_option("--image", in_images, "Clean input image(s)")->required();
  inject_cmd->add_option("--out", in_out, "Output directory");
  inject_cmd->add_option("--category", in_cats, "Subset of categories (default: all seven)");

  // evaluate
  CommonOpts c_eval;
  std::string ev_manifest, ev_ckpt_dir, ev_out = "eval";
  int ev_region = 0;
  bool ev_no_calibrate = false, ev_panels = false;
  auto* eval_cmd = app.add_subcommand("evaluate", "Build the injection evaluation set and score it");
  add_common(eval_cmd, c_eval);
  eval_cmd->add_option("--manifest", ev_manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--checkpoint-dir", ev_ckpt_dir, "Directory with region checkpoints")
      ->required();
  eval_cmd->add_option("--region", ev_region, "Region model to evaluate");
  eval_cmd->add_option("--out", ev_out, "Output directory");
  eval_cmd->add_flag("--no-calibrate", ev_no_calibrate,
                     "Use config thresholds instead of calibrating on the held-out normals");
  eval_cmd->add_flag("--panels", ev_panels, "Write side-by-side inspection panels");

  // watch
  CommonOpts c_watch;
  std::string w_dir, w_ckpt_dir, w_alert = "alerts.jsonl", w_ledger = "processed.txt", w_out;
  double w_interval = 5.0;
  int w_workers = 6, w_max_scans = -1;
  bool w_once = false;
  auto* watch_cmd = app.add_subcommand("watch", "Poll a directory and detect on new frames");
  add_common(watch_cmd, c_watch);
  watch_cmd->add_option("--dir", w_dir, "Directory to watch")->required();
  watch_cmd->add_option("--checkpoint-dir", w_ckpt_dir, "Directory with region checkpoints");
  watch_cmd->add_option("--alert-log", w_alert, "Append-only JSON-lines alert log");
  watch_cmd->add_option("--ledger", w_ledger, "Processed-files ledger");
  watch_cmd->add_option("--interval", w_interval, "Poll interval in seconds");
  watch_cmd->add_option("--workers", w_workers, "Worker threads");
  watch_cmd->add_option("--max-scans", w_max_scans, "Stop after N polls (default: run forever)");
  watch_cmd->add_option("--out", w_out, "Write anomaly masks here");
  watch_cmd->add_flag("--once", w_once, "Process the current directory contents and exit");

  CLI11_PARSE(app, argc, argv);

  try {
    if (build->parsed())
      return cmd_build_dataset(c_build, bd_source, bd_exclusions, bd_out, bd_naug, bd_held);
    if (train_cmd->parsed()) return cmd_train(c_train, tr_manifest, tr_region, tr_out, tr_quiet);
    if (detect_cmd->parsed())
      return cmd_detect(c_detect, dt_images, dt_ckpt_dir, dt_ckpts, dt_out, dt_dump);
    if (inject_cmd->parsed()) return cmd_inject(c_inject, in_images, in_out, in_cats);
    if (eval_cmd->parsed())
      return cmd_evaluate(c_eval, ev_manifest, ev_ckpt_dir, ev_region, ev_out, !ev_no_calibrate,
                          ev_panels);
    if (watch_cmd->parsed())
      return cmd_watch(c_watch, w_dir, w_ckpt_dir, w_alert, w_ledger, w_interval, w_workers, w_once,
                       w_max_scans, w_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
