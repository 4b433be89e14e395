#include "steleguard/watch.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "steleguard/evalkit.hpp"
#include "steleguard/postprocess.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace steleguard {

namespace {

std::set<std::string> load_ledger(const std::string& path) {
  std::set<std::string> done;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) done.insert(line);
  return done;
}

struct RegionJob {
  std::shared_ptr<ImageTensor> frame;
  std::string file;
  int region = 0;
  long sequence = 0;
};

}  // namespace

WatchStats run_watch(const AppConfig& cfg, const WatchOptions& opts) {
  WatchStats stats;
  const int regions = cfg.region.region_count();

  // One model instance per region; a region's jobs always run on the same
  // worker, so instances are never shared across threads.
  std::vector<std::unique_ptr<GanomalyModel>> models(regions);
  for (int r = 0; r < regions; ++r) {
    const std::string path = opts.checkpoint_dir + "/region_" + std::to_string(r) + ".ckpt";
    models[r] = load_checkpoint(path).restore_model();
  }

  std::set<std::string> processed = load_ledger(opts.ledger);
  std::ofstream ledger_out(opts.ledger, std::ios::app);
  std::ofstream alert_out(opts.alert_log, std::ios::app);
  if (!alert_out) throw PostprocessError("cannot open alert log: " + opts.alert_log);

  const int workers = std::max(1, std::min(opts.workers, regions));
  long sequence = 0;

  for (int scan = 0; opts.max_scans < 0 || scan < opts.max_scans; ++scan) {
    if (scan > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(opts.poll_seconds));
    }
    std::vector<std::string> fresh;
    try {
      for (const auto& entry : fs::directory_iterator(opts.watch_dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
        const std::string name = entry.path().filename().string();
        if (!processed.count(name)) fresh.push_back(name);
      }
    } catch (const fs::filesystem_error& e) {
      std::cerr << "watch: cannot scan " << opts.watch_dir << ": " << e.what() << "\n";
      ++stats.errors;
      continue;
    }
    std::sort(fresh.begin(), fresh.end());
    if (fresh.empty()) continue;

    std::vector<std::vector<RegionJob>> lanes(workers);
    for (const std::string& name : fresh) {
      processed.insert(name);
      ledger_out << name << "\n";
      std::shared_ptr<ImageTensor> frame;
      try {
        frame = std::make_shared<ImageTensor>(load_image(opts.watch_dir + "/" + name));
      } catch (const std::exception& e) {
        std::cerr << "watch: skipping unreadable file " << name << ": " << e.what() << "\n";
        ++stats.errors;
        continue;
      }
      ++stats.frames;
      for (int r = 0; r < regions; ++r)
        lanes[r % workers].push_back({frame, name, r, sequence++});
    }
    ledger_out.flush();

    std::vector<std::pair<long, std::string>> lines;
    std::vector<std::pair<long, bool>> outcomes;
    std::mutex sink;
    auto worker_fn = [&](int lane) {
      for (const RegionJob& job : lanes[lane]) {
        try {
          auto tiles = partition_regions(*job.frame, cfg.region);
          ImageTensor tile =
              resize_region(tiles[job.region], cfg.region.target_width, cfg.region.target_height);
          DetectionReport rep = detect(tile, *models[job.region], cfg.postprocess);
          rep.source = job.file;
          rep.region_index = job.region;
          json line;
          line["sequence"] = job.sequence;
          line["file"] = job.file;
          line["region"] = job.region;
          line["anomaly_present"] = rep.anomaly_present;
          line["mask_area"] = rep.final_mask.area();
          line["components"] = rep.components.size();
          line["registration_low_confidence"] = rep.registration.low_confidence;
          if (!opts.output_dir.empty() && rep.anomaly_present) {
            const std::string mask_path = opts.output_dir + "/" + job.file + ".region" +
                                          std::to_string(job.region) + ".mask.png";
            save_mask(rep.final_mask, mask_path);
            line["mask_png"] = mask_path;
          }
          std::lock_guard<std::mutex> lock(sink);
          lines.emplace_back(job.sequence, line.dump());
          outcomes.emplace_back(job.sequence, rep.anomaly_present);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(sink);
          std::cerr << "watch: region " << job.region << " of " << job.file << " failed: "
                    << e.what() << "\n";
          ++stats.errors;
        }
      }
    };
    std::vector<std::thread> pool;
    for (int wkr = 0; wkr < workers; ++wkr) pool.emplace_back(worker_fn, wkr);
    for (auto& t : pool) t.join();

    // single writer, deterministic order
    std::sort(lines.begin(), lines.end());
    for (const auto& [seq, text] : lines) alert_out << text << "\n";
    alert_out.flush();
    stats.reports += static_cast<int>(lines.size());
    for (const auto& [seq, anomalous] : outcomes)
      if (anomalous) ++stats.anomalies;
  }
  return stats;
}

}  // namespace steleguard
