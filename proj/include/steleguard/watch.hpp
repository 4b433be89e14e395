#pragma once

#include <string>
#include <vector>

#include "steleguard/config.hpp"
#include "steleguard/trainer.hpp"

namespace steleguard {

struct WatchOptions {
  std::string watch_dir;
  std::string checkpoint_dir;
  std::string alert_log = "alerts.jsonl";
  std::string ledger = "processed.txt";
  std::string output_dir;  // masks written here when set
  double poll_seconds = 5.0;
  int workers = 6;
  // Number of polling rounds; < 0 runs until interrupted.
  int max_scans = -1;
};

struct WatchStats {
  int frames = 0;
  int reports = 0;
  int anomalies = 0;
  int errors = 0;
};

// Polls watch_dir for new frames, partitions each into regions, runs the
// per-region detectors on a small worker pool and appends one JSON line per
// (frame, region) report to the alert log. Processed file names persist in
// the ledger so restarts skip them. Unreadable files are logged and skipped.
WatchStats run_watch(const AppConfig& cfg, const WatchOptions& opts);

}  // namespace steleguard
