#pragma once

#include <string>

#include "steleguard/model.hpp"
#include "steleguard/postprocess.hpp"
#include "steleguard/preprocess.hpp"
#include "steleguard/trainer.hpp"

namespace steleguard {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct AppPaths {
  std::string data_dir = ".";
  std::string checkpoint_dir = "checkpoints";
  std::string output_dir = "out";
};

// One structured config file feeding every subcommand; flags override
// file values, and unknown keys are rejected to catch typos.
struct AppConfig {
  AppPaths paths;
  RegionSpec region;
  NetworkConfig network;
  TrainConfig train;
  PostprocessConfig postprocess;
  AugmentationBounds augment;
  uint64_t seed = 0;

  static AppConfig from_json(const std::string& text);
  static AppConfig load(const std::string& path);
  std::string to_json() const;

  // STELEGUARD_DATA_DIR / STELEGUARD_CHECKPOINT_DIR / STELEGUARD_OUTPUT_DIR
  void apply_env_overrides();
};

}  // namespace steleguard
