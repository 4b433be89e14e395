#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "steleguard/model.hpp"
#include "steleguard/preprocess.hpp"

namespace steleguard {

class TrainerError : public std::runtime_error {
 public:
  explicit TrainerError(const std::string& what) : std::runtime_error(what) {}
};

struct TrainConfig {
  std::string optimizer = "adam";
  double learning_rate = 1e-3;
  double weight_decay = 1e-7;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int batch_size = 16;
  int epochs = 1200;
  uint64_t seed = 0;
  // Held-out E_rec cadence in epochs; 0 picks 1 for small inputs and 50
  // for full-resolution ones.
  int erec_interval = 0;

  void validate() const;
  int effective_erec_interval(const NetworkConfig& net) const;
};

struct ErecSample {
  int epoch = 0;
  double e_rec = 0.0;  // percent
};

struct ParamBlob {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
};

struct ModelCheckpoint {
  static constexpr uint32_t kFormatVersion = 1;

  NetworkConfig network;
  TrainConfig train;
  int epoch = 0;
  int region_index = 0;
  uint32_t dataset_fingerprint = 0;
  std::vector<ErecSample> erec_history;
  std::vector<ParamBlob> blobs;

  static ModelCheckpoint from_model(GanomalyModel& model, const TrainConfig& tc, int epoch,
                                    int region_index, uint32_t fingerprint,
                                    std::vector<ErecSample> history);
  // Rebuilds a model and restores every parameter and running-stat blob.
  std::unique_ptr<GanomalyModel> restore_model() const;
};

void save_checkpoint(const ModelCheckpoint& c, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

// Relative l2 error in percent, the image flattened to one vector.
double reconstruction_error(const ImageTensor& y, const ImageTensor& y_tilde);

// Loads, augments, partitions and resizes training items for one region
// model. Tiles are cached in memory when they fit the budget.
class TileLoader {
 public:
  TileLoader(const DatasetManifest& manifest, int region, size_t cache_budget_bytes = 1ull << 30);
  ImageTensor tile_for_item(const TrainItem& item);
  ImageTensor tile_for_file(const std::string& file);  // original, no augmentation
  const std::vector<TrainItem>& items() const { return items_; }

 private:
  ImageTensor load_original(const std::string& file);
  ImageTensor make_tile(const TrainItem& item);

  DatasetManifest manifest_;
  int region_;
  std::vector<TrainItem> items_;
  std::map<std::string, ImageTensor> original_cache_;
  std::map<std::string, ImageTensor> tile_cache_;  // keyed by file + aug tag
  size_t cache_budget_;
  size_t cache_used_ = 0;
};

using EpochCallback = std::function<void(int epoch, double gen_total, double disc, double erec)>;

// Alternating generator/discriminator optimization over the manifest's
// items for one region. Deterministic for a fixed seed. Aborts with a
// diagnostic if the loss stops being finite.
ModelCheckpoint train(const DatasetManifest& manifest, int region, const NetworkConfig& net_cfg,
                      const TrainConfig& train_cfg, const EpochCallback& on_epoch = {});

uint32_t manifest_fingerprint(const DatasetManifest& manifest);

}  // namespace steleguard
