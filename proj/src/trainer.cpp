#include "steleguard/trainer.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "steleguard/rng.hpp"

using json = nlohmann::ordered_json;

namespace steleguard {

void TrainConfig::validate() const {
  if (optimizer != "adam") throw TrainerError("unsupported optimizer: " + optimizer);
  if (learning_rate <= 0) throw TrainerError("learning_rate must be > 0");
  if (batch_size < 1) throw TrainerError("batch_size must be >= 1");
  if (epochs < 1) throw TrainerError("epochs must be >= 1");
  if (weight_decay < 0) throw TrainerError("weight_decay must be >= 0");
}

int TrainConfig::effective_erec_interval(const NetworkConfig& net) const {
  if (erec_interval > 0) return erec_interval;
  return (static_cast<long>(net.input_width) * net.input_height <= 96 * 96) ? 1 : 50;
}

double reconstruction_error(const ImageTensor& y, const ImageTensor& y_tilde) {
  if (!y.same_shape(y_tilde)) throw TrainerError("reconstruction_error: shape mismatch");
  double num = 0, den = 0;
  for (size_t i = 0; i < y.data.size(); ++i) {
    const double d = y.data[i] - y_tilde.data[i];
    num += d * d;
    den += y.data[i] * y.data[i];
  }
  if (den <= 0) throw TrainerError("reconstruction_error: ground truth has zero norm");
  return std::sqrt(num / den) * 100.0;
}

// ------------------------------------------------------------- TileLoader

TileLoader::TileLoader(const DatasetManifest& manifest, int region, size_t cache_budget_bytes)
    : manifest_(manifest), region_(region), cache_budget_(cache_budget_bytes) {
  if (region < 0 || region >= manifest.spec.region_count())
    throw TrainerError("region index " + std::to_string(region) + " outside grid of " +
                       std::to_string(manifest.spec.region_count()));
  for (const auto& it : manifest_.train_items)
    if (it.region_index < 0 || it.region_index == region_) items_.push_back(it);
}

ImageTensor TileLoader::load_original(const std::string& file) {
  auto found = original_cache_.find(file);
  if (found != original_cache_.end()) return found->second;
  ImageTensor img = load_image(manifest_.source_dir + "/" + file);
  const size_t bytes = img.data.size() * sizeof(double);
  if (cache_used_ + bytes <= cache_budget_ / 2) {
    cache_used_ += bytes;
    original_cache_.emplace(file, img);
  }
  return img;
}

ImageTensor TileLoader::make_tile(const TrainItem& item) {
  ImageTensor img = load_original(item.file);
  if (item.aug_tag != "orig") {
    AugmentationParams p;
    p.delta_ev = item.delta_ev;
    p.delta_kelvin = item.delta_kelvin;
    img = apply_augmentation(img, p, manifest_.bounds);
  }
  auto tiles = partition_regions(img, manifest_.spec);
  return resize_region(tiles[region_], manifest_.spec.target_width, manifest_.spec.target_height);
}

ImageTensor TileLoader::tile_for_item(const TrainItem& item) {
  const std::string key = item.file + "|" + item.aug_tag;
  auto found = tile_cache_.find(key);
  if (found != tile_cache_.end()) return found->second;
  ImageTensor tile = make_tile(item);
  const size_t bytes = tile.data.size() * sizeof(double);
  if (cache_used_ + bytes <= cache_budget_) {
    cache_used_ += bytes;
    tile_cache_.emplace(key, tile);
  }
  return tile;
}

ImageTensor TileLoader::tile_for_file(const std::string& file) {
  TrainItem item;
  item.file = file;
  item.aug_tag = "orig";
  return tile_for_item(item);
}

// ------------------------------------------------------------ checkpoint

ModelCheckpoint ModelCheckpoint::from_model(GanomalyModel& model, const TrainConfig& tc, int epoch,
                                            int region_index, uint32_t fingerprint,
                                            std::vector<ErecSample> history) {
  ModelCheckpoint c;
  c.network = model.config();
  c.train = tc;
  c.epoch = epoch;
  c.region_index = region_index;
  c.dataset_fingerprint = fingerprint;
  c.erec_history = std::move(history);
  for (nn::Param* p : model.all_blobs()) {
    ParamBlob b;
    b.name = p->name;
    b.shape = p->shape;
    b.values = p->value;
    c.blobs.push_back(std::move(b));
  }
  return c;
}

std::unique_ptr<GanomalyModel> ModelCheckpoint::restore_model() const {
  auto model = std::make_unique<GanomalyModel>(network, /*seed=*/0);
  auto live = model->all_blobs();
  if (live.size() != blobs.size())
    throw TrainerError("checkpoint blob count mismatch: file has " + std::to_string(blobs.size()) +
                       ", model expects " + std::to_string(live.size()));
  for (size_t i = 0; i < live.size(); ++i) {
    if (live[i]->name != blobs[i].name || live[i]->value.size() != blobs[i].values.size())
      throw TrainerError("checkpoint blob mismatch at " + blobs[i].name);
    live[i]->value = blobs[i].values;
  }
  return model;
}

namespace {

constexpr char kMagic[4] = {'S', 'G', 'C', 'K'};

json network_to_json(const NetworkConfig& n) {
  return json{{"input_width", n.input_width},   {"input_height", n.input_height},
              {"latent_dim", n.latent_dim},     {"base_channels", n.base_channels},
              {"n_down_blocks", n.n_down_blocks}, {"w_adv", n.w_adv},
              {"w_con", n.w_con},               {"w_enc", n.w_enc},
              {"freeze_aux_encoder", n.freeze_aux_encoder}};
}

NetworkConfig network_from_json(const json& j) {
  NetworkConfig n;
  n.input_width = j.at("input_width").get<int>();
  n.input_height = j.at("input_height").get<int>();
  n.latent_dim = j.at("latent_dim").get<int>();
  n.base_channels = j.at("base_channels").get<int>();
  n.n_down_blocks = j.at("n_down_blocks").get<int>();
  n.w_adv = j.at("w_adv").get<double>();
  n.w_con = j.at("w_con").get<double>();
  n.w_enc = j.at("w_enc").get<double>();
  n.freeze_aux_encoder = j.at("freeze_aux_encoder").get<bool>();
  return n;
}

json train_to_json(const TrainConfig& t) {
  return json{{"optimizer", t.optimizer},   {"learning_rate", t.learning_rate},
              {"weight_decay", t.weight_decay}, {"beta1", t.beta1},
              {"beta2", t.beta2},           {"batch_size", t.batch_size},
              {"epochs", t.epochs},         {"seed", t.seed},
              {"erec_interval", t.erec_interval}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.optimizer = j.at("optimizer").get<std::string>();
  t.learning_rate = j.at("learning_rate").get<double>();
  t.weight_decay = j.at("weight_decay").get<double>();
  t.beta1 = j.at("beta1").get<double>();
  t.beta2 = j.at("beta2").get<double>();
  t.batch_size = j.at("batch_size").get<int>();
  t.epochs = j.at("epochs").get<int>();
  t.seed = j.at("seed").get<uint64_t>();
  t.erec_interval = j.at("erec_interval").get<int>();
  return t;
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw TrainerError("checkpoint truncated");
}

}  // namespace

void save_checkpoint(const ModelCheckpoint& c, const std::string& path) {
  json meta;
  meta["network"] = network_to_json(c.network);
  meta["train"] = train_to_json(c.train);
  meta["epoch"] = c.epoch;
  meta["region_index"] = c.region_index;
  meta["dataset_fingerprint"] = c.dataset_fingerprint;
  json hist = json::array();
  for (const auto& s : c.erec_history) hist.push_back(json{{"epoch", s.epoch}, {"e_rec", s.e_rec}});
  meta["erec_history"] = std::move(hist);
  json blob_index = json::array();
  for (const auto& b : c.blobs)
    blob_index.push_back(json{{"name", b.name}, {"shape", b.shape}, {"count", b.values.size()}});
  meta["blobs"] = std::move(blob_index);
  const std::string meta_str = meta.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw TrainerError("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  write_pod(out, ModelCheckpoint::kFormatVersion);
  const uint64_t meta_len = meta_str.size();
  write_pod(out, meta_len);
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  for (const auto& b : c.blobs) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(b.values.data());
    const size_t nbytes = b.values.size() * sizeof(double);
    const uint32_t crc = static_cast<uint32_t>(crc32(0, bytes, static_cast<uInt>(nbytes)));
    out.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(nbytes));
    write_pod(out, crc);
  }
  if (!out) throw TrainerError("checkpoint write failed: " + path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TrainerError("cannot read checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw TrainerError("not a checkpoint file: " + path);
  uint32_t version = 0;
  read_pod(in, version);
  if (version != ModelCheckpoint::kFormatVersion)
    throw TrainerError("unsupported checkpoint version " + std::to_string(version) +
                       " (expected " + std::to_string(ModelCheckpoint::kFormatVersion) + "): " + path);
  uint64_t meta_len = 0;
  read_pod(in, meta_len);
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw TrainerError("checkpoint truncated: " + path);
  json meta = json::parse(meta_str);

  ModelCheckpoint c;
  c.network = network_from_json(meta.at("network"));
  c.train = train_from_json(meta.at("train"));
  c.epoch = meta.at("epoch").get<int>();
  c.region_index = meta.at("region_index").get<int>();
  c.dataset_fingerprint = meta.at("dataset_fingerprint").get<uint32_t>();
  for (const auto& s : meta.at("erec_history"))
    c.erec_history.push_back({s.at("epoch").get<int>(), s.at("e_rec").get<double>()});
  for (const auto& b : meta.at("blobs")) {
    ParamBlob blob;
    blob.name = b.at("name").get<std::string>();
    blob.shape = b.at("shape").get<std::vector<int>>();
    blob.values.resize(b.at("count").get<size_t>());
    in.read(reinterpret_cast<char*>(blob.values.data()),
            static_cast<std::streamsize>(blob.values.size() * sizeof(double)));
    uint32_t stored_crc = 0;
    read_pod(in, stored_crc);
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.values.data());
    const uint32_t crc =
        static_cast<uint32_t>(crc32(0, bytes, static_cast<uInt>(blob.values.size() * sizeof(double))));
    if (crc != stored_crc)
      throw TrainerError("checkpoint blob " + blob.name + " is corrupt (checksum mismatch): " + path);
    c.blobs.push_back(std::move(blob));
  }
  return c;
}

uint32_t manifest_fingerprint(const DatasetManifest& manifest) {
  const std::string s = manifest.to_json();
  return static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const unsigned char*>(s.data()), static_cast<uInt>(s.size())));
}

// ------------------------------------------------------------------ train

ModelCheckpoint train(const DatasetManifest& manifest, int region, const NetworkConfig& net_cfg,
                      const TrainConfig& train_cfg, const EpochCallback& on_epoch) {
  net_cfg.validate();
  train_cfg.validate();
  TileLoader loader(manifest, region);
  const auto& items = loader.items();
  if (items.empty()) throw TrainerError("no training items for region " + std::to_string(region));
  if (static_cast<int>(items.size()) < train_cfg.batch_size)
    throw TrainerError("fewer training items (" + std::to_string(items.size()) +
                       ") than batch size (" + std::to_string(train_cfg.batch_size) + ")");

  GanomalyModel model(net_cfg, derive_seed(train_cfg.seed, 0xA11CE + region));
  nn::AdamConfig adam;
  adam.lr = train_cfg.learning_rate;
  adam.beta1 = train_cfg.beta1;
  adam.beta2 = train_cfg.beta2;
  adam.weight_decay = train_cfg.weight_decay;
  nn::Adam opt_g(model.generator_trainable_params(), adam);
  nn::Adam opt_d(model.discriminator_params(), adam);

  std::mt19937_64 shuffle_rng(derive_seed(train_cfg.seed, 0x5C0FF + region));
  const int interval = train_cfg.effective_erec_interval(net_cfg);

  std::vector<size_t> order(items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<ErecSample> history;
  auto eval_erec = [&]() {
    if (manifest.held_out.empty()) return 0.0;
    double sum = 0;
    for (const auto& file : manifest.held_out) {
      ImageTensor tile = loader.tile_for_file(file);
      sum += reconstruction_error(tile, model.reconstruct(tile));
    }
    return sum / manifest.held_out.size();
  };

  for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_gen = 0, epoch_disc = 0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += train_cfg.batch_size) {
      const size_t count = std::min<size_t>(train_cfg.batch_size, order.size() - start);
      nn::Tensor batch(static_cast<int>(count), 3, net_cfg.input_height, net_cfg.input_width);
      for (size_t b = 0; b < count; ++b) {
        ImageTensor tile = loader.tile_for_item(items[order[start + b]]);
        if (tile.height != net_cfg.input_height || tile.width != net_cfg.input_width)
          throw TrainerError("tile dims do not match network config");
        const nn::Tensor t = image_to_tensor(tile);
        std::copy(t.v.begin(), t.v.end(), batch.v.begin() + b * batch.per_image());
      }
      auto losses = model.train_step(batch, opt_g, opt_d);
      if (!std::isfinite(losses.total) || !std::isfinite(losses.l_disc))
        throw TrainerError("training diverged at epoch " + std::to_string(epoch) + ": total=" +
                           std::to_string(losses.total) + " disc=" + std::to_string(losses.l_disc));
      epoch_gen += losses.total;
      epoch_disc += losses.l_disc;
      ++batches;
    }
    double erec = std::numeric_limits<double>::quiet_NaN();
    if (epoch % interval == 0 || epoch == train_cfg.epochs) {
      erec = eval_erec();
      history.push_back({epoch, erec});
    }
    if (on_epoch) on_epoch(epoch, epoch_gen / batches, epoch_disc / batches, erec);
  }

  return ModelCheckpoint::from_model(model, train_cfg, train_cfg.epochs, region,
                                     manifest_fingerprint(manifest), std::move(history));
}

}  // namespace steleguard
