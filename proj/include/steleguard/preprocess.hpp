#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "steleguard/image.hpp"

namespace steleguard {

class PreprocessError : public std::runtime_error {
 public:
  explicit PreprocessError(const std::string& what) : std::runtime_error(what) {}
};

// Grid partition of a frame into equal regions plus the per-region target
// resolution the models consume.
struct RegionSpec {
  int grid_cols = 3;
  int grid_rows = 2;
  int target_width = 640;
  int target_height = 480;

  int region_count() const { return grid_cols * grid_rows; }
  void validate() const;
};

struct AugmentationParams {
  double delta_ev = 0.0;      // exposure shift in EV stops
  double delta_kelvin = 0.0;  // white-balance shift in kelvin
  uint64_t seed = 0;
};

struct AugmentationBounds {
  double max_ev = 1.0;
  double max_kelvin = 1000.0;
  double ref_kelvin = 5500.0;
};

// One training item: a source file plus the photometric variant applied to
// it. region_index -1 means the item feeds every region model; a value
// >= 0 restricts it to that model.
struct TrainItem {
  std::string file;
  int region_index = -1;
  std::string aug_tag;  // "orig" or "ev<±x>_wb<±y>"
  double delta_ev = 0.0;
  double delta_kelvin = 0.0;
};

struct DatasetManifest {
  std::string source_dir;
  std::vector<std::string> excluded;
  std::vector<TrainItem> train_items;
  std::vector<std::string> held_out;
  uint64_t seed = 0;
  RegionSpec spec;
  AugmentationBounds bounds;

  std::string to_json() const;  // deterministic serialization
  static DatasetManifest from_json(const std::string& text);

  void save(const std::string& path) const;
  static DatasetManifest load(const std::string& path);
};

// Row-major tiles covering the frame after cropping the right/bottom
// remainder. Tiles are disjoint and jointly exhaustive over the crop.
std::vector<ImageTensor> partition_regions(const ImageTensor& img, const RegionSpec& spec);

// Bilinear resampling with half-pixel centers; same-size resize is identity.
ImageTensor resize_region(const ImageTensor& tile, int w, int h);

// Exposure shift of delta_ev stops applied in linear light, then re-encoded
// and clipped to [0,1].
ImageTensor augment_exposure(const ImageTensor& img, double delta_ev, double max_ev = 1.0);

// White-balance shift: per-channel gains from a blackbody kelvin->RGB
// mapping at (ref + delta) relative to ref, normalized so g_G = 1, applied
// in linear light (von Kries style), clipped to [0,1].
ImageTensor augment_white_balance(const ImageTensor& img, double delta_kelvin,
                                  const AugmentationBounds& bounds = {});

// Linear-light RGB of an ideal blackbody radiator, scaled so max channel
// is 1. Valid for [1000 K, 12000 K].
std::array<double, 3> blackbody_rgb(double kelvin);

// Gains (g_R, 1, g_B) for shifting a capture referenced at ref_kelvin to
// kelvin, normalized on the green channel.
std::array<double, 3> white_balance_gains(double kelvin, double ref_kelvin);

ImageTensor apply_augmentation(const ImageTensor& img, const AugmentationParams& p,
                               const AugmentationBounds& bounds = {});

// Scans source_dir for .png files, drops names listed in the exclusion
// file, reserves `held_out` originals for evaluation (random under `seed`),
// and emits one original plus n_aug_per_image photometric variants per
// usable image. Deterministic for fixed inputs and seed.
DatasetManifest build_dataset(const std::string& source_dir, const std::string& exclusions_path,
                              const RegionSpec& spec, int n_aug_per_image, int held_out,
                              uint64_t seed, const AugmentationBounds& bounds = {});

// Exclusion list: UTF-8 text, one file name per line, '#' comments.
std::vector<std::string> read_exclusion_list(const std::string& path);

}  // namespace steleguard
