#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "steleguard/image.hpp"

namespace steleguard {

class PostprocessError : public std::runtime_error {
 public:
  explicit PostprocessError(const std::string& what) : std::runtime_error(what) {}
};

// Per-pixel map comparing input and reconstruction. "difference" maps are
// >= 0 with larger meaning more anomalous; "similarity" maps live in
// [-1, 1] with smaller meaning more anomalous.
struct SimilarityMatrix {
  enum class Kind { difference, similarity };
  int height = 0;
  int width = 0;
  Kind kind = Kind::difference;
  std::vector<double> values;

  SimilarityMatrix() = default;
  SimilarityMatrix(int h, int w, Kind k)
      : height(h), width(w), kind(k), values(static_cast<size_t>(h) * w, 0.0) {}
  double& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
  double at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
};

struct RegistrationConfig {
  bool enabled = true;
  int min_matches = 12;
  double ransac_reproj_tol = 2.0;  // pixels
  int max_keypoints = 400;
  int descriptor_radius = 5;  // patch half-width
  int ransac_iters = 500;
};

struct PostprocessConfig {
  RegistrationConfig registration;
  int ssim_window = 8;
  double ssim_k1 = 0.01;
  double ssim_k2 = 0.03;
  double tau_ms = 0.15;
  double tau_ssim = 0.55;
  // Connected components smaller than min_area pixels are dropped. A
  // negative value scales the 64 px^2 default at 640x480 with image area
  // (floor of 8).
  double min_area = -1.0;
  int connectivity = 8;

  double effective_min_area(int height, int width) const;
  void validate() const;
};

// 3x3 projective transform, row-major; maps reconstruction coordinates
// into input coordinates.
struct Transform {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};
  static Transform identity() { return {}; }
  void apply(double x, double y, double& ox, double& oy) const;
  Transform inverse() const;
};

struct RegistrationInfo {
  Transform transform;
  std::string kind = "identity";  // identity | similarity | projective
  int matches = 0;
  int inliers = 0;
  double inlier_ratio = 0.0;
  double mean_reproj_error = 0.0;  // pixels, over inliers
  bool low_confidence = true;
  bool warped = false;
};

// Feature-based alignment of the reconstruction toward the input: corner
// detection, normalized patch descriptors, ratio-test matching and a
// robust consensus fit (projective, falling back to similarity). Returns
// the warped reconstruction; never throws on poor texture, it reports a
// low-confidence identity instead.
std::pair<ImageTensor, RegistrationInfo> register_images(const ImageTensor& x,
                                                         const ImageTensor& x_hat,
                                                         const RegistrationConfig& cfg = {});

ImageTensor warp_image(const ImageTensor& img, const Transform& t);

// Per-channel affine remap of the reconstruction onto the input's mean and
// standard deviation. Channels with (near-)zero spread collapse to the
// input mean instead of dividing by zero.
ImageTensor match_colors(const ImageTensor& x, const ImageTensor& x_hat_reg);

// Per-channel difference, decentered by the channel median (lower median
// for even counts), absolute values summed over channels.
SimilarityMatrix matrix_subtraction(const ImageTensor& x, const ImageTensor& x_hat_cm);

// Windowed SSIM on the grayscale pair; the map entry at (y, x) scores the
// window whose top-left corner is (y, x), and border entries replicate the
// nearest valid window.
SimilarityMatrix ssim_map(const ImageTensor& x, const ImageTensor& x_hat_cm,
                          const PostprocessConfig& cfg = {});

// Strict thresholding: difference maps flag values > tau_ms, similarity
// maps flag values < tau_ssim; values equal to the threshold stay normal.
BinaryMask binarize(const SimilarityMatrix& m, const PostprocessConfig& cfg = {});

struct ComponentStats {
  int label = 0;
  size_t area = 0;
  int min_x = 0, min_y = 0, max_x = 0, max_y = 0;
};

// Labels start at 1; when `labels` is given it receives the per-pixel
// component id (0 = background).
std::vector<ComponentStats> connected_components(const BinaryMask& mask, int connectivity = 8,
                                                 std::vector<int>* labels = nullptr);

BinaryMask denoise_mask(const BinaryMask& mask, const PostprocessConfig& cfg = {});

BinaryMask union_masks(const BinaryMask& a, const BinaryMask& b);

struct DetectionReport {
  bool anomaly_present = false;
  BinaryMask final_mask;
  BinaryMask ms_mask;    // after denoising
  BinaryMask ssim_mask;  // after denoising
  SimilarityMatrix ms_map;
  SimilarityMatrix ssim_values;
  RegistrationInfo registration;
  double tau_ms = 0.0;
  double tau_ssim = 0.0;
  double min_area = 0.0;
  int region_index = -1;
  std::string source;
  std::vector<ComponentStats> components;

  std::string to_json() const;
};

class GanomalyModel;

// Full pipeline: reconstruct, register, match colors, build both maps,
// binarize, denoise and union them.
DetectionReport detect(const ImageTensor& x, GanomalyModel& model, const PostprocessConfig& cfg = {});

// Same pipeline against a caller-supplied reconstruction (used by tests
// and threshold calibration).
DetectionReport detect_with_reconstruction(const ImageTensor& x, const ImageTensor& x_hat,
                                           const PostprocessConfig& cfg = {});

struct CalibrationResult {
  double tau_ms = 0.0;
  double tau_ssim = 0.0;
  double ms_percentile = 99.5;
  double ssim_percentile = 0.5;
  int images = 0;
};

// Default-threshold calibration from clean validation images: tau_ms is
// the pooled 99.5th percentile of MS values, tau_ssim the pooled 0.5th
// percentile of SSIM values, with a configurable safety margin on top.
CalibrationResult calibrate_thresholds(const std::vector<ImageTensor>& clean_images,
                                       GanomalyModel& model, const PostprocessConfig& cfg = {},
                                       double ms_percentile = 99.5, double ssim_percentile = 0.5,
                                       double margin = 1.25);

// Grayscale heatmap of a similarity matrix; larger differences map darker.
ImageTensor similarity_heatmap(const SimilarityMatrix& m);

}  // namespace steleguard
