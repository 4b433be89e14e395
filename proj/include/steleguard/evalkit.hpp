#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "steleguard/image.hpp"
#include "steleguard/postprocess.hpp"

namespace steleguard {

class EvalError : public std::runtime_error {
 public:
  explicit EvalError(const std::string& what) : std::runtime_error(what) {}
};

enum class AnomalyCategory {
  carving,
  crack,
  moss,
  doodle,
  salt,
  water_stain,
  bird_dropping,
};

constexpr int kAnomalyCategoryCount = 7;
const std::vector<AnomalyCategory>& all_anomaly_categories();
std::string category_name(AnomalyCategory c);
AnomalyCategory category_from_name(const std::string& name);

struct PixelRect {
  int x = 0, y = 0, width = 0, height = 0;
};

struct AnomalySpec {
  AnomalyCategory category = AnomalyCategory::bird_dropping;
  uint64_t seed = 0;
  double intensity = 1.0;  // in (0, 1]
  std::optional<PixelRect> placement;
};

// Renders the requested deterioration pattern and returns the modified
// image together with the exact ground-truth mask. Pixels outside the mask
// are returned untouched; blends below 1/255 are suppressed entirely so the
// mask stays tight.
std::pair<ImageTensor, BinaryMask> inject_anomaly(const ImageTensor& x, const AnomalySpec& spec);

struct ImageEval {
  std::string id;
  std::string category;  // empty for clean images
  bool clean = false;
  bool detected = false;
  bool false_alarm = false;
  double precision = 1.0;
  double recall = 1.0;
  double iou = 1.0;
};

struct ClassAggregate {
  int images = 0;
  int detected = 0;
  double mean_precision = 0;
  double mean_recall = 0;
  double mean_iou = 0;
};

struct EvalResult {
  std::vector<ImageEval> per_image;
  std::map<std::string, ClassAggregate> per_class;
  int clean_images = 0;
  int false_alarms = 0;

  std::string to_json() const;
};

// Pixel metrics against ground truth. `truths` entries without a mask mark
// clean images; empty-vs-empty scores as precision = recall = IoU = 1.
EvalResult evaluate_detection(const std::vector<DetectionReport>& reports,
                              const std::vector<std::optional<BinaryMask>>& truths,
                              const std::vector<std::string>& ids = {},
                              const std::vector<std::string>& categories = {});

// Horizontal strip of equally sized tiles with thin separators, for
// side-by-side inspection panels.
ImageTensor compose_panel(const std::vector<ImageTensor>& tiles);

ImageTensor mask_to_image(const BinaryMask& mask);

}  // namespace steleguard
