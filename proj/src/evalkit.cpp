#include "steleguard/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "steleguard/rng.hpp"

using json = nlohmann::ordered_json;

namespace steleguard {

const std::vector<AnomalyCategory>& all_anomaly_categories() {
  static const std::vector<AnomalyCategory> cats = {
      AnomalyCategory::carving, AnomalyCategory::crack,       AnomalyCategory::moss,
      AnomalyCategory::doodle,  AnomalyCategory::salt,        AnomalyCategory::water_stain,
      AnomalyCategory::bird_dropping};
  return cats;
}

std::string category_name(AnomalyCategory c) {
  switch (c) {
    case AnomalyCategory::carving: return "carving";
    case AnomalyCategory::crack: return "crack";
    case AnomalyCategory::moss: return "moss";
    case AnomalyCategory::doodle: return "doodle";
    case AnomalyCategory::salt: return "salt";
    case AnomalyCategory::water_stain: return "water_stain";
    case AnomalyCategory::bird_dropping: return "bird_dropping";
  }
  throw EvalError("unknown category");
}

AnomalyCategory category_from_name(const std::string& name) {
  for (AnomalyCategory c : all_anomaly_categories())
    if (category_name(c) == name) return c;
  throw EvalError("unknown anomaly category: " + name);
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

struct AlphaTarget {
  std::vector<double> alpha;           // H*W blend weights in [0,1]
  std::vector<double> target;          // H*W*3 replacement colors
  AlphaTarget(const ImageTensor& x) : alpha(x.pixel_count(), 0.0), target(x.data) {}
};

PixelRect pick_rect(Rng& rng, const ImageTensor& x, const AnomalySpec& spec, double min_frac,
                    double max_frac) {
  if (spec.placement) {
    const PixelRect& r = *spec.placement;
    if (r.x < 0 || r.y < 0 || r.width < 1 || r.height < 1 || r.x + r.width > x.width ||
        r.y + r.height > x.height)
      throw EvalError("anomaly placement outside image bounds");
    return r;
  }
  PixelRect r;
  r.width = std::max(4, static_cast<int>(uniform(rng, min_frac, max_frac) * x.width));
  r.height = std::max(4, static_cast<int>(uniform(rng, min_frac, max_frac) * x.height));
  r.width = std::min(r.width, x.width - 2);
  r.height = std::min(r.height, x.height - 2);
  r.x = uniform_int(rng, 1, x.width - r.width - 1);
  r.y = uniform_int(rng, 1, x.height - r.height - 1);
  return r;
}

void stamp_disk(AlphaTarget& at, const ImageTensor& x, double cx, double cy, double radius,
                double edge, const double* rgb, double alpha) {
  const int x0 = std::max(0, static_cast<int>(cx - radius - edge - 1));
  const int x1 = std::min(x.width - 1, static_cast<int>(cx + radius + edge + 1));
  const int y0 = std::max(0, static_cast<int>(cy - radius - edge - 1));
  const int y1 = std::min(x.height - 1, static_cast<int>(cy + radius + edge + 1));
  for (int y = y0; y <= y1; ++y)
    for (int xx = x0; xx <= x1; ++xx) {
      const double d = std::hypot(xx - cx, y - cy);
      double a;
      if (d <= radius)
        a = alpha;
      else if (d <= radius + edge)
        a = alpha * (1.0 - (d - radius) / edge);
      else
        continue;
      const size_t p = static_cast<size_t>(y) * x.width + xx;
      if (a > at.alpha[p]) {
        at.alpha[p] = a;
        if (rgb)
          for (int c = 0; c < 3; ++c) at.target[p * 3 + c] = rgb[c];
      }
    }
}

// Multiplies the underlying pixel instead of replacing it.
void stamp_disk_scale(AlphaTarget& at, const ImageTensor& x, double cx, double cy, double radius,
                      double edge, double factor, double alpha) {
  const int x0 = std::max(0, static_cast<int>(cx - radius - edge - 1));
  const int x1 = std::min(x.width - 1, static_cast<int>(cx + radius + edge + 1));
  const int y0 = std::max(0, static_cast<int>(cy - radius - edge - 1));
  const int y1 = std::min(x.height - 1, static_cast<int>(cy + radius + edge + 1));
  for (int y = y0; y <= y1; ++y)
    for (int xx = x0; xx <= x1; ++xx) {
      const double d = std::hypot(xx - cx, y - cy);
      double a;
      if (d <= radius)
        a = alpha;
      else if (d <= radius + edge)
        a = alpha * (1.0 - (d - radius) / edge);
      else
        continue;
      const size_t p = static_cast<size_t>(y) * x.width + xx;
      if (a > at.alpha[p]) {
        at.alpha[p] = a;
        for (int c = 0; c < 3; ++c) at.target[p * 3 + c] = x.data[p * 3 + c] * factor;
      }
    }
}

void stamp_stroke(AlphaTarget& at, const ImageTensor& x, double x0, double y0, double x1, double y1,
                  double width, const double* rgb, double alpha, double factor = -1.0) {
  const double len = std::max(1.0, std::hypot(x1 - x0, y1 - y0));
  const int steps = static_cast<int>(len * 2) + 1;
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    const double cx = x0 + (x1 - x0) * t;
    const double cy = y0 + (y1 - y0) * t;
    if (factor > 0)
      stamp_disk_scale(at, x, cx, cy, width / 2, 0.5, factor, alpha);
    else
      stamp_disk(at, x, cx, cy, width / 2, 0.5, rgb, alpha);
  }
}

double scale_unit(const ImageTensor& x) { return std::min(x.height, x.width) / 48.0; }

void render_carving(AlphaTarget& at, const ImageTensor& x, Rng& rng, const PixelRect& r) {
  const double s = scale_unit(x);
  const double dark[3] = {-1, -1, -1};  // unused, factor path
  (void)dark;
  const int strokes = uniform_int(rng, 2, 4);
  for (int i = 0; i < strokes; ++i) {
    const double x0 = uniform(rng, r.x, r.x + r.width - 1);
    const double y0 = uniform(rng, r.y, r.y + r.height - 1);
    const double ang = uniform(rng, 0, 2 * M_PI);
    const double len = uniform(rng, 0.4, 0.9) * std::min(r.width, r.height);
    const double x1 = std::clamp(x0 + std::cos(ang) * len, 1.0, x.width - 2.0);
    const double y1 = std::clamp(y0 + std::sin(ang) * len, 1.0, x.height - 2.0);
    // engraved groove: dark cut with a bright offset rim for relief
    stamp_stroke(at, x, x0, y0, x1, y1, 2.2 * s, nullptr, 1.0, 0.35);
    stamp_stroke(at, x, x0 + 1.2 * s, y0 + 1.2 * s, x1 + 1.2 * s, y1 + 1.2 * s, 1.0 * s, nullptr,
                 0.85, 1.45);
  }
}

void render_crack(AlphaTarget& at, const ImageTensor& x, Rng& rng, const PixelRect& r) {
  const double s = scale_unit(x);
  double cx = uniform(rng, r.x + r.width * 0.3, r.x + r.width * 0.7);
  double cy = r.y;
  const double width = std::max(1.0, 1.1 * s);
  int branches_left = 1;
  while (cy < r.y + r.height - 1) {
    const double nx = std::clamp(cx + uniform(rng, -2.5, 2.5) * s, 1.0, x.width - 2.0);
    const double ny = std::min(cy + uniform(rng, 1.5, 3.5) * s, x.height - 2.0);
    stamp_stroke(at, x, cx, cy, nx, ny, width, nullptr, 1.0, 0.3);
    if (branches_left > 0 && uniform(rng, 0, 1) < 0.25) {
      --branches_left;
      const double bx = std::clamp(nx + uniform(rng, -6, 6) * s, 1.0, x.width - 2.0);
      const double by = std::min(ny + uniform(rng, 2, 5) * s, x.height - 2.0);
      stamp_stroke(at, x, nx, ny, bx, by, width * 0.8, nullptr, 1.0, 0.35);
    }
    cx = nx;
    cy = ny;
  }
}

void render_moss(AlphaTarget& at, const ImageTensor& x, Rng& rng, const PixelRect& r) {
  // low-frequency blobby green cover with soft boundary
  const double cx = r.x + r.width / 2.0;
  const double cy = r.y + r.height / 2.0;
  const double rx = r.width / 2.0, ry = r.height / 2.0;
  const double phase1 = uniform(rng, 0, 2 * M_PI), phase2 = uniform(rng, 0, 2 * M_PI);
  const double lobes = uniform_int(rng, 3, 5);
  for (int y = std::max(0, r.y - 2); y < std::min(x.height, r.y + r.height + 2); ++y)
    for (int xx = std::max(0, r.x - 2); xx < std::min(x.width, r.x + r.width + 2); ++xx) {
      const double dx = (xx - cx) / rx, dy = (y - cy) / ry;
      const double ang = std::atan2(dy, dx);
      const double wobble = 0.75 + 0.25 * std::sin(lobes * ang + phase1);
      const double d = std::hypot(dx, dy) / wobble;
      if (d > 1.0) continue;
      const double a = std::clamp((1.0 - d) / 0.25, 0.0, 1.0) *
                       (0.55 + 0.3 * std::sin(7.0 * dx + phase2) * std::cos(5.0 * dy - phase1));
      if (a <= 0) continue;
      const size_t p = static_cast<size_t>(y) * x.width + xx;
      if (a > at.alpha[p]) {
        at.alpha[p] = a;
        const double g[3] = {0.16 + 0.05 * std::sin(3 * dx + phase2), 0.42 + 0.06 * std::cos(4 * dy),
                             0.14};
        for (int c = 0; c < 3; ++c) at.target[p * 3 + c] = std::clamp(g[c], 0.0, 1.0);
      }
    }
}

void render_doodle(AlphaTarget& at, const ImageTensor& x, Rng& rng, const PixelRect& r) {
  const double s = scale_unit(x);
  static const double palette[3][3] = {{0.85, 0.08, 0.10}, {0.10, 0.18, 0.85}, {0.92, 0.78, 0.08}};
  const double* rgb = palette[uniform_int(rng, 0, 2)];
  const int strokes = uniform_int(rng, 1, 3);
  for (int i = 0; i < strokes; ++i) {
    // quadratic bezier scribble
    const double x0 = uniform(rng, r.x, r.x + r.width - 1);
    const double y0 = uniform(rng, r.y, r.y + r.height - 1);
    const double x1 = uniform(rng, r.x, r.x + r.width - 1);
    const double y1 = uniform(rng, r.y, r.y + r.height - 1);
    const double mx = (x0 + x1) / 2 + uniform(rng, -r.width * 0.4, r.width * 0.4);
    const double my = (y0 + y1) / 2 + uniform(rng, -r.height * 0.4, r.height * 0.4);
    double px = x0, py = y0;
    const int steps = 24;
    for (int t = 1; t <= steps; ++t) {
      const double u = static_cast<double>(t) / steps;
      const double bx = (1 - u) * (1 - u) * x0 + 2 * (1 - u) * u * mx + u * u * x1;
      const double by = (1 - u) * (1 - u) * y0 + 2 * (1 - u) * u * my + u * u * y1;
      stamp_stroke(at, x, px, py, bx, by, 2.6 * s, rgb, 1.0);
      px = bx;
      py = by;
    }
  }
}

void render_salt(AlphaTarget& at, const ImageTensor& x, Rng& rng, const PixelRect& r) {
  const double s = scale_unit(x);
  const double cx = r.x + r.width / 2.0, cy = r.y + r.height / 2.0;
  const double rx = r.width / 2.0, ry = r.height / 2.0;
  // dense speckle cluster; dot sizes straddle the denoising threshold
  const int dots = static_cast<int>(r.width * r.height / (14.0 * s * s)) + 8;
  for (int i = 0; i < dots; ++i) {
    const double ang = uniform(rng, 0, 2 * M_PI);
    const double rad = std::sqrt(uniform(rng, 0, 1));
    const double dx = cx + std::cos(ang) * rad * rx;
    const double dy = cy + std::sin(ang) * rad * ry;
    const double radius = uniform(rng, 0.7, 2.1) * s;
    const double white = uniform(rng, 0.88, 0.98);
    const double rgb[3] = {white, white, white * 0.98};
    stamp_disk(at, x, dx, dy, radius, 0.4, rgb, 1.0);
  }
}

void render_water_stain(AlphaTarget& at, const ImageTensor& x, Rng& rng, const PixelRect& r) {
  const double cx = r.x + r.width / 2.0, cy = r.y + r.height / 2.0;
  const double rx = r.width / 2.0, ry = r.height / 2.0;
  const double phase = uniform(rng, 0, 2 * M_PI);
  const double factor = uniform(rng, 0.42, 0.55);
  for (int y = std::max(0, r.y - 1); y < std::min(x.height, r.y + r.height + 1); ++y)
    for (int xx = std::max(0, r.x - 1); xx < std::min(x.width, r.x + r.width + 1); ++xx) {
      const double dx = (xx - cx) / rx, dy = (y - cy) / ry;
      const double ang = std::atan2(dy, dx);
      const double wobble = 0.85 + 0.15 * std::sin(3 * ang + phase);
      const double d = std::hypot(dx, dy) / wobble;
      if (d > 1.0) continue;
      // smooth rim, opaque core: same texture, darker
      const double a = std::clamp((1.0 - d) / 0.18, 0.0, 1.0);
      const size_t p = static_cast<size_t>(y) * x.width + xx;
      if (a > at.alpha[p]) {
        at.alpha[p] = a;
        for (int c = 0; c < 3; ++c) at.target[p * 3 + c] = x.data[p * 3 + c] * factor;
      }
    }
}

void render_bird_dropping(AlphaTarget& at, const ImageTensor& x, Rng& rng, const PixelRect& r) {
  const double s = scale_unit(x);
  const double cx = r.x + r.width / 2.0, cy = r.y + r.height / 2.0;
  const double base_r = std::min(r.width, r.height) * uniform(rng, 0.28, 0.4);
  const double body[3] = {0.90, 0.89, 0.84};
  const double rim[3] = {0.72, 0.70, 0.64};
  // compact blob: a few overlapping disks with a sharp boundary
  const int blobs = uniform_int(rng, 2, 4);
  stamp_disk(at, x, cx, cy, base_r * 1.1, 0.3, rim, 1.0);
  for (int i = 0; i < blobs; ++i) {
    const double ox = cx + uniform(rng, -0.5, 0.5) * base_r;
    const double oy = cy + uniform(rng, -0.5, 0.5) * base_r;
    stamp_disk(at, x, ox, oy, base_r * uniform(rng, 0.55, 0.9), 0.3, body, 1.0);
  }
  // thin run-off streak
  const double tail = uniform(rng, 2.0, 4.0) * s + base_r;
  stamp_stroke(at, x, cx, cy + base_r * 0.5, cx + uniform(rng, -1.5, 1.5) * s, cy + tail, 1.4 * s,
               body, 1.0);
}

}  // namespace

std::pair<ImageTensor, BinaryMask> inject_anomaly(const ImageTensor& x, const AnomalySpec& spec) {
  if (spec.intensity <= 0.0 || spec.intensity > 1.0)
    throw EvalError("anomaly intensity must be in (0, 1]");
  Rng rng(derive_seed(spec.seed, static_cast<uint64_t>(spec.category) * 0x9E37u + 17));

  AlphaTarget at(x);
  PixelRect rect;
  switch (spec.category) {
    case AnomalyCategory::carving:
      rect = pick_rect(rng, x, spec, 0.3, 0.45);
      render_carving(at, x, rng, rect);
      break;
    case AnomalyCategory::crack:
      rect = pick_rect(rng, x, spec, 0.3, 0.5);
      render_crack(at, x, rng, rect);
      break;
    case AnomalyCategory::moss:
      rect = pick_rect(rng, x, spec, 0.28, 0.42);
      render_moss(at, x, rng, rect);
      break;
    case AnomalyCategory::doodle:
      rect = pick_rect(rng, x, spec, 0.3, 0.45);
      render_doodle(at, x, rng, rect);
      break;
    case AnomalyCategory::salt:
      rect = pick_rect(rng, x, spec, 0.26, 0.4);
      render_salt(at, x, rng, rect);
      break;
    case AnomalyCategory::water_stain:
      rect = pick_rect(rng, x, spec, 0.3, 0.45);
      render_water_stain(at, x, rng, rect);
      break;
    case AnomalyCategory::bird_dropping:
      rect = pick_rect(rng, x, spec, 0.26, 0.4);
      render_bird_dropping(at, x, rng, rect);
      break;
  }

  ImageTensor out = x;
  BinaryMask mask(x.height, x.width);
  const double cutoff = 1.0 / 255.0;
  for (size_t p = 0; p < x.pixel_count(); ++p) {
    const double a = at.alpha[p] * spec.intensity;
    if (a <= cutoff) continue;  // below quantization: leave untouched
    mask.data[p] = 1;
    for (int c = 0; c < 3; ++c) {
      const size_t i = p * 3 + c;
      out.data[i] = std::clamp(x.data[i] + a * (at.target[i] - x.data[i]), 0.0, 1.0);
    }
  }
  return {std::move(out), std::move(mask)};
}

EvalResult evaluate_detection(const std::vector<DetectionReport>& reports,
                              const std::vector<std::optional<BinaryMask>>& truths,
                              const std::vector<std::string>& ids,
                              const std::vector<std::string>& categories) {
  if (reports.size() != truths.size())
    throw EvalError("evaluate_detection: reports and truths are misaligned");
  if (!ids.empty() && ids.size() != reports.size())
    throw EvalError("evaluate_detection: ids misaligned");
  if (!categories.empty() && categories.size() != reports.size())
    throw EvalError("evaluate_detection: categories misaligned");

  EvalResult result;
  for (size_t i = 0; i < reports.size(); ++i) {
    ImageEval ie;
    ie.id = ids.empty() ? "image_" + std::to_string(i) : ids[i];
    ie.category = categories.empty() ? "" : categories[i];
    const BinaryMask& pred = reports[i].final_mask;
    ie.detected = pred.area() > 0;
    if (!truths[i]) {
      ie.clean = true;
      ie.false_alarm = ie.detected;
      ++result.clean_images;
      if (ie.false_alarm) ++result.false_alarms;
      result.per_image.push_back(std::move(ie));
      continue;
    }
    const BinaryMask& truth = *truths[i];
    if (!pred.same_shape(truth)) throw EvalError("evaluate_detection: mask shape mismatch");
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t p = 0; p < pred.data.size(); ++p) {
      const bool a = pred.data[p], b = truth.data[p];
      tp += (a && b);
      fp += (a && !b);
      fn += (!a && b);
    }
    if (tp + fp + fn == 0) {
      ie.precision = ie.recall = ie.iou = 1.0;  // empty vs empty
    } else {
      ie.precision = (tp + fp) ? static_cast<double>(tp) / (tp + fp) : 0.0;
      ie.recall = (tp + fn) ? static_cast<double>(tp) / (tp + fn) : 1.0;
      ie.iou = static_cast<double>(tp) / (tp + fp + fn);
    }
    auto& agg = result.per_class[ie.category.empty() ? "anomaly" : ie.category];
    ++agg.images;
    agg.detected += ie.detected ? 1 : 0;
    agg.mean_precision += ie.precision;
    agg.mean_recall += ie.recall;
    agg.mean_iou += ie.iou;
    result.per_image.push_back(std::move(ie));
  }
  for (auto& [name, agg] : result.per_class) {
    if (agg.images > 0) {
      agg.mean_precision /= agg.images;
      agg.mean_recall /= agg.images;
      agg.mean_iou /= agg.images;
    }
  }
  return result;
}

std::string EvalResult::to_json() const {
  json j;
  j["clean_images"] = clean_images;
  j["false_alarms"] = false_alarms;
  json per = json::array();
  for (const auto& ie : per_image)
    per.push_back(json{{"id", ie.id},
                       {"category", ie.category},
                       {"clean", ie.clean},
                       {"detected", ie.detected},
                       {"false_alarm", ie.false_alarm},
                       {"precision", ie.precision},
                       {"recall", ie.recall},
                       {"iou", ie.iou}});
  j["per_image"] = std::move(per);
  json cls;
  for (const auto& [name, agg] : per_class)
    cls[name] = json{{"images", agg.images},
                     {"detected", agg.detected},
                     {"mean_precision", agg.mean_precision},
                     {"mean_recall", agg.mean_recall},
                     {"mean_iou", agg.mean_iou}};
  j["per_class"] = std::move(cls);
  return j.dump(2) + "\n";
}

ImageTensor compose_panel(const std::vector<ImageTensor>& tiles) {
  if (tiles.empty()) throw EvalError("compose_panel: no tiles");
  const int h = tiles[0].height, w = tiles[0].width;
  for (const auto& t : tiles)
    if (t.height != h || t.width != w) throw EvalError("compose_panel: tile size mismatch");
  const int sep = 2;
  const int total_w = static_cast<int>(tiles.size()) * w + (static_cast<int>(tiles.size()) - 1) * sep;
  ImageTensor out(h, total_w, 1.0);
  int xoff = 0;
  for (const auto& t : tiles) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) out.at(y, xoff + x, c) = t.at(y, x, c);
    xoff += w + sep;
  }
  return out;
}

ImageTensor mask_to_image(const BinaryMask& mask) {
  ImageTensor out(mask.height, mask.width);
  for (size_t p = 0; p < mask.data.size(); ++p) {
    const double v = mask.data[p] ? 1.0 : 0.0;
    out.data[p * 3] = out.data[p * 3 + 1] = out.data[p * 3 + 2] = v;
  }
  return out;
}

}  // namespace steleguard
