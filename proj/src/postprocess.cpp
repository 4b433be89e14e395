#include "steleguard/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include <nlohmann/json.hpp>

#include "steleguard/model.hpp"

using json = nlohmann::ordered_json;

namespace steleguard {

void PostprocessConfig::validate() const {
  if (ssim_window < 3) throw PostprocessError("ssim_window must be >= 3");
  if (!std::isfinite(tau_ms) || !std::isfinite(tau_ssim))
    throw PostprocessError("detection thresholds must be finite");
  if (connectivity != 4 && connectivity != 8)
    throw PostprocessError("connectivity must be 4 or 8");
}

double PostprocessConfig::effective_min_area(int height, int width) const {
  if (min_area >= 0) return min_area;
  const double scaled = 64.0 * (static_cast<double>(height) * width) / (640.0 * 480.0);
  return std::max(8.0, std::round(scaled));
}

ImageTensor match_colors(const ImageTensor& x, const ImageTensor& x_hat_reg) {
  if (!x.same_shape(x_hat_reg)) throw PostprocessError("match_colors: shape mismatch");
  ImageTensor out(x.height, x.width);
  const size_t n = x.pixel_count();
  for (int c = 0; c < 3; ++c) {
    double mx = 0, mh = 0;
    for (size_t p = 0; p < n; ++p) {
      mx += x.data[p * 3 + c];
      mh += x_hat_reg.data[p * 3 + c];
    }
    mx /= n;
    mh /= n;
    double vx = 0, vh = 0;
    for (size_t p = 0; p < n; ++p) {
      const double dx = x.data[p * 3 + c] - mx;
      const double dh = x_hat_reg.data[p * 3 + c] - mh;
      vx += dx * dx;
      vh += dh * dh;
    }
    const double sx = std::sqrt(vx / n);
    const double sh = std::sqrt(vh / n);
    if (sh < 1e-9) {
      // degenerate reconstruction channel: collapse to the input mean
      for (size_t p = 0; p < n; ++p) out.data[p * 3 + c] = mx;
    } else {
      const double gain = sx / sh;
      for (size_t p = 0; p < n; ++p)
        out.data[p * 3 + c] = (x_hat_reg.data[p * 3 + c] - mh) * gain + mx;
    }
  }
  return out;
}

namespace {

double lower_median(std::vector<double>& v) {
  const size_t k = (v.size() - 1) / 2;
  std::nth_element(v.begin(), v.begin() + k, v.end());
  return v[k];
}

}  // namespace

SimilarityMatrix matrix_subtraction(const ImageTensor& x, const ImageTensor& x_hat_cm) {
  if (!x.same_shape(x_hat_cm)) throw PostprocessError("matrix_subtraction: shape mismatch");
  const size_t n = x.pixel_count();
  SimilarityMatrix out(x.height, x.width, SimilarityMatrix::Kind::difference);
  std::vector<double> diff(n);
  for (int c = 0; c < 3; ++c) {
    for (size_t p = 0; p < n; ++p) diff[p] = x.data[p * 3 + c] - x_hat_cm.data[p * 3 + c];
    std::vector<double> tmp = diff;
    const double med = lower_median(tmp);
    for (size_t p = 0; p < n; ++p) out.values[p] += std::abs(diff[p] - med);
  }
  return out;
}

namespace {

// Summed-area table with a zero top row/left column.
struct Sat {
  int h = 0, w = 0;
  std::vector<double> s;
  Sat(const std::vector<double>& v, int height, int width) : h(height), w(width) {
    s.assign(static_cast<size_t>(h + 1) * (w + 1), 0.0);
    for (int y = 0; y < h; ++y) {
      double row = 0;
      for (int x = 0; x < w; ++x) {
        row += v[static_cast<size_t>(y) * w + x];
        s[static_cast<size_t>(y + 1) * (w + 1) + x + 1] = s[static_cast<size_t>(y) * (w + 1) + x + 1] + row;
      }
    }
  }
  double window(int y, int x, int side) const {
    const size_t stride = w + 1;
    return s[(y + side) * stride + x + side] - s[y * stride + x + side] -
           s[(y + side) * stride + x] + s[y * stride + x];
  }
};

}  // namespace

SimilarityMatrix ssim_map(const ImageTensor& x, const ImageTensor& x_hat_cm,
                          const PostprocessConfig& cfg) {
  if (!x.same_shape(x_hat_cm)) throw PostprocessError("ssim_map: shape mismatch");
  const int win = cfg.ssim_window;
  if (win < 3) throw PostprocessError("ssim_window must be >= 3");
  if (win > x.height || win > x.width)
    throw PostprocessError("ssim window larger than image");

  const GrayImage a = to_grayscale(x);
  const GrayImage b = to_grayscale(x_hat_cm);
  const int h = x.height, w = x.width;
  std::vector<double> aa(a.data.size()), bb(a.data.size()), ab(a.data.size());
  for (size_t i = 0; i < a.data.size(); ++i) {
    aa[i] = a.data[i] * a.data[i];
    bb[i] = b.data[i] * b.data[i];
    ab[i] = a.data[i] * b.data[i];
  }
  const Sat sat_a(a.data, h, w), sat_b(b.data, h, w);
  const Sat sat_aa(aa, h, w), sat_bb(bb, h, w), sat_ab(ab, h, w);

  const double c1 = cfg.ssim_k1 * cfg.ssim_k1;  // L = 1
  const double c2 = cfg.ssim_k2 * cfg.ssim_k2;
  const double inv_n = 1.0 / (static_cast<double>(win) * win);

  SimilarityMatrix out(h, w, SimilarityMatrix::Kind::similarity);
  const int last_y = h - win, last_x = w - win;
  for (int y = 0; y <= last_y; ++y) {
    for (int x2 = 0; x2 <= last_x; ++x2) {
      const double ma = sat_a.window(y, x2, win) * inv_n;
      const double mb = sat_b.window(y, x2, win) * inv_n;
      const double va = std::max(0.0, sat_aa.window(y, x2, win) * inv_n - ma * ma);
      const double vb = std::max(0.0, sat_bb.window(y, x2, win) * inv_n - mb * mb);
      const double cov = sat_ab.window(y, x2, win) * inv_n - ma * mb;
      out.at(y, x2) = ((2 * ma * mb + c1) * (2 * cov + c2)) /
                      ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  }
  // borders replicate the nearest valid window score
  for (int y = 0; y < h; ++y)
    for (int x2 = 0; x2 < w; ++x2)
      if (y > last_y || x2 > last_x) out.at(y, x2) = out.at(std::min(y, last_y), std::min(x2, last_x));
  return out;
}

BinaryMask binarize(const SimilarityMatrix& m, const PostprocessConfig& cfg) {
  BinaryMask mask(m.height, m.width);
  if (m.kind == SimilarityMatrix::Kind::difference) {
    for (size_t i = 0; i < m.values.size(); ++i) mask.data[i] = m.values[i] > cfg.tau_ms ? 1 : 0;
  } else {
    for (size_t i = 0; i < m.values.size(); ++i) mask.data[i] = m.values[i] < cfg.tau_ssim ? 1 : 0;
  }
  return mask;
}

std::vector<ComponentStats> connected_components(const BinaryMask& mask, int connectivity,
                                                 std::vector<int>* labels) {
  if (connectivity != 4 && connectivity != 8)
    throw PostprocessError("connectivity must be 4 or 8");
  std::vector<ComponentStats> comps;
  std::vector<int> label(mask.data.size(), 0);
  const int h = mask.height, w = mask.width;

  static constexpr int dx8[] = {1, -1, 0, 0, 1, 1, -1, -1};
  static constexpr int dy8[] = {0, 0, 1, -1, 1, -1, 1, -1};
  const int ndirs = connectivity == 8 ? 8 : 4;

  int next = 0;
  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(y, x) || label[static_cast<size_t>(y) * w + x]) continue;
      ComponentStats c;
      c.label = ++next;
      c.min_x = c.max_x = x;
      c.min_y = c.max_y = y;
      queue.push_back({y, x});
      label[static_cast<size_t>(y) * w + x] = c.label;
      while (!queue.empty()) {
        auto [cy, cx] = queue.front();
        queue.pop_front();
        ++c.area;
        c.min_x = std::min(c.min_x, cx);
        c.max_x = std::max(c.max_x, cx);
        c.min_y = std::min(c.min_y, cy);
        c.max_y = std::max(c.max_y, cy);
        for (int d = 0; d < ndirs; ++d) {
          const int ny = cy + dy8[d], nx = cx + dx8[d];
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          if (!mask.at(ny, nx) || label[static_cast<size_t>(ny) * w + nx]) continue;
          label[static_cast<size_t>(ny) * w + nx] = c.label;
          queue.push_back({ny, nx});
        }
      }
      comps.push_back(c);
    }
  }
  if (labels) *labels = std::move(label);
  return comps;
}

BinaryMask denoise_mask(const BinaryMask& mask, const PostprocessConfig& cfg) {
  const double min_area = cfg.effective_min_area(mask.height, mask.width);
  std::vector<int> label;
  const auto comps = connected_components(mask, cfg.connectivity, &label);
  BinaryMask out(mask.height, mask.width);
  if (comps.empty()) return out;
  std::vector<bool> keep(comps.size() + 1, false);
  for (const auto& c : comps) keep[c.label] = c.area >= min_area;
  for (size_t i = 0; i < mask.data.size(); ++i) out.data[i] = (label[i] && keep[label[i]]) ? 1 : 0;
  return out;
}

BinaryMask union_masks(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b)) throw PostprocessError("union_masks: shape mismatch");
  BinaryMask out(a.height, a.width);
  for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = (a.data[i] || b.data[i]) ? 1 : 0;
  return out;
}

std::string DetectionReport::to_json() const {
  json j;
  j["anomaly_present"] = anomaly_present;
  j["source"] = source;
  j["region_index"] = region_index;
  j["thresholds"] = json{{"tau_ms", tau_ms}, {"tau_ssim", tau_ssim}, {"min_area", min_area}};
  j["registration"] = json{{"kind", registration.kind},
                           {"matches", registration.matches},
                           {"inliers", registration.inliers},
                           {"inlier_ratio", registration.inlier_ratio},
                           {"mean_reproj_error", registration.mean_reproj_error},
                           {"low_confidence", registration.low_confidence},
                           {"warped", registration.warped}};
  j["mask_area"] = final_mask.area();
  j["ms_mask_area"] = ms_mask.area();
  j["ssim_mask_area"] = ssim_mask.area();
  json comps = json::array();
  for (const auto& c : components)
    comps.push_back(json{{"area", c.area},
                         {"bbox", {{"min_x", c.min_x}, {"min_y", c.min_y}, {"max_x", c.max_x}, {"max_y", c.max_y}}}});
  j["components"] = std::move(comps);
  return j.dump(2) + "\n";
}

DetectionReport detect_with_reconstruction(const ImageTensor& x, const ImageTensor& x_hat,
                                           const PostprocessConfig& cfg) {
  cfg.validate();
  DetectionReport rep;
  ImageTensor x_hat_reg = x_hat;
  if (cfg.registration.enabled) {
    auto [warped, info] = register_images(x, x_hat, cfg.registration);
    x_hat_reg = std::move(warped);
    rep.registration = info;
  }
  const ImageTensor x_hat_cm = match_colors(x, x_hat_reg);
  rep.ms_map = matrix_subtraction(x, x_hat_cm);
  rep.ssim_values = ssim_map(x, x_hat_cm, cfg);
  rep.ms_mask = denoise_mask(binarize(rep.ms_map, cfg), cfg);
  rep.ssim_mask = denoise_mask(binarize(rep.ssim_values, cfg), cfg);
  rep.final_mask = union_masks(rep.ms_mask, rep.ssim_mask);
  rep.components = connected_components(rep.final_mask, cfg.connectivity);
  rep.anomaly_present = !rep.components.empty();
  rep.tau_ms = cfg.tau_ms;
  rep.tau_ssim = cfg.tau_ssim;
  rep.min_area = cfg.effective_min_area(x.height, x.width);
  return rep;
}

DetectionReport detect(const ImageTensor& x, GanomalyModel& model, const PostprocessConfig& cfg) {
  validate_pipeline_entry(x);
  const ImageTensor x_hat = model.reconstruct(x);
  return detect_with_reconstruction(x, x_hat, cfg);
}

namespace {

double percentile(std::vector<double>& v, double p) {
  if (v.empty()) throw PostprocessError("percentile of empty sample");
  std::sort(v.begin(), v.end());
  const double rank = p / 100.0 * (v.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  const size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = rank - lo;
  return v[lo] * (1 - frac) + v[hi] * frac;
}

}  // namespace

CalibrationResult calibrate_thresholds(const std::vector<ImageTensor>& clean_images,
                                       GanomalyModel& model, const PostprocessConfig& cfg,
                                       double ms_percentile, double ssim_percentile, double margin) {
  if (clean_images.empty()) throw PostprocessError("calibration requires clean images");
  std::vector<double> ms_pool, ssim_pool;
  for (const ImageTensor& img : clean_images) {
    const ImageTensor x_hat = model.reconstruct(img);
    ImageTensor x_hat_reg = x_hat;
    if (cfg.registration.enabled) x_hat_reg = register_images(img, x_hat, cfg.registration).first;
    const ImageTensor x_hat_cm = match_colors(img, x_hat_reg);
    const SimilarityMatrix ms = matrix_subtraction(img, x_hat_cm);
    const SimilarityMatrix sm = ssim_map(img, x_hat_cm, cfg);
    ms_pool.insert(ms_pool.end(), ms.values.begin(), ms.values.end());
    ssim_pool.insert(ssim_pool.end(), sm.values.begin(), sm.values.end());
  }
  CalibrationResult out;
  out.ms_percentile = ms_percentile;
  out.ssim_percentile = ssim_percentile;
  out.images = static_cast<int>(clean_images.size());
  const double ms_p = percentile(ms_pool, ms_percentile);
  const double ssim_p = percentile(ssim_pool, ssim_percentile);
  out.tau_ms = ms_p * margin;
  out.tau_ssim = 1.0 - (1.0 - ssim_p) * margin;
  return out;
}

ImageTensor similarity_heatmap(const SimilarityMatrix& m) {
  ImageTensor out(m.height, m.width);
  double lo = 0, hi = 1e-12;
  std::vector<double> level(m.values.size());
  if (m.kind == SimilarityMatrix::Kind::difference) {
    for (size_t i = 0; i < m.values.size(); ++i) level[i] = m.values[i];
  } else {
    for (size_t i = 0; i < m.values.size(); ++i) level[i] = (1.0 - m.values[i]) / 2.0;
  }
  for (double v : level) hi = std::max(hi, v);
  for (size_t i = 0; i < level.size(); ++i) {
    // darker = larger difference
    const double g = 1.0 - std::clamp((level[i] - lo) / (hi - lo), 0.0, 1.0);
    out.data[i * 3] = out.data[i * 3 + 1] = out.data[i * 3 + 2] = g;
  }
  return out;
}

}  // namespace steleguard
