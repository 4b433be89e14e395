#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>

#include "steleguard/postprocess.hpp"

namespace steleguard {

void Transform::apply(double x, double y, double& ox, double& oy) const {
  const double w = m[6] * x + m[7] * y + m[8];
  ox = (m[0] * x + m[1] * y + m[2]) / w;
  oy = (m[3] * x + m[4] * y + m[5]) / w;
}

Transform Transform::inverse() const {
  Eigen::Matrix3d a;
  a << m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8];
  Eigen::Matrix3d inv = a.inverse();
  Transform t;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.m[r * 3 + c] = inv(r, c);
  return t;
}

namespace {

struct Keypoint {
  double x = 0, y = 0;
  double response = 0;
};

struct Match {
  double xa = 0, ya = 0;  // reconstruction
  double xb = 0, yb = 0;  // input
};

GrayImage box_filter3(const GrayImage& src) {
  GrayImage out(src.height, src.width);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      double s = 0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= src.height || xx < 0 || xx >= src.width) continue;
          s += src.at(yy, xx);
          ++n;
        }
      out.at(y, x) = s / n;
    }
  return out;
}

std::vector<Keypoint> harris_corners(const GrayImage& g, int max_keypoints, int margin) {
  const int h = g.height, w = g.width;
  if (h < 2 * margin + 3 || w < 2 * margin + 3) return {};
  GrayImage ixx(h, w), iyy(h, w), ixy(h, w);
  for (int y = 1; y + 1 < h; ++y)
    for (int x = 1; x + 1 < w; ++x) {
      const double gx = (g.at(y - 1, x + 1) + 2 * g.at(y, x + 1) + g.at(y + 1, x + 1)) -
                        (g.at(y - 1, x - 1) + 2 * g.at(y, x - 1) + g.at(y + 1, x - 1));
      const double gy = (g.at(y + 1, x - 1) + 2 * g.at(y + 1, x) + g.at(y + 1, x + 1)) -
                        (g.at(y - 1, x - 1) + 2 * g.at(y - 1, x) + g.at(y - 1, x + 1));
      ixx.at(y, x) = gx * gx;
      iyy.at(y, x) = gy * gy;
      ixy.at(y, x) = gx * gy;
    }
  ixx = box_filter3(ixx);
  iyy = box_filter3(iyy);
  ixy = box_filter3(ixy);

  GrayImage resp(h, w);
  double max_resp = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double a = ixx.at(y, x), b = iyy.at(y, x), c = ixy.at(y, x);
      const double det = a * b - c * c;
      const double tr = a + b;
      resp.at(y, x) = det - 0.04 * tr * tr;
      max_resp = std::max(max_resp, resp.at(y, x));
    }
  const double floor = std::max(1e-10, 0.005 * max_resp);

  std::vector<Keypoint> kps;
  for (int y = margin; y < h - margin; ++y)
    for (int x = margin; x < w - margin; ++x) {
      const double r = resp.at(y, x);
      if (r < floor) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          if (resp.at(y + dy, x + dx) > r) {
            is_max = false;
            break;
          }
        }
      if (!is_max) continue;
      // sub-pixel peak by per-axis parabola fit
      Keypoint kp;
      kp.response = r;
      const double dl = resp.at(y, x - 1), dr = resp.at(y, x + 1);
      const double du = resp.at(y - 1, x), dd = resp.at(y + 1, x);
      double offx = 0, offy = 0;
      const double denx = dl - 2 * r + dr;
      const double deny = du - 2 * r + dd;
      if (std::abs(denx) > 1e-12) offx = std::clamp(0.5 * (dl - dr) / denx, -0.5, 0.5);
      if (std::abs(deny) > 1e-12) offy = std::clamp(0.5 * (du - dd) / deny, -0.5, 0.5);
      kp.x = x + offx;
      kp.y = y + offy;
      kps.push_back(kp);
    }
  std::sort(kps.begin(), kps.end(),
            [](const Keypoint& a, const Keypoint& b) { return a.response > b.response; });
  if (static_cast<int>(kps.size()) > max_keypoints) kps.resize(max_keypoints);
  return kps;
}

double sample_bilinear(const GrayImage& g, double x, double y) {
  x = std::clamp(x, 0.0, g.width - 1.0);
  y = std::clamp(y, 0.0, g.height - 1.0);
  const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
  const int x1 = std::min(x0 + 1, g.width - 1), y1 = std::min(y0 + 1, g.height - 1);
  const double fx = x - x0, fy = y - y0;
  return (g.at(y0, x0) * (1 - fx) + g.at(y0, x1) * fx) * (1 - fy) +
         (g.at(y1, x0) * (1 - fx) + g.at(y1, x1) * fx) * fy;
}

// Mean/norm-normalized intensity patch, robust to affine brightness shifts.
bool patch_descriptor(const GrayImage& g, const Keypoint& kp, int radius, std::vector<double>& out) {
  const int side = 2 * radius + 1;
  out.resize(static_cast<size_t>(side) * side);
  double mean = 0;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const double v = sample_bilinear(g, kp.x + dx, kp.y + dy);
      out[(dy + radius) * side + (dx + radius)] = v;
      mean += v;
    }
  mean /= out.size();
  double norm = 0;
  for (double& v : out) {
    v -= mean;
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (norm < 1e-8) return false;  // featureless patch
  for (double& v : out) v /= norm;
  return true;
}

double desc_dist2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Similarity transform (scale/rotation/translation) mapping a -> b by
// least squares over the given pairs.
bool fit_similarity(const std::vector<Match>& ms, const std::vector<int>& idx, Transform& t) {
  const size_t n = idx.size();
  if (n < 2) return false;
  double max_ = 0, may = 0, mbx = 0, mby = 0;
  for (int i : idx) {
    max_ += ms[i].xa;
    may += ms[i].ya;
    mbx += ms[i].xb;
    mby += ms[i].yb;
  }
  max_ /= n;
  may /= n;
  mbx /= n;
  mby /= n;
  double sxx = 0, sxy = 0, syx = 0, syy = 0, var = 0;
  for (int i : idx) {
    const double ax = ms[i].xa - max_, ay = ms[i].ya - may;
    const double bx = ms[i].xb - mbx, by = ms[i].yb - mby;
    sxx += ax * bx;
    sxy += ax * by;
    syx += ay * bx;
    syy += ay * by;
    var += ax * ax + ay * ay;
  }
  if (var < 1e-12) return false;
  // b = s R a + t with R = [[c,-s],[s,c]]
  const double c = (sxx + syy) / var;
  const double s = (sxy - syx) / var;
  t.m = {c, -s, mbx - (c * max_ - s * may), s, c, mby - (s * max_ + c * may), 0, 0, 1};
  return true;
}

// Homography via normalized DLT.
bool fit_homography(const std::vector<Match>& ms, const std::vector<int>& idx, Transform& t) {
  const size_t n = idx.size();
  if (n < 4) return false;
  double max_ = 0, may = 0, mbx = 0, mby = 0;
  for (int i : idx) {
    max_ += ms[i].xa;
    may += ms[i].ya;
    mbx += ms[i].xb;
    mby += ms[i].yb;
  }
  max_ /= n;
  may /= n;
  mbx /= n;
  mby /= n;
  double sa = 0, sb = 0;
  for (int i : idx) {
    sa += std::hypot(ms[i].xa - max_, ms[i].ya - may);
    sb += std::hypot(ms[i].xb - mbx, ms[i].yb - mby);
  }
  if (sa < 1e-9 || sb < 1e-9) return false;
  const double scale_a = std::sqrt(2.0) * n / sa;
  const double scale_b = std::sqrt(2.0) * n / sb;

  Eigen::MatrixXd A(2 * n, 9);
  int row = 0;
  for (int i : idx) {
    const double xa = (ms[i].xa - max_) * scale_a, ya = (ms[i].ya - may) * scale_a;
    const double xb = (ms[i].xb - mbx) * scale_b, yb = (ms[i].yb - mby) * scale_b;
    A.row(row++) << -xa, -ya, -1, 0, 0, 0, xb * xa, xb * ya, xb;
    A.row(row++) << 0, 0, 0, -xa, -ya, -1, yb * xa, yb * ya, yb;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  Eigen::VectorXd hvec = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << hvec(0), hvec(1), hvec(2), hvec(3), hvec(4), hvec(5), hvec(6), hvec(7), hvec(8);

  Eigen::Matrix3d ta, tb;
  ta << scale_a, 0, -scale_a * max_, 0, scale_a, -scale_a * may, 0, 0, 1;
  tb << scale_b, 0, -scale_b * mbx, 0, scale_b, -scale_b * mby, 0, 0, 1;
  Eigen::Matrix3d hfull = tb.inverse() * hn * ta;
  if (std::abs(hfull(2, 2)) < 1e-12) return false;
  hfull /= hfull(2, 2);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.m[r * 3 + c] = hfull(r, c);
  return true;
}

double reproj_error(const Match& m, const Transform& t) {
  double px, py;
  t.apply(m.xa, m.ya, px, py);
  return std::hypot(px - m.xb, py - m.yb);
}

std::vector<int> inlier_set(const std::vector<Match>& ms, const Transform& t, double tol) {
  std::vector<int> idx;
  for (size_t i = 0; i < ms.size(); ++i)
    if (reproj_error(ms[i], t) <= tol) idx.push_back(static_cast<int>(i));
  return idx;
}

}  // namespace

ImageTensor warp_image(const ImageTensor& img, const Transform& t) {
  const Transform inv = t.inverse();
  ImageTensor out(img.height, img.width);
  GrayImage chan(img.height, img.width);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) chan.at(y, x) = img.at(y, x, c);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double sx, sy;
        inv.apply(x, y, sx, sy);
        out.at(y, x, c) = sample_bilinear(chan, sx, sy);
      }
  }
  return out;
}

std::pair<ImageTensor, RegistrationInfo> register_images(const ImageTensor& x,
                                                         const ImageTensor& x_hat,
                                                         const RegistrationConfig& cfg) {
  if (!x.same_shape(x_hat)) throw PostprocessError("register_images: shape mismatch");
  RegistrationInfo info;
  if (!cfg.enabled) return {x_hat, info};

  const GrayImage ga = to_grayscale(x_hat);
  const GrayImage gb = to_grayscale(x);
  const int margin = cfg.descriptor_radius + 2;
  const auto kpa = harris_corners(ga, cfg.max_keypoints, margin);
  const auto kpb = harris_corners(gb, cfg.max_keypoints, margin);

  std::vector<std::vector<double>> da, db;
  std::vector<Keypoint> ka, kb;
  std::vector<double> desc;
  for (const auto& kp : kpa)
    if (patch_descriptor(ga, kp, cfg.descriptor_radius, desc)) {
      da.push_back(desc);
      ka.push_back(kp);
    }
  for (const auto& kp : kpb)
    if (patch_descriptor(gb, kp, cfg.descriptor_radius, desc)) {
      db.push_back(desc);
      kb.push_back(kp);
    }

  // Ratio-test matching, mutual-best filtered.
  std::vector<int> best_ab(da.size(), -1), best_ba(db.size(), -1);
  for (size_t i = 0; i < da.size(); ++i) {
    double d1 = 1e18, d2 = 1e18;
    int arg = -1;
    for (size_t j = 0; j < db.size(); ++j) {
      const double d = desc_dist2(da[i], db[j]);
      if (d < d1) {
        d2 = d1;
        d1 = d;
        arg = static_cast<int>(j);
      } else if (d < d2) {
        d2 = d;
      }
    }
    if (arg >= 0 && d1 <= 0.72 * d2) best_ab[i] = arg;
  }
  for (size_t j = 0; j < db.size(); ++j) {
    double d1 = 1e18;
    int arg = -1;
    for (size_t i = 0; i < da.size(); ++i) {
      const double d = desc_dist2(da[i], db[j]);
      if (d < d1) {
        d1 = d;
        arg = static_cast<int>(i);
      }
    }
    best_ba[j] = arg;
  }
  std::vector<Match> matches;
  for (size_t i = 0; i < da.size(); ++i) {
    const int j = best_ab[i];
    if (j >= 0 && best_ba[j] == static_cast<int>(i))
      matches.push_back({ka[i].x, ka[i].y, kb[j].x, kb[j].y});
  }
  info.matches = static_cast<int>(matches.size());

  if (info.matches < cfg.min_matches) {
    info.kind = "identity";
    info.low_confidence = true;
    return {x_hat, info};
  }

  // Deterministic RANSAC (fixed internal seed keeps detect reproducible).
  std::mt19937_64 rng(0x5EEDBA5Eull);
  std::uniform_int_distribution<int> pick(0, info.matches - 1);
  Transform best_t;
  std::vector<int> best_inliers;
  std::string best_kind = "identity";

  for (int iter = 0; iter < cfg.ransac_iters; ++iter) {
    const bool projective = info.matches >= 8 && iter % 2 == 0;
    std::vector<int> sample;
    while (static_cast<int>(sample.size()) < (projective ? 4 : 2)) {
      const int c = pick(rng);
      if (std::find(sample.begin(), sample.end(), c) == sample.end()) sample.push_back(c);
    }
    Transform t;
    const bool ok = projective ? fit_homography(matches, sample, t) : fit_similarity(matches, sample, t);
    if (!ok) continue;
    auto inl = inlier_set(matches, t, cfg.ransac_reproj_tol);
    if (inl.size() > best_inliers.size()) {
      best_inliers = std::move(inl);
      best_t = t;
      best_kind = projective ? "projective" : "similarity";
    }
  }

  if (best_inliers.size() < 4) {
    info.kind = "identity";
    info.low_confidence = true;
    return {x_hat, info};
  }

  // Least-squares refit on the consensus set; projective refit only when
  // enough support exists, otherwise a similarity keeps things stable.
  Transform refined = best_t;
  if (best_inliers.size() >= 8 && fit_homography(matches, best_inliers, refined))
    best_kind = "projective";
  else if (fit_similarity(matches, best_inliers, refined))
    best_kind = "similarity";
  auto inl = inlier_set(matches, refined, cfg.ransac_reproj_tol);
  if (inl.size() >= best_inliers.size()) {
    best_inliers = std::move(inl);
    best_t = refined;
  }

  info.kind = best_kind;
  info.inliers = static_cast<int>(best_inliers.size());
  info.inlier_ratio = static_cast<double>(info.inliers) / info.matches;
  double err = 0;
  for (int i : best_inliers) err += reproj_error(matches[i], best_t);
  info.mean_reproj_error = err / best_inliers.size();
  info.low_confidence = info.inliers < cfg.min_matches || info.inlier_ratio < 0.5;
  info.transform = best_t;
  info.warped = true;
  return {warp_image(x_hat, best_t), info};
}

}  // namespace steleguard
