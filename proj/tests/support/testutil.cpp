#include "testutil.hpp"

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdio>

#include "steleguard/preprocess.hpp"
#include "steleguard/rng.hpp"

namespace steleguard::testutil {

namespace {

double hash01(uint64_t seed, int x, int y, int octave) {
  const uint64_t h = mix_seed(seed ^ (static_cast<uint64_t>(x) * 0x1F123BB5ull) ^
                              (static_cast<uint64_t>(y) * 0x5851F42Dull) ^
                              (static_cast<uint64_t>(octave) * 0x14057B7Eull));
  return static_cast<double>(h >> 11) / static_cast<double>(1ull << 53);
}

double smooth(double t) { return t * t * (3 - 2 * t); }

// Bilinearly interpolated lattice noise.
double value_noise(uint64_t seed, double x, double y, double cell, int octave) {
  const double gx = x / cell, gy = y / cell;
  const int x0 = static_cast<int>(std::floor(gx)), y0 = static_cast<int>(std::floor(gy));
  const double fx = smooth(gx - x0), fy = smooth(gy - y0);
  const double v00 = hash01(seed, x0, y0, octave);
  const double v10 = hash01(seed, x0 + 1, y0, octave);
  const double v01 = hash01(seed, x0, y0 + 1, octave);
  const double v11 = hash01(seed, x0 + 1, y0 + 1, octave);
  return (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy;
}

}  // namespace

ImageTensor stone_texture(int height, int width, uint64_t seed) {
  ImageTensor img(height, width);
  const double diag = std::hypot(width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double v = 0.46;
      v += 0.10 * (value_noise(seed, x, y, diag / 3.0, 0) - 0.5);
      v += 0.12 * (value_noise(seed, x, y, diag / 9.0, 1) - 0.5);
      v += 0.08 * (value_noise(seed, x, y, diag / 22.0, 2) - 0.5);
      // diagonal sediment veins
      const double vein = std::sin(0.55 * x + 0.8 * y + 6.0 * value_noise(seed, x, y, diag / 6.0, 3));
      v -= 0.05 * smooth(std::clamp(vein - 0.55, 0.0, 1.0) / 0.45);
      // fine speckle gives corners to feature detectors
      v += 0.06 * (hash01(seed, x, y, 7) - 0.5);
      v = std::clamp(v, 0.02, 0.98);
      const double warm = 0.015 * (value_noise(seed, x, y, diag / 5.0, 4) - 0.5);
      img.at(y, x, 0) = std::clamp(v + 0.02 + warm, 0.0, 1.0);
      img.at(y, x, 1) = std::clamp(v + 0.004, 0.0, 1.0);
      img.at(y, x, 2) = std::clamp(v - 0.018 - warm, 0.0, 1.0);
    }
  }
  return img;
}

ImageTensor random_image(int height, int width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  ImageTensor img(height, width);
  for (double& v : img.data) v = dist(rng);
  return img;
}

std::vector<std::string> write_jittered_normals(const std::string& dir, const ImageTensor& base,
                                                int count, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ev(-1.0, 1.0);
  std::uniform_real_distribution<double> wb(-1000.0, 1000.0);
  std::vector<std::string> names;
  for (int i = 0; i < count; ++i) {
    AugmentationParams p;
    p.delta_ev = ev(rng);
    p.delta_kelvin = wb(rng);
    const ImageTensor img = apply_augmentation(base, p);
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04d.png", i);
    save_image(img, dir + "/" + name);
    names.push_back(name);
  }
  return names;
}

std::filesystem::path make_temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const auto base = std::filesystem::temp_directory_path() /
                    ("steleguard_" + tag + "_" + std::to_string(::getpid()) + "_" +
                     std::to_string(counter++));
  std::filesystem::create_directories(base);
  return base;
}

}  // namespace steleguard::testutil
