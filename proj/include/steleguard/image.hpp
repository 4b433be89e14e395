#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace steleguard {

class ImageError : public std::runtime_error {
 public:
  explicit ImageError(const std::string& what) : std::runtime_error(what) {}
};

// H x W x 3 image, RGB interleaved, values nominally in [0,1].
// Intermediate arithmetic may leave values outside [0,1]; they are clipped
// at save time and at augmentation output, not here.
struct ImageTensor {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // size height*width*3

  ImageTensor() = default;
  ImageTensor(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<size_t>(h) * w * 3, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  size_t pixel_count() const { return static_cast<size_t>(height) * width; }
  bool same_shape(const ImageTensor& o) const { return height == o.height && width == o.width; }
};

// Single-channel image, values in [0,1].
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // size height*width

  GrayImage() = default;
  GrayImage(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<size_t>(h) * w, fill) {}

  double& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  double at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
};

// Per-pixel anomaly mask. true = anomaly.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;  // 0 or 1

  BinaryMask() = default;
  BinaryMask(int h, int w, bool fill = false)
      : height(h), width(w), data(static_cast<size_t>(h) * w, fill ? 1 : 0) {}

  uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
  size_t area() const;
  bool empty() const { return area() == 0; }
  bool same_shape(const BinaryMask& o) const { return height == o.height && width == o.width; }
};

// PNG I/O. Canonical on-disk format is 8-bit RGB PNG; load also accepts
// 16-bit RGB. Samples map to v / (2^bits - 1).
ImageTensor load_image(const std::string& path);

// Writes 8-bit RGB PNG. Values are clipped to [0,1] and rounded half away
// from zero (0.5 stores as 128).
void save_image(const ImageTensor& img, const std::string& path);

// Mask PNG: 8-bit grayscale, 0 = normal, 255 = anomaly. Lossless round-trip.
void save_mask(const BinaryMask& mask, const std::string& path);
BinaryMask load_mask(const std::string& path);

// Equal-weight linear stack of the three channels: (R+G+B)/3.
GrayImage to_grayscale(const ImageTensor& img);

// Standard sRGB electro-optical transfer function and its inverse.
double srgb_to_linear(double v);
double linear_to_srgb(double v);
ImageTensor linearize(const ImageTensor& img);
ImageTensor delinearize(const ImageTensor& img);

ImageTensor clip01(ImageTensor img);

// Pipeline entry contract: height/width >= 16.
void validate_pipeline_entry(const ImageTensor& img);

}  // namespace steleguard
