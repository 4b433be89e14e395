#include "steleguard/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace steleguard {

size_t BinaryMask::area() const {
  size_t n = 0;
  for (uint8_t v : data) n += v ? 1 : 0;
  return n;
}

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() { png_destroy_write_struct(&png, &info); }
};

void read_png_rows(const std::string& path, PngReader& r, std::vector<std::vector<png_byte>>& rows,
                   int& width, int& height, int& bit_depth, int& channels, int& color_type) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw ImageError("cannot open image file: " + path);

  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8) != 0)
    throw ImageError("not a PNG file: " + path);

  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!r.png) throw ImageError("png init failed: " + path);
  r.info = png_create_info_struct(r.png);
  if (!r.info) throw ImageError("png init failed: " + path);
  if (setjmp(png_jmpbuf(r.png))) throw ImageError("undecodable PNG data: " + path);

  png_init_io(r.png, fp.get());
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);

  width = static_cast<int>(png_get_image_width(r.png, r.info));
  height = static_cast<int>(png_get_image_height(r.png, r.info));
  bit_depth = png_get_bit_depth(r.png, r.info);
  color_type = png_get_color_type(r.png, r.info);

  if (color_type == PNG_COLOR_TYPE_PALETTE) {
    png_set_palette_to_rgb(r.png);
    color_type = PNG_COLOR_TYPE_RGB;
    if (bit_depth < 8) bit_depth = 8;
  }
  if (bit_depth < 8) png_set_packing(r.png);

  png_read_update_info(r.png, r.info);
  channels = png_get_channels(r.png, r.info);
  bit_depth = png_get_bit_depth(r.png, r.info);

  const size_t rowbytes = png_get_rowbytes(r.png, r.info);
  rows.assign(height, std::vector<png_byte>(rowbytes));
  std::vector<png_bytep> row_ptrs(height);
  for (int y = 0; y < height; ++y) row_ptrs[y] = rows[y].data();
  png_read_image(r.png, row_ptrs.data());
  png_read_end(r.png, nullptr);
}

}  // namespace

ImageTensor load_image(const std::string& path) {
  PngReader r;
  std::vector<std::vector<png_byte>> rows;
  int width = 0, height = 0, bit_depth = 0, channels = 0, color_type = 0;
  read_png_rows(path, r, rows, width, height, bit_depth, channels, color_type);

  if (channels != 3)
    throw ImageError("expected 3 channels, got " + std::to_string(channels) + ": " + path);
  if (bit_depth != 8 && bit_depth != 16)
    throw ImageError("expected 8- or 16-bit samples, got " + std::to_string(bit_depth) + ": " + path);

  const double scale = 1.0 / ((1u << bit_depth) - 1u);
  ImageTensor img(height, width);
  for (int y = 0; y < height; ++y) {
    const png_byte* row = rows[y].data();
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) {
        unsigned v;
        if (bit_depth == 8) {
          v = row[x * 3 + c];
        } else {
          // PNG stores 16-bit samples big-endian.
          v = (static_cast<unsigned>(row[(x * 3 + c) * 2]) << 8) | row[(x * 3 + c) * 2 + 1];
        }
        img.at(y, x, c) = v * scale;
      }
    }
  }
  return img;
}

namespace {

uint8_t quantize8(double v) {
  v = std::clamp(v, 0.0, 1.0);
  // round half away from zero: 0.5 -> 128
  return static_cast<uint8_t>(std::lround(v * 255.0));
}

void write_png8(const std::string& path, int width, int height, int color_type,
                const std::vector<png_byte>& pixels, int channels) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw ImageError("cannot write image file: " + path);

  PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!w.png) throw ImageError("png init failed: " + path);
  w.info = png_create_info_struct(w.png);
  if (!w.info) throw ImageError("png init failed: " + path);
  if (setjmp(png_jmpbuf(w.png))) throw ImageError("png write failed: " + path);

  png_init_io(w.png, fp.get());
  png_set_IHDR(w.png, w.info, width, height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  std::vector<png_bytep> row_ptrs(height);
  for (int y = 0; y < height; ++y)
    row_ptrs[y] = const_cast<png_bytep>(&pixels[static_cast<size_t>(y) * width * channels]);
  png_write_image(w.png, row_ptrs.data());
  png_write_end(w.png, nullptr);
}

}  // namespace

void save_image(const ImageTensor& img, const std::string& path) {
  if (img.height <= 0 || img.width <= 0) throw ImageError("empty image: " + path);
  std::vector<png_byte> pixels(img.pixel_count() * 3);
  for (size_t i = 0; i < img.data.size(); ++i) pixels[i] = quantize8(img.data[i]);
  write_png8(path, img.width, img.height, PNG_COLOR_TYPE_RGB, pixels, 3);
}

void save_mask(const BinaryMask& mask, const std::string& path) {
  if (mask.height <= 0 || mask.width <= 0) throw ImageError("empty mask: " + path);
  std::vector<png_byte> pixels(mask.data.size());
  for (size_t i = 0; i < mask.data.size(); ++i) pixels[i] = mask.data[i] ? 255 : 0;
  write_png8(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, pixels, 1);
}

BinaryMask load_mask(const std::string& path) {
  PngReader r;
  std::vector<std::vector<png_byte>> rows;
  int width = 0, height = 0, bit_depth = 0, channels = 0, color_type = 0;
  read_png_rows(path, r, rows, width, height, bit_depth, channels, color_type);
  if (channels != 1 || bit_depth != 8)
    throw ImageError("expected 8-bit grayscale mask PNG: " + path);
  BinaryMask mask(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) mask.at(y, x) = rows[y][x] > 127 ? 1 : 0;
  return mask;
}

GrayImage to_grayscale(const ImageTensor& img) {
  GrayImage g(img.height, img.width);
  for (size_t p = 0; p < img.pixel_count(); ++p)
    g.data[p] = (img.data[p * 3] + img.data[p * 3 + 1] + img.data[p * 3 + 2]) / 3.0;
  return g;
}

double srgb_to_linear(double v) {
  return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

double linear_to_srgb(double v) {
  return v <= 0.0031308 ? v * 12.92 : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
}

ImageTensor linearize(const ImageTensor& img) {
  ImageTensor out = img;
  for (double& v : out.data) v = srgb_to_linear(v);
  return out;
}

ImageTensor delinearize(const ImageTensor& img) {
  ImageTensor out = img;
  for (double& v : out.data) v = linear_to_srgb(v);
  return out;
}

ImageTensor clip01(ImageTensor img) {
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

void validate_pipeline_entry(const ImageTensor& img) {
  if (img.height < 16 || img.width < 16)
    throw ImageError("image too small for pipeline entry: " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + " (minimum 16x16)");
  for (double v : img.data)
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw ImageError("image values must be finite and within [0,1] at pipeline entry");
}

}  // namespace steleguard
