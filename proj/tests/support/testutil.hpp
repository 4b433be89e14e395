#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "steleguard/image.hpp"

namespace steleguard::testutil {

// Deterministic stone-like texture: layered value noise, veins and fine
// speckle so that corner detectors and window statistics have something to
// bite on.
ImageTensor stone_texture(int height, int width, uint64_t seed);

// Uniform-noise RGB image in [0,1].
ImageTensor random_image(int height, int width, std::mt19937_64& rng);

// Writes `count` photometric variants (exposure / white-balance jitter) of
// the base texture as 8-bit PNGs named frame_####.png; returns file names.
std::vector<std::string> write_jittered_normals(const std::string& dir, const ImageTensor& base,
                                                int count, uint64_t seed);

// Fresh scratch directory under the system temp dir.
std::filesystem::path make_temp_dir(const std::string& tag);

}  // namespace steleguard::testutil
