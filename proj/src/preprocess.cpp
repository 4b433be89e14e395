#include "steleguard/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace steleguard {

void RegionSpec::validate() const {
  if (grid_cols < 1 || grid_rows < 1) throw PreprocessError("region grid must be at least 1x1");
  if (target_width < 1 || target_height < 1) throw PreprocessError("region target dims must be positive");
}

std::vector<ImageTensor> partition_regions(const ImageTensor& img, const RegionSpec& spec) {
  spec.validate();
  if (spec.grid_cols > img.width || spec.grid_rows > img.height)
    throw PreprocessError("region grid larger than image");
  const int tile_w = img.width / spec.grid_cols;
  const int tile_h = img.height / spec.grid_rows;
  std::vector<ImageTensor> tiles;
  tiles.reserve(static_cast<size_t>(spec.region_count()));
  for (int r = 0; r < spec.grid_rows; ++r) {
    for (int c = 0; c < spec.grid_cols; ++c) {
      ImageTensor tile(tile_h, tile_w);
      for (int y = 0; y < tile_h; ++y)
        for (int x = 0; x < tile_w; ++x)
          for (int ch = 0; ch < 3; ++ch)
            tile.at(y, x, ch) = img.at(r * tile_h + y, c * tile_w + x, ch);
      tiles.push_back(std::move(tile));
    }
  }
  return tiles;
}

ImageTensor resize_region(const ImageTensor& tile, int w, int h) {
  if (w < 1 || h < 1) throw PreprocessError("resize target dims must be positive");
  if (w == tile.width && h == tile.height) return tile;
  ImageTensor out(h, w);
  const double sx = static_cast<double>(tile.width) / w;
  const double sy = static_cast<double>(tile.height) / h;
  for (int y = 0; y < h; ++y) {
    const double src_y = std::clamp((y + 0.5) * sy - 0.5, 0.0, tile.height - 1.0);
    const int y0 = static_cast<int>(src_y);
    const int y1 = std::min(y0 + 1, tile.height - 1);
    const double fy = src_y - y0;
    for (int x = 0; x < w; ++x) {
      const double src_x = std::clamp((x + 0.5) * sx - 0.5, 0.0, tile.width - 1.0);
      const int x0 = static_cast<int>(src_x);
      const int x1 = std::min(x0 + 1, tile.width - 1);
      const double fx = src_x - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = tile.at(y0, x0, c) * (1 - fx) + tile.at(y0, x1, c) * fx;
        const double bot = tile.at(y1, x0, c) * (1 - fx) + tile.at(y1, x1, c) * fx;
        out.at(y, x, c) = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

ImageTensor augment_exposure(const ImageTensor& img, double delta_ev, double max_ev) {
  if (std::abs(delta_ev) > max_ev)
    throw PreprocessError("delta_ev " + std::to_string(delta_ev) + " exceeds bound " + std::to_string(max_ev));
  const double gain = std::exp2(delta_ev);
  ImageTensor out = img;
  for (double& v : out.data) v = linear_to_srgb(srgb_to_linear(v) * gain);
  return clip01(std::move(out));
}

namespace {

// Piecewise Gaussian lobe: sigma differs left/right of the mean.
double lobe(double lam, double mu, double s1, double s2) {
  const double s = lam < mu ? s1 : s2;
  const double t = (lam - mu) / s;
  return std::exp(-0.5 * t * t);
}

// Analytic fits to the CIE 1931 2-degree color matching functions
// (Wyman, Sloan & Shirley, JCGT 2013, multi-lobe form).
void cie_cmf(double lam, double& xb, double& yb, double& zb) {
  xb = 1.056 * lobe(lam, 599.8, 37.9, 31.0) + 0.362 * lobe(lam, 442.0, 16.0, 26.7) -
       0.065 * lobe(lam, 501.1, 20.4, 26.2);
  yb = 0.821 * lobe(lam, 568.8, 46.9, 40.5) + 0.286 * lobe(lam, 530.9, 16.3, 31.1);
  zb = 1.217 * lobe(lam, 437.0, 11.8, 36.0) + 0.681 * lobe(lam, 459.0, 26.0, 13.8);
}

// Planck spectral radiance, arbitrary scale (normalization cancels).
double planck(double lam_nm, double kelvin) {
  const double lam = lam_nm * 1e-9;
  constexpr double h = 6.62607015e-34, c = 2.99792458e8, kb = 1.380649e-23;
  return 1.0 / (std::pow(lam, 5.0) * (std::expm1(h * c / (lam * kb * kelvin))));
}

}  // namespace

std::array<double, 3> blackbody_rgb(double kelvin) {
  if (kelvin < 1000.0 || kelvin > 12000.0)
    throw PreprocessError("color temperature " + std::to_string(kelvin) +
                          " K outside mapping range [1000 K, 12000 K]");
  double X = 0, Y = 0, Z = 0;
  for (double lam = 380.0; lam <= 780.0; lam += 1.0) {
    const double s = planck(lam, kelvin);
    double xb, yb, zb;
    cie_cmf(lam, xb, yb, zb);
    X += s * xb;
    Y += s * yb;
    Z += s * zb;
  }
  // XYZ -> linear sRGB (IEC 61966-2-1 primaries, D65 white).
  double r = 3.2406 * X - 1.5372 * Y - 0.4986 * Z;
  double g = -0.9689 * X + 1.8758 * Y + 0.0415 * Z;
  double b = 0.0557 * X - 0.2040 * Y + 1.0570 * Z;
  r = std::max(r, 1e-9);
  g = std::max(g, 1e-9);
  b = std::max(b, 1e-9);
  const double m = std::max({r, g, b});
  return {r / m, g / m, b / m};
}

std::array<double, 3> white_balance_gains(double kelvin, double ref_kelvin) {
  const auto rgb = blackbody_rgb(kelvin);
  const auto ref = blackbody_rgb(ref_kelvin);
  double gr = rgb[0] / ref[0];
  double gg = rgb[1] / ref[1];
  double gb = rgb[2] / ref[2];
  return {gr / gg, 1.0, gb / gg};
}

ImageTensor augment_white_balance(const ImageTensor& img, double delta_kelvin,
                                  const AugmentationBounds& bounds) {
  if (std::abs(delta_kelvin) > bounds.max_kelvin)
    throw PreprocessError("delta_kelvin " + std::to_string(delta_kelvin) + " exceeds bound " +
                          std::to_string(bounds.max_kelvin));
  const auto gains = white_balance_gains(bounds.ref_kelvin + delta_kelvin, bounds.ref_kelvin);
  ImageTensor out = img;
  for (size_t p = 0; p < out.pixel_count(); ++p)
    for (int c = 0; c < 3; ++c) {
      double& v = out.data[p * 3 + c];
      v = linear_to_srgb(srgb_to_linear(v) * gains[c]);
    }
  return clip01(std::move(out));
}

ImageTensor apply_augmentation(const ImageTensor& img, const AugmentationParams& p,
                               const AugmentationBounds& bounds) {
  ImageTensor out = augment_exposure(img, p.delta_ev, bounds.max_ev);
  return augment_white_balance(out, p.delta_kelvin, bounds);
}

std::vector<std::string> read_exclusion_list(const std::string& path) {
  std::vector<std::string> names;
  if (path.empty()) return names;
  std::ifstream in(path);
  if (!in) throw PreprocessError("cannot read exclusion list: " + path);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    names.push_back(line.substr(b, e - b + 1));
  }
  return names;
}

namespace {

std::string format_aug_tag(double ev, double wb) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "ev" << (ev >= 0 ? "+" : "") << ev << "_wb" << (wb >= 0 ? "+" : "") << wb;
  return os.str();
}

json region_spec_to_json(const RegionSpec& s) {
  return json{{"grid_cols", s.grid_cols},
              {"grid_rows", s.grid_rows},
              {"target_width", s.target_width},
              {"target_height", s.target_height}};
}

RegionSpec region_spec_from_json(const json& j) {
  RegionSpec s;
  s.grid_cols = j.at("grid_cols").get<int>();
  s.grid_rows = j.at("grid_rows").get<int>();
  s.target_width = j.at("target_width").get<int>();
  s.target_height = j.at("target_height").get<int>();
  return s;
}

}  // namespace

std::string DatasetManifest::to_json() const {
  json j;
  j["source_dir"] = source_dir;
  j["seed"] = seed;
  j["spec"] = region_spec_to_json(spec);
  j["bounds"] = json{{"max_ev", bounds.max_ev},
                     {"max_kelvin", bounds.max_kelvin},
                     {"ref_kelvin", bounds.ref_kelvin}};
  j["excluded"] = excluded;
  j["held_out"] = held_out;
  json items = json::array();
  for (const auto& it : train_items) {
    items.push_back(json{{"file", it.file},
                         {"region_index", it.region_index},
                         {"aug_tag", it.aug_tag},
                         {"delta_ev", it.delta_ev},
                         {"delta_kelvin", it.delta_kelvin}});
  }
  j["train_items"] = std::move(items);
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  json j = json::parse(text);
  DatasetManifest m;
  m.source_dir = j.at("source_dir").get<std::string>();
  m.seed = j.at("seed").get<uint64_t>();
  m.spec = region_spec_from_json(j.at("spec"));
  if (j.contains("bounds")) {
    m.bounds.max_ev = j["bounds"].at("max_ev").get<double>();
    m.bounds.max_kelvin = j["bounds"].at("max_kelvin").get<double>();
    m.bounds.ref_kelvin = j["bounds"].at("ref_kelvin").get<double>();
  }
  m.excluded = j.at("excluded").get<std::vector<std::string>>();
  m.held_out = j.at("held_out").get<std::vector<std::string>>();
  for (const auto& it : j.at("train_items")) {
    TrainItem t;
    t.file = it.at("file").get<std::string>();
    t.region_index = it.at("region_index").get<int>();
    t.aug_tag = it.at("aug_tag").get<std::string>();
    t.delta_ev = it.at("delta_ev").get<double>();
    t.delta_kelvin = it.at("delta_kelvin").get<double>();
    m.train_items.push_back(std::move(t));
  }
  return m;
}

void DatasetManifest::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PreprocessError("cannot write manifest: " + path);
  out << to_json();
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PreprocessError("cannot read manifest: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

DatasetManifest build_dataset(const std::string& source_dir, const std::string& exclusions_path,
                              const RegionSpec& spec, int n_aug_per_image, int held_out,
                              uint64_t seed, const AugmentationBounds& bounds) {
  spec.validate();
  if (n_aug_per_image < 0) throw PreprocessError("n_aug_per_image must be >= 0");
  if (held_out < 0) throw PreprocessError("held_out must be >= 0");

  const auto excluded_names = read_exclusion_list(exclusions_path);

  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(source_dir)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().extension() == ".png") files.push_back(entry.path().filename().string());
  }
  std::sort(files.begin(), files.end());

  DatasetManifest m;
  m.source_dir = source_dir;
  m.seed = seed;
  m.spec = spec;
  m.bounds = bounds;

  std::vector<std::string> usable;
  for (const auto& f : files) {
    if (std::find(excluded_names.begin(), excluded_names.end(), f) != excluded_names.end())
      m.excluded.push_back(f);
    else
      usable.push_back(f);
  }
  if (usable.empty()) throw PreprocessError("no usable images in " + source_dir);
  if (static_cast<int>(usable.size()) < held_out + 1)
    throw PreprocessError("need at least held_out + 1 usable images, have " +
                          std::to_string(usable.size()));

  std::mt19937_64 rng(seed);

  // Reserve held-out originals (random under seed). Their photometric
  // variants still join the training pool; only the originals are reserved.
  std::vector<size_t> order(usable.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> is_held(usable.size(), false);
  for (int i = 0; i < held_out; ++i) is_held[order[i]] = true;
  for (size_t i = 0; i < usable.size(); ++i)
    if (is_held[i]) m.held_out.push_back(usable[i]);

  std::uniform_real_distribution<double> ev_dist(-bounds.max_ev, bounds.max_ev);
  std::uniform_real_distribution<double> wb_dist(-bounds.max_kelvin, bounds.max_kelvin);

  for (size_t i = 0; i < usable.size(); ++i) {
    if (!is_held[i]) {
      TrainItem orig;
      orig.file = usable[i];
      orig.aug_tag = "orig";
      m.train_items.push_back(std::move(orig));
    }
    for (int a = 0; a < n_aug_per_image; ++a) {
      TrainItem t;
      t.file = usable[i];
      t.delta_ev = ev_dist(rng);
      t.delta_kelvin = wb_dist(rng);
      t.aug_tag = format_aug_tag(t.delta_ev, t.delta_kelvin);
      m.train_items.push_back(std::move(t));
    }
  }
  return m;
}

}  // namespace steleguard
