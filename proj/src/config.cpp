#include "steleguard/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

using json = nlohmann::ordered_json;

namespace steleguard {

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key))
      throw ConfigError("unknown config key \"" + key + "\" in " + where);
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

AppConfig AppConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  AppConfig c;
  reject_unknown(j, {"paths", "region", "network", "train", "postprocess", "augment", "seed"},
                 "config root");
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    reject_unknown(p, {"data_dir", "checkpoint_dir", "output_dir"}, "paths");
    read_if(p, "data_dir", c.paths.data_dir);
    read_if(p, "checkpoint_dir", c.paths.checkpoint_dir);
    read_if(p, "output_dir", c.paths.output_dir);
  }
  if (j.contains("region")) {
    const auto& r = j["region"];
    reject_unknown(r, {"grid_cols", "grid_rows", "target_width", "target_height"}, "region");
    read_if(r, "grid_cols", c.region.grid_cols);
    read_if(r, "grid_rows", c.region.grid_rows);
    read_if(r, "target_width", c.region.target_width);
    read_if(r, "target_height", c.region.target_height);
  }
  if (j.contains("network")) {
    const auto& n = j["network"];
    reject_unknown(n,
                   {"input_width", "input_height", "latent_dim", "base_channels", "n_down_blocks",
                    "w_adv", "w_con", "w_enc", "freeze_aux_encoder"},
                   "network");
    read_if(n, "input_width", c.network.input_width);
    read_if(n, "input_height", c.network.input_height);
    read_if(n, "latent_dim", c.network.latent_dim);
    read_if(n, "base_channels", c.network.base_channels);
    read_if(n, "n_down_blocks", c.network.n_down_blocks);
    read_if(n, "w_adv", c.network.w_adv);
    read_if(n, "w_con", c.network.w_con);
    read_if(n, "w_enc", c.network.w_enc);
    read_if(n, "freeze_aux_encoder", c.network.freeze_aux_encoder);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t,
                   {"optimizer", "learning_rate", "weight_decay", "beta1", "beta2", "batch_size",
                    "epochs", "seed", "erec_interval"},
                   "train");
    read_if(t, "optimizer", c.train.optimizer);
    read_if(t, "learning_rate", c.train.learning_rate);
    read_if(t, "weight_decay", c.train.weight_decay);
    read_if(t, "beta1", c.train.beta1);
    read_if(t, "beta2", c.train.beta2);
    read_if(t, "batch_size", c.train.batch_size);
    read_if(t, "epochs", c.train.epochs);
    read_if(t, "seed", c.train.seed);
    read_if(t, "erec_interval", c.train.erec_interval);
  }
  if (j.contains("postprocess")) {
    const auto& p = j["postprocess"];
    reject_unknown(p,
                   {"registration", "ssim_window", "ssim_k1", "ssim_k2", "tau_ms", "tau_ssim",
                    "min_area", "connectivity"},
                   "postprocess");
    if (p.contains("registration")) {
      const auto& r = p["registration"];
      reject_unknown(r,
                     {"enabled", "min_matches", "ransac_reproj_tol", "max_keypoints",
                      "descriptor_radius", "ransac_iters"},
                     "postprocess.registration");
      read_if(r, "enabled", c.postprocess.registration.enabled);
      read_if(r, "min_matches", c.postprocess.registration.min_matches);
      read_if(r, "ransac_reproj_tol", c.postprocess.registration.ransac_reproj_tol);
      read_if(r, "max_keypoints", c.postprocess.registration.max_keypoints);
      read_if(r, "descriptor_radius", c.postprocess.registration.descriptor_radius);
      read_if(r, "ransac_iters", c.postprocess.registration.ransac_iters);
    }
    read_if(p, "ssim_window", c.postprocess.ssim_window);
    read_if(p, "ssim_k1", c.postprocess.ssim_k1);
    read_if(p, "ssim_k2", c.postprocess.ssim_k2);
    read_if(p, "tau_ms", c.postprocess.tau_ms);
    read_if(p, "tau_ssim", c.postprocess.tau_ssim);
    read_if(p, "min_area", c.postprocess.min_area);
    read_if(p, "connectivity", c.postprocess.connectivity);
  }
  if (j.contains("augment")) {
    const auto& a = j["augment"];
    reject_unknown(a, {"max_ev", "max_kelvin", "ref_kelvin"}, "augment");
    read_if(a, "max_ev", c.augment.max_ev);
    read_if(a, "max_kelvin", c.augment.max_kelvin);
    read_if(a, "ref_kelvin", c.augment.ref_kelvin);
  }
  read_if(j, "seed", c.seed);
  return c;
}

AppConfig AppConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string AppConfig::to_json() const {
  json j;
  j["paths"] = json{{"data_dir", paths.data_dir},
                    {"checkpoint_dir", paths.checkpoint_dir},
                    {"output_dir", paths.output_dir}};
  j["region"] = json{{"grid_cols", region.grid_cols},
                     {"grid_rows", region.grid_rows},
                     {"target_width", region.target_width},
                     {"target_height", region.target_height}};
  j["network"] = json{{"input_width", network.input_width},
                      {"input_height", network.input_height},
                      {"latent_dim", network.latent_dim},
                      {"base_channels", network.base_channels},
                      {"n_down_blocks", network.n_down_blocks},
                      {"w_adv", network.w_adv},
                      {"w_con", network.w_con},
                      {"w_enc", network.w_enc},
                      {"freeze_aux_encoder", network.freeze_aux_encoder}};
  j["train"] = json{{"optimizer", train.optimizer},
                    {"learning_rate", train.learning_rate},
                    {"weight_decay", train.weight_decay},
                    {"beta1", train.beta1},
                    {"beta2", train.beta2},
                    {"batch_size", train.batch_size},
                    {"epochs", train.epochs},
                    {"seed", train.seed},
                    {"erec_interval", train.erec_interval}};
  j["postprocess"] = json{
      {"registration",
       json{{"enabled", postprocess.registration.enabled},
            {"min_matches", postprocess.registration.min_matches},
            {"ransac_reproj_tol", postprocess.registration.ransac_reproj_tol},
            {"max_keypoints", postprocess.registration.max_keypoints},
            {"descriptor_radius", postprocess.registration.descriptor_radius},
            {"ransac_iters", postprocess.registration.ransac_iters}}},
      {"ssim_window", postprocess.ssim_window},
      {"ssim_k1", postprocess.ssim_k1},
      {"ssim_k2", postprocess.ssim_k2},
      {"tau_ms", postprocess.tau_ms},
      {"tau_ssim", postprocess.tau_ssim},
      {"min_area", postprocess.min_area},
      {"connectivity", postprocess.connectivity}};
  j["augment"] = json{{"max_ev", augment.max_ev},
                      {"max_kelvin", augment.max_kelvin},
                      {"ref_kelvin", augment.ref_kelvin}};
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

void AppConfig::apply_env_overrides() {
  if (const char* v = std::getenv("STELEGUARD_DATA_DIR")) paths.data_dir = v;
  if (const char* v = std::getenv("STELEGUARD_CHECKPOINT_DIR")) paths.checkpoint_dir = v;
  if (const char* v = std::getenv("STELEGUARD_OUTPUT_DIR")) paths.output_dir = v;
}

}  // namespace steleguard
