#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "steleguard/image.hpp"
#include "steleguard/nn.hpp"

namespace steleguard {

struct NetworkConfig {
  int input_width = 640;
  int input_height = 480;
  int latent_dim = 128;
  int base_channels = 16;
  int n_down_blocks = 4;
  double w_adv = 1.0;
  double w_con = 40.0;
  double w_enc = 1.0;
  bool freeze_aux_encoder = false;

  void validate() const;
  int bottleneck_h() const { return input_height >> n_down_blocks; }
  int bottleneck_w() const { return input_width >> n_down_blocks; }
  int bottleneck_ch() const { return base_channels << (n_down_blocks - 1); }
  int flat_features() const { return bottleneck_ch() * bottleneck_h() * bottleneck_w(); }
};

using LatentVector = std::vector<double>;

// Loss terms. The batch forms live inside GanomalyModel::train_step; these
// are the single-sample/summary contracts shared with the tests.
double loss_contextual(const ImageTensor& x, const ImageTensor& x_hat);
double loss_contextual(const nn::Tensor& x, const nn::Tensor& x_hat);
// L2 distance between (batch-averaged) feature vectors.
double loss_adversarial(const std::vector<double>& f_x, const std::vector<double>& f_xhat);
// Per-sample latent L2; batch form averages this over samples.
double loss_encoder(const LatentVector& z, const LatentVector& z_hat);
double loss_generator_total(double l_adv, double l_con, double l_enc, const NetworkConfig& cfg);
// Binary cross-entropy with targets 1 on real inputs and 0 on
// reconstructions, averaged over both batches.
double loss_discriminator(const std::vector<double>& p_real_on_x,
                          const std::vector<double>& p_real_on_xhat);

nn::Tensor image_to_tensor(const ImageTensor& img);
ImageTensor tensor_to_image(const nn::Tensor& t, int index = 0);

// Generator (encoder+decoder), auxiliary encoder and discriminator with the
// usual alternating update scheme. Inference methods use running
// normalization statistics and are deterministic for fixed parameters; they
// mutate internal caches, so share one instance per thread.
class GanomalyModel {
 public:
  GanomalyModel(const NetworkConfig& cfg, uint64_t seed);

  LatentVector encode(const ImageTensor& x);
  ImageTensor decode(const LatentVector& z);
  ImageTensor reconstruct(const ImageTensor& x);
  std::pair<std::vector<double>, double> discriminate(const ImageTensor& x);

  nn::Tensor reconstruct_batch(const nn::Tensor& x, bool training, bool update_stats);

  struct StepLosses {
    double l_adv = 0, l_con = 0, l_enc = 0, total = 0, l_disc = 0;
  };
  // One alternating update: generator (+aux encoder) on the weighted total,
  // then discriminator on its BCE.
  StepLosses train_step(const nn::Tensor& batch, nn::Adam& opt_g, nn::Adam& opt_d);

  // Loss evaluation without parameter updates, used by the gradient checks.
  StepLosses eval_losses(const nn::Tensor& batch);
  // Populates gradients of one generator pass (no optimizer step).
  StepLosses generator_backward(const nn::Tensor& batch);
  // Populates discriminator gradients for the BCE objective.
  double discriminator_backward(const nn::Tensor& batch);

  std::vector<nn::Param*> generator_trainable_params();
  std::vector<nn::Param*> discriminator_params();
  std::vector<nn::Param*> aux_encoder_params();
  // Every parameter and running-stat blob, in checkpoint order.
  std::vector<nn::Param*> all_blobs();

  const NetworkConfig& config() const { return cfg_; }

 private:
  void check_input(const nn::Tensor& x) const;

  NetworkConfig cfg_;
  nn::Sequential g_enc_, g_dec_, aux_enc_, d_features_, d_head_;
};

}  // namespace steleguard
