#include "steleguard/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace steleguard {

void NetworkConfig::validate() const {
  if (latent_dim < 1) throw nn::NnError("latent_dim must be >= 1");
  if (base_channels < 1) throw nn::NnError("base_channels must be >= 1");
  if (n_down_blocks < 1) throw nn::NnError("n_down_blocks must be >= 1");
  if (w_adv < 0 || w_con < 0 || w_enc < 0) throw nn::NnError("loss weights must be >= 0");
  const int div = 1 << n_down_blocks;
  if (input_width % div != 0 || input_height % div != 0)
    throw nn::NnError("input dims must be divisible by 2^n_down_blocks");
  if (bottleneck_h() < 1 || bottleneck_w() < 1)
    throw nn::NnError("too many down blocks for the input size");
}

double loss_contextual(const ImageTensor& x, const ImageTensor& x_hat) {
  if (!x.same_shape(x_hat)) throw nn::NnError("contextual loss: shape mismatch");
  double s = 0;
  for (size_t i = 0; i < x.data.size(); ++i) s += std::abs(x.data[i] - x_hat.data[i]);
  return s / x.data.size();
}

double loss_contextual(const nn::Tensor& x, const nn::Tensor& x_hat) {
  if (!x.same_shape(x_hat)) throw nn::NnError("contextual loss: shape mismatch");
  double s = 0;
  for (size_t i = 0; i < x.v.size(); ++i) s += std::abs(x.v[i] - x_hat.v[i]);
  return s / x.v.size();
}

double loss_adversarial(const std::vector<double>& f_x, const std::vector<double>& f_xhat) {
  if (f_x.size() != f_xhat.size()) throw nn::NnError("adversarial loss: feature length mismatch");
  double s = 0;
  for (size_t i = 0; i < f_x.size(); ++i) {
    const double d = f_x[i] - f_xhat[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double loss_encoder(const LatentVector& z, const LatentVector& z_hat) {
  if (z.size() != z_hat.size()) throw nn::NnError("encoder loss: dimension mismatch");
  double s = 0;
  for (size_t i = 0; i < z.size(); ++i) {
    const double d = z[i] - z_hat[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double loss_generator_total(double l_adv, double l_con, double l_enc, const NetworkConfig& cfg) {
  return cfg.w_adv * l_adv + cfg.w_con * l_con + cfg.w_enc * l_enc;
}

namespace {

double clamp_prob(double p) { return std::clamp(p, 1e-12, 1.0 - 1e-12); }

// Stable BCE on a logit with target t.
double bce_with_logit(double logit, double t) {
  return std::max(logit, 0.0) - logit * t + std::log1p(std::exp(-std::abs(logit)));
}

}  // namespace

double loss_discriminator(const std::vector<double>& p_real_on_x,
                          const std::vector<double>& p_real_on_xhat) {
  double s = 0;
  for (double p : p_real_on_x) s += -std::log(clamp_prob(p));
  for (double p : p_real_on_xhat) s += -std::log(1.0 - clamp_prob(p));
  return s / (p_real_on_x.size() + p_real_on_xhat.size());
}

nn::Tensor image_to_tensor(const ImageTensor& img) {
  nn::Tensor t(1, 3, img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = img.at(y, x, c);
  return t;
}

ImageTensor tensor_to_image(const nn::Tensor& t, int index) {
  if (t.c != 3) throw nn::NnError("tensor_to_image: expected 3 channels");
  ImageTensor img(t.h, t.w);
  for (int y = 0; y < t.h; ++y)
    for (int x = 0; x < t.w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = t.at(index, c, y, x);
  return img;
}

namespace {

// Stride-2 conv blocks doubling channels from base; batch-norm skipped on
// the first block only when building a discriminator stack.
void build_down_stack(nn::Sequential& seq, const std::string& prefix, const NetworkConfig& cfg,
                      bool skip_first_bn) {
  int in_ch = 3;
  for (int b = 0; b < cfg.n_down_blocks; ++b) {
    const int out_ch = cfg.base_channels << b;
    const std::string name = prefix + ".block" + std::to_string(b);
    const bool bn = !(skip_first_bn && b == 0);
    seq.add<nn::Conv2d>(name + ".conv", in_ch, out_ch, 4, 2, 1, /*bias=*/!bn);
    if (bn) seq.add<nn::BatchNorm2d>(name + ".bn", out_ch);
    seq.add<nn::LeakyReLU>(0.2);
    in_ch = out_ch;
  }
  seq.add<nn::Flatten>();
}

nn::Sequential build_encoder(const std::string& prefix, const NetworkConfig& cfg) {
  nn::Sequential seq;
  build_down_stack(seq, prefix, cfg, /*skip_first_bn=*/false);
  seq.add<nn::Linear>(prefix + ".fc", cfg.flat_features(), cfg.latent_dim);
  return seq;
}

nn::Sequential build_decoder(const std::string& prefix, const NetworkConfig& cfg) {
  nn::Sequential seq;
  seq.add<nn::Linear>(prefix + ".fc", cfg.latent_dim, cfg.flat_features());
  seq.add<nn::Unflatten>(cfg.bottleneck_ch(), cfg.bottleneck_h(), cfg.bottleneck_w());
  int in_ch = cfg.bottleneck_ch();
  for (int b = cfg.n_down_blocks - 1; b >= 1; --b) {
    const int out_ch = cfg.base_channels << (b - 1);
    const std::string name = prefix + ".block" + std::to_string(b);
    seq.add<nn::ConvTranspose2d>(name + ".deconv", in_ch, out_ch, 4, 2, 1, /*bias=*/false);
    seq.add<nn::BatchNorm2d>(name + ".bn", out_ch);
    seq.add<nn::LeakyReLU>(0.2);
    in_ch = out_ch;
  }
  seq.add<nn::ConvTranspose2d>(prefix + ".out.deconv", in_ch, 3, 4, 2, 1, /*bias=*/true);
  seq.add<nn::Sigmoid>();
  return seq;
}

}  // namespace

GanomalyModel::GanomalyModel(const NetworkConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  g_enc_ = build_encoder("g_e", cfg_);
  g_dec_ = build_decoder("g_d", cfg_);
  aux_enc_ = build_encoder("aux_e", cfg_);
  build_down_stack(d_features_, "d", cfg_, /*skip_first_bn=*/true);
  nn::Sequential head;
  head.add<nn::Linear>("d.head", cfg_.flat_features(), 1);
  d_head_ = std::move(head);

  std::mt19937_64 rng(seed);
  nn::init_params(g_enc_.params(), rng);
  nn::init_params(g_dec_.params(), rng);
  nn::init_params(aux_enc_.params(), rng);
  nn::init_params(d_features_.params(), rng);
  nn::init_params(d_head_.params(), rng);
}

void GanomalyModel::check_input(const nn::Tensor& x) const {
  if (x.c != 3 || x.h != cfg_.input_height || x.w != cfg_.input_width)
    throw nn::NnError("input dims " + std::to_string(x.w) + "x" + std::to_string(x.h) +
                      " do not match network config " + std::to_string(cfg_.input_width) + "x" +
                      std::to_string(cfg_.input_height));
}

LatentVector GanomalyModel::encode(const ImageTensor& x) {
  nn::Tensor t = image_to_tensor(x);
  check_input(t);
  nn::Tensor z = g_enc_.forward(t, false, false);
  return z.v;
}

ImageTensor GanomalyModel::decode(const LatentVector& z) {
  if (static_cast<int>(z.size()) != cfg_.latent_dim)
    throw nn::NnError("latent dimension mismatch: got " + std::to_string(z.size()) + ", want " +
                      std::to_string(cfg_.latent_dim));
  nn::Tensor t(1, cfg_.latent_dim, 1, 1);
  t.v = z;
  return tensor_to_image(g_dec_.forward(t, false, false));
}

ImageTensor GanomalyModel::reconstruct(const ImageTensor& x) {
  nn::Tensor t = image_to_tensor(x);
  check_input(t);
  return tensor_to_image(reconstruct_batch(t, false, false));
}

nn::Tensor GanomalyModel::reconstruct_batch(const nn::Tensor& x, bool training, bool update_stats) {
  check_input(x);
  nn::Tensor z = g_enc_.forward(x, training, update_stats);
  return g_dec_.forward(z, training, update_stats);
}

std::pair<std::vector<double>, double> GanomalyModel::discriminate(const ImageTensor& x) {
  nn::Tensor t = image_to_tensor(x);
  check_input(t);
  nn::Tensor f = d_features_.forward(t, false, false);
  nn::Tensor logit = d_head_.forward(f, false, false);
  const double p = 1.0 / (1.0 + std::exp(-logit.v[0]));
  return {f.v, p};
}

namespace {

// dL/dv for L = mean over rows of the per-row L2 norm ||a_row - b_row||.
void latent_l2_grads(const nn::Tensor& z, const nn::Tensor& zhat, double weight, nn::Tensor& dz,
                     nn::Tensor& dzhat, double& loss) {
  const int n = z.n;
  const int d = static_cast<int>(z.per_image());
  loss = 0;
  for (int i = 0; i < n; ++i) {
    double norm = 0;
    for (int j = 0; j < d; ++j) {
      const double diff = z.v[static_cast<size_t>(i) * d + j] - zhat.v[static_cast<size_t>(i) * d + j];
      norm += diff * diff;
    }
    norm = std::sqrt(norm);
    loss += norm;
    const double denom = std::max(norm, 1e-12) * n;
    for (int j = 0; j < d; ++j) {
      const size_t idx = static_cast<size_t>(i) * d + j;
      const double diff = z.v[idx] - zhat.v[idx];
      dz.v[idx] += weight * diff / denom;
      dzhat.v[idx] -= weight * diff / denom;
    }
  }
  loss /= n;
}

}  // namespace

GanomalyModel::StepLosses GanomalyModel::generator_backward(const nn::Tensor& batch) {
  check_input(batch);
  StepLosses out;

  nn::Tensor z = g_enc_.forward(batch, true, true);
  nn::Tensor xhat = g_dec_.forward(z, true, true);
  nn::Tensor zhat = aux_enc_.forward(xhat, true, true);

  // Discriminator is used as a fixed feature extractor here: batch-stat
  // forwards, no running-stat refresh. The real-branch forward happens
  // first so the caches left behind belong to the reconstruction branch,
  // which is the only one backpropagated.
  nn::Tensor f_x = d_features_.forward(batch, true, false);
  nn::Tensor f_xhat = d_features_.forward(xhat, true, false);

  const int fdim = static_cast<int>(f_x.per_image());
  std::vector<double> u(fdim, 0.0);
  for (int i = 0; i < batch.n; ++i)
    for (int j = 0; j < fdim; ++j)
      u[j] += (f_x.v[static_cast<size_t>(i) * fdim + j] - f_xhat.v[static_cast<size_t>(i) * fdim + j]) / batch.n;
  double unorm = 0;
  for (double v : u) unorm += v * v;
  unorm = std::sqrt(unorm);
  out.l_adv = unorm;

  out.l_con = loss_contextual(batch, xhat);

  nn::Tensor dz(z.n, z.c, z.h, z.w);
  nn::Tensor dzhat(zhat.n, zhat.c, zhat.h, zhat.w);
  latent_l2_grads(z, zhat, cfg_.w_enc, dz, dzhat, out.l_enc);

  out.total = loss_generator_total(out.l_adv, out.l_con, out.l_enc, cfg_);

  // dL/dxhat: contextual term.
  nn::Tensor dxhat(xhat.n, xhat.c, xhat.h, xhat.w);
  const double cscale = cfg_.w_con / static_cast<double>(batch.v.size());
  for (size_t i = 0; i < batch.v.size(); ++i) {
    const double diff = batch.v[i] - xhat.v[i];
    dxhat.v[i] = -cscale * (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0));
  }

  // Adversarial term through the discriminator features.
  if (cfg_.w_adv > 0) {
    nn::Tensor df(f_xhat.n, f_xhat.c, f_xhat.h, f_xhat.w);
    const double denom = std::max(unorm, 1e-12) * batch.n;
    for (int i = 0; i < batch.n; ++i)
      for (int j = 0; j < fdim; ++j)
        df.v[static_cast<size_t>(i) * fdim + j] = -cfg_.w_adv * u[j] / denom;
    nn::Tensor dxhat_adv = d_features_.backward(df);
    for (size_t i = 0; i < dxhat.v.size(); ++i) dxhat.v[i] += dxhat_adv.v[i];
  }

  // Encoder term through the auxiliary encoder.
  nn::Tensor dxhat_enc = aux_enc_.backward(dzhat);
  for (size_t i = 0; i < dxhat.v.size(); ++i) dxhat.v[i] += dxhat_enc.v[i];

  nn::Tensor dz_dec = g_dec_.backward(dxhat);
  for (size_t i = 0; i < dz.v.size(); ++i) dz.v[i] += dz_dec.v[i];
  g_enc_.backward(dz);
  return out;
}

double GanomalyModel::discriminator_backward(const nn::Tensor& batch) {
  check_input(batch);
  // Reconstruction is detached: generator gradients are not needed.
  nn::Tensor xhat = reconstruct_batch(batch, true, false);

  double loss = 0;
  const double scale = 1.0 / (2.0 * batch.n);

  nn::Tensor f_real = d_features_.forward(batch, true, true);
  nn::Tensor logit_real = d_head_.forward(f_real, true, true);
  nn::Tensor dlogit(logit_real.n, 1, 1, 1);
  for (int i = 0; i < batch.n; ++i) {
    const double l = logit_real.v[i];
    loss += bce_with_logit(l, 1.0) * scale;
    dlogit.v[i] = (1.0 / (1.0 + std::exp(-l)) - 1.0) * scale;
  }
  d_features_.backward(d_head_.backward(dlogit));

  nn::Tensor f_fake = d_features_.forward(xhat, true, true);
  nn::Tensor logit_fake = d_head_.forward(f_fake, true, true);
  for (int i = 0; i < batch.n; ++i) {
    const double l = logit_fake.v[i];
    loss += bce_with_logit(l, 0.0) * scale;
    dlogit.v[i] = (1.0 / (1.0 + std::exp(-l))) * scale;
  }
  d_features_.backward(d_head_.backward(dlogit));

  return loss;
}

GanomalyModel::StepLosses GanomalyModel::eval_losses(const nn::Tensor& batch) {
  check_input(batch);
  StepLosses out;
  nn::Tensor z = g_enc_.forward(batch, true, false);
  nn::Tensor xhat = g_dec_.forward(z, true, false);
  nn::Tensor zhat = aux_enc_.forward(xhat, true, false);
  nn::Tensor f_x = d_features_.forward(batch, true, false);
  nn::Tensor f_xhat = d_features_.forward(xhat, true, false);

  const int fdim = static_cast<int>(f_x.per_image());
  std::vector<double> fx_mean(fdim, 0.0), fxhat_mean(fdim, 0.0);
  for (int i = 0; i < batch.n; ++i)
    for (int j = 0; j < fdim; ++j) {
      fx_mean[j] += f_x.v[static_cast<size_t>(i) * fdim + j] / batch.n;
      fxhat_mean[j] += f_xhat.v[static_cast<size_t>(i) * fdim + j] / batch.n;
    }
  out.l_adv = loss_adversarial(fx_mean, fxhat_mean);
  out.l_con = loss_contextual(batch, xhat);
  double enc = 0;
  const int d = cfg_.latent_dim;
  for (int i = 0; i < batch.n; ++i) {
    LatentVector zi(z.v.begin() + static_cast<size_t>(i) * d, z.v.begin() + static_cast<size_t>(i + 1) * d);
    LatentVector zh(zhat.v.begin() + static_cast<size_t>(i) * d, zhat.v.begin() + static_cast<size_t>(i + 1) * d);
    enc += loss_encoder(zi, zh);
  }
  out.l_enc = enc / batch.n;
  out.total = loss_generator_total(out.l_adv, out.l_con, out.l_enc, cfg_);

  std::vector<double> p_real(batch.n), p_fake(batch.n);
  nn::Tensor logit_real = d_head_.forward(f_x, true, false);
  for (int i = 0; i < batch.n; ++i) p_real[i] = 1.0 / (1.0 + std::exp(-logit_real.v[i]));
  nn::Tensor logit_fake = d_head_.forward(f_xhat, true, false);
  for (int i = 0; i < batch.n; ++i) p_fake[i] = 1.0 / (1.0 + std::exp(-logit_fake.v[i]));
  out.l_disc = loss_discriminator(p_real, p_fake);
  return out;
}

GanomalyModel::StepLosses GanomalyModel::train_step(const nn::Tensor& batch, nn::Adam& opt_g,
                                                    nn::Adam& opt_d) {
  opt_g.zero_grad();
  for (nn::Param* p : aux_encoder_params()) p->zero_grad();
  for (nn::Param* p : discriminator_params()) p->zero_grad();
  StepLosses losses = generator_backward(batch);
  opt_g.step();

  opt_d.zero_grad();
  losses.l_disc = discriminator_backward(batch);
  opt_d.step();
  return losses;
}

std::vector<nn::Param*> GanomalyModel::generator_trainable_params() {
  std::vector<nn::Param*> out = g_enc_.params();
  for (nn::Param* p : g_dec_.params()) out.push_back(p);
  if (!cfg_.freeze_aux_encoder)
    for (nn::Param* p : aux_enc_.params()) out.push_back(p);
  return out;
}

std::vector<nn::Param*> GanomalyModel::discriminator_params() {
  std::vector<nn::Param*> out = d_features_.params();
  for (nn::Param* p : d_head_.params()) out.push_back(p);
  return out;
}

std::vector<nn::Param*> GanomalyModel::aux_encoder_params() { return aux_enc_.params(); }

std::vector<nn::Param*> GanomalyModel::all_blobs() {
  std::vector<nn::Param*> out;
  for (auto* seq : {&g_enc_, &g_dec_, &aux_enc_, &d_features_, &d_head_}) {
    for (nn::Param* p : seq->params()) out.push_back(p);
    for (nn::Param* p : seq->state()) out.push_back(p);
  }
  return out;
}

}  // namespace steleguard
