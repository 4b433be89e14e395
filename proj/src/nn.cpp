#include "steleguard/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace steleguard::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Tensor Tensor::reshaped(int c2, int h2, int w2) const {
  if (static_cast<size_t>(c2) * h2 * w2 != per_image()) throw NnError("reshape size mismatch");
  Tensor out = *this;
  out.c = c2;
  out.h = h2;
  out.w = w2;
  return out;
}

Param::Param(std::string name_, std::vector<int> shape_) : name(std::move(name_)), shape(std::move(shape_)) {
  size_t total = 1;
  for (int d : shape) total *= static_cast<size_t>(d);
  value.assign(total, 0.0);
  grad.assign(total, 0.0);
}

void gemm_nn(const double* a, int m, int k, const double* b, int n, double* c) {
  MapMat C(c, m, n);
  C.noalias() = CMapMat(a, m, k) * CMapMat(b, k, n);
}

void gemm_nt(const double* a, int m, int k, const double* b, int n, double* c) {
  MapMat C(c, m, n);
  C.noalias() = CMapMat(a, m, k) * CMapMat(b, n, k).transpose();
}

void gemm_tn(const double* a, int k, int m, const double* b, int n, double* c) {
  MapMat C(c, m, n);
  C.noalias() = CMapMat(a, k, m).transpose() * CMapMat(b, k, n);
}

namespace {

// Unrolls conv patches of one image (c,h,w) into (c*k*k) x (oh*ow).
void im2col(const double* img, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
            double* col) {
  const size_t patch = static_cast<size_t>(oh) * ow;
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = col + ((static_cast<size_t>(ch) * k + ky) * k + kx) * patch;
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy * stride + ky - pad;
          for (int ox = 0; ox < ow; ++ox) {
            const int x = ox * stride + kx - pad;
            dst[static_cast<size_t>(oy) * ow + ox] =
                (y >= 0 && y < h && x >= 0 && x < w)
                    ? img[(static_cast<size_t>(ch) * h + y) * w + x]
                    : 0.0;
          }
        }
      }
    }
  }
}

// Scatters (c*k*k) x (oh*ow) patch columns back onto an image, summing overlaps.
void col2im(const double* col, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
            double* img) {
  std::fill(img, img + static_cast<size_t>(c) * h * w, 0.0);
  const size_t patch = static_cast<size_t>(oh) * ow;
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src = col + ((static_cast<size_t>(ch) * k + ky) * k + kx) * patch;
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy * stride + ky - pad;
          if (y < 0 || y >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int x = ox * stride + kx - pad;
            if (x < 0 || x >= w) continue;
            img[(static_cast<size_t>(ch) * h + y) * w + x] += src[static_cast<size_t>(oy) * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad, bool bias_on)
    : weight(name + ".weight", {out_ch, in_ch, kernel, kernel}),
      bias(bias_on ? Param(name + ".bias", {out_ch}) : Param()),
      in_ch_(in_ch),
      out_ch_(out_ch),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      has_bias_(bias_on) {}

void Conv2d::out_dims(int h, int w, int kernel, int stride, int pad, int& oh, int& ow) {
  oh = (h + 2 * pad - kernel) / stride + 1;
  ow = (w + 2 * pad - kernel) / stride + 1;
}

Tensor Conv2d::forward(const Tensor& x, bool, bool) {
  if (x.c != in_ch_) throw NnError(weight.name + ": channel mismatch");
  int oh, ow;
  out_dims(x.h, x.w, k_, stride_, pad_, oh, ow);
  if (oh < 1 || ow < 1) throw NnError(weight.name + ": output collapsed to zero size");
  x_cache_ = x;
  Tensor y(x.n, out_ch_, oh, ow);
  const int kk = in_ch_ * k_ * k_;
  const size_t patch = static_cast<size_t>(oh) * ow;

#pragma omp parallel
  {
    std::vector<double> col(static_cast<size_t>(kk) * patch);
#pragma omp for schedule(static)
    for (int i = 0; i < x.n; ++i) {
      im2col(x.image(i), in_ch_, x.h, x.w, k_, stride_, pad_, oh, ow, col.data());
      gemm_nn(weight.value.data(), out_ch_, kk, col.data(), static_cast<int>(patch), y.image(i));
      if (has_bias_) {
        double* out = y.image(i);
        for (int oc = 0; oc < out_ch_; ++oc) {
          const double b = bias.value[oc];
          for (size_t p = 0; p < patch; ++p) out[oc * patch + p] += b;
        }
      }
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const Tensor& x = x_cache_;
  const int oh = dy.h, ow = dy.w;
  const int kk = in_ch_ * k_ * k_;
  const size_t patch = static_cast<size_t>(oh) * ow;
  Tensor dx(x.n, in_ch_, x.h, x.w);

  // Per-image weight-gradient slabs, reduced serially afterwards so the
  // result does not depend on the thread count.
  std::vector<std::vector<double>> dw_slab(x.n);

#pragma omp parallel
  {
    std::vector<double> col(static_cast<size_t>(kk) * patch);
    std::vector<double> dcol(static_cast<size_t>(kk) * patch);
#pragma omp for schedule(static)
    for (int i = 0; i < x.n; ++i) {
      im2col(x.image(i), in_ch_, x.h, x.w, k_, stride_, pad_, oh, ow, col.data());
      dw_slab[i].resize(static_cast<size_t>(out_ch_) * kk);
      // dW_i = dY_i (out_ch x patch) * col^T (patch x kk)
      gemm_nt(dy.image(i), out_ch_, static_cast<int>(patch), col.data(), kk, dw_slab[i].data());
      // dcol = W^T (kk x out_ch) * dY_i (out_ch x patch)
      gemm_tn(weight.value.data(), out_ch_, kk, dy.image(i), static_cast<int>(patch), dcol.data());
      col2im(dcol.data(), in_ch_, x.h, x.w, k_, stride_, pad_, oh, ow, dx.image(i));
    }
  }
  for (int i = 0; i < x.n; ++i)
    for (size_t j = 0; j < weight.grad.size(); ++j) weight.grad[j] += dw_slab[i][j];

  if (has_bias_) {
    for (int i = 0; i < dy.n; ++i) {
      const double* d = dy.image(i);
      for (int oc = 0; oc < out_ch_; ++oc) {
        double s = 0;
        for (size_t p = 0; p < patch; ++p) s += d[oc * patch + p];
        bias.grad[oc] += s;
      }
    }
  }
  return dx;
}

void Conv2d::collect_params(std::vector<Param*>& out) {
  out.push_back(&weight);
  if (has_bias_) out.push_back(&bias);
}

// ------------------------------------------------------- ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(std::string name, int in_ch, int out_ch, int kernel, int stride,
                                 int pad, bool bias_on)
    : weight(name + ".weight", {in_ch, out_ch, kernel, kernel}),
      bias(bias_on ? Param(name + ".bias", {out_ch}) : Param()),
      in_ch_(in_ch),
      out_ch_(out_ch),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      has_bias_(bias_on) {}

Tensor ConvTranspose2d::forward(const Tensor& x, bool, bool) {
  if (x.c != in_ch_) throw NnError(weight.name + ": channel mismatch");
  const int oh = (x.h - 1) * stride_ - 2 * pad_ + k_;
  const int ow = (x.w - 1) * stride_ - 2 * pad_ + k_;
  if (oh < 1 || ow < 1) throw NnError(weight.name + ": output collapsed to zero size");
  x_cache_ = x;
  Tensor y(x.n, out_ch_, oh, ow);
  const int kk = out_ch_ * k_ * k_;
  const size_t patch = static_cast<size_t>(x.h) * x.w;

#pragma omp parallel
  {
    std::vector<double> col(static_cast<size_t>(kk) * patch);
#pragma omp for schedule(static)
    for (int i = 0; i < x.n; ++i) {
      // col = W^T (kk x in_ch) * X_i (in_ch x patch); scatter onto output.
      gemm_tn(weight.value.data(), in_ch_, kk, x.image(i), static_cast<int>(patch), col.data());
      col2im(col.data(), out_ch_, oh, ow, k_, stride_, pad_, x.h, x.w, y.image(i));
      if (has_bias_) {
        double* out = y.image(i);
        const size_t opatch = static_cast<size_t>(oh) * ow;
        for (int oc = 0; oc < out_ch_; ++oc) {
          const double b = bias.value[oc];
          for (size_t p = 0; p < opatch; ++p) out[oc * opatch + p] += b;
        }
      }
    }
  }
  return y;
}

Tensor ConvTranspose2d::backward(const Tensor& dy) {
  const Tensor& x = x_cache_;
  const int kk = out_ch_ * k_ * k_;
  const size_t patch = static_cast<size_t>(x.h) * x.w;
  Tensor dx(x.n, in_ch_, x.h, x.w);
  std::vector<std::vector<double>> dw_slab(x.n);

#pragma omp parallel
  {
    std::vector<double> col(static_cast<size_t>(kk) * patch);
#pragma omp for schedule(static)
    for (int i = 0; i < x.n; ++i) {
      // Gather patches of dY with the forward's scatter geometry.
      im2col(dy.image(i), out_ch_, dy.h, dy.w, k_, stride_, pad_, x.h, x.w, col.data());
      // dX_i = W (in_ch x kk) * col (kk x patch)
      gemm_nn(weight.value.data(), in_ch_, kk, col.data(), static_cast<int>(patch), dx.image(i));
      dw_slab[i].resize(weight.value.size());
      // dW_i = X_i (in_ch x patch) * col^T (patch x kk)
      gemm_nt(x.image(i), in_ch_, static_cast<int>(patch), col.data(), kk, dw_slab[i].data());
    }
  }
  for (int i = 0; i < x.n; ++i)
    for (size_t j = 0; j < weight.grad.size(); ++j) weight.grad[j] += dw_slab[i][j];

  if (has_bias_) {
    const size_t opatch = static_cast<size_t>(dy.h) * dy.w;
    for (int i = 0; i < dy.n; ++i) {
      const double* d = dy.image(i);
      for (int oc = 0; oc < out_ch_; ++oc) {
        double s = 0;
        for (size_t p = 0; p < opatch; ++p) s += d[oc * opatch + p];
        bias.grad[oc] += s;
      }
    }
  }
  return dx;
}

void ConvTranspose2d::collect_params(std::vector<Param*>& out) {
  out.push_back(&weight);
  if (has_bias_) out.push_back(&bias);
}

// ----------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name, int channels, double eps, double momentum)
    : gamma(name + ".gamma", {channels}),
      beta(name + ".beta", {channels}),
      running_mean(name + ".running_mean", {channels}),
      running_var(name + ".running_var", {channels}),
      ch_(channels),
      eps_(eps),
      momentum_(momentum) {
  std::fill(running_var.value.begin(), running_var.value.end(), 1.0);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training, bool update_stats) {
  if (x.c != ch_) throw NnError(gamma.name + ": channel mismatch");
  Tensor y(x.n, x.c, x.h, x.w);
  const size_t plane = static_cast<size_t>(x.h) * x.w;
  const size_t cnt = static_cast<size_t>(x.n) * plane;
  trained_forward_ = training;
  if (training) {
    xhat_cache_ = Tensor(x.n, x.c, x.h, x.w);
    invstd_cache_.assign(ch_, 0.0);
  }

#pragma omp parallel for schedule(static)
  for (int c = 0; c < ch_; ++c) {
    double mean, var;
    if (training) {
      double s = 0;
      for (int i = 0; i < x.n; ++i) {
        const double* p = x.image(i) + c * plane;
        for (size_t j = 0; j < plane; ++j) s += p[j];
      }
      mean = s / cnt;
      double s2 = 0;
      for (int i = 0; i < x.n; ++i) {
        const double* p = x.image(i) + c * plane;
        for (size_t j = 0; j < plane; ++j) {
          const double d = p[j] - mean;
          s2 += d * d;
        }
      }
      var = s2 / cnt;  // biased, used for normalization
      if (update_stats) {
        const double unbiased = cnt > 1 ? s2 / (cnt - 1) : var;
        running_mean.value[c] = (1 - momentum_) * running_mean.value[c] + momentum_ * mean;
        running_var.value[c] = (1 - momentum_) * running_var.value[c] + momentum_ * unbiased;
      }
    } else {
      mean = running_mean.value[c];
      var = running_var.value[c];
    }
    const double invstd = 1.0 / std::sqrt(var + eps_);
    if (training) invstd_cache_[c] = invstd;
    const double g = gamma.value[c], b = beta.value[c];
    for (int i = 0; i < x.n; ++i) {
      const double* p = x.image(i) + c * plane;
      double* q = y.image(i) + c * plane;
      double* xh = training ? xhat_cache_.image(i) + c * plane : nullptr;
      for (size_t j = 0; j < plane; ++j) {
        const double hat = (p[j] - mean) * invstd;
        if (xh) xh[j] = hat;
        q[j] = g * hat + b;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
  if (!trained_forward_) throw NnError(gamma.name + ": backward without training forward");
  const Tensor& xh = xhat_cache_;
  Tensor dx(dy.n, dy.c, dy.h, dy.w);
  const size_t plane = static_cast<size_t>(dy.h) * dy.w;
  const double cnt = static_cast<double>(dy.n) * plane;

#pragma omp parallel for schedule(static)
  for (int c = 0; c < ch_; ++c) {
    double sum_dy = 0, sum_dy_xh = 0;
    for (int i = 0; i < dy.n; ++i) {
      const double* d = dy.image(i) + c * plane;
      const double* h = xh.image(i) + c * plane;
      for (size_t j = 0; j < plane; ++j) {
        sum_dy += d[j];
        sum_dy_xh += d[j] * h[j];
      }
    }
    gamma.grad[c] += sum_dy_xh;
    beta.grad[c] += sum_dy;
    const double g = gamma.value[c], invstd = invstd_cache_[c];
    for (int i = 0; i < dy.n; ++i) {
      const double* d = dy.image(i) + c * plane;
      const double* h = xh.image(i) + c * plane;
      double* o = dx.image(i) + c * plane;
      for (size_t j = 0; j < plane; ++j)
        o[j] = g * invstd / cnt * (cnt * d[j] - sum_dy - h[j] * sum_dy_xh);
    }
  }
  return dx;
}

void BatchNorm2d::collect_params(std::vector<Param*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

void BatchNorm2d::collect_state(std::vector<Param*>& out) {
  out.push_back(&running_mean);
  out.push_back(&running_var);
}

// ----------------------------------------------------------- activations

Tensor LeakyReLU::forward(const Tensor& x, bool, bool) {
  x_cache_ = x;
  Tensor y = x;
  for (double& v : y.v) v = v > 0 ? v : slope_ * v;
  return y;
}

Tensor LeakyReLU::backward(const Tensor& dy) {
  Tensor dx = dy;
  for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] *= x_cache_.v[i] > 0 ? 1.0 : slope_;
  return dx;
}

Tensor ReLU::forward(const Tensor& x, bool, bool) {
  x_cache_ = x;
  Tensor y = x;
  for (double& v : y.v) v = v > 0 ? v : 0.0;
  return y;
}

Tensor ReLU::backward(const Tensor& dy) {
  Tensor dx = dy;
  for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] *= x_cache_.v[i] > 0 ? 1.0 : 0.0;
  return dx;
}

Tensor Sigmoid::forward(const Tensor& x, bool, bool) {
  Tensor y = x;
  for (double& v : y.v) v = 1.0 / (1.0 + std::exp(-v));
  y_cache_ = y;
  return y;
}

Tensor Sigmoid::backward(const Tensor& dy) {
  Tensor dx = dy;
  for (size_t i = 0; i < dx.v.size(); ++i) {
    const double y = y_cache_.v[i];
    dx.v[i] *= y * (1.0 - y);
  }
  return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in_features, int out_features, bool bias_on)
    : weight(name + ".weight", {out_features, in_features}),
      bias(bias_on ? Param(name + ".bias", {out_features}) : Param()),
      in_f_(in_features),
      out_f_(out_features),
      has_bias_(bias_on) {}

Tensor Linear::forward(const Tensor& x, bool, bool) {
  if (static_cast<int>(x.per_image()) != in_f_) throw NnError(weight.name + ": feature mismatch");
  x_cache_ = x;
  Tensor y(x.n, out_f_, 1, 1);
  // Y (n x out) = X (n x in) * W^T (in x out)
  gemm_nt(x.v.data(), x.n, in_f_, weight.value.data(), out_f_, y.v.data());
  if (has_bias_)
    for (int i = 0; i < x.n; ++i)
      for (int o = 0; o < out_f_; ++o) y.v[static_cast<size_t>(i) * out_f_ + o] += bias.value[o];
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  const Tensor& x = x_cache_;
  // dW (out x in) += dY^T (out x n) * X (n x in)
  std::vector<double> dw(weight.value.size());
  gemm_tn(dy.v.data(), x.n, out_f_, x.v.data(), in_f_, dw.data());
  for (size_t j = 0; j < dw.size(); ++j) weight.grad[j] += dw[j];
  if (has_bias_)
    for (int i = 0; i < x.n; ++i)
      for (int o = 0; o < out_f_; ++o) bias.grad[o] += dy.v[static_cast<size_t>(i) * out_f_ + o];
  Tensor dx(x.n, x.c, x.h, x.w);
  // dX (n x in) = dY (n x out) * W (out x in)
  gemm_nn(dy.v.data(), x.n, out_f_, weight.value.data(), in_f_, dx.v.data());
  return dx;
}

void Linear::collect_params(std::vector<Param*>& out) {
  out.push_back(&weight);
  if (has_bias_) out.push_back(&bias);
}

// ------------------------------------------------------- shape adapters

Tensor Flatten::forward(const Tensor& x, bool, bool) {
  c_ = x.c;
  h_ = x.h;
  w_ = x.w;
  return x.reshaped(x.c * x.h * x.w, 1, 1);
}

Tensor Flatten::backward(const Tensor& dy) { return dy.reshaped(c_, h_, w_); }

Tensor Unflatten::forward(const Tensor& x, bool, bool) { return x.reshaped(c_, h_, w_); }

Tensor Unflatten::backward(const Tensor& dy) { return dy.reshaped(c_ * h_ * w_, 1, 1); }

// ------------------------------------------------------------ Sequential

Tensor Sequential::forward(const Tensor& x, bool training, bool update_stats) {
  Tensor cur = x;
  for (auto& l : layers_) cur = l->forward(cur, training, update_stats);
  return cur;
}

Tensor Sequential::backward(const Tensor& dy) {
  Tensor cur = dy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
  return cur;
}

std::vector<Param*> Sequential::params() {
  std::vector<Param*> out;
  for (auto& l : layers_) l->collect_params(out);
  return out;
}

std::vector<Param*> Sequential::state() {
  std::vector<Param*> out;
  for (auto& l : layers_) l->collect_state(out);
  return out;
}

void init_params(const std::vector<Param*>& params, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 0.02);
  for (Param* p : params) {
    const bool is_gain = p->name.size() >= 6 && p->name.rfind(".gamma") == p->name.size() - 6;
    const bool is_vec = p->shape.size() == 1;
    for (double& v : p->value) {
      if (is_gain)
        v = 1.0 + dist(rng);
      else if (is_vec)
        v = 0.0;  // biases and shifts start at zero
      else
        v = dist(rng);
    }
    p->zero_grad();
  }
}

// ------------------------------------------------------------------ Adam

Adam::Adam(std::vector<Param*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i]->size(), 0.0);
    v_[i].assign(params_[i]->size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    for (size_t j = 0; j < p.size(); ++j) {
      const double g = p.grad[j] + cfg_.weight_decay * p.value[j];
      m_[i][j] = cfg_.beta1 * m_[i][j] + (1 - cfg_.beta1) * g;
      v_[i][j] = cfg_.beta2 * v_[i][j] + (1 - cfg_.beta2) * g * g;
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      p.value[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace steleguard::nn
