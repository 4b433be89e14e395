#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace steleguard::nn {

class NnError : public std::runtime_error {
 public:
  explicit NnError(const std::string& what) : std::runtime_error(what) {}
};

// Dense NCHW tensor. Vectors ride as (n, features, 1, 1).
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0) {}

  size_t size() const { return v.size(); }
  size_t per_image() const { return static_cast<size_t>(c) * h * w; }
  double* image(int i) { return v.data() + per_image() * i; }
  const double* image(int i) const { return v.data() + per_image() * i; }
  double& at(int i, int ch, int y, int x) {
    return v[((static_cast<size_t>(i) * c + ch) * h + y) * w + x];
  }
  double at(int i, int ch, int y, int x) const {
    return v[((static_cast<size_t>(i) * c + ch) * h + y) * w + x];
  }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  Tensor reshaped(int c2, int h2, int w2) const;
};

// Named parameter (or running-stat) blob with its gradient.
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string name_, std::vector<int> shape_);
  size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Layer {
 public:
  virtual ~Layer() = default;
  // training=true uses batch statistics in normalization layers;
  // update_stats additionally refreshes their running averages.
  virtual Tensor forward(const Tensor& x, bool training, bool update_stats) = 0;
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual void collect_params(std::vector<Param*>& out) {}
  virtual void collect_state(std::vector<Param*>& out) {}
};

class Conv2d : public Layer {
 public:
  Conv2d(std::string name, int in_ch, int out_ch, int kernel = 4, int stride = 2, int pad = 1,
         bool bias = true);
  Tensor forward(const Tensor& x, bool training, bool update_stats) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;
  static void out_dims(int h, int w, int kernel, int stride, int pad, int& oh, int& ow);

  Param weight;  // [out_ch, in_ch, k, k]
  Param bias;    // [out_ch] (empty when disabled)

 private:
  int in_ch_, out_ch_, k_, stride_, pad_;
  bool has_bias_;
  Tensor x_cache_;
};

class ConvTranspose2d : public Layer {
 public:
  ConvTranspose2d(std::string name, int in_ch, int out_ch, int kernel = 4, int stride = 2,
                  int pad = 1, bool bias = true);
  Tensor forward(const Tensor& x, bool training, bool update_stats) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;

  Param weight;  // [in_ch, out_ch, k, k]
  Param bias;    // [out_ch]

 private:
  int in_ch_, out_ch_, k_, stride_, pad_;
  bool has_bias_;
  Tensor x_cache_;
};

class BatchNorm2d : public Layer {
 public:
  explicit BatchNorm2d(std::string name, int channels, double eps = 1e-5, double momentum = 0.1);
  Tensor forward(const Tensor& x, bool training, bool update_stats) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;
  void collect_state(std::vector<Param*>& out) override;

  Param gamma, beta;
  Param running_mean, running_var;  // state, not optimized

 private:
  int ch_;
  double eps_, momentum_;
  Tensor xhat_cache_;
  std::vector<double> invstd_cache_;
  bool trained_forward_ = false;
};

class LeakyReLU : public Layer {
 public:
  explicit LeakyReLU(double slope = 0.2) : slope_(slope) {}
  Tensor forward(const Tensor& x, bool training, bool update_stats) override;
  Tensor backward(const Tensor& dy) override;

 private:
  double slope_;
  Tensor x_cache_;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training, bool update_stats) override;
  Tensor backward(const Tensor& dy) override;

 private:
  Tensor x_cache_;
};

class Sigmoid : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training, bool update_stats) override;
  Tensor backward(const Tensor& dy) override;

 private:
  Tensor y_cache_;
};

class Linear : public Layer {
 public:
  Linear(std::string name, int in_features, int out_features, bool bias = true);
  Tensor forward(const Tensor& x, bool training, bool update_stats) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;

  Param weight;  // [out, in]
  Param bias;    // [out]

 private:
  int in_f_, out_f_;
  bool has_bias_;
  Tensor x_cache_;
};

class Flatten : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training, bool update_stats) override;
  Tensor backward(const Tensor& dy) override;

 private:
  int c_ = 0, h_ = 0, w_ = 0;
};

class Unflatten : public Layer {
 public:
  Unflatten(int c, int h, int w) : c_(c), h_(h), w_(w) {}
  Tensor forward(const Tensor& x, bool training, bool update_stats) override;
  Tensor backward(const Tensor& dy) override;

 private:
  int c_, h_, w_;
};

class Sequential {
 public:
  Sequential() = default;
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  template <typename L, typename... Args>
  L* add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L* raw = layer.get();
    layers_.push_back(std::move(layer));
    return raw;
  }

  Tensor forward(const Tensor& x, bool training, bool update_stats);
  Tensor backward(const Tensor& dy);
  std::vector<Param*> params();
  std::vector<Param*> state();

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

// DCGAN-style initialization: weights ~ N(0, 0.02), biases 0,
// batch-norm gains ~ N(1, 0.02).
void init_params(const std::vector<Param*>& params, std::mt19937_64& rng);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-7;
};

class Adam {
 public:
  Adam(std::vector<Param*> params, AdamConfig cfg);
  void zero_grad();
  void step();
  const std::vector<Param*>& params() const { return params_; }

 private:
  std::vector<Param*> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// Deterministic GEMM helpers (Eigen, single evaluation order per element).
// C(m x n) = A(m x k) * B(k x n), all row-major.
void gemm_nn(const double* a, int m, int k, const double* b, int n, double* c);
// C(m x n) = A(m x k) * B(n x k)^T
void gemm_nt(const double* a, int m, int k, const double* b, int n, double* c);
// C(m x n) = A(k x m)^T * B(k x n)
void gemm_tn(const double* a, int k, int m, const double* b, int n, double* c);

}  // namespace steleguard::nn
