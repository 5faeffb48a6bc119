#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "lgan/nn_ops.hpp"
#include "lgan/rng.hpp"

namespace lgan::nn {

template <typename T>
struct NamedParam {
  std::string name;
  ag::NodeP<T> node;
};

// Buffers are non-trained state that still belongs in checkpoints
// (batch-norm running stats, spectral-norm power iteration vectors).
template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
struct ParamGroup {
  std::vector<NamedParam<T>> params;
  std::vector<NamedBuffer<T>> buffers;

  void add_param(std::string name, const ag::NodeP<T>& p) { params.push_back({std::move(name), p}); }
  void add_buffer(std::string name, Tensor<T>* t) { buffers.push_back({std::move(name), t}); }
  void merge(const ParamGroup& o) {
    params.insert(params.end(), o.params.begin(), o.params.end());
    buffers.insert(buffers.end(), o.buffers.begin(), o.buffers.end());
  }

  std::vector<ag::NodeP<T>> nodes() const {
    std::vector<ag::NodeP<T>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p.node);
    return out;
  }

  void zero_grad() const {
    for (const auto& p : params) p.node->zero_grad();
  }

  // FNV-1a over raw parameter and buffer bytes; used by the update-isolation
  // checks and for stamping exported datasets with their source weights.
  uint64_t content_hash() const {
    uint64_t h = 1469598103934665603ULL;
    auto mix_bytes = [&h](const void* ptr, size_t len) {
      const unsigned char* p = static_cast<const unsigned char*>(ptr);
      for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& p : params) mix_bytes(p.node->value.data(), sizeof(T) * static_cast<size_t>(p.node->value.numel()));
    for (const auto& b : buffers) mix_bytes(b.tensor->data(), sizeof(T) * static_cast<size_t>(b.tensor->numel()));
    return h;
  }
};

// Saxe-style orthogonal init on the [rows, numel/rows] matrix view.
template <typename T>
void orthogonal_init(Tensor<T>& w, Rng& rng, double gain = 1.0) {
  const int64_t rows = w.size(0);
  const int64_t cols = w.numel() / rows;
  const int64_t r = std::max(rows, cols), c = std::min(rows, cols);
  Eigen::MatrixXd a(r, c);
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(r, c);
  Eigen::MatrixXd rmat = qr.matrixQR().topRows(c).template triangularView<Eigen::Upper>();
  for (int64_t j = 0; j < c; ++j)
    if (rmat(j, j) < 0) q.col(j) = -q.col(j);
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j)
      w[i * cols + j] = static_cast<T>(gain * (rows >= cols ? q(i, j) : q(j, i)));
}

namespace detail {
template <typename T>
void power_iterate_matrix(const Tensor<T>& w, std::vector<T>& u, std::vector<T>& v, int iters) {
  const int64_t rows = w.size(0);
  const int64_t cols = w.numel() / rows;
  ag::ECMap<T> wm(w.data(), rows, cols);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> um(u.data(), rows);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> vm(v.data(), cols);
  const T eps = static_cast<T>(1e-12);
  for (int i = 0; i < iters; ++i) {
    vm = wm.transpose() * um;
    vm /= (vm.norm() + eps);
    um = wm * vm;
    um /= (um.norm() + eps);
  }
}
}  // namespace detail

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t pad, Rng& rng,
         bool spectral = false)
      : stride_(stride), pad_(pad), spectral_(spectral) {
    Tensor<T> w(Shape{cout, cin, k, k});
    orthogonal_init(w, rng);
    weight_ = ag::parameter(std::move(w));
    bias_ = ag::parameter(Tensor<T>(Shape{cout}));
    if (spectral_) {
      u_ = std::make_shared<std::vector<T>>(static_cast<size_t>(cout));
      v_ = std::make_shared<std::vector<T>>(static_cast<size_t>(cin * k * k));
      for (auto& x : *u_) x = static_cast<T>(rng.normal());
      detail::power_iterate_matrix(weight_->value, *u_, *v_, 1);
      u_shadow_ = Tensor<T>(Shape{cout});
      v_shadow_ = Tensor<T>(Shape{cin * k * k});
    }
  }

  ag::NodeP<T> forward(const ag::NodeP<T>& x, bool training) {
    if (!spectral_) return ag::conv2d(x, weight_, bias_, stride_, pad_);
    if (training) detail::power_iterate_matrix(weight_->value, *u_, *v_, 1);
    return ag::conv2d(x, ag::spectral_scale(weight_, u_, v_), bias_, stride_, pad_);
  }

  // Converge the power iteration in place (test/inspection hook).
  void refresh_spectral(int iters) {
    if (spectral_) detail::power_iterate_matrix(weight_->value, *u_, *v_, iters);
  }

  Tensor<T> effective_weight() {
    if (!spectral_) return weight_->value;
    auto w = ag::spectral_scale(weight_, u_, v_);
    return w->value;
  }

  void collect(const std::string& prefix, ParamGroup<T>& g) {
    g.add_param(prefix + ".weight", weight_);
    g.add_param(prefix + ".bias", bias_);
    if (spectral_) {
      sync_shadow();
      g.add_buffer(prefix + ".sn_u", &u_shadow_);
      g.add_buffer(prefix + ".sn_v", &v_shadow_);
    }
  }
  // Spectral vectors live in shared_ptr storage for the graph ops; the shadow
  // tensors exist so checkpoints can address them like any other buffer.
  void sync_shadow() {
    if (!spectral_) return;
    std::copy(u_->begin(), u_->end(), u_shadow_.data());
    std::copy(v_->begin(), v_->end(), v_shadow_.data());
  }
  void load_shadow() {
    if (!spectral_) return;
    std::copy(u_shadow_.data(), u_shadow_.data() + u_shadow_.numel(), u_->begin());
    std::copy(v_shadow_.data(), v_shadow_.data() + v_shadow_.numel(), v_->begin());
  }

  ag::NodeP<T> weight_;
  ag::NodeP<T> bias_;
  int64_t stride_ = 1, pad_ = 1;
  bool spectral_ = false;
  std::shared_ptr<std::vector<T>> u_, v_;
  Tensor<T> u_shadow_, v_shadow_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int64_t din, int64_t dout, Rng& rng, bool spectral = false) : spectral_(spectral) {
    Tensor<T> w(Shape{dout, din});
    orthogonal_init(w, rng);
    weight_ = ag::parameter(std::move(w));
    bias_ = ag::parameter(Tensor<T>(Shape{dout}));
    if (spectral_) {
      u_ = std::make_shared<std::vector<T>>(static_cast<size_t>(dout));
      v_ = std::make_shared<std::vector<T>>(static_cast<size_t>(din));
      for (auto& x : *u_) x = static_cast<T>(rng.normal());
      detail::power_iterate_matrix(weight_->value, *u_, *v_, 1);
      u_shadow_ = Tensor<T>(Shape{dout});
      v_shadow_ = Tensor<T>(Shape{din});
    }
  }

  ag::NodeP<T> forward(const ag::NodeP<T>& x, bool training) {
    if (!spectral_) return ag::linear(x, weight_, bias_);
    if (training) detail::power_iterate_matrix(weight_->value, *u_, *v_, 1);
    return ag::linear(x, ag::spectral_scale(weight_, u_, v_), bias_);
  }

  void refresh_spectral(int iters) {
    if (spectral_) detail::power_iterate_matrix(weight_->value, *u_, *v_, iters);
  }
  Tensor<T> effective_weight() {
    if (!spectral_) return weight_->value;
    auto w = ag::spectral_scale(weight_, u_, v_);
    return w->value;
  }

  void collect(const std::string& prefix, ParamGroup<T>& g) {
    g.add_param(prefix + ".weight", weight_);
    g.add_param(prefix + ".bias", bias_);
    if (spectral_) {
      sync_shadow();
      g.add_buffer(prefix + ".sn_u", &u_shadow_);
      g.add_buffer(prefix + ".sn_v", &v_shadow_);
    }
  }
  void sync_shadow() {
    if (!spectral_) return;
    std::copy(u_->begin(), u_->end(), u_shadow_.data());
    std::copy(v_->begin(), v_->end(), v_shadow_.data());
  }
  void load_shadow() {
    if (!spectral_) return;
    std::copy(u_shadow_.data(), u_shadow_.data() + u_shadow_.numel(), u_->begin());
    std::copy(v_shadow_.data(), v_shadow_.data() + v_shadow_.numel(), v_->begin());
  }

  ag::NodeP<T> weight_;
  ag::NodeP<T> bias_;
  bool spectral_ = false;
  std::shared_ptr<std::vector<T>> u_, v_;
  Tensor<T> u_shadow_, v_shadow_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int64_t channels, T momentum = T(0.1), T eps = T(1e-5))
      : momentum_(momentum), eps_(eps) {
    gamma_ = ag::parameter(Tensor<T>::full(Shape{channels}, T(1)));
    beta_ = ag::parameter(Tensor<T>(Shape{channels}));
    running_mean_ = Tensor<T>(Shape{channels});
    running_var_ = Tensor<T>::full(Shape{channels}, T(1));
  }

  ag::NodeP<T> forward(const ag::NodeP<T>& x, bool training) {
    return ag::batchnorm2d(x, gamma_, beta_, &running_mean_, &running_var_, training, momentum_, eps_);
  }

  void collect(const std::string& prefix, ParamGroup<T>& g) {
    g.add_param(prefix + ".gamma", gamma_);
    g.add_param(prefix + ".beta", beta_);
    g.add_buffer(prefix + ".running_mean", &running_mean_);
    g.add_buffer(prefix + ".running_var", &running_var_);
  }

  ag::NodeP<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  T momentum_ = T(0.1), eps_ = T(1e-5);
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(ParamGroup<T> group, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : group_(std::move(group)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : group_.params) {
      m_.emplace_back(p.node->value.shape());
      v_.emplace_back(p.node->value.shape());
    }
  }

  void zero_grad() { group_.zero_grad(); }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < group_.params.size(); ++i) {
      auto& p = group_.params[i].node;
      if (!p->grad.same_shape(p->value)) continue;  // never received a gradient
      auto& m = m_[i];
      auto& v = v_[i];
      for (int64_t j = 0; j < p->value.numel(); ++j) {
        const double g = static_cast<double>(p->grad[j]);
        const double mj = beta1_ * static_cast<double>(m[j]) + (1.0 - beta1_) * g;
        const double vj = beta2_ * static_cast<double>(v[j]) + (1.0 - beta2_) * g * g;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        p->value[j] -= static_cast<T>(lr_ * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
      }
    }
  }

  const ParamGroup<T>& group() const { return group_; }

  // Optimizer state participates in checkpoints under its own prefix.
  void collect_state(const std::string& prefix, std::vector<NamedBuffer<T>>& buffers) {
    for (size_t i = 0; i < group_.params.size(); ++i) {
      buffers.push_back({prefix + "." + group_.params[i].name + ".m", &m_[i]});
      buffers.push_back({prefix + "." + group_.params[i].name + ".v", &v_[i]});
    }
  }
  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }

 private:
  ParamGroup<T> group_;
  std::vector<Tensor<T>> m_, v_;
  double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int64_t t_ = 0;
};

}  // namespace lgan::nn
