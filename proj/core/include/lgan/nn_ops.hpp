#pragma once

#include <Eigen/Dense>

#include "lgan/graph.hpp"

namespace lgan::ag {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

// ---------------------------------------------------------------------------
// Linear: y = x W^T + b, x [B,din], W [dout,din], b [dout]
// ---------------------------------------------------------------------------
template <typename T>
NodeP<T> linear(const NodeP<T>& x, const NodeP<T>& w, const NodeP<T>& b) {
  if (x->value.ndim() != 2 || w->value.ndim() != 2 || x->value.size(1) != w->value.size(1))
    throw std::invalid_argument("linear: shape mismatch x" + shape_str(x->value.shape()) + " W" + shape_str(w->value.shape()));
  const int64_t batch = x->value.size(0), din = x->value.size(1), dout = w->value.size(0);
  if (b->value.numel() != dout) throw std::invalid_argument("linear: bias size mismatch");

  Tensor<T> v(Shape{batch, dout});
  {
    ECMap<T> xm(x->value.data(), batch, din);
    ECMap<T> wm(w->value.data(), dout, din);
    EMap<T> ym(v.data(), batch, dout);
    ym.noalias() = xm * wm.transpose();
    for (int64_t i = 0; i < batch; ++i)
      for (int64_t j = 0; j < dout; ++j) v.at2(i, j) += b->value[j];
  }
  return make_op<T>(std::move(v), {x, w, b}, [x, w, b, batch, din, dout](Node<T>& n) {
    ECMap<T> gy(n.grad.data(), batch, dout);
    if (x->requires_grad) {
      EMap<T> gx(x->ensure_grad().data(), batch, din);
      ECMap<T> wm(w->value.data(), dout, din);
      gx.noalias() += gy * wm;
    }
    if (w->requires_grad) {
      EMap<T> gw(w->ensure_grad().data(), dout, din);
      ECMap<T> xm(x->value.data(), batch, din);
      gw.noalias() += gy.transpose() * xm;
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int64_t i = 0; i < batch; ++i)
        for (int64_t j = 0; j < dout; ++j) gb[j] += n.grad[i * dout + j];
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d, NCHW, square kernel. im2col + GEMM; column buffers are rebuilt in
// the backward pass instead of cached (they dominate memory otherwise).
// ---------------------------------------------------------------------------
namespace detail {

template <typename T>
void im2col(const T* img, int64_t channels, int64_t h, int64_t w, int64_t k, int64_t stride,
            int64_t pad, int64_t oh, int64_t ow, T* col) {
  // col is [channels*k*k, oh*ow]
  for (int64_t c = 0; c < channels; ++c) {
    const T* src = img + c * h * w;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        T* dst = col + ((c * k + ki) * k + kj) * oh * ow;
        for (int64_t y = 0; y < oh; ++y) {
          const int64_t sy = y * stride - pad + ki;
          if (sy < 0 || sy >= h) {
            std::fill(dst + y * ow, dst + (y + 1) * ow, T(0));
            continue;
          }
          for (int64_t x = 0; x < ow; ++x) {
            const int64_t sx = x * stride - pad + kj;
            dst[y * ow + x] = (sx >= 0 && sx < w) ? src[sy * w + sx] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accum(const T* col, int64_t channels, int64_t h, int64_t w, int64_t k, int64_t stride,
                  int64_t pad, int64_t oh, int64_t ow, T* img) {
  for (int64_t c = 0; c < channels; ++c) {
    T* dst = img + c * h * w;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        const T* src = col + ((c * k + ki) * k + kj) * oh * ow;
        for (int64_t y = 0; y < oh; ++y) {
          const int64_t sy = y * stride - pad + ki;
          if (sy < 0 || sy >= h) continue;
          for (int64_t x = 0; x < ow; ++x) {
            const int64_t sx = x * stride - pad + kj;
            if (sx >= 0 && sx < w) dst[sy * w + sx] += src[y * ow + x];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x [B,Cin,H,W], w [Cout,Cin,k,k], b [Cout]
template <typename T>
NodeP<T> conv2d(const NodeP<T>& x, const NodeP<T>& w, const NodeP<T>& b, int64_t stride, int64_t pad) {
  if (x->value.ndim() != 4 || w->value.ndim() != 4)
    throw std::invalid_argument("conv2d: expects 4-d input and weight");
  const int64_t batch = x->value.size(0), cin = x->value.size(1), h = x->value.size(2), wd = x->value.size(3);
  const int64_t cout = w->value.size(0), k = w->value.size(2);
  if (w->value.size(1) != cin || w->value.size(3) != k)
    throw std::invalid_argument("conv2d: weight/input channel mismatch");
  if (b->value.numel() != cout) throw std::invalid_argument("conv2d: bias size mismatch");
  const int64_t oh = (h + 2 * pad - k) / stride + 1;
  const int64_t ow = (wd + 2 * pad - k) / stride + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: output would be empty");

  const int64_t ck2 = cin * k * k;
  Tensor<T> v(Shape{batch, cout, oh, ow});
  {
    std::vector<T> col(static_cast<size_t>(ck2 * oh * ow));
    ECMap<T> wm(w->value.data(), cout, ck2);
    for (int64_t n = 0; n < batch; ++n) {
      detail::im2col(x->value.data() + n * cin * h * wd, cin, h, wd, k, stride, pad, oh, ow, col.data());
      ECMap<T> cm(col.data(), ck2, oh * ow);
      EMap<T> ym(v.data() + n * cout * oh * ow, cout, oh * ow);
      ym.noalias() = wm * cm;
      for (int64_t c = 0; c < cout; ++c) ym.row(c).array() += b->value[c];
    }
  }
  return make_op<T>(std::move(v), {x, w, b},
                    [x, w, b, batch, cin, h, wd, cout, k, stride, pad, oh, ow, ck2](Node<T>& n) {
    std::vector<T> col(static_cast<size_t>(ck2 * oh * ow));
    std::vector<T> dcol;
    if (x->requires_grad) dcol.resize(static_cast<size_t>(ck2 * oh * ow));
    ECMap<T> wm(w->value.data(), cout, ck2);
    for (int64_t i = 0; i < batch; ++i) {
      ECMap<T> gy(n.grad.data() + i * cout * oh * ow, cout, oh * ow);
      if (w->requires_grad || x->requires_grad)
        detail::im2col(x->value.data() + i * cin * h * wd, cin, h, wd, k, stride, pad, oh, ow, col.data());
      if (w->requires_grad) {
        EMap<T> gw(w->ensure_grad().data(), cout, ck2);
        ECMap<T> cm(col.data(), ck2, oh * ow);
        gw.noalias() += gy * cm.transpose();
      }
      if (x->requires_grad) {
        EMap<T> dc(dcol.data(), ck2, oh * ow);
        dc.noalias() = wm.transpose() * gy;
        detail::col2im_accum(dcol.data(), cin, h, wd, k, stride, pad, oh, ow,
                             x->ensure_grad().data() + i * cin * h * wd);
      }
      if (b->requires_grad) {
        auto& gb = b->ensure_grad();
        for (int64_t c = 0; c < cout; ++c) {
          T s = 0;
          const T* g = n.grad.data() + (i * cout + c) * oh * ow;
          for (int64_t j = 0; j < oh * ow; ++j) s += g[j];
          gb[c] += s;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsample and 2x2 pooling
// ---------------------------------------------------------------------------
template <typename T>
NodeP<T> upsample2(const NodeP<T>& x) {
  if (x->value.ndim() != 4) throw std::invalid_argument("upsample2: expects 4-d input");
  const int64_t b = x->value.size(0), c = x->value.size(1), h = x->value.size(2), w = x->value.size(3);
  Tensor<T> v(Shape{b, c, 2 * h, 2 * w});
  for (int64_t n = 0; n < b * c; ++n) {
    const T* src = x->value.data() + n * h * w;
    T* dst = v.data() + n * 4 * h * w;
    for (int64_t y = 0; y < 2 * h; ++y)
      for (int64_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
  }
  return make_op<T>(std::move(v), {x}, [x, b, c, h, w](Node<T>& n) {
    if (!x->requires_grad) return;
    auto& g = x->ensure_grad();
    for (int64_t i = 0; i < b * c; ++i) {
      T* dst = g.data() + i * h * w;
      const T* src = n.grad.data() + i * 4 * h * w;
      for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
    }
  });
}

template <typename T>
NodeP<T> avgpool2(const NodeP<T>& x) {
  if (x->value.ndim() != 4 || x->value.size(2) % 2 || x->value.size(3) % 2)
    throw std::invalid_argument("avgpool2: spatial dims must be even");
  const int64_t b = x->value.size(0), c = x->value.size(1), h = x->value.size(2), w = x->value.size(3);
  Tensor<T> v(Shape{b, c, h / 2, w / 2});
  for (int64_t n = 0; n < b * c; ++n) {
    const T* src = x->value.data() + n * h * w;
    T* dst = v.data() + n * (h / 2) * (w / 2);
    for (int64_t y = 0; y < h / 2; ++y)
      for (int64_t xx = 0; xx < w / 2; ++xx)
        dst[y * (w / 2) + xx] = (src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1] +
                                 src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1]) * T(0.25);
  }
  return make_op<T>(std::move(v), {x}, [x, b, c, h, w](Node<T>& n) {
    if (!x->requires_grad) return;
    auto& g = x->ensure_grad();
    for (int64_t i = 0; i < b * c; ++i) {
      T* dst = g.data() + i * h * w;
      const T* src = n.grad.data() + i * (h / 2) * (w / 2);
      for (int64_t y = 0; y < h / 2; ++y)
        for (int64_t xx = 0; xx < w / 2; ++xx) {
          const T q = src[y * (w / 2) + xx] * T(0.25);
          dst[2 * y * w + 2 * xx] += q;
          dst[2 * y * w + 2 * xx + 1] += q;
          dst[(2 * y + 1) * w + 2 * xx] += q;
          dst[(2 * y + 1) * w + 2 * xx + 1] += q;
        }
    }
  });
}

template <typename T>
NodeP<T> maxpool2(const NodeP<T>& x) {
  if (x->value.ndim() != 4 || x->value.size(2) % 2 || x->value.size(3) % 2)
    throw std::invalid_argument("maxpool2: spatial dims must be even");
  const int64_t b = x->value.size(0), c = x->value.size(1), h = x->value.size(2), w = x->value.size(3);
  Tensor<T> v(Shape{b, c, h / 2, w / 2});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(v.numel()));
  for (int64_t n = 0; n < b * c; ++n) {
    const T* src = x->value.data() + n * h * w;
    T* dst = v.data() + n * (h / 2) * (w / 2);
    int64_t* am = argmax->data() + n * (h / 2) * (w / 2);
    for (int64_t y = 0; y < h / 2; ++y)
      for (int64_t xx = 0; xx < w / 2; ++xx) {
        const int64_t idx[4] = {2 * y * w + 2 * xx, 2 * y * w + 2 * xx + 1,
                                (2 * y + 1) * w + 2 * xx, (2 * y + 1) * w + 2 * xx + 1};
        int64_t best = idx[0];
        for (int j = 1; j < 4; ++j)
          if (src[idx[j]] > src[best]) best = idx[j];
        dst[y * (w / 2) + xx] = src[best];
        am[y * (w / 2) + xx] = n * h * w + best;
      }
  }
  return make_op<T>(std::move(v), {x}, [x, argmax](Node<T>& n) {
    if (!x->requires_grad) return;
    auto& g = x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) g[(*argmax)[static_cast<size_t>(i)]] += n.grad[i];
  });
}

// [B,C,H,W] -> [B,C], mean over spatial dims.
template <typename T>
NodeP<T> global_mean_pool(const NodeP<T>& x) {
  if (x->value.ndim() != 4) throw std::invalid_argument("global_mean_pool: expects 4-d input");
  const int64_t b = x->value.size(0), c = x->value.size(1), hw = x->value.size(2) * x->value.size(3);
  Tensor<T> v(Shape{b, c});
  for (int64_t i = 0; i < b * c; ++i) {
    T s = 0;
    const T* src = x->value.data() + i * hw;
    for (int64_t j = 0; j < hw; ++j) s += src[j];
    v[i] = s / static_cast<T>(hw);
  }
  return make_op<T>(std::move(v), {x}, [x, b, c, hw](Node<T>& n) {
    if (!x->requires_grad) return;
    auto& g = x->ensure_grad();
    const T inv = T(1) / static_cast<T>(hw);
    for (int64_t i = 0; i < b * c; ++i) {
      const T go = n.grad[i] * inv;
      T* dst = g.data() + i * hw;
      for (int64_t j = 0; j < hw; ++j) dst[j] += go;
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization over NCHW, per channel.
// ---------------------------------------------------------------------------
template <typename T>
NodeP<T> batchnorm2d(const NodeP<T>& x, const NodeP<T>& gamma, const NodeP<T>& beta,
                     Tensor<T>* running_mean, Tensor<T>* running_var, bool training,
                     T momentum, T eps) {
  if (x->value.ndim() != 4) throw std::invalid_argument("batchnorm2d: expects 4-d input");
  const int64_t b = x->value.size(0), c = x->value.size(1), hw = x->value.size(2) * x->value.size(3);
  if (gamma->value.numel() != c || beta->value.numel() != c)
    throw std::invalid_argument("batchnorm2d: affine parameter size mismatch");
  const int64_t cnt = b * hw;

  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(c), T(0));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(c), T(0));

  if (training) {
    for (int64_t ch = 0; ch < c; ++ch) {
      T s = 0;
      for (int64_t n = 0; n < b; ++n) {
        const T* src = x->value.data() + (n * c + ch) * hw;
        for (int64_t j = 0; j < hw; ++j) s += src[j];
      }
      (*mean)[ch] = s / static_cast<T>(cnt);
    }
    for (int64_t ch = 0; ch < c; ++ch) {
      T s = 0;
      const T m = (*mean)[ch];
      for (int64_t n = 0; n < b; ++n) {
        const T* src = x->value.data() + (n * c + ch) * hw;
        for (int64_t j = 0; j < hw; ++j) {
          const T d = src[j] - m;
          s += d * d;
        }
      }
      const T var = s / static_cast<T>(cnt);
      (*inv_std)[ch] = T(1) / std::sqrt(var + eps);
      // Running averages track the unbiased variance.
      const T unbiased = cnt > 1 ? s / static_cast<T>(cnt - 1) : var;
      (*running_mean)[ch] = (T(1) - momentum) * (*running_mean)[ch] + momentum * (*mean)[ch];
      (*running_var)[ch] = (T(1) - momentum) * (*running_var)[ch] + momentum * unbiased;
    }
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      (*mean)[ch] = (*running_mean)[ch];
      (*inv_std)[ch] = T(1) / std::sqrt((*running_var)[ch] + eps);
    }
  }

  Tensor<T> v(x->value.shape());
  for (int64_t n = 0; n < b; ++n)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* src = x->value.data() + (n * c + ch) * hw;
      T* dst = v.data() + (n * c + ch) * hw;
      const T m = (*mean)[ch], is = (*inv_std)[ch], ga = gamma->value[ch], be = beta->value[ch];
      for (int64_t j = 0; j < hw; ++j) dst[j] = ga * (src[j] - m) * is + be;
    }

  return make_op<T>(std::move(v), {x, gamma, beta},
                    [x, gamma, beta, mean, inv_std, training, b, c, hw](Node<T>& n) {
    const int64_t cnt = b * hw;
    for (int64_t ch = 0; ch < c; ++ch) {
      const T m = (*mean)[ch], is = (*inv_std)[ch], ga = gamma->value[ch];
      // Per-channel reductions of the incoming gradient.
      T sum_g = 0, sum_gx = 0;
      for (int64_t i = 0; i < b; ++i) {
        const T* src = x->value.data() + (i * c + ch) * hw;
        const T* g = n.grad.data() + (i * c + ch) * hw;
        for (int64_t j = 0; j < hw; ++j) {
          sum_g += g[j];
          sum_gx += g[j] * (src[j] - m) * is;
        }
      }
      if (gamma->requires_grad) gamma->ensure_grad()[ch] += sum_gx;
      if (beta->requires_grad) beta->ensure_grad()[ch] += sum_g;
      if (x->requires_grad) {
        auto& gx = x->ensure_grad();
        if (training) {
          const T inv_cnt = T(1) / static_cast<T>(cnt);
          for (int64_t i = 0; i < b; ++i) {
            const T* src = x->value.data() + (i * c + ch) * hw;
            const T* g = n.grad.data() + (i * c + ch) * hw;
            T* dst = gx.data() + (i * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) {
              const T xhat = (src[j] - m) * is;
              dst[j] += ga * is * (g[j] - inv_cnt * sum_g - xhat * inv_cnt * sum_gx);
            }
          }
        } else {
          for (int64_t i = 0; i < b; ++i) {
            const T* g = n.grad.data() + (i * c + ch) * hw;
            T* dst = gx.data() + (i * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) dst[j] += ga * is * g[j];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Spectral weight scaling: W / sigma with sigma = u^T (W v), u and v held
// constant for the step (power-iteration estimates maintained by the layer).
// Gradient treats sigma as the differentiable function of W it is.
// ---------------------------------------------------------------------------
template <typename T>
NodeP<T> spectral_scale(const NodeP<T>& w, std::shared_ptr<std::vector<T>> u,
                        std::shared_ptr<std::vector<T>> v) {
  const int64_t rows = w->value.size(0);
  const int64_t cols = w->value.numel() / rows;
  if (static_cast<int64_t>(u->size()) != rows || static_cast<int64_t>(v->size()) != cols)
    throw std::invalid_argument("spectral_scale: u/v size mismatch");

  T sigma = 0;
  {
    ECMap<T> wm(w->value.data(), rows, cols);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> um(u->data(), rows);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> vm(v->data(), cols);
    sigma = um.dot(wm * vm);
  }
  if (!(sigma > T(0))) sigma = std::numeric_limits<T>::epsilon();

  Tensor<T> out = w->value;
  const T inv_sigma = T(1) / sigma;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= inv_sigma;

  return make_op<T>(std::move(out), {w}, [w, u, v, sigma, rows, cols](Node<T>& n) {
    if (!w->requires_grad) return;
    // d(W/sigma) with sigma = u^T W v:  G/sigma - (<G,W>/sigma^2) u v^T
    T gw_dot_w = 0;
    for (int64_t i = 0; i < n.grad.numel(); ++i) gw_dot_w += n.grad[i] * w->value[i];
    auto& g = w->ensure_grad();
    const T inv_s = T(1) / sigma;
    const T coef = gw_dot_w * inv_s * inv_s;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t cc = 0; cc < cols; ++cc)
        g[r * cols + cc] += n.grad[r * cols + cc] * inv_s - coef * (*u)[static_cast<size_t>(r)] * (*v)[static_cast<size_t>(cc)];
  });
}

}  // namespace lgan::ag
