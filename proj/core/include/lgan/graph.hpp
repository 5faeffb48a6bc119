#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lgan/tensor.hpp"

namespace lgan::ag {

// Reverse-mode autodiff over a dynamically built op graph. Nodes are created
// per forward pass and released when the last reference drops; parameter
// leaves live in the owning module and accumulate gradients across backward
// calls until explicitly zeroed.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool is_param = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (!grad.same_shape(value)) grad = Tensor<T>(value.shape());
    return grad;
  }
  void zero_grad() {
    if (grad.same_shape(value))
      grad.fill(T(0));
  }
  T scalar() const {
    if (value.numel() != 1) throw std::logic_error("Node::scalar on non-scalar node");
    return value[0];
  }
};

template <typename T>
using NodeP = std::shared_ptr<Node<T>>;

template <typename T>
NodeP<T> constant(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  return n;
}

template <typename T>
NodeP<T> parameter(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->is_param = true;
  return n;
}

template <typename T>
NodeP<T> detach(const NodeP<T>& a) {
  return constant(a->value);
}

template <typename T>
NodeP<T> make_op(Tensor<T> value, std::vector<NodeP<T>> parents, std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(bw);
  return n;
}

// Backpropagate from a scalar root. Reverse post-order of a DFS over parent
// links is a valid topological order (consumers before producers).
template <typename T>
void backward(const NodeP<T>& root) {
  if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Fresh interior grads for this pass (parameter grads accumulate).
  for (Node<T>* n : order)
    if (!n->is_param) n->ensure_grad().fill(T(0));
  root->ensure_grad().fill(T(1));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const NodeP<T>& a, const NodeP<T>& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
}

template <typename T>
NodeP<T> add(const NodeP<T>& a, const NodeP<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] += b->value[i];
  return make_op<T>(std::move(v), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

template <typename T>
NodeP<T> sub(const NodeP<T>& a, const NodeP<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] -= b->value[i];
  return make_op<T>(std::move(v), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <typename T>
NodeP<T> mul(const NodeP<T>& a, const NodeP<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] *= b->value[i];
  return make_op<T>(std::move(v), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * a->value[i];
    }
  });
}

// k * a + c, elementwise with scalars k, c.
template <typename T>
NodeP<T> affine(const NodeP<T>& a, T k, T c) {
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] = k * v[i] + c;
  return make_op<T>(std::move(v), {a}, [a, k](Node<T>& n) {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += k * n.grad[i];
  });
}

template <typename T>
NodeP<T> neg(const NodeP<T>& a) { return affine(a, T(-1), T(0)); }

template <typename T>
NodeP<T> operator+(const NodeP<T>& a, const NodeP<T>& b) { return add(a, b); }
template <typename T>
NodeP<T> operator-(const NodeP<T>& a, const NodeP<T>& b) { return sub(a, b); }
template <typename T>
NodeP<T> operator*(const NodeP<T>& a, const NodeP<T>& b) { return mul(a, b); }

template <typename T>
NodeP<T> relu(const NodeP<T>& a) {
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] = v[i] > T(0) ? v[i] : T(0);
  return make_op<T>(std::move(v), {a}, [a](Node<T>& n) {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i)
      if (a->value[i] > T(0)) g[i] += n.grad[i];
  });
}

template <typename T>
NodeP<T> leaky_relu(const NodeP<T>& a, T slope) {
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] = v[i] > T(0) ? v[i] : slope * v[i];
  return make_op<T>(std::move(v), {a}, [a, slope](Node<T>& n) {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += (a->value[i] > T(0) ? T(1) : slope) * n.grad[i];
  });
}

template <typename T>
NodeP<T> sigmoid(const NodeP<T>& a) {
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) {
    const T x = v[i];
    if (x >= T(0)) {
      v[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      v[i] = e / (T(1) + e);
    }
  }
  return make_op<T>(std::move(v), {a}, [a](Node<T>& n) {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) {
      const T s = n.value[i];
      g[i] += n.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
NodeP<T> tanh_act(const NodeP<T>& a) {
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] = std::tanh(v[i]);
  return make_op<T>(std::move(v), {a}, [a](Node<T>& n) {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * (T(1) - n.value[i] * n.value[i]);
  });
}

template <typename T>
NodeP<T> clamp(const NodeP<T>& a, T lo, T hi) {
  Tensor<T> v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] = std::min(std::max(v[i], lo), hi);
  return make_op<T>(std::move(v), {a}, [a, lo, hi](Node<T>& n) {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i)
      if (a->value[i] > lo && a->value[i] < hi) g[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <typename T>
NodeP<T> sum_all(const NodeP<T>& a) {
  T s = 0;
  for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
  return make_op<T>(Tensor<T>::scalar(s), {a}, [a](Node<T>& n) {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    const T go = n.grad[0];
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += go;
  });
}

template <typename T>
NodeP<T> mean_all(const NodeP<T>& a) {
  if (a->value.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
  const T inv = T(1) / static_cast<T>(a->value.numel());
  return affine(sum_all(a), inv, T(0));
}

// [B, ...] -> [B], mean over all trailing dimensions.
template <typename T>
NodeP<T> mean_per_sample(const NodeP<T>& a) {
  if (a->value.ndim() < 1 || a->value.numel() == 0)
    throw std::invalid_argument("mean_per_sample: empty tensor");
  const int64_t b = a->value.size(0);
  const int64_t stride = a->value.numel() / b;
  Tensor<T> v(Shape{b});
  for (int64_t i = 0; i < b; ++i) {
    T s = 0;
    for (int64_t j = 0; j < stride; ++j) s += a->value[i * stride + j];
    v[i] = s / static_cast<T>(stride);
  }
  return make_op<T>(std::move(v), {a}, [a, b, stride](Node<T>& n) {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    const T inv = T(1) / static_cast<T>(stride);
    for (int64_t i = 0; i < b; ++i) {
      const T go = n.grad[i] * inv;
      for (int64_t j = 0; j < stride; ++j) g[i * stride + j] += go;
    }
  });
}

template <typename T>
NodeP<T> reshape(const NodeP<T>& a, Shape shape) {
  Tensor<T> v = a->value.reshaped(shape);
  return make_op<T>(std::move(v), {a}, [a](Node<T>& n) {
    if (!a->requires_grad) return;
    auto& g = a->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

// Concatenate along dim 1 (features or channels); leading dim is batch.
template <typename T>
NodeP<T> concat_dim1(const NodeP<T>& a, const NodeP<T>& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != sb.size() || sa.empty() || sa[0] != sb[0])
    throw std::invalid_argument("concat_dim1: incompatible shapes");
  for (size_t i = 2; i < sa.size(); ++i)
    if (sa[i] != sb[i]) throw std::invalid_argument("concat_dim1: incompatible trailing dims");
  Shape so = sa;
  so[1] = sa[1] + sb[1];
  const int64_t batch = sa[0];
  const int64_t inner_a = a->value.numel() / batch;
  const int64_t inner_b = b->value.numel() / batch;
  Tensor<T> v(so);
  for (int64_t n = 0; n < batch; ++n) {
    std::copy_n(a->value.data() + n * inner_a, inner_a, v.data() + n * (inner_a + inner_b));
    std::copy_n(b->value.data() + n * inner_b, inner_b, v.data() + n * (inner_a + inner_b) + inner_a);
  }
  return make_op<T>(std::move(v), {a, b}, [a, b, batch, inner_a, inner_b](Node<T>& n) {
    for (int64_t i = 0; i < batch; ++i) {
      const T* g = n.grad.data() + i * (inner_a + inner_b);
      if (a->requires_grad) {
        auto& ga = a->ensure_grad();
        for (int64_t j = 0; j < inner_a; ++j) ga[i * inner_a + j] += g[j];
      }
      if (b->requires_grad) {
        auto& gb = b->ensure_grad();
        for (int64_t j = 0; j < inner_b; ++j) gb[i * inner_b + j] += g[inner_a + j];
      }
    }
  });
}

}  // namespace lgan::ag
