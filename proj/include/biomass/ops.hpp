#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "biomass/tensor.hpp"

// Differentiable tensor operations. Each op returns a tape node whose
// backward closure accumulates into every parent that requires grad; parents
// that do not are skipped entirely.

namespace biomass::ops {

namespace detail_ops {

template <class T>
void accum(detail::TensorNode<T>& p, std::size_t i, T v) {
  p.grad_buffer()[i] += v;
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
T stable_softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

inline constexpr double kGeluC = 0.797884560802865355879892119869;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

}  // namespace detail_ops

// ---------------------------------------------------------------------------
// elementwise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (n.parents[0]->requires_grad) detail_ops::accum(*n.parents[0], i, n.grad[i]);
      if (n.parents[1]->requires_grad) detail_ops::accum(*n.parents[1], i, n.grad[i]);
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (n.parents[0]->requires_grad) detail_ops::accum(*n.parents[0], i, n.grad[i]);
      if (n.parents[1]->requires_grad) detail_ops::accum(*n.parents[1], i, -n.grad[i]);
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (n.parents[0]->requires_grad)
        detail_ops::accum(*n.parents[0], i, n.grad[i] * n.parents[1]->data[i]);
      if (n.parents[1]->requires_grad)
        detail_ops::accum(*n.parents[1], i, n.grad[i] * n.parents[0]->data[i]);
    }
  });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a.data()[i];
  return make_op<T>(a.shape(), std::move(out), {a}, [](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      detail_ops::accum(*n.parents[0], i, -n.grad[i]);
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a.data()[i];
  return make_op<T>(a.shape(), std::move(out), {a}, [s](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      detail_ops::accum(*n.parents[0], i, s * n.grad[i]);
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
  return make_op<T>(a.shape(), std::move(out), {a}, [](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      detail_ops::accum(*n.parents[0], i, n.grad[i]);
  });
}

// ---------------------------------------------------------------------------
// matrix products

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      T av = a.data()[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b.data()[p * n + j];
    }
  return make_op<T>({m, n}, std::move(out), {a, b}, [m, k, n](detail::TensorNode<T>& g) {
    auto& pa = *g.parents[0];
    auto& pb = *g.parents[1];
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          T gv = g.grad[i * n + j];
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * pb.data[p * n + j];
        }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T av = pa.data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g.grad[i * n + j];
        }
    }
  });
}

// a [m,k] times b [n,k] transposed -> [m,n]
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1]) {
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) s += a.data()[i * k + p] * b.data()[j * k + p];
      out[i * n + j] = s;
    }
  return make_op<T>({m, n}, std::move(out), {a, b}, [m, k, n](detail::TensorNode<T>& g) {
    auto& pa = *g.parents[0];
    auto& pb = *g.parents[1];
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          T gv = g.grad[i * n + j];
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * pb.data[j * k + p];
        }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          T gv = g.grad[i * n + j];
          for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gv * pa.data[i * k + p];
        }
    }
  });
}

// y = x W + b over the last axis; x is [*, d_in], leading dims flattened to rows
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w,
                 const std::optional<Tensor<T>>& b = std::nullopt) {
  if (w.rank() != 2 || x.last_dim() != w.shape()[0]) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()));
  }
  const std::size_t r = x.rows(), din = w.shape()[0], dout = w.shape()[1];
  if (b && (b->rank() != 1 || b->numel() != dout)) {
    throw ShapeError("linear: bias " + shape_str(b->shape()) + " vs d_out " +
                     std::to_string(dout));
  }
  std::vector<T> out(r * dout, T(0));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t p = 0; p < din; ++p) {
      T xv = x.data()[i * din + p];
      for (std::size_t j = 0; j < dout; ++j) out[i * dout + j] += xv * w.data()[p * dout + j];
    }
    if (b)
      for (std::size_t j = 0; j < dout; ++j) out[i * dout + j] += b->data()[j];
  }
  Shape oshape(x.shape().begin(), x.shape().end() - 1);
  oshape.push_back(dout);
  std::vector<Tensor<T>> parents = {x, w};
  if (b) parents.push_back(*b);
  bool has_bias = b.has_value();
  return make_op<T>(std::move(oshape), std::move(out), std::move(parents),
                    [r, din, dout, has_bias](detail::TensorNode<T>& g) {
                      auto& px = *g.parents[0];
                      auto& pw = *g.parents[1];
                      if (px.requires_grad) {
                        auto& gx = px.grad_buffer();
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t j = 0; j < dout; ++j) {
                            T gv = g.grad[i * dout + j];
                            for (std::size_t p = 0; p < din; ++p)
                              gx[i * din + p] += gv * pw.data[p * dout + j];
                          }
                      }
                      if (pw.requires_grad) {
                        auto& gw = pw.grad_buffer();
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t p = 0; p < din; ++p) {
                            T xv = px.data[i * din + p];
                            for (std::size_t j = 0; j < dout; ++j)
                              gw[p * dout + j] += xv * g.grad[i * dout + j];
                          }
                      }
                      if (has_bias && g.parents[2]->requires_grad) {
                        auto& gb = g.parents[2]->grad_buffer();
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t j = 0; j < dout; ++j) gb[j] += g.grad[i * dout + j];
                      }
                    });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return linear(x, w, std::optional<Tensor<T>>(b));
}

// ---------------------------------------------------------------------------
// normalization

// Per-position standardization over the last axis, then affine scale/shift.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps) {
  const std::size_t d = x.last_dim(), r = x.rows();
  if (eps <= T(0)) throw ConfigError("layer_norm eps must be > 0");
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: gamma/beta length must equal last dim " + std::to_string(d));
  }
  std::vector<T> out(r * d);
  auto xhat = std::make_shared<std::vector<T>>(r * d);
  auto istd = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += x.data()[i * d + j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      T c = x.data()[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T is = T(1) / std::sqrt(var + eps);
    (*istd)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      T xh = (x.data()[i * d + j] - mu) * is;
      (*xhat)[i * d + j] = xh;
      out[i * d + j] = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  return make_op<T>(x.shape(), std::move(out), {x, gamma, beta},
                    [r, d, xhat, istd](detail::TensorNode<T>& g) {
                      auto& px = *g.parents[0];
                      auto& pg = *g.parents[1];
                      auto& pb = *g.parents[2];
                      for (std::size_t i = 0; i < r; ++i) {
                        if (px.requires_grad) {
                          // dxhat = g * gamma; dx = istd * (dxhat - mean(dxhat)
                          //   - xhat * mean(dxhat * xhat))
                          T m1 = T(0), m2 = T(0);
                          for (std::size_t j = 0; j < d; ++j) {
                            T dxh = g.grad[i * d + j] * pg.data[j];
                            m1 += dxh;
                            m2 += dxh * (*xhat)[i * d + j];
                          }
                          m1 /= static_cast<T>(d);
                          m2 /= static_cast<T>(d);
                          auto& gx = px.grad_buffer();
                          for (std::size_t j = 0; j < d; ++j) {
                            T dxh = g.grad[i * d + j] * pg.data[j];
                            gx[i * d + j] +=
                                (*istd)[i] * (dxh - m1 - (*xhat)[i * d + j] * m2);
                          }
                        }
                        if (pg.requires_grad) {
                          auto& gg = pg.grad_buffer();
                          for (std::size_t j = 0; j < d; ++j)
                            gg[j] += g.grad[i * d + j] * (*xhat)[i * d + j];
                        }
                        if (pb.requires_grad) {
                          auto& gb = pb.grad_buffer();
                          for (std::size_t j = 0; j < d; ++j) gb[j] += g.grad[i * d + j];
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// depthwise 1d convolution, zero same-padding

// x [L, d], kernels [d, k] with k odd, bias [d]; output [L, d].
template <class T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& kernels,
                           const Tensor<T>& bias) {
  if (x.rank() != 2 || kernels.rank() != 2) {
    throw ShapeError("depthwise_conv1d expects 2-d input and kernels");
  }
  const std::size_t L = x.shape()[0], d = x.shape()[1], k = kernels.shape()[1];
  if (kernels.shape()[0] != d || bias.numel() != d) {
    throw ShapeError("depthwise_conv1d: kernels/bias channel count mismatch");
  }
  if (k % 2 == 0) throw ConfigError("depthwise_conv1d kernel width must be odd");
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k - 1) / 2;
  std::vector<T> out(L * d);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < d; ++c) {
      T s = bias.data()[c];
      for (std::size_t j = 0; j < k; ++j) {
        std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) +
                             static_cast<std::ptrdiff_t>(j) - half;
        if (src >= 0 && src < static_cast<std::ptrdiff_t>(L))
          s += kernels.data()[c * k + j] * x.data()[static_cast<std::size_t>(src) * d + c];
      }
      out[t * d + c] = s;
    }
  return make_op<T>(x.shape(), std::move(out), {x, kernels, bias},
                    [L, d, k, half](detail::TensorNode<T>& g) {
                      auto& px = *g.parents[0];
                      auto& pk = *g.parents[1];
                      auto& pb = *g.parents[2];
                      for (std::size_t t = 0; t < L; ++t)
                        for (std::size_t c = 0; c < d; ++c) {
                          T gv = g.grad[t * d + c];
                          if (pb.requires_grad) pb.grad_buffer()[c] += gv;
                          for (std::size_t j = 0; j < k; ++j) {
                            std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) +
                                                 static_cast<std::ptrdiff_t>(j) - half;
                            if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                            std::size_t u = static_cast<std::size_t>(src);
                            if (pk.requires_grad)
                              pk.grad_buffer()[c * k + j] += gv * px.data[u * d + c];
                            if (px.requires_grad)
                              px.grad_buffer()[u * d + c] += gv * pk.data[c * k + j];
                          }
                        }
                    });
}

// ---------------------------------------------------------------------------
// activations

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail_ops::stable_sigmoid(x.data()[i]);
  return make_op<T>(x.shape(), std::move(out), {x}, [](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      T s = n.data[i];
      detail_ops::accum(*n.parents[0], i, n.grad[i] * s * (T(1) - s));
    }
  });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail_ops::stable_softplus(x.data()[i]);
  return make_op<T>(x.shape(), std::move(out), {x}, [](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      detail_ops::accum(*n.parents[0], i,
                        n.grad[i] * detail_ops::stable_sigmoid(n.parents[0]->data[i]));
  });
}

// tanh approximation
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T c = static_cast<T>(detail_ops::kGeluC);
  const T a = static_cast<T>(detail_ops::kGeluA);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T v = x.data()[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
  }
  return make_op<T>(x.shape(), std::move(out), {x}, [c, a](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      T v = n.parents[0]->data[i];
      T t = std::tanh(c * (v + a * v * v * v));
      T dv = T(0.5) * (T(1) + t) +
             T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * a * v * v);
      detail_ops::accum(*n.parents[0], i, n.grad[i] * dv);
    }
  });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return mul(x, sigmoid(x));
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.data()[i]);
  return make_op<T>(x.shape(), std::move(out), {x}, [](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      detail_ops::accum(*n.parents[0], i, n.grad[i] * n.data[i]);
  });
}

template <class T>
Tensor<T> log1p(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (x.data()[i] <= T(-1)) throw NumericError("log1p domain: value <= -1");
    out[i] = std::log1p(x.data()[i]);
  }
  return make_op<T>(x.shape(), std::move(out), {x}, [](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      detail_ops::accum(*n.parents[0], i, n.grad[i] / (T(1) + n.parents[0]->data[i]));
  });
}

enum class Activation { sigmoid, gelu, softplus };

template <class T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
  switch (kind) {
    case Activation::sigmoid: return sigmoid(x);
    case Activation::gelu: return gelu(x);
    case Activation::softplus: return softplus(x);
  }
  throw ConfigError("unknown activation kind");
}

// ---------------------------------------------------------------------------
// dropout

// Train mode zeroes each element with probability p and scales survivors by
// 1/(1-p); eval mode (and p == 0) is the identity and consumes no draws.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, RngStream& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout p must be in [0, 1)");
  if (mode == Mode::eval || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T m = (rng.uniform01() >= p) ? keep_scale : T(0);
    (*mask)[i] = m;
    out[i] = m * x.data()[i];
  }
  return make_op<T>(x.shape(), std::move(out), {x}, [mask](detail::TensorNode<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      detail_ops::accum(*n.parents[0], i, n.grad[i] * (*mask)[i]);
  });
}

// ---------------------------------------------------------------------------
// softmax over rows

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t d = x.last_dim(), r = x.rows();
  std::vector<T> out(r * d);
  for (std::size_t i = 0; i < r; ++i) {
    T mx = x.data()[i * d];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x.data()[i * d + j]);
    T z = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      T e = std::exp(x.data()[i * d + j] - mx);
      out[i * d + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= z;
  }
  return make_op<T>(x.shape(), std::move(out), {x}, [r, d](detail::TensorNode<T>& n) {
    auto& gx = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < d; ++j) dot += n.grad[i * d + j] * n.data[i * d + j];
      for (std::size_t j = 0; j < d; ++j)
        gx[i * d + j] += n.data[i * d + j] * (n.grad[i * d + j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// slicing / concatenation (2-d; rank-1 treated as a single row for cols ops)

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t r0, std::size_t n) {
  if (x.rank() != 2) throw ShapeError("slice_rows expects a 2-d tensor");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (r0 + n > rows || n == 0) throw ShapeError("slice_rows out of range");
  std::vector<T> out(x.data().begin() + r0 * d, x.data().begin() + (r0 + n) * d);
  return make_op<T>({n, d}, std::move(out), {x}, [r0, d](detail::TensorNode<T>& g) {
    auto& gx = g.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.grad.size(); ++i) gx[r0 * d + i] += g.grad[i];
  });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t n) {
  const std::size_t d = x.last_dim(), r = x.rows();
  if (c0 + n > d || n == 0) throw ShapeError("slice_cols out of range");
  std::vector<T> out(r * n);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * d + c0 + j];
  Shape oshape = x.shape();
  oshape.back() = n;
  return make_op<T>(std::move(oshape), std::move(out), {x},
                    [r, d, c0, n](detail::TensorNode<T>& g) {
                      auto& gx = g.parents[0]->grad_buffer();
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < n; ++j)
                          gx[i * d + c0 + j] += g.grad[i * n + j];
                    });
}

template <class T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1]) {
    throw ShapeError("concat_rows: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t d = a.shape()[1], ra = a.shape()[0], rb = b.shape()[0];
  std::vector<T> out;
  out.reserve((ra + rb) * d);
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return make_op<T>({ra + rb, d}, std::move(out), {a, b},
                    [na = ra * d](detail::TensorNode<T>& g) {
                      auto& pa = *g.parents[0];
                      auto& pb = *g.parents[1];
                      if (pa.requires_grad) {
                        auto& ga = pa.grad_buffer();
                        for (std::size_t i = 0; i < na; ++i) ga[i] += g.grad[i];
                      }
                      if (pb.requires_grad) {
                        auto& gb = pb.grad_buffer();
                        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g.grad[na + i];
                      }
                    });
}

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row count mismatch");
  const std::size_t r = a.rows(), da = a.last_dim(), db = b.last_dim();
  std::vector<T> out(r * (da + db));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < da; ++j) out[i * (da + db) + j] = a.data()[i * da + j];
    for (std::size_t j = 0; j < db; ++j) out[i * (da + db) + da + j] = b.data()[i * db + j];
  }
  Shape oshape = (a.rank() == 1 && b.rank() == 1) ? Shape{da + db}
                                                  : Shape{r, da + db};
  return make_op<T>(std::move(oshape), std::move(out), {a, b},
                    [r, da, db](detail::TensorNode<T>& g) {
                      auto& pa = *g.parents[0];
                      auto& pb = *g.parents[1];
                      for (std::size_t i = 0; i < r; ++i) {
                        if (pa.requires_grad)
                          for (std::size_t j = 0; j < da; ++j)
                            pa.grad_buffer()[i * da + j] += g.grad[i * (da + db) + j];
                        if (pb.requires_grad)
                          for (std::size_t j = 0; j < db; ++j)
                            pb.grad_buffer()[i * db + j] += g.grad[i * (da + db) + da + j];
                      }
                    });
}

// ---------------------------------------------------------------------------
// reductions

// arithmetic mean over the sequence axis of [L, d] -> [d]
template <class T>
Tensor<T> mean_pool(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("mean_pool expects [L, d]");
  const std::size_t L = x.shape()[0], d = x.shape()[1];
  std::vector<T> out(d, T(0));
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < d; ++c) out[c] += x.data()[t * d + c];
  for (auto& v : out) v /= static_cast<T>(L);
  return make_op<T>({d}, std::move(out), {x}, [L, d](detail::TensorNode<T>& g) {
    auto& gx = g.parents[0]->grad_buffer();
    const T inv = T(1) / static_cast<T>(L);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t c = 0; c < d; ++c) gx[t * d + c] += g.grad[c] * inv;
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  return make_op<T>({1}, {s}, {x}, [](detail::TensorNode<T>& g) {
    auto& gx = g.parents[0]->grad_buffer();
    for (auto& v : gx) v += g.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  s /= static_cast<T>(x.numel());
  return make_op<T>({1}, {s}, {x}, [n = x.numel()](detail::TensorNode<T>& g) {
    auto& gx = g.parents[0]->grad_buffer();
    const T inv = T(1) / static_cast<T>(n);
    for (auto& v : gx) v += g.grad[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// selective state-space scan

enum class ScanDirection { forward, backward };

// Diagonal selective scan:
//   h_t = exp(delta_t * A) (.) h_{t-1} + (delta_t * B_t) x_t
//   y_t = C_t . h_t + D (.) x_t
// x [L, d_inner], A [d_inner, d_state], B/C [L, d_state], delta [L, d_inner]
// (all entries > 0), D [d_inner]. The backward direction runs the recurrence
// from the end of the sequence toward the start.
template <class T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b,
                         const Tensor<T>& c, const Tensor<T>& delta, const Tensor<T>& d,
                         ScanDirection dir) {
  if (x.rank() != 2 || a.rank() != 2 || b.rank() != 2 || c.rank() != 2 || delta.rank() != 2) {
    throw ShapeError("selective_scan expects 2-d x/A/B/C/delta");
  }
  const std::size_t L = x.shape()[0], di = x.shape()[1], ds = a.shape()[1];
  if (a.shape()[0] != di || d.numel() != di) throw ShapeError("selective_scan: A/D dims");
  if (b.shape()[0] != L || b.shape()[1] != ds || c.shape()[0] != L || c.shape()[1] != ds) {
    throw ShapeError("selective_scan: B/C dims");
  }
  if (delta.shape() != x.shape()) throw ShapeError("selective_scan: delta shape");
  for (T v : delta.data()) {
    if (!(v > T(0))) throw NumericError("selective_scan requires delta > 0");
  }

  // states after each step, in processing order
  auto hs = std::make_shared<std::vector<T>>(L * di * ds, T(0));
  std::vector<T> out(L * di);
  std::vector<T> h(di * ds, T(0));
  for (std::size_t step = 0; step < L; ++step) {
    const std::size_t t = (dir == ScanDirection::forward) ? step : (L - 1 - step);
    for (std::size_t ci = 0; ci < di; ++ci) {
      T dt = delta.data()[t * di + ci];
      T xv = x.data()[t * di + ci];
      T y = d.data()[ci] * xv;
      for (std::size_t s = 0; s < ds; ++s) {
        T dec = std::exp(dt * a.data()[ci * ds + s]);
        T hv = dec * h[ci * ds + s] + dt * b.data()[t * ds + s] * xv;
        h[ci * ds + s] = hv;
        (*hs)[(step * di + ci) * ds + s] = hv;
        y += c.data()[t * ds + s] * hv;
      }
      out[t * di + ci] = y;
    }
  }
  return make_op<T>(x.shape(), std::move(out), {x, a, b, c, delta, d},
                    [L, di, ds, dir, hs](detail::TensorNode<T>& g) {
                      auto& px = *g.parents[0];
                      auto& pa = *g.parents[1];
                      auto& pb = *g.parents[2];
                      auto& pc = *g.parents[3];
                      auto& pdl = *g.parents[4];
                      auto& pd = *g.parents[5];
                      std::vector<T> gh(di * ds, T(0));
                      for (std::size_t rstep = L; rstep-- > 0;) {
                        const std::size_t t =
                            (dir == ScanDirection::forward) ? rstep : (L - 1 - rstep);
                        for (std::size_t ci = 0; ci < di; ++ci) {
                          const T gy = g.grad[t * di + ci];
                          const T xv = px.data[t * di + ci];
                          const T dt = pdl.data[t * di + ci];
                          if (pd.requires_grad) pd.grad_buffer()[ci] += gy * xv;
                          T gx_acc = gy * pd.data[ci];
                          T gdt_acc = T(0);
                          for (std::size_t s = 0; s < ds; ++s) {
                            const T hv = (*hs)[(rstep * di + ci) * ds + s];
                            const T hprev =
                                rstep > 0 ? (*hs)[((rstep - 1) * di + ci) * ds + s] : T(0);
                            const T av = pa.data[ci * ds + s];
                            const T bv = pb.data[t * ds + s];
                            const T cv = pc.data[t * ds + s];
                            const T dec = std::exp(dt * av);
                            if (pc.requires_grad) pc.grad_buffer()[t * ds + s] += gy * hv;
                            T ghv = gh[ci * ds + s] + gy * cv;
                            if (pa.requires_grad)
                              pa.grad_buffer()[ci * ds + s] += ghv * hprev * dec * dt;
                            gdt_acc += ghv * (hprev * dec * av + bv * xv);
                            if (pb.requires_grad)
                              pb.grad_buffer()[t * ds + s] += ghv * dt * xv;
                            gx_acc += ghv * dt * bv;
                            gh[ci * ds + s] = ghv * dec;
                          }
                          if (px.requires_grad) px.grad_buffer()[t * di + ci] += gx_acc;
                          if (pdl.requires_grad) pdl.grad_buffer()[t * di + ci] += gdt_acc;
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// losses

// Mean over elements of the Huber penalty on r = pred - target.
template <class T>
Tensor<T> huber_loss(const Tensor<T>& pred, const Tensor<T>& target, T beta) {
  require_same_shape(pred, target, "huber_loss");
  if (!(beta > T(0))) throw ConfigError("huber beta must be > 0");
  const std::size_t n = pred.numel();
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    T r = pred.data()[i] - target.data()[i];
    T ar = std::abs(r);
    acc += (ar <= beta) ? T(0.5) * r * r : beta * (ar - T(0.5) * beta);
  }
  acc /= static_cast<T>(n);
  return make_op<T>({1}, {acc}, {pred, target}, [n, beta](detail::TensorNode<T>& g) {
    const T w = g.grad[0] / static_cast<T>(n);
    auto& pp = *g.parents[0];
    auto& pt = *g.parents[1];
    for (std::size_t i = 0; i < n; ++i) {
      T r = pp.data[i] - pt.data[i];
      T dr = (std::abs(r) <= beta) ? r : (r > T(0) ? beta : -beta);
      if (pp.requires_grad) pp.grad_buffer()[i] += w * dr;
      if (pt.requires_grad) pt.grad_buffer()[i] -= w * dr;
    }
  });
}

// ---------------------------------------------------------------------------
// multi-head attention

template <class T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;

  std::vector<Tensor<T>> parameters() const { return {wq, bq, wk, bk, wv, bv, wo, bo}; }
};

// Scaled dot-product attention with per-head projections and an output
// projection. heads * d_head must equal the model dim of q/k/v.
template <class T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                              const AttentionParams<T>& p, std::size_t heads,
                              std::size_t d_head) {
  const std::size_t d = q.last_dim();
  if (heads * d_head != d) {
    throw ConfigError("attention: heads * d_head must equal model dim (" +
                      std::to_string(heads) + " * " + std::to_string(d_head) +
                      " != " + std::to_string(d) + ")");
  }
  if (k.last_dim() != d || v.last_dim() != d || k.rows() != v.rows()) {
    throw ShapeError("attention: k/v dims");
  }
  Tensor<T> qp = linear(q, p.wq, p.bq);
  Tensor<T> kp = linear(k, p.wk, p.bk);
  Tensor<T> vp = linear(v, p.wv, p.bv);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(d_head));
  Tensor<T> merged;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> qh = slice_cols(qp, h * d_head, d_head);
    Tensor<T> kh = slice_cols(kp, h * d_head, d_head);
    Tensor<T> vh = slice_cols(vp, h * d_head, d_head);
    Tensor<T> attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
    Tensor<T> oh = matmul(attn, vh);
    merged = (h == 0) ? oh : concat_cols(merged, oh);
  }
  return linear(merged, p.wo, p.bo);
}

// Detached per-head attention weights, for probes and tests.
template <class T>
std::vector<Tensor<T>> multihead_attention_weights(const Tensor<T>& q, const Tensor<T>& k,
                                                   const AttentionParams<T>& p,
                                                   std::size_t heads, std::size_t d_head) {
  Tensor<T> qp = linear(q, p.wq, p.bq);
  Tensor<T> kp = linear(k, p.wk, p.bk);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(d_head));
  std::vector<Tensor<T>> weights;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> qh = slice_cols(qp, h * d_head, d_head);
    Tensor<T> kh = slice_cols(kp, h * d_head, d_head);
    Tensor<T> attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
    weights.push_back(Tensor<T>(attn.shape(), {attn.data().begin(), attn.data().end()}));
  }
  return weights;
}

// ---------------------------------------------------------------------------
// custom elementwise op hook (used by tests to plant known-bad gradients)

template <class T>
Tensor<T> unary_custom(const Tensor<T>& x, std::function<T(T)> fwd, std::function<T(T)> dfdx) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x.data()[i]);
  return make_op<T>(x.shape(), std::move(out), {x},
                    [dfdx = std::move(dfdx)](detail::TensorNode<T>& n) {
                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                        detail_ops::accum(*n.parents[0], i,
                                          n.grad[i] * dfdx(n.parents[0]->data[i]));
                    });
}

}  // namespace biomass::ops
