#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <stdexcept>

#include <Eigen/Core>

#include "airseg/parallel.hpp"
#include "airseg/rng.hpp"
#include "airseg/tensor.hpp"

namespace airseg::ad {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

struct ConvGeom {
  int N, Ci, D, H, W;
  int Co, k;
  int stride, dil, pad;
  int Do, Ho, Wo;
  int k3() const { return k * k * k; }
  int rows() const { return Ci * k3(); }
  size_t x_csz() const { return size_t(D) * H * W; }
  size_t y_csz() const { return size_t(Do) * Ho * Wo; }
  size_t slab() const { return size_t(Ho) * Wo; }
};

inline ConvGeom make_conv_geom(const std::vector<int>& xs, const std::vector<int>& ws,
                               int stride, int dilation, int pad_or_same) {
  require(xs.size() == 5, "conv3d: input must be [N,C,D,H,W]");
  require(ws.size() == 5, "conv3d: weight must be [Co,Ci,k,k,k]");
  require(ws[2] == ws[3] && ws[3] == ws[4], "conv3d: kernel must be cubic");
  require(stride >= 1, "conv3d: stride must be >= 1");
  require(dilation >= 1, "conv3d: dilation must be >= 1");
  ConvGeom g;
  g.N = xs[0];
  g.Ci = xs[1];
  g.D = xs[2];
  g.H = xs[3];
  g.W = xs[4];
  g.Co = ws[0];
  g.k = ws[2];
  require(ws[1] == g.Ci, "conv3d: channel mismatch between input and weight");
  g.stride = stride;
  g.dil = dilation;
  if (pad_or_same < 0) {  // "same"
    require(g.k % 2 == 1, "conv3d: even kernel size is incompatible with same padding");
    g.pad = dilation * (g.k - 1) / 2;
  } else {
    g.pad = pad_or_same;
  }
  const int ext = g.dil * (g.k - 1) + 1;  // effective kernel extent
  auto out_dim = [&](int n) {
    const int num = n + 2 * g.pad - ext;
    require(num >= 0, "conv3d: kernel extent exceeds padded input");
    return num / g.stride + 1;
  };
  g.Do = out_dim(g.D);
  g.Ho = out_dim(g.H);
  g.Wo = out_dim(g.W);
  return g;
}

// Fills col[rows x Ho*Wo] (row-major) with the input taps for one output
// depth slice of one sample. Out-of-bounds taps are zero.
template <class T>
void im2col_slab(const T* x, const ConvGeom& g, int n, int zo, T* col) {
  const size_t HW = size_t(g.H) * g.W;
  const size_t slab = g.slab();
  const T* xn = x + size_t(n) * g.Ci * g.x_csz();
  T* crow = col;
  for (int ci = 0; ci < g.Ci; ++ci) {
    const T* xc = xn + size_t(ci) * g.x_csz();
    for (int kd = 0; kd < g.k; ++kd) {
      const int iz = zo * g.stride - g.pad + kd * g.dil;
      const bool z_ok = iz >= 0 && iz < g.D;
      for (int kh = 0; kh < g.k; ++kh) {
        for (int kw = 0; kw < g.k; ++kw, crow += slab) {
          if (!z_ok) {
            std::fill(crow, crow + slab, T(0));
            continue;
          }
          for (int yo = 0; yo < g.Ho; ++yo) {
            const int iy = yo * g.stride - g.pad + kh * g.dil;
            T* dst = crow + size_t(yo) * g.Wo;
            if (iy < 0 || iy >= g.H) {
              std::fill(dst, dst + g.Wo, T(0));
              continue;
            }
            const T* src = xc + size_t(iz) * HW + size_t(iy) * g.W;
            if (g.stride == 1) {
              const int off = kw * g.dil - g.pad;  // ix = xo + off
              const int x0 = std::max(0, -off);
              const int x1 = std::min(g.Wo, g.W - off);
              if (x0 > 0) std::fill(dst, dst + std::min(x0, g.Wo), T(0));
              if (x1 > x0) std::memcpy(dst + x0, src + off + x0, size_t(x1 - x0) * sizeof(T));
              if (x1 < g.Wo) std::fill(dst + std::max(x1, 0), dst + g.Wo, T(0));
            } else {
              for (int xo = 0; xo < g.Wo; ++xo) {
                const int ix = xo * g.stride - g.pad + kw * g.dil;
                dst[xo] = (ix >= 0 && ix < g.W) ? src[ix] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
std::vector<T>& tl_scratch(int which) {
  static thread_local std::vector<T> bufs[2];
  return bufs[which];
}

// y[N,Co,Do,Ho,Wo] = conv(x, w) (+ bias). Parallel over (n, zo) slabs; the
// slab partition is fixed by the geometry, not the thread count, so results
// are bit-identical for any thread setting.
template <class T>
void conv3d_forward_raw(const T* x, const T* w, const T* b, T* y, const ConvGeom& g,
                        bool accumulate) {
  const int njobs = g.N * g.Do;
  const size_t slab = g.slab();
  const int rows = g.rows();
  parallel_for(njobs, [&](int job) {
    auto& col = tl_scratch<T>(0);
    auto& out = tl_scratch<T>(1);
    col.resize(size_t(rows) * slab);
    out.resize(size_t(g.Co) * slab);
    const int n = job / g.Do;
    const int zo = job % g.Do;
    im2col_slab(x, g, n, zo, col.data());
    Eigen::Map<const MatRM<T>> W(w, g.Co, rows);
    Eigen::Map<const MatRM<T>> C(col.data(), rows, Eigen::Index(slab));
    Eigen::Map<MatRM<T>> O(out.data(), g.Co, Eigen::Index(slab));
    O.noalias() = W * C;
    for (int co = 0; co < g.Co; ++co) {
      T* dst = y + (size_t(size_t(n) * g.Co + co) * g.Do + zo) * slab;
      const T* src = out.data() + size_t(co) * slab;
      if (accumulate) {
        for (size_t i = 0; i < slab; ++i) dst[i] += src[i];
      } else if (b) {
        const T bias = b[co];
        for (size_t i = 0; i < slab; ++i) dst[i] = src[i] + bias;
      } else {
        std::memcpy(dst, src, slab * sizeof(T));
      }
    }
  });
}

// dw += sum over slabs of gy_slab * col^T, accumulated in a fixed chunk
// order for determinism.
template <class T>
void conv3d_dw_raw(const T* x, const T* gy, T* dw, const ConvGeom& g) {
  const int njobs = g.N * g.Do;
  const int nchunks = std::min(8, njobs);
  const size_t slab = g.slab();
  const int rows = g.rows();
  const size_t wsz = size_t(g.Co) * rows;
  std::vector<T> partial(size_t(nchunks) * wsz, T(0));
  parallel_for(nchunks, [&](int c) {
    auto& col = tl_scratch<T>(0);
    col.resize(size_t(rows) * slab);
    Eigen::Map<MatRM<T>> P(partial.data() + size_t(c) * wsz, g.Co, rows);
    for (int job = c; job < njobs; job += nchunks) {
      const int n = job / g.Do;
      const int zo = job % g.Do;
      im2col_slab(x, g, n, zo, col.data());
      Eigen::Map<const MatRM<T>> C(col.data(), rows, Eigen::Index(slab));
      Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>> GY(
          gy + (size_t(n) * g.Co * g.Do + zo) * slab, g.Co, Eigen::Index(slab),
          Eigen::OuterStride<>(Eigen::Index(g.Do * slab)));
      P.noalias() += GY * C.transpose();
    }
  });
  for (int c = 0; c < nchunks; ++c) {
    const T* src = partial.data() + size_t(c) * wsz;
    for (size_t i = 0; i < wsz; ++i) dw[i] += src[i];
  }
}

// Generic dx via col2im scatter (serial; used only for stride > 1).
template <class T>
void conv3d_dx_col2im(const T* w, const T* gy, T* dx, const ConvGeom& g) {
  const size_t slab = g.slab();
  const int rows = g.rows();
  const size_t HW = size_t(g.H) * g.W;
  std::vector<T> dcol(size_t(rows) * slab);
  Eigen::Map<const MatRM<T>> W(w, g.Co, rows);
  for (int n = 0; n < g.N; ++n) {
    for (int zo = 0; zo < g.Do; ++zo) {
      Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>> GY(
          gy + (size_t(n) * g.Co * g.Do + zo) * slab, g.Co, Eigen::Index(slab),
          Eigen::OuterStride<>(Eigen::Index(g.Do * slab)));
      Eigen::Map<MatRM<T>> DC(dcol.data(), rows, Eigen::Index(slab));
      DC.noalias() = W.transpose() * GY;
      T* dxn = dx + size_t(n) * g.Ci * g.x_csz();
      const T* crow = dcol.data();
      for (int ci = 0; ci < g.Ci; ++ci) {
        T* dxc = dxn + size_t(ci) * g.x_csz();
        for (int kd = 0; kd < g.k; ++kd) {
          const int iz = zo * g.stride - g.pad + kd * g.dil;
          for (int kh = 0; kh < g.k; ++kh) {
            for (int kw = 0; kw < g.k; ++kw, crow += slab) {
              if (iz < 0 || iz >= g.D) continue;
              for (int yo = 0; yo < g.Ho; ++yo) {
                const int iy = yo * g.stride - g.pad + kh * g.dil;
                if (iy < 0 || iy >= g.H) continue;
                for (int xo = 0; xo < g.Wo; ++xo) {
                  const int ix = xo * g.stride - g.pad + kw * g.dil;
                  if (ix < 0 || ix >= g.W) continue;
                  dxc[size_t(iz) * HW + size_t(iy) * g.W + ix] += crow[size_t(yo) * g.Wo + xo];
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 3D cross-correlation with zero padding. x: [N,Ci,D,H,W], weight:
/// [Co,Ci,k,k,k], bias: [Co] or an undefined tensor for none. pad == -1
/// selects "same" padding (stride 1 then preserves spatial dims for any
/// dilation). Differentiable in x, weight and bias.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int dilation = 1, int pad = -1) {
  const auto g = detail::make_conv_geom(x.shape(), weight.shape(), stride, dilation, pad);
  if (bias.defined()) {
    detail::require(bias.ndim() == 1 && bias.dim(0) == g.Co, "conv3d: bias must be [Co]");
  }
  auto out = Tensor<T>::zeros({g.N, g.Co, g.Do, g.Ho, g.Wo});
  detail::conv3d_forward_raw(x.data(), weight.data(),
                             bias.defined() ? bias.data() : nullptr, out.data(), g, false);
  if (track_grad<T>({&x, &weight, &bias})) {
    out.set_requires_grad(true);
    auto xb = x, wb = weight, bb = bias;
    out.node()->parents = {x.node(), weight.node()};
    if (bias.defined()) out.node()->parents.push_back(bias.node());
    out.node()->backward_fn = [xb, wb, bb, g](Node<T>& o) mutable {
      const T* gy = o.grad.data();
      if (bb.defined() && bb.requires_grad()) {
        T* db = bb.grad();
        for (int n = 0; n < g.N; ++n) {
          for (int co = 0; co < g.Co; ++co) {
            const T* src = gy + (size_t(n) * g.Co + co) * g.y_csz();
            T acc = T(0);
            for (size_t i = 0; i < g.y_csz(); ++i) acc += src[i];
            db[co] += acc;
          }
        }
      }
      if (wb.requires_grad()) {
        detail::conv3d_dw_raw(xb.data(), gy, wb.grad(), g);
      }
      if (xb.requires_grad()) {
        const int pad_t = g.dil * (g.k - 1) - g.pad;
        if (g.stride == 1 && pad_t >= 0) {
          // transpose conv expressed as a forward conv with flipped weights
          std::vector<T> wflip(wb.size());
          const int k3 = g.k3();
          const T* w = wb.data();
          for (int co = 0; co < g.Co; ++co) {
            for (int ci = 0; ci < g.Ci; ++ci) {
              for (int t = 0; t < k3; ++t) {
                wflip[(size_t(ci) * g.Co + co) * k3 + (k3 - 1 - t)] =
                    w[(size_t(co) * g.Ci + ci) * k3 + t];
              }
            }
          }
          detail::ConvGeom g2 = g;
          g2.Ci = g.Co;
          g2.Co = g.Ci;
          g2.D = g.Do;
          g2.H = g.Ho;
          g2.W = g.Wo;
          g2.pad = pad_t;
          g2.Do = g.D;
          g2.Ho = g.H;
          g2.Wo = g.W;
          detail::conv3d_forward_raw(gy, wflip.data(), (const T*)nullptr, xb.grad(), g2, true);
        } else {
          detail::conv3d_dx_col2im(wb.data(), gy, xb.grad(), g);
        }
      }
    };
  }
  return out;
}

/// Max pooling over non-overlapping windows. Gradient routes to the argmax;
/// ties resolve to the lowest linear index. Spatial dims must be divisible
/// by the window.
template <class T>
Tensor<T> maxpool3d(const Tensor<T>& x, int size = 2, int stride = 2) {
  detail::require(x.ndim() == 5, "maxpool3d: input must be [N,C,D,H,W]");
  detail::require(size >= 1 && stride == size, "maxpool3d: supported windows are size==stride");
  const int N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  detail::require(D % size == 0 && H % size == 0 && W % size == 0,
                  "maxpool3d: spatial dims must be divisible by the pool size");
  const int Do = D / size, Ho = H / size, Wo = W / size;
  auto out = Tensor<T>::zeros({N, C, Do, Ho, Wo});
  std::vector<size_t> argmax(out.size());
  const T* xd = x.data();
  T* yd = out.data();
  const size_t HW = size_t(H) * W;
  size_t oi = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* xc = xd + (size_t(n) * C + c) * D * HW;
      const size_t base = (size_t(n) * C + c) * D * HW;
      for (int zo = 0; zo < Do; ++zo) {
        for (int yo = 0; yo < Ho; ++yo) {
          for (int xo = 0; xo < Wo; ++xo, ++oi) {
            T best = -std::numeric_limits<T>::infinity();
            size_t best_i = 0;
            for (int kd = 0; kd < size; ++kd) {
              for (int kh = 0; kh < size; ++kh) {
                for (int kw = 0; kw < size; ++kw) {
                  const size_t i = size_t(zo * size + kd) * HW + size_t(yo * size + kh) * W +
                                   size_t(xo * size + kw);
                  if (xc[i] > best) {
                    best = xc[i];
                    best_i = i;
                  }
                }
              }
            }
            yd[oi] = best;
            argmax[oi] = base + best_i;
          }
        }
      }
    }
  }
  if (track_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xb = x;
    out.node()->parents = {x.node()};
    out.node()->backward_fn = [xb, argmax = std::move(argmax)](Node<T>& o) mutable {
      T* dx = xb.grad();
      for (size_t i = 0; i < o.grad.size(); ++i) dx[argmax[i]] += o.grad[i];
    };
  }
  return out;
}

/// Batch normalization over (N, spatial) per channel for [N,C,D,H,W] input.
/// Training mode normalizes by batch statistics and updates the running
/// stats in place; eval mode normalizes by the running stats.
template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    std::vector<T>* running_mean, std::vector<T>* running_var,
                    bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require(x.ndim() == 5, "batchnorm: input must be [N,C,D,H,W]");
  const int N = x.dim(0), C = x.dim(1);
  const size_t spatial = size_t(x.dim(2)) * x.dim(3) * x.dim(4);
  detail::require(gamma.ndim() == 1 && gamma.dim(0) == C, "batchnorm: gamma must be [C]");
  detail::require(beta.ndim() == 1 && beta.dim(0) == C, "batchnorm: beta must be [C]");
  detail::require(running_mean && running_var && running_mean->size() == size_t(C) &&
                      running_var->size() == size_t(C),
                  "batchnorm: running stats must be sized C");
  const size_t m = size_t(N) * spatial;
  std::vector<T> mean(C), invstd(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      T sum = T(0);
      for (int n = 0; n < N; ++n) {
        const T* xc = x.data() + (size_t(n) * C + c) * spatial;
        for (size_t i = 0; i < spatial; ++i) sum += xc[i];
      }
      const T mu = sum / T(m);
      T var = T(0);
      for (int n = 0; n < N; ++n) {
        const T* xc = x.data() + (size_t(n) * C + c) * spatial;
        for (size_t i = 0; i < spatial; ++i) {
          const T d = xc[i] - mu;
          var += d * d;
        }
      }
      var /= T(m);
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + eps);
      (*running_mean)[c] = (T(1) - momentum) * (*running_mean)[c] + momentum * mu;
      (*running_var)[c] = (T(1) - momentum) * (*running_var)[c] + momentum * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = (*running_mean)[c];
      invstd[c] = T(1) / std::sqrt((*running_var)[c] + eps);
    }
  }
  auto out = Tensor<T>::zeros(x.shape());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* xc = x.data() + (size_t(n) * C + c) * spatial;
      T* yc = out.data() + (size_t(n) * C + c) * spatial;
      const T g = gamma.data()[c], b = beta.data()[c], mu = mean[c], is = invstd[c];
      for (size_t i = 0; i < spatial; ++i) yc[i] = g * (xc[i] - mu) * is + b;
    }
  }
  if (track_grad<T>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto xb = x, gb = gamma, bb = beta;
    out.node()->parents = {x.node(), gamma.node(), beta.node()};
    out.node()->backward_fn = [xb, gb, bb, mean, invstd, N, C, spatial, m,
                               training](Node<T>& o) mutable {
      const T* gy = o.grad.data();
      for (int c = 0; c < C; ++c) {
        // per-channel reductions
        T sum_gy = T(0), sum_gy_xhat = T(0);
        for (int n = 0; n < N; ++n) {
          const T* gyc = gy + (size_t(n) * C + c) * spatial;
          const T* xc = xb.data() + (size_t(n) * C + c) * spatial;
          for (size_t i = 0; i < spatial; ++i) {
            sum_gy += gyc[i];
            sum_gy_xhat += gyc[i] * (xc[i] - mean[c]) * invstd[c];
          }
        }
        if (gb.requires_grad()) gb.grad()[c] += sum_gy_xhat;
        if (bb.requires_grad()) bb.grad()[c] += sum_gy;
        if (xb.requires_grad()) {
          const T g = gb.data()[c], is = invstd[c], mu = mean[c];
          for (int n = 0; n < N; ++n) {
            const T* gyc = gy + (size_t(n) * C + c) * spatial;
            const T* xc = xb.data() + (size_t(n) * C + c) * spatial;
            T* dxc = xb.grad() + (size_t(n) * C + c) * spatial;
            if (training) {
              for (size_t i = 0; i < spatial; ++i) {
                const T xhat = (xc[i] - mu) * is;
                dxc[i] += g * is * (gyc[i] - sum_gy / T(m) - xhat * sum_gy_xhat / T(m));
              }
            } else {
              for (size_t i = 0; i < spatial; ++i) dxc[i] += g * is * gyc[i];
            }
          }
        }
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  if (track_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xb = x;
    out.node()->parents = {x.node()};
    out.node()->backward_fn = [xb](Node<T>& o) mutable {
      T* dx = xb.grad();
      for (size_t i = 0; i < o.grad.size(); ++i) {
        if (xb.data()[i] > T(0)) dx[i] += o.grad[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
  if (track_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xb = x;
    out.node()->parents = {x.node()};
    out.node()->backward_fn = [xb](Node<T>& o) mutable {
      T* dx = xb.grad();
      for (size_t i = 0; i < o.grad.size(); ++i) {
        const T y = o.data[i];
        dx[i] += o.grad[i] * y * (T(1) - y);
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch");
  auto out = Tensor<T>::zeros(a.shape());
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (track_grad<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto ab = a, bb = b;
    out.node()->parents = {a.node(), b.node()};
    out.node()->backward_fn = [ab, bb](Node<T>& o) mutable {
      if (ab.requires_grad()) {
        T* da = ab.grad();
        for (size_t i = 0; i < o.grad.size(); ++i) da[i] += o.grad[i];
      }
      if (bb.requires_grad()) {
        T* db = bb.grad();
        for (size_t i = 0; i < o.grad.size(); ++i) db[i] += o.grad[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros({1});
  T acc = T(0);
  for (size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  out.data()[0] = acc;
  if (track_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xb = x;
    out.node()->parents = {x.node()};
    out.node()->backward_fn = [xb](Node<T>& o) mutable {
      T* dx = xb.grad();
      for (size_t i = 0; i < xb.size(); ++i) dx[i] += o.grad[0];
    };
  }
  return out;
}

/// Spatial mean per (sample, channel): [N,C,D,H,W] -> [N,C,1,1,1].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.ndim() == 5, "global_avg_pool: input must be [N,C,D,H,W]");
  const int N = x.dim(0), C = x.dim(1);
  const size_t spatial = size_t(x.dim(2)) * x.dim(3) * x.dim(4);
  auto out = Tensor<T>::zeros({N, C, 1, 1, 1});
  for (int i = 0; i < N * C; ++i) {
    const T* xc = x.data() + size_t(i) * spatial;
    T acc = T(0);
    for (size_t j = 0; j < spatial; ++j) acc += xc[j];
    out.data()[i] = acc / T(spatial);
  }
  if (track_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xb = x;
    out.node()->parents = {x.node()};
    out.node()->backward_fn = [xb, spatial](Node<T>& o) mutable {
      T* dx = xb.grad();
      for (size_t i = 0; i < o.grad.size(); ++i) {
        const T gy = o.grad[i] / T(spatial);
        T* dxc = dx + i * spatial;
        for (size_t j = 0; j < spatial; ++j) dxc[j] += gy;
      }
    };
  }
  return out;
}

/// Replicates [N,C,1,1,1] to [N,C,D,H,W].
template <class T>
Tensor<T> broadcast_spatial(const Tensor<T>& x, int D, int H, int W) {
  detail::require(x.ndim() == 5 && x.dim(2) == 1 && x.dim(3) == 1 && x.dim(4) == 1,
                  "broadcast_spatial: input must be [N,C,1,1,1]");
  const int N = x.dim(0), C = x.dim(1);
  const size_t spatial = size_t(D) * H * W;
  auto out = Tensor<T>::zeros({N, C, D, H, W});
  for (int i = 0; i < N * C; ++i) {
    std::fill(out.data() + size_t(i) * spatial, out.data() + size_t(i + 1) * spatial,
              x.data()[i]);
  }
  if (track_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xb = x;
    out.node()->parents = {x.node()};
    out.node()->backward_fn = [xb, spatial](Node<T>& o) mutable {
      T* dx = xb.grad();
      for (size_t i = 0; i < xb.size(); ++i) {
        const T* gyc = o.grad.data() + i * spatial;
        T acc = T(0);
        for (size_t j = 0; j < spatial; ++j) acc += gyc[j];
        dx[i] += acc;
      }
    };
  }
  return out;
}

/// Nearest-neighbor spatial upsampling by an integer factor.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor = 2) {
  detail::require(x.ndim() == 5, "upsample_nearest: input must be [N,C,D,H,W]");
  detail::require(factor >= 1, "upsample_nearest: factor must be >= 1");
  const int N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int Do = D * factor, Ho = H * factor, Wo = W * factor;
  auto out = Tensor<T>::zeros({N, C, Do, Ho, Wo});
  const size_t HWo = size_t(Ho) * Wo, HW = size_t(H) * W;
  for (int nc = 0; nc < N * C; ++nc) {
    const T* xc = x.data() + size_t(nc) * D * HW;
    T* yc = out.data() + size_t(nc) * Do * HWo;
    for (int z = 0; z < Do; ++z) {
      for (int y = 0; y < Ho; ++y) {
        const T* row = xc + size_t(z / factor) * HW + size_t(y / factor) * W;
        T* dst = yc + size_t(z) * HWo + size_t(y) * Wo;
        for (int xx = 0; xx < Wo; ++xx) dst[xx] = row[xx / factor];
      }
    }
  }
  if (track_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xb = x;
    out.node()->parents = {x.node()};
    out.node()->backward_fn = [xb, N, C, D, H, W, factor](Node<T>& o) mutable {
      const int Do = D * factor, Ho = H * factor, Wo = W * factor;
      const size_t HWo = size_t(Ho) * Wo, HW = size_t(H) * W;
      T* dx = xb.grad();
      for (int nc = 0; nc < N * C; ++nc) {
        const T* gyc = o.grad.data() + size_t(nc) * Do * HWo;
        T* dxc = dx + size_t(nc) * D * HW;
        for (int z = 0; z < Do; ++z) {
          for (int y = 0; y < Ho; ++y) {
            const T* src = gyc + size_t(z) * HWo + size_t(y) * Wo;
            T* drow = dxc + size_t(z / factor) * HW + size_t(y / factor) * W;
            for (int xx = 0; xx < Wo; ++xx) drow[xx / factor] += src[xx];
          }
        }
      }
    };
  }
  return out;
}

/// Concatenation along the channel axis for [N,C,D,H,W] tensors.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  detail::require(!xs.empty(), "concat_channels: empty input list");
  const auto& s0 = xs[0].shape();
  detail::require(s0.size() == 5, "concat_channels: inputs must be [N,C,D,H,W]");
  int Ctot = 0;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    detail::require(s.size() == 5 && s[0] == s0[0] && s[2] == s0[2] && s[3] == s0[3] &&
                        s[4] == s0[4],
                    "concat_channels: shape mismatch");
    Ctot += s[1];
  }
  const int N = s0[0];
  const size_t spatial = size_t(s0[2]) * s0[3] * s0[4];
  auto out = Tensor<T>::zeros({N, Ctot, s0[2], s0[3], s0[4]});
  for (int n = 0; n < N; ++n) {
    size_t coff = 0;
    for (const auto& x : xs) {
      const size_t nc = size_t(x.dim(1)) * spatial;
      std::memcpy(out.data() + (size_t(n) * Ctot) * spatial + coff * spatial,
                  x.data() + size_t(n) * nc, nc * sizeof(T));
      coff += size_t(x.dim(1));
    }
  }
  bool any = false;
  for (const auto& x : xs) any = any || x.requires_grad();
  if (g_grad_enabled && any) {
    out.set_requires_grad(true);
    auto parts = xs;
    for (const auto& x : xs) out.node()->parents.push_back(x.node());
    out.node()->backward_fn = [parts, N, Ctot, spatial](Node<T>& o) mutable {
      for (int n = 0; n < N; ++n) {
        size_t coff = 0;
        for (auto& x : parts) {
          const size_t nc = size_t(x.dim(1)) * spatial;
          if (x.requires_grad()) {
            const T* src = o.grad.data() + (size_t(n) * Ctot + coff) * spatial;
            T* dst = x.grad() + size_t(n) * nc;
            for (size_t i = 0; i < nc; ++i) dst[i] += src[i];
          }
          coff += size_t(x.dim(1));
        }
      }
    };
  }
  return out;
}

/// Data-preserving reshape (copies; layouts here are always dense).
template <class T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
  detail::require(shape_numel(shape) == x.size(), "reshape: element count mismatch");
  auto out = Tensor<T>::from_data(std::move(shape), x.data_vec());
  if (track_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xb = x;
    out.node()->parents = {x.node()};
    out.node()->backward_fn = [xb](Node<T>& o) mutable {
      T* dx = xb.grad();
      for (size_t i = 0; i < o.grad.size(); ++i) dx[i] += o.grad[i];
    };
  }
  return out;
}

/// Fully connected layer: x [N,F] * W [F,O] + b [O].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b) {
  detail::require(x.ndim() == 2 && W.ndim() == 2, "linear: x must be [N,F], W must be [F,O]");
  detail::require(x.dim(1) == W.dim(0), "linear: inner dimension mismatch");
  const int N = x.dim(0), F = x.dim(1), O = W.dim(1);
  if (b.defined()) detail::require(b.ndim() == 1 && b.dim(0) == O, "linear: bias must be [O]");
  auto out = Tensor<T>::zeros({N, O});
  {
    Eigen::Map<const MatRM<T>> X(x.data(), N, F), Wm(W.data(), F, O);
    Eigen::Map<MatRM<T>> Y(out.data(), N, O);
    Y.noalias() = X * Wm;
    if (b.defined()) {
      for (int n = 0; n < N; ++n) {
        for (int o = 0; o < O; ++o) out.data()[size_t(n) * O + o] += b.data()[o];
      }
    }
  }
  if (track_grad<T>({&x, &W, &b})) {
    out.set_requires_grad(true);
    auto xb = x, wb = W, bb = b;
    out.node()->parents = {x.node(), W.node()};
    if (b.defined()) out.node()->parents.push_back(b.node());
    out.node()->backward_fn = [xb, wb, bb, N, F, O](Node<T>& o) mutable {
      Eigen::Map<const MatRM<T>> GY(o.grad.data(), N, O);
      if (xb.requires_grad()) {
        Eigen::Map<const MatRM<T>> Wm(wb.data(), F, O);
        Eigen::Map<MatRM<T>> DX(xb.grad(), N, F);
        DX.noalias() += GY * Wm.transpose();
      }
      if (wb.requires_grad()) {
        Eigen::Map<const MatRM<T>> X(xb.data(), N, F);
        Eigen::Map<MatRM<T>> DW(wb.grad(), F, O);
        DW.noalias() += X.transpose() * GY;
      }
      if (bb.defined() && bb.requires_grad()) {
        T* db = bb.grad();
        for (int n = 0; n < N; ++n) {
          for (int c = 0; c < O; ++c) db[c] += o.grad[size_t(n) * O + c];
        }
      }
    };
  }
  return out;
}

/// Softmax along the given axis; outputs sum to 1 along that axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const auto& s = x.shape();
  detail::require(axis >= 0 && axis < int(s.size()), "softmax: axis out of range");
  size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= size_t(s[size_t(i)]);
  for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= size_t(s[i]);
  const size_t n = size_t(s[size_t(axis)]);
  auto out = Tensor<T>::zeros(x.shape());
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      const size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (size_t j = 0; j < n; ++j) mx = std::max(mx, x.data()[base + j * inner]);
      T sum = T(0);
      for (size_t j = 0; j < n; ++j) {
        const T e = std::exp(x.data()[base + j * inner] - mx);
        out.data()[base + j * inner] = e;
        sum += e;
      }
      for (size_t j = 0; j < n; ++j) out.data()[base + j * inner] /= sum;
    }
  }
  if (track_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xb = x;
    out.node()->parents = {x.node()};
    out.node()->backward_fn = [xb, outer, inner, n](Node<T>& o) mutable {
      T* dx = xb.grad();
      for (size_t ou = 0; ou < outer; ++ou) {
        for (size_t in = 0; in < inner; ++in) {
          const size_t base = ou * n * inner + in;
          T dot = T(0);
          for (size_t j = 0; j < n; ++j) {
            dot += o.grad[base + j * inner] * o.data[base + j * inner];
          }
          for (size_t j = 0; j < n; ++j) {
            const size_t i = base + j * inner;
            dx[i] += o.data[i] * (o.grad[i] - dot);
          }
        }
      }
    };
  }
  return out;
}

/// Two-class soft Dice loss: 1 minus the mean over the foreground class
/// (p, g) and the background class (1-p, 1-g) of 2*sum(p*g)/(sum p + sum g
/// + eps). Lies in [0,1]; differentiable in pred.
template <class T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, T eps = T(1e-5)) {
  detail::require(pred.shape() == target.shape(), "dice_loss: shape mismatch");
  const size_t n = pred.size();
  T sp = T(0), sg = T(0), s1 = T(0);
  for (size_t i = 0; i < n; ++i) {
    sp += pred.data()[i];
    sg += target.data()[i];
    s1 += pred.data()[i] * target.data()[i];
  }
  const T s2 = T(n) - sp - sg + s1;  // sum (1-p)(1-g)
  const T a1 = sp + sg + eps;
  const T a2 = T(2) * T(n) - sp - sg + eps;
  const T dice1 = T(2) * s1 / a1;
  const T dice2 = T(2) * s2 / a2;
  auto out = Tensor<T>::zeros({1});
  out.data()[0] = T(1) - (dice1 + dice2) / T(2);
  if (track_grad<T>({&pred})) {
    out.set_requires_grad(true);
    auto pb = pred, gb = target;
    out.node()->parents = {pred.node()};
    out.node()->backward_fn = [pb, gb, s1, s2, a1, a2](Node<T>& o) mutable {
      const T gy = o.grad[0];
      T* dp = pb.grad();
      const size_t n = pb.size();
      for (size_t i = 0; i < n; ++i) {
        const T g = gb.data()[i];
        const T d1 = (T(2) * g * a1 - T(2) * s1) / (a1 * a1);
        const T d2 = (-T(2) * (T(1) - g) * a2 + T(2) * s2) / (a2 * a2);
        dp[i] += gy * (-(d1 + d2) / T(2));
      }
    };
  }
  return out;
}

/// Mean binary cross entropy -[y log p + (1-y) log(1-p)] with predictions
/// clamped to [eps, 1-eps]. Gradient is zero where the clamp is active.
template <class T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target, T eps = T(1e-7)) {
  detail::require(pred.shape() == target.shape(), "bce_loss: shape mismatch");
  const size_t n = pred.size();
  T acc = T(0);
  for (size_t i = 0; i < n; ++i) {
    const T p = std::clamp(pred.data()[i], eps, T(1) - eps);
    const T y = target.data()[i];
    acc -= y * std::log(p) + (T(1) - y) * std::log(T(1) - p);
  }
  auto out = Tensor<T>::zeros({1});
  out.data()[0] = acc / T(n);
  if (track_grad<T>({&pred})) {
    out.set_requires_grad(true);
    auto pb = pred, gb = target;
    out.node()->parents = {pred.node()};
    out.node()->backward_fn = [pb, gb, eps](Node<T>& o) mutable {
      const T gy = o.grad[0];
      T* dp = pb.grad();
      const size_t n = pb.size();
      for (size_t i = 0; i < n; ++i) {
        const T praw = pb.data()[i];
        if (praw <= eps || praw >= T(1) - eps) continue;  // clamped: zero slope
        const T y = gb.data()[i];
        dp[i] += gy * (praw - y) / (praw * (T(1) - praw) * T(n));
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

template <class T>
struct Adam {
  T lr = T(1e-4), beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
  int64_t t = 0;
  std::vector<std::vector<T>> m, v;

  void step(std::vector<Tensor<T>>& params) {
    if (m.empty()) {
      for (auto& p : params) {
        m.emplace_back(p.size(), T(0));
        v.emplace_back(p.size(), T(0));
      }
    }
    detail::require(m.size() == params.size(), "adam: parameter list changed size");
    ++t;
    const T bc1 = T(1) - std::pow(beta1, T(t));
    const T bc2 = T(1) - std::pow(beta2, T(t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = params[pi];
      detail::require(m[pi].size() == p.size(), "adam: moment buffer shape mismatch");
      const T* g = p.has_grad() ? p.grad_vec().data() : nullptr;
      T* pd = p.data();
      for (size_t i = 0; i < p.size(); ++i) {
        const T gi = g ? g[i] : T(0);
        m[pi][i] = beta1 * m[pi][i] + (T(1) - beta1) * gi;
        v[pi][i] = beta2 * v[pi][i] + (T(1) - beta2) * gi * gi;
        const T mhat = m[pi][i] / bc1;
        const T vhat = v[pi][i] / bc2;
        pd[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

template <class T>
struct Sgd {
  T lr = T(1e-4);

  void step(std::vector<Tensor<T>>& params) {
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      const T* g = p.grad_vec().data();
      T* pd = p.data();
      for (size_t i = 0; i < p.size(); ++i) pd[i] -= lr * g[i];
    }
  }
};

template <class T>
void step_adam(Adam<T>& state, std::vector<Tensor<T>>& params) {
  state.step(params);
}

template <class T>
void step_sgd(Sgd<T>& state, std::vector<Tensor<T>>& params) {
  state.step(params);
}

template <class T>
void zero_grads(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Kaiming-style normal init with fan-in scaling, std = sqrt(2/fan_in).
template <class T>
Tensor<T> kaiming_normal(std::vector<int> shape, size_t fan_in, Rng& rng,
                         bool requires_grad = true) {
  auto t = Tensor<T>::zeros(std::move(shape), requires_grad);
  const double std = std::sqrt(2.0 / double(fan_in));
  for (size_t i = 0; i < t.size(); ++i) t.data()[i] = T(rng.normal(0.0, std));
  return t;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences, elementwise. Returns the max relative error
/// |a - n| / max(1, |a|, |n|). Intended for T = double.
template <class T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x,
                  T h = T(1e-3)) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<T> y = f(x);
  detail::require(y.size() == 1, "grad_check: f must be scalar-valued");
  y.backward();
  std::vector<T> analytic(x.grad(), x.grad() + x.size());
  double max_err = 0.0;
  NoGradGuard ng;
  for (size_t i = 0; i < x.size(); ++i) {
    const T orig = x.data()[i];
    x.data()[i] = orig + h;
    const T fp = f(x).item();
    x.data()[i] = orig - h;
    const T fm = f(x).item();
    x.data()[i] = orig;
    const double numeric = double(fp - fm) / (2.0 * double(h));
    const double a = double(analytic[i]);
    const double err = std::abs(a - numeric) /
                       std::max({1.0, std::abs(a), std::abs(numeric)});
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace airseg::ad
