#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "prolad/errors.hpp"
#include "prolad/tape.hpp"
#include "prolad/tensor.hpp"

namespace prolad::ops {

namespace detail {

// ---- dense kernels (row-major) ----

// C[M,N] += A[M,K] · B[K,N]
inline void gemm_acc(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
                     std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = a[k];
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] · B[N,K]^T  (rows of A dotted with rows of B)
inline void gemm_nt_acc(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
                        std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
      c[j] += s;
    }
  }
}

// C[K,N] += A[M,K]^T · B[M,N]
inline void gemm_tn_acc(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
                        std::size_t N) {
  for (std::size_t m = 0; m < M; ++m) {
    const double* a = A + m * K;
    const double* b = B + m * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = a[k];
      double* c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

inline bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::recording()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

// Unpacks x[n, c0+c, ih, iw] patches into cols[(c*KH+r)*KW+s][oh*OW+ow].
// Zero padding outside the image.
inline void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t KH,
                   std::size_t KW, std::size_t stride, std::size_t pad, std::size_t OH,
                   std::size_t OW, double* cols) {
  const std::size_t P = OH * OW;
  for (std::size_t c = 0; c < C; ++c) {
    const double* xc = x + c * H * W;
    for (std::size_t r = 0; r < KH; ++r) {
      for (std::size_t s = 0; s < KW; ++s) {
        double* row = cols + ((c * KH + r) * KW + s) * P;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const long ih = static_cast<long>(oh * stride + r) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(H)) {
            for (std::size_t ow = 0; ow < OW; ++ow) row[oh * OW + ow] = 0.0;
            continue;
          }
          const double* xrow = xc + static_cast<std::size_t>(ih) * W;
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const long iw = static_cast<long>(ow * stride + s) - static_cast<long>(pad);
            row[oh * OW + ow] =
                (iw < 0 || iw >= static_cast<long>(W)) ? 0.0 : xrow[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds column gradients back to the image.
inline void col2im_acc(const double* cols, std::size_t C, std::size_t H, std::size_t W,
                       std::size_t KH, std::size_t KW, std::size_t stride, std::size_t pad,
                       std::size_t OH, std::size_t OW, double* dx) {
  const std::size_t P = OH * OW;
  for (std::size_t c = 0; c < C; ++c) {
    double* dxc = dx + c * H * W;
    for (std::size_t r = 0; r < KH; ++r) {
      for (std::size_t s = 0; s < KW; ++s) {
        const double* row = cols + ((c * KH + r) * KW + s) * P;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const long ih = static_cast<long>(oh * stride + r) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          double* dxrow = dxc + static_cast<std::size_t>(ih) * W;
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const long iw = static_cast<long>(ow * stride + s) - static_cast<long>(pad);
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            dxrow[static_cast<std::size_t>(iw)] += row[oh * OW + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  const bool rec = detail::want_grad({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (rec) {
    auto pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, pb, po, n]() {
      if (pa->requires_grad)
        for (std::size_t i = 0; i < n; ++i) pa->grad[i] += po->grad[i];
      if (pb->requires_grad)
        for (std::size_t i = 0; i < n; ++i) pb->grad[i] += po->grad[i];
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  const bool rec = detail::want_grad({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (rec) {
    auto pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, pb, po, n]() {
      if (pa->requires_grad)
        for (std::size_t i = 0; i < n; ++i) pa->grad[i] += po->grad[i];
      if (pb->requires_grad)
        for (std::size_t i = 0; i < n; ++i) pb->grad[i] -= po->grad[i];
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  const bool rec = detail::want_grad({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (rec) {
    auto pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, pb, po, n]() {
      if (pa->requires_grad)
        for (std::size_t i = 0; i < n; ++i) pa->grad[i] += po->grad[i] * pb->data[i];
      if (pb->requires_grad)
        for (std::size_t i = 0; i < n; ++i) pb->grad[i] += po->grad[i] * pa->data[i];
    });
  }
  return out;
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  const bool rec = detail::want_grad({&a});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (rec) {
    auto pa = a.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, po, c, n]() {
      for (std::size_t i = 0; i < n; ++i) pa->grad[i] += po->grad[i] * c;
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
  const bool rec = detail::want_grad({&a});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
  if (rec) {
    auto pa = a.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, po, n]() {
      for (std::size_t i = 0; i < n; ++i) pa->grad[i] += po->grad[i];
    });
  }
  return out;
}

inline Tensor log(const Tensor& a) {
  const bool rec = detail::want_grad({&a});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::log(a.data()[i]);
  if (rec) {
    auto pa = a.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, po, n]() {
      for (std::size_t i = 0; i < n; ++i) pa->grad[i] += po->grad[i] / pa->data[i];
    });
  }
  return out;
}

inline Tensor exp(const Tensor& a) {
  const bool rec = detail::want_grad({&a});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::exp(a.data()[i]);
  if (rec) {
    auto pa = a.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, po, n]() {
      for (std::size_t i = 0; i < n; ++i) pa->grad[i] += po->grad[i] * po->data[i];
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  const bool rec = detail::want_grad({&a});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  if (rec) {
    auto pa = a.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, po, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        if (pa->data[i] > 0.0) pa->grad[i] += po->grad[i];
      }
    });
  }
  return out;
}

// ---- reductions / shape ----

inline Tensor sum(const Tensor& a) {
  const bool rec = detail::want_grad({&a});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = Tensor::from_data({1}, {acc}, rec);
  if (rec) {
    auto pa = a.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, po]() {
      const double g = po->grad[0];
      for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  const bool rec = detail::want_grad({&a});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor out = Tensor::from_data({1}, {acc * inv}, rec);
  if (rec) {
    auto pa = a.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, po, inv]() {
      const double g = po->grad[0] * inv;
      for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(new_shape));
  }
  const bool rec = detail::want_grad({&a});
  Tensor out = Tensor::from_data(std::move(new_shape), a.data(), rec);
  if (rec) {
    auto pa = a.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, po]() {
      for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += po->grad[i];
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw InputError("concat: no tensors given");
  const Shape& base = parts[0].shape();
  if (axis >= base.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = base;
  std::size_t axis_total = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != base.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (i != axis && t.shape()[i] != base[i]) {
        throw ShapeError("concat: shapes " + shape_str(base) + " and " + shape_str(t.shape()) +
                         " differ off-axis");
      }
    }
    axis_total += t.shape()[axis];
  }
  out_shape[axis] = axis_total;

  bool rec = false;
  if (Tape::recording()) {
    for (const Tensor& t : parts) rec = rec || t.requires_grad();
  }
  Tensor out = Tensor::zeros(out_shape, rec);

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= base[i];
  for (std::size_t i = axis + 1; i < base.size(); ++i) inner *= base[i];

  std::size_t offset = 0;  // in axis units
  std::vector<std::size_t> offsets;
  for (const Tensor& t : parts) {
    offsets.push_back(offset);
    const std::size_t ax = t.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = t.data().data() + o * ax * inner;
      double* dst = out.data().data() + (o * axis_total + offset) * inner;
      std::copy(src, src + ax * inner, dst);
    }
    offset += ax;
  }

  if (rec) {
    std::vector<std::shared_ptr<TensorData>> ptrs;
    std::vector<std::size_t> ax_sizes;
    for (const Tensor& t : parts) {
      ptrs.push_back(t.ptr());
      ax_sizes.push_back(t.shape()[axis]);
    }
    auto po = out.ptr();
    Tape::current()->record(
        out, [ptrs, ax_sizes, offsets, po, outer, inner, axis_total]() {
          for (std::size_t p = 0; p < ptrs.size(); ++p) {
            if (!ptrs[p]->requires_grad) continue;
            const std::size_t ax = ax_sizes[p];
            for (std::size_t o = 0; o < outer; ++o) {
              const double* src = po->grad.data() + (o * axis_total + offsets[p]) * inner;
              double* dst = ptrs[p]->grad.data() + o * ax * inner;
              for (std::size_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
            }
          }
        });
  }
  return out;
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0)) {
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t M = a.size(0), K = a.size(1), N = b.size(1);
  const bool rec = detail::want_grad({&a, &b});
  Tensor out = Tensor::zeros({M, N}, rec);
  detail::gemm_acc(a.data().data(), b.data().data(), out.data().data(), M, K, N);
  if (rec) {
    auto pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, pb, po, M, K, N]() {
      if (pa->requires_grad)
        detail::gemm_nt_acc(po->grad.data(), pb->data.data(), pa->grad.data(), M, N, K);
      if (pb->requires_grad)
        detail::gemm_tn_acc(pa->data.data(), po->grad.data(), pb->grad.data(), M, K, N);
    });
  }
  return out;
}

// a [M,K] · b[N,K]^T -> [M,N]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(1)) {
    throw ShapeError("matmul_nt: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t M = a.size(0), K = a.size(1), N = b.size(0);
  const bool rec = detail::want_grad({&a, &b});
  Tensor out = Tensor::zeros({M, N}, rec);
  detail::gemm_nt_acc(a.data().data(), b.data().data(), out.data().data(), M, K, N);
  if (rec) {
    auto pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    Tape::current()->record(out, [pa, pb, po, M, K, N]() {
      if (pa->requires_grad)
        detail::gemm_acc(po->grad.data(), pb->data.data(), pa->grad.data(), M, N, K);
      if (pb->requires_grad)
        detail::gemm_tn_acc(po->grad.data(), pa->data.data(), pb->grad.data(), M, N, K);
    });
  }
  return out;
}

// ---- convolution ----

// x [N,Cin,H,W], w [Cout,Cin/groups,KH,KW] -> [N,Cout,OH,OW]; zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                     std::size_t padding = 0, std::size_t groups = 1) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d: need 4-d input and kernel, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (groups == 0) throw ConfigError("conv2d: groups must be positive");
  const std::size_t N = x.size(0), Cin = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t Cout = w.size(0), KH = w.size(2), KW = w.size(3);
  if (Cin % groups != 0 || Cout % groups != 0) {
    throw ConfigError("conv2d: groups " + std::to_string(groups) + " must divide channels " +
                      std::to_string(Cin) + "->" + std::to_string(Cout));
  }
  if (w.size(1) != Cin / groups) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(w.size(1) * groups) +
                     " input channels, input has " + std::to_string(Cin));
  }
  if (H + 2 * padding < KH || W + 2 * padding < KW) {
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  const std::size_t OH = (H + 2 * padding - KH) / stride + 1;
  const std::size_t OW = (W + 2 * padding - KW) / stride + 1;
  const std::size_t P = OH * OW;
  const std::size_t CinG = Cin / groups, CoutG = Cout / groups;
  const std::size_t R = Cin * KH * KW;   // im2col rows (all groups stacked)
  const std::size_t RG = CinG * KH * KW;  // rows per group

  const bool rec = detail::want_grad({&x, &w});
  Tensor out = Tensor::zeros({N, Cout, OH, OW}, rec);

  const bool identity_cols = (KH == 1 && KW == 1 && stride == 1 && padding == 0);
  std::vector<double> cols_cache;  // kept for backward only when recording
  std::vector<double> cols_tmp;
  if (!identity_cols) {
    if (rec)
      cols_cache.resize(N * R * P);
    else
      cols_tmp.resize(R * P);
  }

  for (std::size_t n = 0; n < N; ++n) {
    const double* xn = x.data().data() + n * Cin * H * W;
    const double* cols;
    if (identity_cols) {
      cols = xn;  // 1x1/stride-1: the patch matrix is the input itself
    } else {
      double* buf = rec ? cols_cache.data() + n * R * P : cols_tmp.data();
      detail::im2col(xn, Cin, H, W, KH, KW, stride, padding, OH, OW, buf);
      cols = buf;
    }
    double* on = out.data().data() + n * Cout * P;
    for (std::size_t g = 0; g < groups; ++g) {
      detail::gemm_acc(w.data().data() + g * CoutG * RG, cols + g * RG * P, on + g * CoutG * P,
                       CoutG, RG, P);
    }
  }

  if (rec) {
    auto px = x.ptr(), pw = w.ptr(), po = out.ptr();
    auto cache = std::make_shared<std::vector<double>>(std::move(cols_cache));
    Tape::current()->record(out, [px, pw, po, cache, N, Cin, H, W, Cout, KH, KW, stride, padding,
                                  OH, OW, P, CinG, CoutG, R, RG, groups, identity_cols]() {
      std::vector<double> dcols;
      if (px->requires_grad && !identity_cols) dcols.resize(R * P);
      for (std::size_t n = 0; n < N; ++n) {
        const double* dout_n = po->grad.data() + n * Cout * P;
        const double* cols = identity_cols ? px->data.data() + n * Cin * H * W
                                           : cache->data() + n * R * P;
        if (pw->requires_grad) {
          for (std::size_t g = 0; g < groups; ++g) {
            detail::gemm_nt_acc(dout_n + g * CoutG * P, cols + g * RG * P,
                                pw->grad.data() + g * CoutG * RG, CoutG, P, RG);
          }
        }
        if (px->requires_grad) {
          if (identity_cols) {
            double* dx_n = px->grad.data() + n * Cin * H * W;
            for (std::size_t g = 0; g < groups; ++g) {
              detail::gemm_tn_acc(pw->data.data() + g * CoutG * RG, dout_n + g * CoutG * P,
                                  dx_n + g * RG * P, CoutG, RG, P);
            }
          } else {
            std::fill(dcols.begin(), dcols.end(), 0.0);
            for (std::size_t g = 0; g < groups; ++g) {
              detail::gemm_tn_acc(pw->data.data() + g * CoutG * RG, dout_n + g * CoutG * P,
                                  dcols.data() + g * RG * P, CoutG, RG, P);
            }
            detail::col2im_acc(dcols.data(), Cin, H, W, KH, KW, stride, padding, OH, OW,
                               px->grad.data() + n * Cin * H * W);
          }
        }
      }
    });
  }
  return out;
}

// ---- pooling / normalization ----

inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) {
    throw ShapeError("global_avg_pool: need [N,C,H,W], got " + shape_str(x.shape()));
  }
  const std::size_t N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  const bool rec = detail::want_grad({&x});
  Tensor out = Tensor::zeros({N, C}, rec);
  const double inv = 1.0 / static_cast<double>(HW);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = x.data().data() + (n * C + c) * HW;
      double s = 0.0;
      for (std::size_t i = 0; i < HW; ++i) s += p[i];
      out.data()[n * C + c] = s * inv;
    }
  }
  if (rec) {
    auto px = x.ptr(), po = out.ptr();
    Tape::current()->record(out, [px, po, N, C, HW, inv]() {
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const double g = po->grad[n * C + c] * inv;
          double* p = px->grad.data() + (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) p[i] += g;
        }
      }
    });
  }
  return out;
}

// Row-wise softmax on [N,K] (a vector is treated as one row).
inline Tensor softmax(const Tensor& x) {
  if (x.rank() > 2) throw ShapeError("softmax: need [N,K] or [K], got " + shape_str(x.shape()));
  const std::size_t N = x.rank() == 2 ? x.size(0) : 1;
  const std::size_t K = x.rank() == 2 ? x.size(1) : x.size(0);
  const bool rec = detail::want_grad({&x});
  Tensor out = Tensor::zeros(x.shape(), rec);
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = x.data().data() + n * K;
    double* orow = out.data().data() + n * K;
    double m = row[0];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      orow[k] = std::exp(row[k] - m);
      z += orow[k];
    }
    for (std::size_t k = 0; k < K; ++k) orow[k] /= z;
  }
  if (rec) {
    auto px = x.ptr(), po = out.ptr();
    Tape::current()->record(out, [px, po, N, K]() {
      for (std::size_t n = 0; n < N; ++n) {
        const double* y = po->data.data() + n * K;
        const double* dy = po->grad.data() + n * K;
        double dot = 0.0;
        for (std::size_t k = 0; k < K; ++k) dot += dy[k] * y[k];
        double* dx = px->grad.data() + n * K;
        for (std::size_t k = 0; k < K; ++k) dx[k] += (dy[k] - dot) * y[k];
      }
    });
  }
  return out;
}

// L2 norms along `axis` of a matrix [N,D] (axis 1 -> [N], axis 0 -> [D]);
// a vector collapses to a scalar.
inline Tensor l2_norm(const Tensor& x, std::size_t axis = 1) {
  const std::size_t rank = x.rank();
  if (rank != 1 && rank != 2) {
    throw ShapeError("l2_norm: need matrix or vector, got " + shape_str(x.shape()));
  }
  if (rank == 1) axis = 0;
  if (axis >= rank) throw ShapeError("l2_norm: axis out of range");
  const std::size_t N = rank == 2 ? x.size(0) : 1;
  const std::size_t D = rank == 2 ? x.size(1) : x.size(0);
  const std::size_t out_len = rank == 1 ? 1 : (axis == 1 ? N : D);
  const bool rec = detail::want_grad({&x});
  Tensor out = Tensor::zeros({out_len}, rec);
  const bool over_rows = (rank == 1) || axis == 1;
  if (over_rows) {
    for (std::size_t n = 0; n < N; ++n) {
      const double* row = x.data().data() + n * D;
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) s += row[d] * row[d];
      out.data()[n] = std::sqrt(s);
    }
  } else {
    for (std::size_t d = 0; d < D; ++d) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double v = x.data()[n * D + d];
        s += v * v;
      }
      out.data()[d] = std::sqrt(s);
    }
  }
  if (rec) {
    auto px = x.ptr(), po = out.ptr();
    Tape::current()->record(out, [px, po, N, D, over_rows]() {
      if (over_rows) {
        for (std::size_t n = 0; n < N; ++n) {
          const double r = std::max(po->data[n], 1e-12);
          const double g = po->grad[n] / r;
          for (std::size_t d = 0; d < D; ++d) px->grad[n * D + d] += g * px->data[n * D + d];
        }
      } else {
        for (std::size_t d = 0; d < D; ++d) {
          const double r = std::max(po->data[d], 1e-12);
          const double g = po->grad[d] / r;
          for (std::size_t n = 0; n < N; ++n) px->grad[n * D + d] += g * px->data[n * D + d];
        }
      }
    });
  }
  return out;
}

// Rows scaled to unit L2 norm (guard 1e-12).
inline Tensor row_normalize(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("row_normalize: need [N,D], got " + shape_str(x.shape()));
  const std::size_t N = x.size(0), D = x.size(1);
  const bool rec = detail::want_grad({&x});
  Tensor out = Tensor::zeros(x.shape(), rec);
  std::vector<double> norms(N);
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = x.data().data() + n * D;
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) s += row[d] * row[d];
    norms[n] = std::max(std::sqrt(s), 1e-12);
    double* orow = out.data().data() + n * D;
    for (std::size_t d = 0; d < D; ++d) orow[d] = row[d] / norms[n];
  }
  if (rec) {
    auto px = x.ptr(), po = out.ptr();
    Tape::current()->record(out, [px, po, norms, N, D]() {
      for (std::size_t n = 0; n < N; ++n) {
        const double* y = po->data.data() + n * D;
        const double* dy = po->grad.data() + n * D;
        double dot = 0.0;
        for (std::size_t d = 0; d < D; ++d) dot += dy[d] * y[d];
        double* dx = px->grad.data() + n * D;
        for (std::size_t d = 0; d < D; ++d) dx[d] += (dy[d] - dot * y[d]) / norms[n];
      }
    });
  }
  return out;
}

// x [N,K] + b [K] broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.size(1) != b.size(0)) {
    throw ShapeError("add_rowvec: shapes " + shape_str(x.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t N = x.size(0), K = x.size(1);
  const bool rec = detail::want_grad({&x, &b});
  Tensor out = Tensor::zeros(x.shape(), rec);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < K; ++k) {
      out.data()[n * K + k] = x.data()[n * K + k] + b.data()[k];
    }
  }
  if (rec) {
    auto px = x.ptr(), pb = b.ptr(), po = out.ptr();
    Tape::current()->record(out, [px, pb, po, N, K]() {
      if (px->requires_grad) {
        for (std::size_t i = 0; i < N * K; ++i) px->grad[i] += po->grad[i];
      }
      if (pb->requires_grad) {
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t k = 0; k < K; ++k) pb->grad[k] += po->grad[n * K + k];
        }
      }
    });
  }
  return out;
}

// Per-channel y = x*scale[c] + shift[c] on [N,C,H,W] or [N,C].
inline Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift) {
  if (x.rank() != 4 && x.rank() != 2) {
    throw ShapeError("channel_affine: need [N,C,H,W] or [N,C], got " + shape_str(x.shape()));
  }
  const std::size_t C = x.size(1);
  if (scale.rank() != 1 || scale.size(0) != C || shift.rank() != 1 || shift.size(0) != C) {
    throw ShapeError("channel_affine: scale/shift must be [C]=" + std::to_string(C) + ", got " +
                     shape_str(scale.shape()) + " and " + shape_str(shift.shape()));
  }
  const std::size_t N = x.size(0);
  const std::size_t HW = x.rank() == 4 ? x.size(2) * x.size(3) : 1;
  const bool rec = detail::want_grad({&x, &scale, &shift});
  Tensor out = Tensor::zeros(x.shape(), rec);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double a = scale.data()[c], b = shift.data()[c];
      const double* p = x.data().data() + (n * C + c) * HW;
      double* o = out.data().data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) o[i] = p[i] * a + b;
    }
  }
  if (rec) {
    auto px = x.ptr(), ps = scale.ptr(), pt = shift.ptr(), po = out.ptr();
    Tape::current()->record(out, [px, ps, pt, po, N, C, HW]() {
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const double* dy = po->grad.data() + (n * C + c) * HW;
          if (px->requires_grad) {
            const double a = ps->data[c];
            double* dx = px->grad.data() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) dx[i] += dy[i] * a;
          }
          if (ps->requires_grad) {
            const double* xv = px->data.data() + (n * C + c) * HW;
            double s = 0.0;
            for (std::size_t i = 0; i < HW; ++i) s += dy[i] * xv[i];
            ps->grad[c] += s;
          }
          if (pt->requires_grad) {
            double s = 0.0;
            for (std::size_t i = 0; i < HW; ++i) s += dy[i];
            pt->grad[c] += s;
          }
        }
      }
    });
  }
  return out;
}

// Batch normalization, training mode, no affine: per-channel standardization
// by biased batch statistics. Batch stats (mean, var) are returned through
// the out-parameters for the caller's running-average update.
inline Tensor batch_norm_train(const Tensor& x, double eps, std::vector<double>* batch_mean,
                               std::vector<double>* batch_var) {
  if (x.rank() != 4) {
    throw ShapeError("batch_norm_train: need [N,C,H,W], got " + shape_str(x.shape()));
  }
  const std::size_t N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  const std::size_t m = N * HW;
  if (m < 2) {
    throw TrainingError("batch_norm_train: " + std::to_string(m) +
                        " value(s) per channel cannot define a variance");
  }
  const bool rec = detail::want_grad({&x});
  Tensor out = Tensor::zeros(x.shape(), rec);
  std::vector<double> mu(C, 0.0), var(C, 0.0), inv(C, 0.0);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* p = x.data().data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) s += p[i];
    }
    mu[c] = s * inv_m;
    double v = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* p = x.data().data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const double d = p[i] - mu[c];
        v += d * d;
      }
    }
    var[c] = v * inv_m;
    inv[c] = 1.0 / std::sqrt(var[c] + eps);
    for (std::size_t n = 0; n < N; ++n) {
      const double* p = x.data().data() + (n * C + c) * HW;
      double* o = out.data().data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) o[i] = (p[i] - mu[c]) * inv[c];
    }
  }
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;
  if (rec) {
    auto px = x.ptr(), po = out.ptr();
    Tape::current()->record(out, [px, po, inv, N, C, HW, inv_m]() {
      for (std::size_t c = 0; c < C; ++c) {
        double sum_dy = 0.0, sum_dy_y = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const double* dy = po->grad.data() + (n * C + c) * HW;
          const double* y = po->data.data() + (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            sum_dy += dy[i];
            sum_dy_y += dy[i] * y[i];
          }
        }
        const double mean_dy = sum_dy * inv_m;
        const double mean_dy_y = sum_dy_y * inv_m;
        for (std::size_t n = 0; n < N; ++n) {
          const double* dy = po->grad.data() + (n * C + c) * HW;
          const double* y = po->data.data() + (n * C + c) * HW;
          double* dx = px->grad.data() + (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            dx[i] += inv[c] * (dy[i] - mean_dy - y[i] * mean_dy_y);
          }
        }
      }
    });
  }
  return out;
}

// ---- losses and heads ----

// Mean cross-entropy of logits [N,K] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<long>& labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: need [N,K] logits, got " + shape_str(logits.shape()));
  }
  const std::size_t N = logits.size(0), K = logits.size(1);
  if (labels.size() != N) {
    throw InputError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(N) + " rows");
  }
  for (long l : labels) {
    if (l < 0 || l >= static_cast<long>(K)) {
      throw InputError("cross_entropy: label " + std::to_string(l) + " outside [0," +
                       std::to_string(K) + ")");
    }
  }
  const bool rec = detail::want_grad({&logits});
  std::vector<double> probs(N * K);
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = logits.data().data() + n * K;
    double m = row[0];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      probs[n * K + k] = std::exp(row[k] - m);
      z += probs[n * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] /= z;
    loss += m + std::log(z) - row[labels[n]];
  }
  loss /= static_cast<double>(N);
  Tensor out = Tensor::from_data({1}, {loss}, rec);
  if (rec) {
    auto pl = logits.ptr(), po = out.ptr();
    Tape::current()->record(out, [pl, po, probs, labels, N, K]() {
      const double g = po->grad[0] / static_cast<double>(N);
      for (std::size_t n = 0; n < N; ++n) {
        double* dl = pl->grad.data() + n * K;
        const double* p = probs.data() + n * K;
        for (std::size_t k = 0; k < K; ++k) {
          dl[k] += g * (p[k] - (static_cast<long>(k) == labels[n] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

// Mean over rows of cos(f_i, t_i). The teacher t never receives gradient.
// Denominator guard: ||f||*||t|| + 1e-12.
inline Tensor cosine_batch(const Tensor& f, const Tensor& t) {
  if (f.rank() != 2 || t.rank() != 2 || f.size(1) != t.size(1)) {
    throw ShapeError("cosine_batch: shapes " + shape_str(f.shape()) + " and " +
                     shape_str(t.shape()));
  }
  if (f.size(0) != t.size(0)) {
    throw InputError("cosine_batch: " + std::to_string(f.size(0)) + " feature rows vs " +
                     std::to_string(t.size(0)) + " teacher rows");
  }
  const std::size_t N = f.size(0), D = f.size(1);
  const bool rec = detail::want_grad({&f});
  std::vector<double> fn(N), tn(N), dots(N), cosv(N);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const double* fr = f.data().data() + n * D;
    const double* tr = t.data().data() + n * D;
    double sf = 0.0, st = 0.0, dot = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      sf += fr[d] * fr[d];
      st += tr[d] * tr[d];
      dot += fr[d] * tr[d];
    }
    fn[n] = std::sqrt(sf);
    tn[n] = std::sqrt(st);
    dots[n] = dot;
    cosv[n] = dot / (fn[n] * tn[n] + 1e-12);
    total += cosv[n];
  }
  Tensor out = Tensor::from_data({1}, {total / static_cast<double>(N)}, rec);
  if (rec) {
    auto pf = f.ptr(), pt = t.ptr(), po = out.ptr();
    Tape::current()->record(out, [pf, pt, po, fn, tn, dots, N, D]() {
      const double g = po->grad[0] / static_cast<double>(N);
      for (std::size_t n = 0; n < N; ++n) {
        const double denom = fn[n] * tn[n] + 1e-12;
        const double* fr = pf->data.data() + n * D;
        const double* tr = pt->data.data() + n * D;
        double* df = pf->grad.data() + n * D;
        const double fscale = dots[n] * tn[n] / (std::max(fn[n], 1e-12) * denom * denom);
        for (std::size_t d = 0; d < D; ++d) {
          df[d] += g * (tr[d] / denom - fscale * fr[d]);
        }
      }
    });
  }
  return out;
}

// Per-class mean of rows: x [N,D] grouped by labels into [K,D].
inline Tensor row_group_mean(const Tensor& x, const std::vector<long>& labels, std::size_t K) {
  if (x.rank() != 2) throw ShapeError("row_group_mean: need [N,D], got " + shape_str(x.shape()));
  const std::size_t N = x.size(0), D = x.size(1);
  if (labels.size() != N) {
    throw InputError("row_group_mean: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(N) + " rows");
  }
  std::vector<double> counts(K, 0.0);
  for (long l : labels) {
    if (l < 0 || l >= static_cast<long>(K)) {
      throw InputError("row_group_mean: label " + std::to_string(l) + " outside [0," +
                       std::to_string(K) + ")");
    }
    counts[static_cast<std::size_t>(l)] += 1.0;
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (counts[k] == 0.0) {
      throw InputError("row_group_mean: class " + std::to_string(k) + " has no rows");
    }
  }
  const bool rec = detail::want_grad({&x});
  Tensor out = Tensor::zeros({K, D}, rec);
  for (std::size_t n = 0; n < N; ++n) {
    const auto k = static_cast<std::size_t>(labels[n]);
    const double* row = x.data().data() + n * D;
    double* orow = out.data().data() + k * D;
    for (std::size_t d = 0; d < D; ++d) orow[d] += row[d];
  }
  for (std::size_t k = 0; k < K; ++k) {
    double* orow = out.data().data() + k * D;
    for (std::size_t d = 0; d < D; ++d) orow[d] /= counts[k];
  }
  if (rec) {
    auto px = x.ptr(), po = out.ptr();
    Tape::current()->record(out, [px, po, labels, counts, N, D]() {
      for (std::size_t n = 0; n < N; ++n) {
        const auto k = static_cast<std::size_t>(labels[n]);
        const double* dg = po->grad.data() + k * D;
        double* dx = px->grad.data() + n * D;
        for (std::size_t d = 0; d < D; ++d) dx[d] += dg[d] / counts[k];
      }
    });
  }
  return out;
}

}  // namespace prolad::ops
