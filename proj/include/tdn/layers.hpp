#pragma once

// Layer kernels shared by training (any Scalar) and the reference paths.
// Activations are NHWC; a single sample is a (pixels x channels) row-major
// matrix, so a convolution is im2col followed by one GEMM.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "tdn/archdsl.hpp"
#include "tdn/tensor.hpp"

namespace tdn {

struct ConvGeometry {
  int in_h = 0, in_w = 0, in_c = 0;
  int out_h = 0, out_w = 0, out_c = 0;
  int kernel = 1, stride = 1;
  int pad_top = 0, pad_left = 0;

  Eigen::Index out_pixels() const { return static_cast<Eigen::Index>(out_h) * out_w; }
  Eigen::Index taps() const { return static_cast<Eigen::Index>(kernel) * kernel * in_c; }
  /// 1x1, stride 1, no padding: the input already is the im2col matrix.
  bool is_pointwise() const { return kernel == 1 && stride == 1 && pad_top == 0 && pad_left == 0; }
};

inline ConvGeometry conv_geometry(const TensorShape& in, const TensorShape& out, int kernel, int stride,
                                  Padding padding) {
  ConvGeometry g;
  g.in_h = in.height;
  g.in_w = in.width;
  g.in_c = in.channels;
  g.out_h = out.height;
  g.out_w = out.width;
  g.out_c = out.channels;
  g.kernel = kernel;
  g.stride = stride;
  g.pad_top = conv_padding_before(in.height, out.height, kernel, stride, padding);
  g.pad_left = conv_padding_before(in.width, out.width, kernel, stride, padding);
  return g;
}

/// Geometry of conv / dwconv / maxpool node i of a shape-inferred graph.
inline ConvGeometry node_geometry(const ArchGraph& graph, int i) {
  const TensorShape& in = graph.resolved_shapes[graph.inputs_of(i)[0]];
  const TensorShape& out = graph.resolved_shapes[i];
  const auto& kind = graph.nodes[i].kind;
  if (const auto* c = std::get_if<ConvLayer>(&kind)) return conv_geometry(in, out, c->kernel, c->stride, c->padding);
  if (const auto* d = std::get_if<DepthwiseConvLayer>(&kind)) {
    return conv_geometry(in, out, d->kernel, d->stride, d->padding);
  }
  if (const auto* m = std::get_if<MaxPoolLayer>(&kind)) {
    return conv_geometry(in, out, m->kernel, m->stride, Padding::Valid);
  }
  return conv_geometry(in, out, 1, 1, Padding::Valid);
}

/// Output columns [lo, hi] whose input column ox*stride + kx - pad_left is inside the image.
inline void valid_columns(const ConvGeometry& g, int kx, int& lo, int& hi) {
  const int shift = g.pad_left - kx;  // ix = ox*stride - shift
  lo = shift > 0 ? (shift + g.stride - 1) / g.stride : 0;
  const int top = g.in_w - 1 + shift;
  hi = top < 0 ? -1 : std::min(g.out_w - 1, top / g.stride);
}

/// Patch matrix rows of output rows [oy_begin, oy_end), starting at col.
/// A kernel row of a patch is one contiguous run of k*c input values.
template <typename Scalar>
void im2col(const Scalar* in, const ConvGeometry& g, Scalar* col, int oy_begin, int oy_end) {
  const int k = g.kernel;
  const int c = g.in_c;
  const Eigen::Index taps = g.taps();
  Scalar* dst = col;
  for (int oy = oy_begin; oy < oy_end; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox, dst += taps) {
      const int x0 = ox * g.stride - g.pad_left;
      const int kx_lo = std::max(0, -x0);
      const int kx_hi = std::min(k, g.in_w - x0);
      for (int ky = 0; ky < k; ++ky) {
        Scalar* row = dst + ky * k * c;
        const int iy = oy * g.stride + ky - g.pad_top;
        const int kc = k * c;
#if defined(__AVX512F__)
        if constexpr (std::is_same_v<Scalar, float>) {
          if (kc <= 16) {
            const auto live = static_cast<__mmask16>((1u << kc) - 1u);
            __m512 v = _mm512_setzero_ps();
            if (iy >= 0 && iy < g.in_h && kx_hi > kx_lo) {
              const auto valid = static_cast<__mmask16>(((1u << (kx_hi * c)) - 1u) & ~((1u << (kx_lo * c)) - 1u));
              const Scalar* src = in + (static_cast<Eigen::Index>(iy) * g.in_w + x0 + kx_lo) * c;
              v = _mm512_maskz_loadu_ps(static_cast<__mmask16>(valid >> (kx_lo * c)), src);
              if (kx_lo > 0) v = _mm512_maskz_expand_ps(valid, v);
            }
            _mm512_mask_storeu_ps(row, live, v);
            continue;
          }
        }
#endif
        if (iy < 0 || iy >= g.in_h || kx_hi <= kx_lo) {
          for (int j = 0; j < kc; ++j) row[j] = Scalar(0);
          continue;
        }
        const int lo = kx_lo * c, hi = kx_hi * c;
        const Scalar* src = in + (static_cast<Eigen::Index>(iy) * g.in_w + x0) * c;
        for (int j = 0; j < lo; ++j) row[j] = Scalar(0);
        for (int j = lo; j < hi; ++j) row[j] = src[j];
        for (int j = hi; j < kc; ++j) row[j] = Scalar(0);
      }
    }
  }
}

/// (out_pixels x taps) row-major patch matrix of one sample.
template <typename Scalar>
void im2col(const Scalar* in, const ConvGeometry& g, Scalar* col) {
  im2col(in, g, col, 0, g.out_h);
}

/// Adjoint of im2col: accumulates patch gradients back into the image gradient.
template <typename Scalar>
void col2im_add(const Scalar* col, const ConvGeometry& g, Scalar* in_grad) {
  const int k = g.kernel;
  const int c = g.in_c;
  const Eigen::Index taps = g.taps();
  for (int oy = 0; oy < g.out_h; ++oy) {
    const Scalar* band = col + static_cast<Eigen::Index>(oy) * g.out_w * taps;
    for (int ky = 0; ky < k; ++ky) {
      const int iy = oy * g.stride + ky - g.pad_top;
      if (iy < 0 || iy >= g.in_h) continue;
      for (int kx = 0; kx < k; ++kx) {
        int lo, hi;
        valid_columns(g, kx, lo, hi);
        const Scalar* src = band + (ky * k + kx) * c;
        Scalar* dst = in_grad + (static_cast<Eigen::Index>(iy) * g.in_w + kx - g.pad_left) * c;
        for (int ox = lo; ox <= hi; ++ox) {
          const Scalar* s = src + ox * taps;
          Scalar* d = dst + static_cast<Eigen::Index>(ox) * g.stride * c;
          for (int ch = 0; ch < c; ++ch) d[ch] += s[ch];
        }
      }
    }
  }
}

/// out (pixels x Cout) = im2col(in) * weight.
template <typename Scalar>
void conv_forward_sample(const Scalar* in, const ConvGeometry& g, const RowMatrix<Scalar>& weight,
                         std::vector<Scalar>& scratch, Scalar* out) {
  Eigen::Map<RowMatrix<Scalar>> out_m(out, g.out_pixels(), g.out_c);
  if (g.is_pointwise()) {
    Eigen::Map<const RowMatrix<Scalar>> in_m(in, g.out_pixels(), g.in_c);
    out_m.noalias() = in_m * weight;
    return;
  }
  scratch.resize(static_cast<std::size_t>(g.out_pixels() * g.taps()));
  im2col(in, g, scratch.data());
  Eigen::Map<const RowMatrix<Scalar>> col(scratch.data(), g.out_pixels(), g.taps());
  out_m.noalias() = col * weight;
}

/// Accumulates the weight gradient and writes (adds) the input gradient.
template <typename Scalar>
void conv_backward_sample(const Scalar* in, const ConvGeometry& g, const RowMatrix<Scalar>& weight,
                          const Scalar* out_grad, std::vector<Scalar>& scratch, RowMatrix<Scalar>& weight_grad,
                          Scalar* in_grad) {
  Eigen::Map<const RowMatrix<Scalar>> dout(out_grad, g.out_pixels(), g.out_c);
  if (g.is_pointwise()) {
    Eigen::Map<const RowMatrix<Scalar>> in_m(in, g.out_pixels(), g.in_c);
    weight_grad.noalias() += in_m.transpose() * dout;
    if (in_grad) {
      Eigen::Map<RowMatrix<Scalar>> din(in_grad, g.out_pixels(), g.in_c);
      din.noalias() += dout * weight.transpose();
    }
    return;
  }
  scratch.resize(static_cast<std::size_t>(g.out_pixels() * g.taps()));
  im2col(in, g, scratch.data());
  {
    Eigen::Map<const RowMatrix<Scalar>> col(scratch.data(), g.out_pixels(), g.taps());
    weight_grad.noalias() += col.transpose() * dout;
  }
  if (in_grad) {
    Eigen::Map<RowMatrix<Scalar>> dcol(scratch.data(), g.out_pixels(), g.taps());
    dcol.noalias() = dout * weight.transpose();
    col2im_add(scratch.data(), g, in_grad);
  }
}

template <typename Scalar>
void depthwise_forward_sample(const Scalar* in, const ConvGeometry& g, const RowMatrix<Scalar>& weight,
                              Scalar* out) {
  const int c = g.in_c;
  for (int oy = 0; oy < g.out_h; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox) {
      Scalar* dst = out + (static_cast<Eigen::Index>(oy) * g.out_w + ox) * c;
      std::fill(dst, dst + c, Scalar(0));
      for (int ky = 0; ky < g.kernel; ++ky) {
        const int iy = oy * g.stride + ky - g.pad_top;
        if (iy < 0 || iy >= g.in_h) continue;
        for (int kx = 0; kx < g.kernel; ++kx) {
          const int ix = ox * g.stride + kx - g.pad_left;
          if (ix < 0 || ix >= g.in_w) continue;
          const Scalar* src = in + (static_cast<Eigen::Index>(iy) * g.in_w + ix) * c;
          const Scalar* w = weight.data() + (ky * g.kernel + kx) * c;
          for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch] * w[ch];
        }
      }
    }
  }
}

template <typename Scalar>
void depthwise_backward_sample(const Scalar* in, const ConvGeometry& g, const RowMatrix<Scalar>& weight,
                               const Scalar* out_grad, RowMatrix<Scalar>& weight_grad, Scalar* in_grad) {
  const int c = g.in_c;
  for (int oy = 0; oy < g.out_h; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox) {
      const Scalar* dy = out_grad + (static_cast<Eigen::Index>(oy) * g.out_w + ox) * c;
      for (int ky = 0; ky < g.kernel; ++ky) {
        const int iy = oy * g.stride + ky - g.pad_top;
        if (iy < 0 || iy >= g.in_h) continue;
        for (int kx = 0; kx < g.kernel; ++kx) {
          const int ix = ox * g.stride + kx - g.pad_left;
          if (ix < 0 || ix >= g.in_w) continue;
          const Eigen::Index offset = (static_cast<Eigen::Index>(iy) * g.in_w + ix) * c;
          const Scalar* src = in + offset;
          const Scalar* w = weight.data() + (ky * g.kernel + kx) * c;
          Scalar* dw = weight_grad.data() + (ky * g.kernel + kx) * c;
          for (int ch = 0; ch < c; ++ch) dw[ch] += dy[ch] * src[ch];
          if (in_grad) {
            Scalar* dx = in_grad + offset;
            for (int ch = 0; ch < c; ++ch) dx[ch] += dy[ch] * w[ch];
          }
        }
      }
    }
  }
}

/// Max pooling without padding; argmax receives the flat input offset of each output.
template <typename Scalar>
void maxpool_forward_sample(const Scalar* in, const ConvGeometry& g, Scalar* out, int* argmax) {
  const int c = g.in_c;
  for (int oy = 0; oy < g.out_h; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox) {
      const Eigen::Index o = (static_cast<Eigen::Index>(oy) * g.out_w + ox) * c;
      Scalar* best = out + o;
      int* best_at = argmax ? argmax + o : nullptr;
      for (int ky = 0; ky < g.kernel; ++ky) {
        for (int kx = 0; kx < g.kernel; ++kx) {
          const int base = ((oy * g.stride + ky) * g.in_w + ox * g.stride + kx) * c;
          const Scalar* src = in + base;
          if (ky == 0 && kx == 0) {
            std::copy(src, src + c, best);
            if (best_at) {
              for (int ch = 0; ch < c; ++ch) best_at[ch] = base + ch;
            }
          } else if (best_at) {
            for (int ch = 0; ch < c; ++ch) {
              if (src[ch] > best[ch]) {
                best[ch] = src[ch];
                best_at[ch] = base + ch;
              }
            }
          } else {
            for (int ch = 0; ch < c; ++ch) best[ch] = src[ch] > best[ch] ? src[ch] : best[ch];
          }
        }
      }
    }
  }
}

/// Folds batch-norm running statistics into a per-channel affine map y = a*x + b.
template <typename Scalar>
void bn_affine(const Vector<Scalar>& scale, const Vector<Scalar>& shift, const Vector<Scalar>& mean,
               const Vector<Scalar>& var, double eps, Vector<Scalar>& a, Vector<Scalar>& b) {
  a = (scale.array() / (var.array() + Scalar(eps)).sqrt()).matrix();
  b = (shift.array() - mean.array() * a.array()).matrix();
}

/// Numerically stable in-place softmax over each row.
template <typename Derived>
void softmax_rows(const Eigen::MatrixBase<Derived>& m_) {
  auto& m = const_cast<Eigen::MatrixBase<Derived>&>(m_);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const auto top = row.maxCoeff();
    row = (row.array() - top).exp().matrix();
    row /= row.sum();
  }
}

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

}  // namespace tdn
