#pragma once

#include "bcosdiff/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace bcosdiff {

/// Stride and zero padding of a 2-D cross-correlation.
struct Conv2dParams {
  Index stride_h = 1;
  Index stride_w = 1;
  Index pad_h = 0;
  Index pad_w = 0;

  static Conv2dParams same(Index kernel, Index stride = 1) {
    return {stride, stride, kernel / 2, kernel / 2};
  }
};

namespace detail {

template <typename S>
using RowMatrix = typename Tensor<S>::RowMatrix;
template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using CMatMap = Eigen::Map<const RowMatrix<S>>;

inline Index conv_out_size(Index in, Index k, Index stride, Index pad) {
  const Index span = in + 2 * pad - k;
  return span < 0 ? 0 : span / stride + 1;
}

struct PatchGeometry {
  Index channels, height, width, kh, kw, out_h, out_w;
  Conv2dParams p;
  Index rows() const { return channels * kh * kw; }
  Index cols() const { return out_h * out_w; }
};

inline PatchGeometry patch_geometry(const Shape& input, Index kh, Index kw, const Conv2dParams& p) {
  if (input.size() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + to_string(input));
  if (p.stride_h < 1 || p.stride_w < 1 || p.pad_h < 0 || p.pad_w < 0) throw ShapeError("conv2d: invalid stride/padding");
  PatchGeometry g{input[1], input[2], input[3], kh, kw, conv_out_size(input[2], kh, p.stride_h, p.pad_h),
                  conv_out_size(input[3], kw, p.stride_w, p.pad_w), p};
  if (g.out_h < 1 || g.out_w < 1) throw ShapeError("conv2d: non-positive output size for input " + to_string(input));
  return g;
}

// Unfolds one sample [C,H,W] into patch columns [C*kh*kw, out_h*out_w].
template <typename S>
void im2col(const S* x, const PatchGeometry& g, RowMatrix<S>& cols) {
  cols.resize(g.rows(), g.cols());
  for (Index c = 0; c < g.channels; ++c) {
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        S* row = cols.data() + ((c * g.kh + i) * g.kw + j) * g.cols();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index y = oy * g.p.stride_h - g.p.pad_h + i;
          S* dst = row + oy * g.out_w;
          if (y < 0 || y >= g.height) {
            std::fill(dst, dst + g.out_w, S(0));
            continue;
          }
          const S* src = x + (c * g.height + y) * g.width;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index xx = ox * g.p.stride_w - g.p.pad_w + j;
            dst[ox] = (xx < 0 || xx >= g.width) ? S(0) : src[xx];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates patch columns back into one sample.
template <typename S>
void col2im(const RowMatrix<S>& cols, const PatchGeometry& g, S* x) {
  for (Index c = 0; c < g.channels; ++c) {
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const S* row = cols.data() + ((c * g.kh + i) * g.kw + j) * g.cols();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index y = oy * g.p.stride_h - g.p.pad_h + i;
          if (y < 0 || y >= g.height) continue;
          S* dst = x + (c * g.height + y) * g.width;
          const S* src = row + oy * g.out_w;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index xx = ox * g.p.stride_w - g.p.pad_w + j;
            if (xx >= 0 && xx < g.width) dst[xx] += src[ox];
          }
        }
      }
    }
  }
}

template <typename S>
void accumulate(Tensor<S>* g, const typename Tensor<S>::Array& delta) {
  if (g) g->array() += delta;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
class AddOp final : public Op<S> {
 public:
  const char* name() const override { return "add"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    require_same_shape(in[0]->shape(), in[1]->shape(), "add");
    return Tensor<S>(in[0]->shape(), in[0]->array() + in[1]->array());
  }
  void backward(const TensorRefs<S>&, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    detail::accumulate(gin[0], g.array());
    detail::accumulate(gin[1], g.array());
  }
};

template <typename S>
class SubOp final : public Op<S> {
 public:
  const char* name() const override { return "sub"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    require_same_shape(in[0]->shape(), in[1]->shape(), "sub");
    return Tensor<S>(in[0]->shape(), in[0]->array() - in[1]->array());
  }
  void backward(const TensorRefs<S>&, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    detail::accumulate(gin[0], g.array());
    if (gin[1]) gin[1]->array() -= g.array();
  }
};

template <typename S>
class MulOp final : public Op<S> {
 public:
  const char* name() const override { return "mul"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    require_same_shape(in[0]->shape(), in[1]->shape(), "mul");
    return Tensor<S>(in[0]->shape(), in[0]->array() * in[1]->array());
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (gin[0]) gin[0]->array() += g.array() * in[1]->array();
    if (gin[1]) gin[1]->array() += g.array() * in[0]->array();
  }
};

/// scale * a + shift, with constant scale and shift.
template <typename S>
class AffineOp final : public Op<S> {
 public:
  AffineOp(S scale, S shift) : scale_(scale), shift_(shift) {}
  const char* name() const override { return "affine"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    return Tensor<S>(in[0]->shape(), scale_ * in[0]->array() + shift_);
  }
  void backward(const TensorRefs<S>&, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (gin[0]) gin[0]->array() += scale_ * g.array();
  }

 private:
  S scale_, shift_;
};

/// |a|^p for p >= 0, with 0^0 = 1.
template <typename S>
class AbsPowOp final : public Op<S> {
 public:
  explicit AbsPowOp(S p) : p_(p) {
    if (!(p >= 0)) throw ConfigError("abs_pow: exponent must be >= 0");
  }
  const char* name() const override { return "abs_pow"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    if (p_ == S(0)) return Tensor<S>::full(in[0]->shape(), S(1));
    if (p_ == S(1)) return Tensor<S>(in[0]->shape(), in[0]->array().abs());
    return Tensor<S>(in[0]->shape(), in[0]->array().abs().pow(p_));
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (!gin[0] || p_ == S(0)) return;
    const auto& a = in[0]->array();
    auto& ga = gin[0]->array();
    for (Index i = 0; i < a.size(); ++i) {
      const S v = a[i];
      if (v == S(0)) continue;
      const S mag = p_ == S(1) ? S(1) : p_ * std::pow(std::abs(v), p_ - S(1));
      ga[i] += g[i] * (v > 0 ? mag : -mag);
    }
  }

 private:
  S p_;
};

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
class SumOp final : public Op<S> {
 public:
  const char* name() const override { return "sum"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override { return Tensor<S>::scalar(in[0]->array().sum()); }
  void backward(const TensorRefs<S>&, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (gin[0]) gin[0]->array() += g[0];
  }
};

/// Mean squared difference of two same-shaped tensors.
template <typename S>
class MseOp final : public Op<S> {
 public:
  const char* name() const override { return "mse"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    require_same_shape(in[0]->shape(), in[1]->shape(), "mse");
    return Tensor<S>::scalar((in[0]->array() - in[1]->array()).square().mean());
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    const S k = S(2) * g[0] / static_cast<S>(in[0]->size());
    if (gin[0]) gin[0]->array() += k * (in[0]->array() - in[1]->array());
    if (gin[1]) gin[1]->array() -= k * (in[0]->array() - in[1]->array());
  }
};

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename S>
class ReshapeOp final : public Op<S> {
 public:
  explicit ReshapeOp(Shape shape) : shape_(std::move(shape)) {}
  const char* name() const override { return "reshape"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override { return in[0]->reshaped(shape_); }
  void backward(const TensorRefs<S>&, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (gin[0]) gin[0]->array() += g.array();
  }

 private:
  Shape shape_;
};

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename S>
class TransposeOp final : public Op<S> {
 public:
  const char* name() const override { return "transpose"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override { return apply(*in[0]); }
  void backward(const TensorRefs<S>&, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (gin[0]) gin[0]->array() += apply(g).array();
  }

 private:
  static Tensor<S> apply(const Tensor<S>& a) {
    if (a.rank() != 2 && a.rank() != 3) throw ShapeError("transpose: rank 2 or 3 expected, got " + to_string(a.shape()));
    const Index b = a.rank() == 3 ? a.dim(0) : 1;
    const Index m = a.dim(-2), n = a.dim(-1);
    Shape out = a.shape();
    std::swap(out[out.size() - 1], out[out.size() - 2]);
    Tensor<S> r(out);
    for (Index k = 0; k < b; ++k) {
      detail::MatMap<S>(r.data() + k * m * n, n, m) = detail::CMatMap<S>(a.data() + k * m * n, m, n).transpose();
    }
    return r;
  }
};

/// Concatenation along axis 1 of tensors shaped [N, C_i, ...].
template <typename S>
class ConcatChannelsOp final : public Op<S> {
 public:
  const char* name() const override { return "concat_channels"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Tensor<S>& a = *in[0];
    if (a.rank() < 2) throw ShapeError("concat_channels: rank >= 2 expected");
    Shape out = a.shape();
    out[1] = 0;
    for (const auto* t : in) {
      if (t->rank() != a.rank() || t->dim(0) != a.dim(0)) throw ShapeError("concat_channels: shape mismatch");
      for (Index d = 2; d < a.rank(); ++d) {
        if (t->dim(d) != a.dim(d)) throw ShapeError("concat_channels: trailing shape mismatch");
      }
      out[1] += t->dim(1);
    }
    Tensor<S> r(out);
    const Index n = a.dim(0), inner = a.size() / (a.dim(0) * a.dim(1));
    Index off = 0;
    for (const auto* t : in) {
      const Index block = t->dim(1) * inner;
      for (Index s = 0; s < n; ++s) {
        std::copy_n(t->data() + s * block, block, r.data() + s * out[1] * inner + off);
      }
      off += block;
    }
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>& out, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    const Index n = out.dim(0), c = out.dim(1), inner = out.size() / (n * c);
    Index off = 0;
    for (std::size_t k = 0; k < in.size(); ++k) {
      const Index block = in[k]->dim(1) * inner;
      if (gin[k]) {
        for (Index s = 0; s < n; ++s) {
          Eigen::Map<typename Tensor<S>::Array>(gin[k]->data() + s * block, block) +=
              Eigen::Map<const typename Tensor<S>::Array>(g.data() + s * c * inner + off, block);
        }
      }
      off += block;
    }
  }
};

/// Columns [begin, begin+len) of the last axis.
template <typename S>
class SliceLastOp final : public Op<S> {
 public:
  SliceLastOp(Index begin, Index len) : begin_(begin), len_(len) {}
  const char* name() const override { return "slice_last"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Tensor<S>& a = *in[0];
    const Index n = a.dim(-1);
    if (begin_ < 0 || len_ < 1 || begin_ + len_ > n) throw ShapeError("slice_last: range out of bounds");
    Shape out = a.shape();
    out.back() = len_;
    Tensor<S> r(out);
    const Index rows = a.size() / n;
    r.matrix(rows) = a.matrix(rows).middleCols(begin_, len_);
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (!gin[0]) return;
    const Index rows = in[0]->size() / in[0]->dim(-1);
    gin[0]->matrix(rows).middleCols(begin_, len_) += g.matrix(rows);
  }

 private:
  Index begin_, len_;
};

template <typename S>
class ConcatLastOp final : public Op<S> {
 public:
  const char* name() const override { return "concat_last"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    Shape out = in[0]->shape();
    const Index rows = in[0]->size() / in[0]->dim(-1);
    out.back() = 0;
    for (const auto* t : in) {
      if (t->rank() != in[0]->rank() || t->size() / t->dim(-1) != rows) throw ShapeError("concat_last: shape mismatch");
      out.back() += t->dim(-1);
    }
    Tensor<S> r(out);
    Index off = 0;
    for (const auto* t : in) {
      r.matrix(rows).middleCols(off, t->dim(-1)) = t->matrix(rows);
      off += t->dim(-1);
    }
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    const Index rows = in[0]->size() / in[0]->dim(-1);
    Index off = 0;
    for (std::size_t k = 0; k < in.size(); ++k) {
      if (gin[k]) gin[k]->matrix(rows) += g.matrix(rows).middleCols(off, in[k]->dim(-1));
      off += in[k]->dim(-1);
    }
  }
};

/// [N,C] -> [N,C,H,W] by spatial replication.
template <typename S>
class BroadcastSpatialOp final : public Op<S> {
 public:
  BroadcastSpatialOp(Index h, Index w) : h_(h), w_(w) {}
  const char* name() const override { return "broadcast_spatial"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Tensor<S>& v = *in[0];
    if (v.rank() != 2) throw ShapeError("broadcast_spatial: [N,C] expected");
    Tensor<S> r({v.dim(0), v.dim(1), h_, w_});
    const Index hw = h_ * w_;
    for (Index i = 0; i < v.size(); ++i) std::fill_n(r.data() + i * hw, hw, v[i]);
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (!gin[0]) return;
    gin[0]->array() += g.matrix(in[0]->size()).rowwise().sum().array();
  }

 private:
  Index h_, w_;
};

template <typename S>
class UpsampleNearest2xOp final : public Op<S> {
 public:
  const char* name() const override { return "upsample_nearest2x"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Tensor<S>& x = *in[0];
    if (x.rank() != 4) throw ShapeError("upsample: [N,C,H,W] expected");
    const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<S> r({x.dim(0), x.dim(1), 2 * h, 2 * w});
    for (Index p = 0; p < planes; ++p) {
      const S* src = x.data() + p * h * w;
      S* dst = r.data() + p * 4 * h * w;
      for (Index y = 0; y < 2 * h; ++y) {
        for (Index xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
      }
    }
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (!gin[0]) return;
    const Tensor<S>& x = *in[0];
    const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    for (Index p = 0; p < planes; ++p) {
      const S* src = g.data() + p * 4 * h * w;
      S* dst = gin[0]->data() + p * h * w;
      for (Index y = 0; y < 2 * h; ++y) {
        for (Index xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product. Supports [m,k]x[k,n], [B,m,k]x[k,n] (shared right operand)
/// and [B,m,k]x[B,k,n] (batched).
template <typename S>
class MatmulOp final : public Op<S> {
 public:
  const char* name() const override { return "matmul"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Tensor<S>& a = *in[0];
    const Tensor<S>& b = *in[1];
    const Dims d = dims(a, b);
    Shape out = a.shape();
    out.back() = d.n;
    Tensor<S> r(out);
    if (!d.batched_rhs) {
      r.matrix(d.batch * d.m).noalias() = a.matrix(d.batch * d.m) * b.matrix(d.k);
    } else {
      for (Index i = 0; i < d.batch; ++i) {
        detail::MatMap<S>(r.data() + i * d.m * d.n, d.m, d.n).noalias() =
            detail::CMatMap<S>(a.data() + i * d.m * d.k, d.m, d.k) * detail::CMatMap<S>(b.data() + i * d.k * d.n, d.k, d.n);
      }
    }
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    const Tensor<S>& a = *in[0];
    const Tensor<S>& b = *in[1];
    const Dims d = dims(a, b);
    if (!d.batched_rhs) {
      if (gin[0]) gin[0]->matrix(d.batch * d.m).noalias() += g.matrix(d.batch * d.m) * b.matrix(d.k).transpose();
      if (gin[1]) gin[1]->matrix(d.k).noalias() += a.matrix(d.batch * d.m).transpose() * g.matrix(d.batch * d.m);
      return;
    }
    for (Index i = 0; i < d.batch; ++i) {
      detail::CMatMap<S> ai(a.data() + i * d.m * d.k, d.m, d.k);
      detail::CMatMap<S> bi(b.data() + i * d.k * d.n, d.k, d.n);
      detail::CMatMap<S> gi(g.data() + i * d.m * d.n, d.m, d.n);
      if (gin[0]) detail::MatMap<S>(gin[0]->data() + i * d.m * d.k, d.m, d.k).noalias() += gi * bi.transpose();
      if (gin[1]) detail::MatMap<S>(gin[1]->data() + i * d.k * d.n, d.k, d.n).noalias() += ai.transpose() * gi;
    }
  }

 private:
  struct Dims {
    Index batch, m, k, n;
    bool batched_rhs;
  };
  static Dims dims(const Tensor<S>& a, const Tensor<S>& b) {
    const auto fail = [&] { return ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape())); };
    if (a.rank() == 2 && b.rank() == 2) {
      if (a.dim(1) != b.dim(0)) throw fail();
      return {1, a.dim(0), a.dim(1), b.dim(1), false};
    }
    if (a.rank() == 3 && b.rank() == 2) {
      if (a.dim(2) != b.dim(0)) throw fail();
      return {a.dim(0), a.dim(1), a.dim(2), b.dim(1), false};
    }
    if (a.rank() == 3 && b.rank() == 3) {
      if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) throw fail();
      return {a.dim(0), a.dim(1), a.dim(2), b.dim(2), true};
    }
    throw fail();
  }
};

/// Cross-correlation of [N,C,H,W] with [F,C,kh,kw] (no kernel flip, no bias).
template <typename S>
class Conv2dOp final : public Op<S> {
 public:
  explicit Conv2dOp(Conv2dParams p) : p_(p) {}
  const char* name() const override { return "conv2d"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Tensor<S>& x = *in[0];
    const Tensor<S>& k = *in[1];
    const auto g = geometry(x, k);
    const Index n = x.dim(0), f = k.dim(0);
    Tensor<S> out({n, f, g.out_h, g.out_w});
    detail::RowMatrix<S> cols;
    const auto kmat = k.matrix(f);
    for (Index s = 0; s < n; ++s) {
      detail::im2col(x.data() + s * x.size() / n, g, cols);
      detail::MatMap<S>(out.data() + s * f * g.cols(), f, g.cols()).noalias() = kmat * cols;
    }
    return out;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& grad,
                const std::vector<Tensor<S>*>& gin) const override {
    const Tensor<S>& x = *in[0];
    const Tensor<S>& k = *in[1];
    const auto g = geometry(x, k);
    const Index n = x.dim(0), f = k.dim(0);
    detail::RowMatrix<S> cols, dcols;
    const auto kmat = k.matrix(f);
    for (Index s = 0; s < n; ++s) {
      detail::CMatMap<S> gs(grad.data() + s * f * g.cols(), f, g.cols());
      if (gin[1]) {
        detail::im2col(x.data() + s * x.size() / n, g, cols);
        gin[1]->matrix(f).noalias() += gs * cols.transpose();
      }
      if (gin[0]) {
        dcols.noalias() = kmat.transpose() * gs;
        detail::col2im(dcols, g, gin[0]->data() + s * x.size() / n);
      }
    }
  }

 private:
  detail::PatchGeometry geometry(const Tensor<S>& x, const Tensor<S>& k) const {
    if (k.rank() != 4) throw ShapeError("conv2d: kernel must be [F,C,kh,kw], got " + to_string(k.shape()));
    if (x.rank() != 4 || x.dim(1) != k.dim(1)) {
      throw ShapeError("conv2d: channel mismatch between input " + to_string(x.shape()) + " and kernel " + to_string(k.shape()));
    }
    return detail::patch_geometry(x.shape(), k.dim(2), k.dim(3), p_);
  }
  Conv2dParams p_;
};

/// Euclidean norm of every convolution patch: [N,C,H,W] -> [N,1,H',W'].
template <typename S>
class PatchNormOp final : public Op<S> {
 public:
  PatchNormOp(Index kh, Index kw, Conv2dParams p) : kh_(kh), kw_(kw), p_(p) {}
  const char* name() const override { return "patch_norm"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Tensor<S>& x = *in[0];
    const auto g = detail::patch_geometry(x.shape(), kh_, kw_, p_);
    const Index n = x.dim(0);
    Tensor<S> out({n, 1, g.out_h, g.out_w});
    detail::RowMatrix<S> cols;
    for (Index s = 0; s < n; ++s) {
      detail::im2col(x.data() + s * x.size() / n, g, cols);
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(out.data() + s * g.cols(), g.cols()) =
          cols.colwise().squaredNorm().cwiseSqrt();
    }
    return out;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>& out, const Tensor<S>& grad,
                const std::vector<Tensor<S>*>& gin) const override {
    if (!gin[0]) return;
    const Tensor<S>& x = *in[0];
    const auto g = detail::patch_geometry(x.shape(), kh_, kw_, p_);
    const Index n = x.dim(0);
    detail::RowMatrix<S> cols;
    Eigen::Matrix<S, 1, Eigen::Dynamic> scale(g.cols());
    for (Index s = 0; s < n; ++s) {
      detail::im2col(x.data() + s * x.size() / n, g, cols);
      for (Index p = 0; p < g.cols(); ++p) {
        const S norm = out[s * g.cols() + p];
        scale[p] = norm > S(0) ? grad[s * g.cols() + p] / norm : S(0);
      }
      cols.array().rowwise() *= scale.array();
      detail::col2im(cols, g, gin[0]->data() + s * x.size() / n);
    }
  }

 private:
  Index kh_, kw_;
  Conv2dParams p_;
};

/// Norm over the last axis: [..., k] -> [..., 1].
template <typename S>
class RowNormOp final : public Op<S> {
 public:
  const char* name() const override { return "row_norm"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Tensor<S>& a = *in[0];
    const Index rows = a.size() / a.dim(-1);
    Shape out = a.shape();
    out.back() = 1;
    Tensor<S> r(out);
    r.array() = a.matrix(rows).rowwise().norm().array();
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>& out, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (!gin[0]) return;
    const Index rows = in[0]->size() / in[0]->dim(-1);
    auto ga = gin[0]->matrix(rows);
    const auto a = in[0]->matrix(rows);
    for (Index r = 0; r < rows; ++r) {
      if (out[r] > S(0)) ga.row(r) += (g[r] / out[r]) * a.row(r);
    }
  }
};

/// Scales each row of a [rows, ...] weight (flattened beyond axis 0) to unit norm.
template <typename S>
class NormalizeRowsOp final : public Op<S> {
 public:
  const char* name() const override { return "normalize_rows"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Tensor<S>& w = *in[0];
    const Index rows = w.dim(0);
    Tensor<S> r(w.shape());
    const auto wm = w.matrix(rows);
    for (Index i = 0; i < rows; ++i) {
      const S norm = wm.row(i).norm();
      if (!(norm > S(0)) || !std::isfinite(norm)) {
        throw ConfigError("weight row " + std::to_string(i) + " is zero or non-finite");
      }
      r.matrix(rows).row(i) = wm.row(i) / norm;
    }
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>& out, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (!gin[0]) return;
    const Index rows = in[0]->dim(0);
    const auto wm = in[0]->matrix(rows);
    const auto u = out.matrix(rows);
    const auto gm = g.matrix(rows);
    auto gw = gin[0]->matrix(rows);
    for (Index i = 0; i < rows; ++i) {
      const S norm = wm.row(i).norm();
      gw.row(i) += (gm.row(i) - gm.row(i).dot(u.row(i)) * u.row(i)) / norm;
    }
  }
};

/// cos = L / n where L is [outer, F, inner...] and n is [outer, 1, inner...];
/// zero wherever n is zero.
template <typename S>
class CosineOp final : public Op<S> {
 public:
  const char* name() const override { return "cosine"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const auto [outer, f, inner] = dims(*in[0], *in[1]);
    Tensor<S> r(in[0]->shape());
    for (Index o = 0; o < outer; ++o) {
      for (Index c = 0; c < f; ++c) {
        const S* l = in[0]->data() + (o * f + c) * inner;
        const S* n = in[1]->data() + o * inner;
        S* dst = r.data() + (o * f + c) * inner;
        for (Index i = 0; i < inner; ++i) dst[i] = n[i] > S(0) ? l[i] / n[i] : S(0);
      }
    }
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    const auto [outer, f, inner] = dims(*in[0], *in[1]);
    for (Index o = 0; o < outer; ++o) {
      const S* n = in[1]->data() + o * inner;
      for (Index c = 0; c < f; ++c) {
        const Index base = (o * f + c) * inner;
        const S* l = in[0]->data() + base;
        const S* gg = g.data() + base;
        for (Index i = 0; i < inner; ++i) {
          if (!(n[i] > S(0))) continue;
          if (gin[0]) (*gin[0])[base + i] += gg[i] / n[i];
          if (gin[1]) (*gin[1])[o * inner + i] -= gg[i] * l[i] / (n[i] * n[i]);
        }
      }
    }
  }

 private:
  struct Dims {
    Index outer, f, inner;
  };
  static Dims dims(const Tensor<S>& l, const Tensor<S>& n) {
    if (l.rank() < 2 || n.rank() != l.rank() || n.dim(1) != 1 || n.dim(0) != l.dim(0) ||
        n.size() * l.dim(1) != l.size()) {
      throw ShapeError("cosine: incompatible " + to_string(l.shape()) + " and norms " + to_string(n.shape()));
    }
    return {l.dim(0), l.dim(1), l.size() / (l.dim(0) * l.dim(1))};
  }
};

// ---------------------------------------------------------------------------
// Normalization

/// Per-sample inverse RMS over all non-batch axes: [N,...] -> [N].
template <typename S>
class RmsInvOp final : public Op<S> {
 public:
  explicit RmsInvOp(S eps) : eps_(eps) {}
  const char* name() const override { return "rms_inv"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Index n = in[0]->dim(0);
    Tensor<S> r({n});
    const auto x = in[0]->matrix(n);
    r.array() = (x.rowwise().squaredNorm().array() / static_cast<S>(x.cols()) + eps_).rsqrt();
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>& out, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (!gin[0]) return;
    const Index n = in[0]->dim(0);
    const auto x = in[0]->matrix(n);
    auto gx = gin[0]->matrix(n);
    const S m = static_cast<S>(x.cols());
    for (Index s = 0; s < n; ++s) gx.row(s) -= (g[s] * out[s] * out[s] * out[s] / m) * x.row(s);
  }

 private:
  S eps_;
};

/// x[n, ...] * s[n].
template <typename S>
class ScaleSamplesOp final : public Op<S> {
 public:
  const char* name() const override { return "scale_samples"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Index n = in[0]->dim(0);
    if (in[1]->rank() != 1 || in[1]->dim(0) != n) throw ShapeError("scale_samples: scale must be [N]");
    Tensor<S> r(in[0]->shape());
    r.matrix(n) = in[1]->array().matrix().asDiagonal() * in[0]->matrix(n);
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    const Index n = in[0]->dim(0);
    if (gin[0]) gin[0]->matrix(n) += in[1]->array().matrix().asDiagonal() * g.matrix(n);
    if (gin[1]) gin[1]->array() += g.matrix(n).cwiseProduct(in[0]->matrix(n)).rowwise().sum().array();
  }
};

// ---------------------------------------------------------------------------
// Attention and embeddings

/// Row softmax over the last axis of [N,n,m] scores, restricted to unmasked
/// key positions; masked positions receive exactly zero weight.
template <typename S>
class MaskedSoftmaxOp final : public Op<S> {
 public:
  /// `mask` is [N*m], true = attendable.
  explicit MaskedSoftmaxOp(std::vector<char> mask) : mask_(std::move(mask)) {}
  const char* name() const override { return "masked_softmax"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Tensor<S>& a = *in[0];
    if (a.rank() != 3 || static_cast<Index>(mask_.size()) != a.dim(0) * a.dim(2)) {
      throw ShapeError("masked_softmax: scores " + to_string(a.shape()) + " do not match mask");
    }
    const Index nb = a.dim(0), n = a.dim(1), m = a.dim(2);
    Tensor<S> r(a.shape());
    for (Index b = 0; b < nb; ++b) {
      const char* mk = mask_.data() + b * m;
      if (std::none_of(mk, mk + m, [](char c) { return c != 0; })) {
        throw DataError("attention: every conditioning position is masked");
      }
      for (Index i = 0; i < n; ++i) {
        const S* src = a.data() + (b * n + i) * m;
        S* dst = r.data() + (b * n + i) * m;
        S mx = -std::numeric_limits<S>::infinity();
        for (Index j = 0; j < m; ++j) {
          if (mk[j]) mx = std::max(mx, src[j]);
        }
        S total = 0;
        for (Index j = 0; j < m; ++j) {
          dst[j] = mk[j] ? std::exp(src[j] - mx) : S(0);
          total += dst[j];
        }
        for (Index j = 0; j < m; ++j) dst[j] /= total;
      }
    }
    return r;
  }
  void backward(const TensorRefs<S>&, const Tensor<S>& out, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    if (!gin[0]) return;
    const Index rows = out.size() / out.dim(-1);
    const auto a = out.matrix(rows);
    const auto gm = g.matrix(rows);
    const auto dot = a.cwiseProduct(gm).rowwise().sum();
    gin[0]->matrix(rows).array() += a.array() * (gm.colwise() - dot).array();
  }

 private:
  std::vector<char> mask_;
};

/// Token lookup plus positional embedding, zeroed at masked positions:
/// table [V,d], positional [L,d] -> [N,L,d].
template <typename S>
class EmbedOp final : public Op<S> {
 public:
  EmbedOp(std::vector<int> ids, std::vector<char> mask, Index batch) : ids_(std::move(ids)), mask_(std::move(mask)), batch_(batch) {}
  const char* name() const override { return "embed"; }
  Tensor<S> forward(const TensorRefs<S>& in) const override {
    const Tensor<S>& table = *in[0];
    const Tensor<S>& pos = *in[1];
    const Index len = pos.dim(0), d = pos.dim(1);
    if (table.dim(1) != d || static_cast<Index>(ids_.size()) != batch_ * len || mask_.size() != ids_.size()) {
      throw ShapeError("embed: inconsistent table/positional/id shapes");
    }
    Tensor<S> r({batch_, len, d});
    auto out = r.matrix(batch_ * len);
    for (Index k = 0; k < batch_ * len; ++k) {
      if (!mask_[k]) continue;
      const int id = ids_[k];
      if (id < 0 || id >= table.dim(0)) throw DataError("embed: token id " + std::to_string(id) + " out of vocabulary");
      out.row(k) = table.matrix(table.dim(0)).row(id) + pos.matrix(len).row(k % len);
    }
    return r;
  }
  void backward(const TensorRefs<S>& in, const Tensor<S>&, const Tensor<S>& g,
                const std::vector<Tensor<S>*>& gin) const override {
    const Index len = in[1]->dim(0);
    const auto gm = g.matrix(batch_ * len);
    for (Index k = 0; k < batch_ * len; ++k) {
      if (!mask_[k]) continue;
      if (gin[0]) gin[0]->matrix(in[0]->dim(0)).row(ids_[k]) += gm.row(k);
      if (gin[1]) gin[1]->matrix(len).row(k % len) += gm.row(k);
    }
  }

 private:
  std::vector<int> ids_;
  std::vector<char> mask_;
  Index batch_;
};

// ---------------------------------------------------------------------------
// Free-function front end

template <typename S, typename OpT, typename... Args>
Var<S> make_op(const std::vector<Var<S>>& inputs, Args&&... args) {
  return inputs.front().tape().apply(std::make_shared<const OpT>(std::forward<Args>(args)...), inputs);
}

template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b) { return make_op<S, AddOp<S>>({a, b}); }
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b) { return make_op<S, SubOp<S>>({a, b}); }
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b) { return make_op<S, MulOp<S>>({a, b}); }
template <typename S> Var<S> affine(const Var<S>& a, S scale, S shift = S(0)) { return make_op<S, AffineOp<S>>({a}, scale, shift); }
template <typename S> Var<S> abs_pow(const Var<S>& a, S p) { return make_op<S, AbsPowOp<S>>({a}, p); }
template <typename S> Var<S> sum(const Var<S>& a) { return make_op<S, SumOp<S>>({a}); }
template <typename S> Var<S> mse(const Var<S>& a, const Var<S>& b) { return make_op<S, MseOp<S>>({a, b}); }
template <typename S> Var<S> reshape(const Var<S>& a, Shape shape) { return make_op<S, ReshapeOp<S>>({a}, std::move(shape)); }
template <typename S> Var<S> transpose(const Var<S>& a) { return make_op<S, TransposeOp<S>>({a}); }
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b) { return make_op<S, MatmulOp<S>>({a, b}); }
template <typename S> Var<S> conv2d(const Var<S>& x, const Var<S>& k, Conv2dParams p = {}) { return make_op<S, Conv2dOp<S>>({x, k}, p); }
template <typename S> Var<S> patch_norm(const Var<S>& x, Index kh, Index kw, Conv2dParams p = {}) { return make_op<S, PatchNormOp<S>>({x}, kh, kw, p); }
template <typename S> Var<S> row_norm(const Var<S>& a) { return make_op<S, RowNormOp<S>>({a}); }
template <typename S> Var<S> normalize_rows(const Var<S>& w) { return make_op<S, NormalizeRowsOp<S>>({w}); }
template <typename S> Var<S> cosine(const Var<S>& l, const Var<S>& n) { return make_op<S, CosineOp<S>>({l, n}); }
template <typename S> Var<S> rms_inv(const Var<S>& x, S eps) { return make_op<S, RmsInvOp<S>>({x}, eps); }
template <typename S> Var<S> scale_samples(const Var<S>& x, const Var<S>& s) { return make_op<S, ScaleSamplesOp<S>>({x, s}); }
template <typename S> Var<S> concat_channels(const std::vector<Var<S>>& xs) { return make_op<S, ConcatChannelsOp<S>>(xs); }
template <typename S> Var<S> concat_last(const std::vector<Var<S>>& xs) { return make_op<S, ConcatLastOp<S>>(xs); }
template <typename S> Var<S> slice_last(const Var<S>& a, Index begin, Index len) { return make_op<S, SliceLastOp<S>>({a}, begin, len); }
template <typename S> Var<S> broadcast_spatial(const Var<S>& v, Index h, Index w) { return make_op<S, BroadcastSpatialOp<S>>({v}, h, w); }
template <typename S> Var<S> upsample_nearest2x(const Var<S>& x) { return make_op<S, UpsampleNearest2xOp<S>>({x}); }
template <typename S> Var<S> masked_softmax(const Var<S>& scores, std::vector<char> mask) {
  return make_op<S, MaskedSoftmaxOp<S>>({scores}, std::move(mask));
}
template <typename S> Var<S> embed(const Var<S>& table, const Var<S>& pos, std::vector<int> ids, std::vector<char> mask, Index batch) {
  return make_op<S, EmbedOp<S>>({table, pos}, std::move(ids), std::move(mask), batch);
}

}  // namespace bcosdiff
