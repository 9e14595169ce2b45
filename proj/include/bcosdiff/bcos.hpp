#pragma once

#include "bcosdiff/ops.hpp"
#include "bcosdiff/rng.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace bcosdiff {

/// What a learned tensor does. There is deliberately no additive-bias role.
enum class ParamRole { kBcosWeight, kQueryKey, kTokenTable, kPositional };

inline const char* role_name(ParamRole r) {
  switch (r) {
    case ParamRole::kBcosWeight: return "bcos_weight";
    case ParamRole::kQueryKey: return "query_key";
    case ParamRole::kTokenTable: return "token_table";
    case ParamRole::kPositional: return "positional";
  }
  return "?";
}

template <typename S>
struct Parameter {
  std::string name;
  ParamRole role = ParamRole::kBcosWeight;
  Tensor<S> value;
};

/// One forward evaluation on a tape: binds parameters to leaves (once each)
/// and routes dynamic coefficients through the tape's freeze policy.
template <typename S>
class Graph {
 public:
  Graph(Tape<S>& tape, bool track_params) : tape_(tape), track_params_(track_params) {}

  Tape<S>& tape() { return tape_; }
  Var<S> dynamic(const Var<S>& v) { return tape_.dynamic(v); }
  Var<S> constant(Tensor<S> t) { return tape_.leaf(std::move(t), false); }

  Var<S> param(const Parameter<S>& p) {
    auto it = leaves_.find(&p);
    if (it != leaves_.end()) return it->second;
    Var<S> v = tape_.leaf(p.value, track_params_);
    leaves_.emplace(&p, v);
    bound_.emplace_back(&p, v);
    return v;
  }

  const std::vector<std::pair<const Parameter<S>*, Var<S>>>& bound() const { return bound_; }

 private:
  Tape<S>& tape_;
  bool track_params_;
  std::unordered_map<const Parameter<S>*, Var<S>> leaves_;
  std::vector<std::pair<const Parameter<S>*, Var<S>>> bound_;
};

/// |cos(x, w)|^(B-1) * (w/|w|)^T x; zero when x = 0.
template <typename Derived1, typename Derived2>
typename Derived1::Scalar bcos_transform(const Eigen::MatrixBase<Derived1>& x, const Eigen::MatrixBase<Derived2>& w,
                                         typename Derived1::Scalar b) {
  using S = typename Derived1::Scalar;
  if (b < S(1)) throw ConfigError("B-cos exponent must be >= 1");
  const S wn = w.norm();
  if (!(wn > S(0))) throw ConfigError("B-cos weight vector is zero");
  const S xn = x.norm();
  if (xn == S(0)) return S(0);
  const S lin = w.dot(x) / wn;
  const S cos = lin / xn;
  return std::pow(std::abs(cos), b - S(1)) * lin;
}

namespace detail {

template <typename S>
Tensor<S> random_normal(RngCursor& rng, Shape shape, double scale) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(scale * rng.normal());
  return t;
}

// Shared tail of every B-cos unit: out = |cos|^(B-1) * lin, with the cosine
// power treated as a dynamic coefficient.
template <typename S>
Var<S> bcos_modulate(Graph<S>& g, const Var<S>& lin, const Var<S>& norms, S b) {
  Var<S> cos = cosine(lin, norms);
  g.tape().tag(cos, NodeTag::kBcosCosine);
  Var<S> factor = g.dynamic(abs_pow(cos, b - S(1)));
  Var<S> out = mul(factor, lin);
  g.tape().tag(out, NodeTag::kBcosOutput, cos.id());
  return out;
}

}  // namespace detail

/// Bias-free B-cos dense layer, weight [out, in].
template <typename S>
class BcosLinear {
 public:
  BcosLinear() = default;
  BcosLinear(std::string name, Index in, Index out, S b, RngCursor& rng)
      : weight_{std::move(name) + ".weight", ParamRole::kBcosWeight, detail::random_normal<S>(rng, {out, in}, 1.0)}, b_(b) {
    if (b < S(1)) throw ConfigError("B-cos exponent must be >= 1");
  }
  BcosLinear(std::string name, Tensor<S> weight, S b) : weight_{std::move(name) + ".weight", ParamRole::kBcosWeight, std::move(weight)}, b_(b) {
    if (weight_.value.rank() != 2) throw ShapeError("BcosLinear: weight must be [out,in]");
    if (b < S(1)) throw ConfigError("B-cos exponent must be >= 1");
  }

  Index in_features() const { return weight_.value.dim(1); }
  Index out_features() const { return weight_.value.dim(0); }
  S exponent() const { return b_; }
  const Tensor<S>& weight() const { return weight_.value; }

  /// x: [..., in] -> [..., out].
  Var<S> forward(Graph<S>& g, const Var<S>& x) const {
    if (x.dim(-1) != in_features()) {
      throw ShapeError("BcosLinear: input " + to_string(x.shape()) + " does not end in " + std::to_string(in_features()));
    }
    const Index rows = x.value().size() / in_features();
    Var<S> flat = x.shape().size() == 2 ? x : reshape(x, {rows, in_features()});
    Var<S> w_hat = transpose(normalize_rows(g.param(weight_)));
    Var<S> lin = matmul(flat, w_hat);
    Var<S> out = detail::bcos_modulate(g, lin, row_norm(flat), b_);
    if (x.shape().size() == 2) return out;
    Shape shape = x.shape();
    shape.back() = out_features();
    return reshape(out, shape);
  }

  /// Materialized dynamic matrix W(x) with f(x) = W(x) x.
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> dynamic_matrix(const Eigen::Matrix<S, Eigen::Dynamic, 1>& x) const {
    const auto w = weight_.value.matrix(out_features());
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> m(out_features(), in_features());
    const S xn = x.norm();
    for (Index j = 0; j < out_features(); ++j) {
      const auto w_hat = w.row(j) / w.row(j).norm();
      const S cos = xn > S(0) ? w_hat.dot(x) / xn : S(0);
      m.row(j) = std::pow(std::abs(cos), b_ - S(1)) * w_hat;
    }
    return m;
  }

  template <typename F>
  void visit(F&& f) { f(weight_); }
  template <typename F>
  void visit(F&& f) const { f(weight_); }

 private:
  Parameter<S> weight_;
  S b_ = S(2);
};

/// Bias-free B-cos convolution, kernel [F, C, kh, kw]. The cosine is taken
/// between each filter and the full input patch it covers.
template <typename S>
class BcosConv2d {
 public:
  BcosConv2d() = default;
  BcosConv2d(std::string name, Index in, Index out, Index kernel, Conv2dParams p, S b, RngCursor& rng)
      : kernel_{std::move(name) + ".kernel", ParamRole::kBcosWeight, detail::random_normal<S>(rng, {out, in, kernel, kernel}, 1.0)},
        p_(p), b_(b) {
    if (b < S(1)) throw ConfigError("B-cos exponent must be >= 1");
  }

  Index in_channels() const { return kernel_.value.dim(1); }
  Index out_channels() const { return kernel_.value.dim(0); }
  S exponent() const { return b_; }
  const Conv2dParams& geometry() const { return p_; }

  Var<S> forward(Graph<S>& g, const Var<S>& x) const {
    Var<S> k_hat = normalize_rows(g.param(kernel_));
    Var<S> lin = conv2d(x, k_hat, p_);
    Var<S> norms = patch_norm(x, kernel_.value.dim(2), kernel_.value.dim(3), p_);
    return detail::bcos_modulate(g, lin, norms, b_);
  }

  template <typename F>
  void visit(F&& f) { f(kernel_); }
  template <typename F>
  void visit(F&& f) const { f(kernel_); }

 private:
  Parameter<S> kernel_;
  Conv2dParams p_;
  S b_ = S(2);
};

/// Parameter-free multiplicative normalization: x / rms(x) per sample. The
/// scale is a dynamic coefficient.
template <typename S>
class RmsNorm {
 public:
  explicit RmsNorm(S eps = S(1e-6)) : eps_(eps) {}
  Var<S> forward(Graph<S>& g, const Var<S>& x) const { return scale_samples(x, g.dynamic(rms_inv(x, eps_))); }

 private:
  S eps_;
};

/// Cross-attention whose value path is a B-cos layer:
/// out = concat_h softmax(X Q_h (Y K_h)^T / sqrt(d_k)) (B-cos V(Y))_h, optionally
/// followed by a B-cos output projection. Query/key projections are plain
/// bias-free linear maps that only feed the attention coefficients.
template <typename S>
class BcosCrossAttention {
 public:
  BcosCrossAttention() = default;
  BcosCrossAttention(const std::string& name, Index dim, Index context_dim, Index heads, Index key_dim, S b,
                     bool bcos_output, RngCursor& rng)
      : query_{name + ".query", ParamRole::kQueryKey, detail::random_normal<S>(rng, {dim, heads * key_dim}, 1.0 / std::sqrt(double(dim)))},
        key_{name + ".key", ParamRole::kQueryKey, detail::random_normal<S>(rng, {context_dim, heads * key_dim}, 1.0 / std::sqrt(double(context_dim)))},
        value_(name + ".value", context_dim, dim, b, rng),
        heads_(heads),
        key_dim_(key_dim) {
    if (heads < 1 || dim % heads != 0) throw ConfigError("attention: dim must be divisible by the head count");
    if (bcos_output) output_.emplace(name + ".output", dim, dim, b, rng);
  }

  Index heads() const { return heads_; }
  Index key_dim() const { return key_dim_; }
  const BcosLinear<S>& value() const { return value_; }
  const BcosLinear<S>* output() const { return output_ ? &*output_ : nullptr; }
  const Tensor<S>& query_weight() const { return query_.value; }
  const Tensor<S>& key_weight() const { return key_.value; }

  /// x: [N, n, dim], y: [N, m, context_dim], mask: [N*m] (true = real token).
  Var<S> forward(Graph<S>& g, const Var<S>& x, const Var<S>& y, const std::vector<char>& mask) const {
    const Index dim = value_.out_features();
    if (x.shape().size() != 3 || x.dim(2) != dim || y.shape().size() != 3 || y.dim(2) != value_.in_features() ||
        x.dim(0) != y.dim(0)) {
      throw ShapeError("attention: unexpected shapes " + to_string(x.shape()) + " / " + to_string(y.shape()));
    }
    Var<S> q = matmul(x, g.param(query_));
    Var<S> k = matmul(y, g.param(key_));
    Var<S> v = value_.forward(g, y);
    const Index head_dim = dim / heads_;
    const S scale = S(1) / std::sqrt(static_cast<S>(key_dim_));
    std::vector<Var<S>> outs;
    for (Index h = 0; h < heads_; ++h) {
      Var<S> scores = affine(matmul(slice_last(q, h * key_dim_, key_dim_), transpose(slice_last(k, h * key_dim_, key_dim_))), scale);
      Var<S> attn = g.dynamic(masked_softmax(scores, mask));
      Var<S> vh = heads_ == 1 ? v : slice_last(v, h * head_dim, head_dim);
      outs.push_back(matmul(attn, vh));
    }
    Var<S> out = heads_ == 1 ? outs.front() : concat_last(outs);
    return output_ ? output_->forward(g, out) : out;
  }

  template <typename F>
  void visit(F&& f) {
    f(query_);
    f(key_);
    value_.visit(f);
    if (output_) output_->visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    f(query_);
    f(key_);
    value_.visit(f);
    if (output_) output_->visit(f);
  }

 private:
  Parameter<S> query_, key_;
  BcosLinear<S> value_;
  std::optional<BcosLinear<S>> output_;
  Index heads_ = 1, key_dim_ = 1;
};

// ---------------------------------------------------------------------------
// Six-channel image encoding

/// [3,H,W] in [0,1] -> [6,H,W] = (r, g, b, 1-r, 1-g, 1-b).
template <typename S>
Tensor<S> encode_image(const Tensor<S>& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("encode_image: expected [3,H,W], got " + to_string(img.shape()));
  if ((img.array() < S(0)).any() || (img.array() > S(1)).any()) throw DataError("encode_image: values outside [0,1]");
  const Index plane = 3 * img.dim(1) * img.dim(2);
  Tensor<S> enc({6, img.dim(1), img.dim(2)});
  enc.array().head(plane) = img.array();
  enc.array().tail(plane) = S(1) - img.array();
  return enc;
}

/// [6,H,W] -> [3,H,W]: average of the direct and complementary channels, clamped to [0,1].
template <typename S>
Tensor<S> decode_image(const Tensor<S>& enc) {
  if (enc.rank() != 3 || enc.dim(0) != 6) throw ShapeError("decode_image: expected [6,H,W], got " + to_string(enc.shape()));
  const Index plane = 3 * enc.dim(1) * enc.dim(2);
  Tensor<S> img({3, enc.dim(1), enc.dim(2)});
  img.array() = ((enc.array().head(plane) + (S(1) - enc.array().tail(plane))) / S(2)).max(S(0)).min(S(1));
  return img;
}

}  // namespace bcosdiff
