#pragma once

#include "bcosdiff/bcos.hpp"
#include "bcosdiff/data.hpp"
#include "bcosdiff/diffusion.hpp"

#include <map>
#include <string>
#include <vector>

namespace bcosdiff {

enum class Target { kX0, kEps };

/// Architecture, conditioning and schedule of a model. Serialized into
/// checkpoints as key=value lines.
struct ModelConfig {
  Index image_size = 16;
  Index base_channels = 32;
  std::vector<Index> channel_mult{1, 1};
  std::vector<bool> attention{true, true};
  bool mid_attention = true;
  Index heads = 2;
  Index context_dim = 32;
  Index max_tokens = 16;
  Index time_features = 32;
  Index time_dim = 64;
  Index time_channels = 16;
  double bcos_b = 2.0;
  bool attention_output_bcos = true;
  Target target = Target::kX0;
  std::uint64_t init_seed = 0;

  int T = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  double mu = 0.5;
  double sigma = 0.5;
  ScheduleShape schedule_shape = ScheduleShape::kLinear;

  static constexpr Index kChannels = 6;

  Index levels() const { return static_cast<Index>(channel_mult.size()); }
  Index channels(Index level) const { return base_channels * channel_mult.at(static_cast<std::size_t>(level)); }

  /// Throws ConfigError on any broken structural invariant.
  void validate() const;
  DiffusionSchedule schedule() const { return make_schedule(T, beta_start, beta_end, mu, sigma, schedule_shape); }

  std::string serialize() const;
  static ModelConfig parse(const std::string& text);
  /// Applies one key=value override; unknown keys throw ConfigError.
  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> entries() const;
};

const char* target_name(Target t);
Target parse_target(const std::string& name);

/// Sinusoidal features (cos block, then sin block) of a timestep.
template <typename S>
Tensor<S> timestep_embedding(int t, Index dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("timestep features must be a positive even count");
  const Index half = dim / 2;
  Tensor<S> e({dim});
  for (Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = static_cast<S>(std::cos(t * freq));
    e[half + i] = static_cast<S>(std::sin(t * freq));
  }
  return e;
}

/// Learned token table plus learned positional embedding; masked rows are zero.
template <typename S>
class TokenEmbedder {
 public:
  TokenEmbedder() = default;
  TokenEmbedder(Index vocab, Index max_tokens, Index dim, RngCursor& rng)
      : table_{"embed.table", ParamRole::kTokenTable, detail::random_normal<S>(rng, {vocab, dim}, 1.0)},
        positional_{"embed.positional", ParamRole::kPositional, detail::random_normal<S>(rng, {max_tokens, dim}, 0.3)} {}

  Index vocab_size() const { return table_.value.dim(0); }
  Index max_tokens() const { return positional_.value.dim(0); }
  Index dim() const { return table_.value.dim(1); }
  const Tensor<S>& table() const { return table_.value; }

  Var<S> forward(Graph<S>& g, const std::vector<const Prompt*>& prompts) const {
    std::vector<int> ids;
    std::vector<char> mask;
    for (const Prompt* p : prompts) {
      check(*p);
      ids.insert(ids.end(), p->ids.begin(), p->ids.end());
      mask.insert(mask.end(), p->mask.begin(), p->mask.end());
    }
    return embed(g.param(table_), g.param(positional_), std::move(ids), std::move(mask), static_cast<Index>(prompts.size()));
  }

  /// Embedding of one prompt as a plain tensor [1,L,d].
  Tensor<S> embed_prompt(const Prompt& p) const {
    check(p);
    return EmbedOp<S>(p.ids, p.mask, 1).forward({&table_.value, &positional_.value});
  }

  template <typename F>
  void visit(F&& f) {
    f(table_);
    f(positional_);
  }
  template <typename F>
  void visit(F&& f) const {
    f(table_);
    f(positional_);
  }

 private:
  void check(const Prompt& p) const {
    if (p.length() != max_tokens()) {
      throw ShapeError("prompt length " + std::to_string(p.length()) + " does not match " + std::to_string(max_tokens()));
    }
  }

  Parameter<S> table_, positional_;
};

/// Residual block: RMS norm, timestep features concatenated as extra
/// channels, two 3x3 B-cos convolutions, identity or 1x1 B-cos skip.
template <typename S>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(const std::string& name, Index in, Index out, Index time_dim, Index time_channels, S b, RngCursor& rng)
      : time_(name + ".time", time_dim, time_channels, b, rng),
        conv1_(name + ".conv1", in + time_channels, out, 3, Conv2dParams::same(3), b, rng),
        conv2_(name + ".conv2", out, out, 3, Conv2dParams::same(3), b, rng) {
    if (in != out) skip_.emplace(name + ".skip", in, out, 1, Conv2dParams{}, b, rng);
  }

  Var<S> forward(Graph<S>& g, const Var<S>& x, const Var<S>& temb) const {
    Var<S> tf = broadcast_spatial(time_.forward(g, temb), x.dim(2), x.dim(3));
    Var<S> h = conv1_.forward(g, concat_channels(std::vector<Var<S>>{norm_.forward(g, x), tf}));
    h = conv2_.forward(g, norm_.forward(g, h));
    return add(skip_ ? skip_->forward(g, x) : x, h);
  }

  template <typename F>
  void visit(F&& f) {
    time_.visit(f);
    conv1_.visit(f);
    conv2_.visit(f);
    if (skip_) skip_->visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    time_.visit(f);
    conv1_.visit(f);
    conv2_.visit(f);
    if (skip_) skip_->visit(f);
  }

 private:
  BcosLinear<S> time_;
  BcosConv2d<S> conv1_, conv2_;
  std::optional<BcosConv2d<S>> skip_;
  RmsNorm<S> norm_;
};

/// Spatial transformer reduced to its conditioning core: RMS norm, B-cos
/// cross-attention from pixels to prompt tokens, residual add.
template <typename S>
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(const std::string& name, Index channels, Index context_dim, Index heads, S b, bool bcos_output, RngCursor& rng)
      : attn_(name, channels, context_dim, heads, channels / heads, b, bcos_output, rng) {}

  Var<S> forward(Graph<S>& g, const Var<S>& x, const Var<S>& y, const std::vector<char>& mask) const {
    const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Var<S> tokens = transpose(reshape(norm_.forward(g, x), {n, c, h * w}));
    Var<S> a = attn_.forward(g, tokens, y, mask);
    return add(x, reshape(transpose(a), {n, c, h, w}));
  }

  const BcosCrossAttention<S>& attention() const { return attn_; }

  template <typename F>
  void visit(F&& f) { attn_.visit(f); }
  template <typename F>
  void visit(F&& f) const { attn_.visit(f); }

 private:
  BcosCrossAttention<S> attn_;
  RmsNorm<S> norm_;
};

/// Conditional B-cos U-Net over 6-channel images. One residual block per
/// level, strided B-cos convolution down, nearest upsampling plus B-cos
/// convolution up, cross-attention at the configured levels.
template <typename S>
class UNet {
 public:
  UNet() = default;
  UNet(const ModelConfig& cfg, RngCursor& rng) : cfg_(cfg) {
    cfg.validate();
    const S b = static_cast<S>(cfg.bcos_b);
    const Index L = cfg.levels();
    time_proj_ = BcosLinear<S>("time.proj", cfg.time_features, cfg.time_dim, b, rng);
    conv_in_ = BcosConv2d<S>("conv_in", ModelConfig::kChannels, cfg.channels(0), 3, Conv2dParams::same(3), b, rng);
    Index ch = cfg.channels(0);
    for (Index l = 0; l < L; ++l) {
      const std::string p = "down" + std::to_string(l);
      const Index out = cfg.channels(l);
      down_res_.emplace_back(p + ".res", ch, out, cfg.time_dim, cfg.time_channels, b, rng);
      down_attn_.push_back(attn_at(l) ? std::optional<AttentionBlock<S>>(std::in_place, p + ".attn", out, cfg.context_dim, cfg.heads, b,
                                                                          cfg.attention_output_bcos, rng)
                                      : std::nullopt);
      ch = out;
      if (l + 1 < L) down_.emplace_back(p + ".downsample", ch, ch, 3, Conv2dParams::same(3, 2), b, rng);
    }
    mid_res_ = ResBlock<S>("mid.res", ch, ch, cfg.time_dim, cfg.time_channels, b, rng);
    if (cfg.mid_attention) mid_attn_.emplace("mid.attn", ch, cfg.context_dim, cfg.heads, b, cfg.attention_output_bcos, rng);
    for (Index l = L - 1; l >= 0; --l) {
      const std::string p = "up" + std::to_string(l);
      const Index out = cfg.channels(l);
      up_res_.emplace_back(p + ".res", ch + out, out, cfg.time_dim, cfg.time_channels, b, rng);
      up_attn_.push_back(attn_at(l) ? std::optional<AttentionBlock<S>>(std::in_place, p + ".attn", out, cfg.context_dim, cfg.heads, b,
                                                                        cfg.attention_output_bcos, rng)
                                    : std::nullopt);
      ch = out;
      if (l > 0) {
        up_.emplace_back(p + ".upsample", ch, cfg.channels(l - 1), 3, Conv2dParams::same(3), b, rng);
        ch = cfg.channels(l - 1);
      }
    }
    conv_out_ = BcosConv2d<S>("conv_out", ch, ModelConfig::kChannels, 3, Conv2dParams::same(3), b, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  /// x_t [N,6,H,W], time features [N,F], y [N,L,d_c], mask [N*L] -> [N,6,H,W].
  Var<S> forward(Graph<S>& g, const Var<S>& x_t, const Var<S>& time_features, const Var<S>& y,
                 const std::vector<char>& mask) const {
    const Index L = cfg_.levels();
    if (x_t.shape().size() != 4 || x_t.dim(1) != ModelConfig::kChannels) {
      throw ShapeError("unet: expected [N,6,H,W], got " + to_string(x_t.shape()));
    }
    const Index factor = Index(1) << (L - 1);
    if (x_t.dim(2) % factor != 0 || x_t.dim(3) % factor != 0) {
      throw ShapeError("unet: spatial size " + to_string(x_t.shape()) + " not divisible by " + std::to_string(factor));
    }
    if (y.shape().size() != 3 || y.dim(0) != x_t.dim(0) || y.dim(1) != cfg_.max_tokens || y.dim(2) != cfg_.context_dim) {
      throw ShapeError("unet: prompt embedding " + to_string(y.shape()) + " does not match [N," +
                       std::to_string(cfg_.max_tokens) + "," + std::to_string(cfg_.context_dim) + "]");
    }
    Var<S> temb = time_proj_.forward(g, time_features);
    Var<S> h = conv_in_.forward(g, x_t);
    std::vector<Var<S>> skips;
    for (Index l = 0; l < L; ++l) {
      h = down_res_[l].forward(g, h, temb);
      if (down_attn_[l]) h = down_attn_[l]->forward(g, h, y, mask);
      skips.push_back(h);
      if (l + 1 < L) h = down_[l].forward(g, h);
    }
    h = mid_res_.forward(g, h, temb);
    if (mid_attn_) h = mid_attn_->forward(g, h, y, mask);
    for (Index k = 0; k < L; ++k) {
      const Index l = L - 1 - k;
      h = up_res_[k].forward(g, concat_channels(std::vector<Var<S>>{h, skips[l]}), temb);
      if (up_attn_[k]) h = up_attn_[k]->forward(g, h, y, mask);
      if (l > 0) h = up_[k].forward(g, upsample_nearest2x(h));
    }
    return conv_out_.forward(g, norm_.forward(g, h));
  }

  /// Every cross-attention block, encoder first.
  std::vector<const BcosCrossAttention<S>*> attention_blocks() const {
    std::vector<const BcosCrossAttention<S>*> out;
    for (const auto& a : down_attn_) {
      if (a) out.push_back(&a->attention());
    }
    if (mid_attn_) out.push_back(&mid_attn_->attention());
    for (const auto& a : up_attn_) {
      if (a) out.push_back(&a->attention());
    }
    return out;
  }

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  bool attn_at(Index l) const { return cfg_.attention.at(static_cast<std::size_t>(l)); }

  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    self.time_proj_.visit(f);
    self.conv_in_.visit(f);
    for (std::size_t l = 0; l < self.down_res_.size(); ++l) {
      self.down_res_[l].visit(f);
      if (self.down_attn_[l]) self.down_attn_[l]->visit(f);
      if (l < self.down_.size()) self.down_[l].visit(f);
    }
    self.mid_res_.visit(f);
    if (self.mid_attn_) self.mid_attn_->visit(f);
    for (std::size_t k = 0; k < self.up_res_.size(); ++k) {
      self.up_res_[k].visit(f);
      if (self.up_attn_[k]) self.up_attn_[k]->visit(f);
      if (k < self.up_.size()) self.up_[k].visit(f);
    }
    self.conv_out_.visit(f);
  }

  ModelConfig cfg_;
  BcosLinear<S> time_proj_;
  BcosConv2d<S> conv_in_, conv_out_;
  std::vector<ResBlock<S>> down_res_, up_res_;
  std::vector<std::optional<AttentionBlock<S>>> down_attn_, up_attn_;
  std::vector<BcosConv2d<S>> down_, up_;
  ResBlock<S> mid_res_;
  std::optional<AttentionBlock<S>> mid_attn_;
  RmsNorm<S> norm_;
};

/// Text-conditioned denoiser: vocabulary, token embedder, U-Net and schedule.
template <typename S>
class DiffusionModel {
 public:
  DiffusionModel(ModelConfig cfg, Vocabulary vocab) : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.validate();
    schedule_ = cfg_.schedule();
    RngCursor rng(CounterRng(cfg_.init_seed, 0x1417));
    embedder_ = TokenEmbedder<S>(vocab_.size(), cfg_.max_tokens, cfg_.context_dim, rng);
    unet_ = UNet<S>(cfg_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  const UNet<S>& unet() const { return unet_; }
  const TokenEmbedder<S>& embedder() const { return embedder_; }
  Shape state_shape(Index batch = 1) const { return {batch, ModelConfig::kChannels, cfg_.image_size, cfg_.image_size}; }

  Prompt tokenize(const std::string& text) const { return vocab_.encode(text, cfg_.max_tokens); }
  Tensor<S> embed(const Prompt& p) const { return embedder_.embed_prompt(p); }

  /// Sinusoidal features for a batch of timesteps, [N,F].
  Tensor<S> time_features(const std::vector<int>& ts) const {
    Tensor<S> f({static_cast<Index>(ts.size()), cfg_.time_features});
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (ts[i] < 0 || ts[i] > cfg_.T) throw std::out_of_range("timestep outside [0, T]");
      f.matrix(f.dim(0)).row(static_cast<Index>(i)) = timestep_embedding<S>(ts[i], cfg_.time_features).array().matrix().transpose();
    }
    return f;
  }

  /// Raw network output (x0 or eps, per the configured target).
  Var<S> denoise(Graph<S>& g, const Var<S>& x_t, const std::vector<int>& ts, const Var<S>& y, const std::vector<char>& mask) const {
    return unet_.forward(g, x_t, g.constant(time_features(ts)), y, mask);
  }

  /// Clean-image estimate for a batch sharing timestep t.
  Var<S> predict_x0(Graph<S>& g, const Var<S>& x_t, int t, const Var<S>& y, const std::vector<char>& mask) const {
    Var<S> out = denoise(g, x_t, std::vector<int>(static_cast<std::size_t>(x_t.dim(0)), t), y, mask);
    return cfg_.target == Target::kX0 ? out : eps_to_x0(x_t, out, schedule_, t);
  }

  /// Deterministic DDIM sampling (eta = 0 unless given).
  Trajectory<S> sample(const Prompt& prompt, int steps, std::uint64_t seed, double eta = 0.0) const {
    if (prompt.active() == 0) throw DataError("prompt is empty after masking special tokens");
    const Tensor<S> y = embed(prompt);
    auto predict = [&](const Tensor<S>& x_t, int t) {
      Tape<S> tape;
      Graph<S> g(tape, false);
      return predict_x0(g, g.constant(x_t), t, g.constant(y), prompt.mask).value();
    };
    return sample_loop<S>(predict, schedule_, state_shape(), steps, seed, eta);
  }

  /// Learned tensors in declaration order.
  template <typename F>
  void visit(F&& f) {
    embedder_.visit(f);
    unet_.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    embedder_.visit(f);
    unet_.visit(f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const Parameter<S>& p) { n += static_cast<std::size_t>(p.value.size()); });
    return n;
  }

  template <typename T>
  DiffusionModel<T> cast() const {
    DiffusionModel<T> out(cfg_, vocab_);
    std::vector<const Parameter<S>*> src;
    visit([&](const Parameter<S>& p) { src.push_back(&p); });
    std::size_t i = 0;
    out.visit([&](Parameter<T>& p) { p.value = src.at(i++)->value.template cast<T>(); });
    return out;
  }

 private:
  ModelConfig cfg_;
  Vocabulary vocab_;
  DiffusionSchedule schedule_;
  TokenEmbedder<S> embedder_;
  UNet<S> unet_;
};

}  // namespace bcosdiff
