#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kanmix/bspline.hpp"
#include "kanmix/errors.hpp"
#include "kanmix/kan_linear.hpp"
#include "kanmix/rng.hpp"
#include "kanmix/tensor.hpp"

namespace kanmix {

struct MixerConfig {
  std::size_t patch_size = 4;
  std::size_t n_channels = 64;  // token embedding width D
  std::size_t n_hiddens = 128;  // hidden width of every mixing pair
  std::size_t depth = 4;        // number of mixer blocks
  std::size_t n_output = 10;
  std::size_t in_channels = 1;
  std::size_t image_height = 28;
  std::size_t image_width = 28;
  int spline_order = 3;
  int grid_size = 5;
  double grid_min = -1.0;
  double grid_max = 1.0;
  bool residual = false;
  std::uint64_t seed = 0;

  std::size_t n_tokens() const {
    return (image_height / patch_size) * (image_width / patch_size);
  }
  std::size_t patch_dim() const { return patch_size * patch_size * in_channels; }

  void validate() const {
    if (patch_size == 0) throw PatchDivisibility("patch size must be >= 1");
    if (image_height == 0 || image_width == 0 || in_channels == 0) {
      throw InvalidDim("image dimensions must be >= 1");
    }
    if (image_height % patch_size != 0 || image_width % patch_size != 0) {
      throw PatchDivisibility("image " + std::to_string(image_height) + "x" +
                              std::to_string(image_width) + " is not divisible by patch size " +
                              std::to_string(patch_size));
    }
    if (n_channels == 0 || n_hiddens == 0 || n_output == 0) {
      throw InvalidDim("n_channels, n_hiddens and n_output must be >= 1");
    }
    // Throws InvalidGrid on bad spline parameters.
    SplineGrid<double>(spline_order, grid_size, grid_min, grid_max);
  }

  friend bool operator==(const MixerConfig&, const MixerConfig&) = default;
};

/// [B, C, H, W] -> [B, N, P*P*C]. Patches are ordered row-major over the patch
/// grid; inside a patch the layout is channel-major, then row-major pixels.
template <typename Real>
Tensor<Real> image_to_patches(const Tensor<Real>& x, std::size_t patch) {
  if (x.rank() != 4) throw RankError("image_to_patches expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw PatchDivisibility("image " + std::to_string(h) + "x" + std::to_string(w) +
                            " not divisible by patch size " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch, pd = patch * patch * c;
  Tensor<Real> out(Shape{b, gh * gw, pd});
  Real* dst = out.data().data();
  const Real* src = x.data().data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        Real* d = dst + ((bi * gh + py) * gw + px) * pd;
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t y = 0; y < patch; ++y) {
            const Real* s = src + ((bi * c + ci) * h + py * patch + y) * w + px * patch;
            for (std::size_t xx = 0; xx < patch; ++xx) *d++ = s[xx];
          }
      }
  return out;
}

/// Exact inverse of image_to_patches.
template <typename Real>
Tensor<Real> patches_to_image(const Tensor<Real>& p, std::size_t channels, std::size_t height,
                              std::size_t width, std::size_t patch) {
  if (p.rank() != 3) throw RankError("patches_to_image expects [B,N,P*P*C]");
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw PatchDivisibility("image not divisible by patch size");
  }
  const std::size_t b = p.dim(0), gh = height / patch, gw = width / patch;
  const std::size_t pd = patch * patch * channels;
  if (p.dim(1) != gh * gw || p.dim(2) != pd) {
    throw ShapeMismatch("patches_to_image: patch tensor " + shape_str(p.shape()) +
                        " does not match image geometry");
  }
  Tensor<Real> out(Shape{b, channels, height, width});
  const Real* src = p.data().data();
  Real* dst = out.data().data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        const Real* s = src + ((bi * gh + py) * gw + px) * pd;
        for (std::size_t ci = 0; ci < channels; ++ci)
          for (std::size_t y = 0; y < patch; ++y) {
            Real* d = dst + ((bi * channels + ci) * height + py * patch + y) * width + px * patch;
            for (std::size_t xx = 0; xx < patch; ++xx) d[xx] = *s++;
          }
      }
  return out;
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) throw ShapeMismatch("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<Real> out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

/// A learnable tensor together with its dotted path inside the model.
template <typename Real>
struct NamedParam {
  std::string name;
  Tensor<Real>* tensor;
};

/// One mixer block: a token-mixing KAN pair (N -> H -> N) acting along the
/// token axis, then a channel-mixing pair (D -> H -> D) acting along the
/// embedding axis. With `residual` each sublayer becomes x + mix(norm(x)).
template <typename Real>
class MixerBlock {
 public:
  MixerBlock() = default;

  MixerBlock(const MixerConfig& cfg, const SplineGrid<Real>& grid, std::uint64_t seed)
      : residual_(cfg.residual),
        token_in_(KanLinear<Real>::init(cfg.n_tokens(), cfg.n_hiddens, grid, derive_seed(seed, 0))),
        token_out_(KanLinear<Real>::init(cfg.n_hiddens, cfg.n_tokens(), grid, derive_seed(seed, 1))),
        channel_in_(KanLinear<Real>::init(cfg.n_channels, cfg.n_hiddens, grid, derive_seed(seed, 2))),
        channel_out_(KanLinear<Real>::init(cfg.n_hiddens, cfg.n_channels, grid, derive_seed(seed, 3))) {
    if (residual_) {
      token_norm_.emplace(cfg.n_channels);
      channel_norm_.emplace(cfg.n_channels);
    }
  }

  /// [B, N, D] -> [B, N, D]; mixes along N independently for every channel.
  Tensor<Real> token_mixing_forward(const Tensor<Real>& x) {
    check_input(x);
    const Tensor<Real> u = residual_ ? token_norm_->forward(x) : x;
    const Tensor<Real> mixed =
        transpose_last_two(token_out_.forward(token_in_.forward(transpose_last_two(u))));
    return residual_ ? add(x, mixed) : mixed;
  }

  Tensor<Real> token_mixing_backward(const Tensor<Real>& dy) {
    Tensor<Real> du =
        transpose_last_two(token_in_.backward(token_out_.backward(transpose_last_two(dy))));
    return residual_ ? add(dy, token_norm_->backward(du)) : du;
  }

  /// [B, N, D] -> [B, N, D]; mixes along D independently for every token.
  Tensor<Real> channel_mixing_forward(const Tensor<Real>& x) {
    check_input(x);
    const Tensor<Real> u = residual_ ? channel_norm_->forward(x) : x;
    const Tensor<Real> mixed = channel_out_.forward(channel_in_.forward(u));
    return residual_ ? add(x, mixed) : mixed;
  }

  Tensor<Real> channel_mixing_backward(const Tensor<Real>& dy) {
    Tensor<Real> du = channel_in_.backward(channel_out_.backward(dy));
    return residual_ ? add(dy, channel_norm_->backward(du)) : du;
  }

  Tensor<Real> forward(const Tensor<Real>& x) {
    return channel_mixing_forward(token_mixing_forward(x));
  }

  Tensor<Real> backward(const Tensor<Real>& dy) {
    return token_mixing_backward(channel_mixing_backward(dy));
  }

  bool residual() const { return residual_; }
  KanLinear<Real>& token_in() { return token_in_; }
  KanLinear<Real>& token_out() { return token_out_; }
  KanLinear<Real>& channel_in() { return channel_in_; }
  KanLinear<Real>& channel_out() { return channel_out_; }
  std::optional<LayerNorm<Real>>& token_norm() { return token_norm_; }
  std::optional<LayerNorm<Real>>& channel_norm() { return channel_norm_; }

  void append_params(const std::string& prefix, std::vector<NamedParam<Real>>& out) {
    auto kan = [&](const std::string& name, KanLinear<Real>& l) {
      out.push_back({prefix + name + ".w", &l.weight()});
      out.push_back({prefix + name + ".c", &l.coeffs()});
    };
    auto norm = [&](const std::string& name, std::optional<LayerNorm<Real>>& n) {
      if (!n) return;
      out.push_back({prefix + name + ".gain", &n->gain()});
      out.push_back({prefix + name + ".bias", &n->bias()});
    };
    norm("token_norm", token_norm_);
    kan("token_in", token_in_);
    kan("token_out", token_out_);
    norm("channel_norm", channel_norm_);
    kan("channel_in", channel_in_);
    kan("channel_out", channel_out_);
  }

  std::size_t cache_bytes() const {
    std::size_t total = token_in_.cache_bytes() + token_out_.cache_bytes() +
                        channel_in_.cache_bytes() + channel_out_.cache_bytes();
    if (token_norm_) total += token_norm_->cache_bytes() + channel_norm_->cache_bytes();
    return total;
  }

 private:
  void check_input(const Tensor<Real>& x) const {
    if (x.rank() != 3 || x.dim(1) != token_in_.in_features() ||
        x.dim(2) != channel_in_.in_features()) {
      throw ShapeMismatch("mixer block expects [B," + std::to_string(token_in_.in_features()) +
                          "," + std::to_string(channel_in_.in_features()) + "], got " +
                          shape_str(x.shape()));
    }
  }

  bool residual_ = false;
  std::optional<LayerNorm<Real>> token_norm_;
  KanLinear<Real> token_in_;
  KanLinear<Real> token_out_;
  std::optional<LayerNorm<Real>> channel_norm_;
  KanLinear<Real> channel_in_;
  KanLinear<Real> channel_out_;
};

/// Image classifier built only from KAN layers:
/// patches -> per-patch embedding -> depth x (token mix, channel mix)
/// -> layer norm -> mean over tokens -> output KAN.
template <typename Real>
class KanMixer {
 public:
  using real_type = Real;

  explicit KanMixer(const MixerConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const SplineGrid<Real> grid(cfg.spline_order, cfg.grid_size, static_cast<Real>(cfg.grid_min),
                                static_cast<Real>(cfg.grid_max));
    embed_ = KanLinear<Real>::init(cfg.patch_dim(), cfg.n_channels, grid, derive_seed(cfg.seed, 0));
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      blocks_.emplace_back(cfg, grid, derive_seed(cfg.seed, 100 + l));
    }
    head_norm_ = LayerNorm<Real>(cfg.n_channels);
    head_ = KanLinear<Real>::init(cfg.n_channels, cfg.n_output, grid, derive_seed(cfg.seed, 1));
  }

  const MixerConfig& config() const { return cfg_; }
  std::size_t n_output() const { return cfg_.n_output; }

  Tensor<Real> per_patch_forward(const Tensor<Real>& patches) {
    if (patches.rank() != 3 || patches.dim(1) != cfg_.n_tokens() ||
        patches.dim(2) != cfg_.patch_dim()) {
      throw ShapeMismatch("per_patch_forward expects [B," + std::to_string(cfg_.n_tokens()) + "," +
                          std::to_string(cfg_.patch_dim()) + "], got " +
                          shape_str(patches.shape()));
    }
    return embed_.forward(patches);
  }

  /// [B, C, H, W] -> logits [B, n_output]. Caches every intermediate needed by
  /// backward().
  Tensor<Real> forward(const Tensor<Real>& images) {
    if (images.rank() != 4 || images.dim(1) != cfg_.in_channels ||
        images.dim(2) != cfg_.image_height || images.dim(3) != cfg_.image_width) {
      throw ShapeMismatch("model expects [B," + std::to_string(cfg_.in_channels) + "," +
                          std::to_string(cfg_.image_height) + "," +
                          std::to_string(cfg_.image_width) + "], got " + shape_str(images.shape()));
    }
    Tensor<Real> x = per_patch_forward(image_to_patches(images, cfg_.patch_size));
    for (auto& block : blocks_) x = block.forward(x);
    Tensor<Real> normed = head_norm_.forward(x);
    normed_shape_ = normed.shape();
    Tensor<Real> pooled = mean_axis(normed, 1);
    cached_ = true;
    return head_.forward(pooled);
  }

  /// Reverse pass of forward(): accumulates every parameter gradient and
  /// returns the gradient with respect to the input images.
  Tensor<Real> backward(const Tensor<Real>& dlogits) {
    if (!cached_) throw StaleCache("KanMixer::backward called without a preceding forward");
    Tensor<Real> g = head_.backward(dlogits);
    g = head_norm_.backward(mean_axis_backward(g, normed_shape_, 1));
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) g = it->backward(g);
    g = embed_.backward(g);
    return patches_to_image(g, cfg_.in_channels, cfg_.image_height, cfg_.image_width,
                            cfg_.patch_size);
  }

  /// Parameters in declaration order; this order is also the checkpoint order.
  std::vector<NamedParam<Real>> parameters() {
    std::vector<NamedParam<Real>> out;
    out.push_back({"embed.w", &embed_.weight()});
    out.push_back({"embed.c", &embed_.coeffs()});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      blocks_[l].append_params("blocks." + std::to_string(l) + ".", out);
    }
    out.push_back({"head_norm.gain", &head_norm_.gain()});
    out.push_back({"head_norm.bias", &head_norm_.bias()});
    out.push_back({"head.w", &head_.weight()});
    out.push_back({"head.c", &head_.coeffs()});
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto& p : parameters()) n += p.tensor->numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor->zero_grad();
  }

  std::size_t cache_bytes() const {
    std::size_t total = embed_.cache_bytes() + head_norm_.cache_bytes() + head_.cache_bytes();
    for (const auto& b : blocks_) total += b.cache_bytes();
    return total;
  }

  KanLinear<Real>& embed() { return embed_; }
  KanLinear<Real>& head() { return head_; }
  LayerNorm<Real>& head_norm() { return head_norm_; }
  std::vector<MixerBlock<Real>>& blocks() { return blocks_; }

 private:
  MixerConfig cfg_;
  KanLinear<Real> embed_;
  std::vector<MixerBlock<Real>> blocks_;
  LayerNorm<Real> head_norm_;
  KanLinear<Real> head_;
  Shape normed_shape_;
  bool cached_ = false;
};

}  // namespace kanmix
