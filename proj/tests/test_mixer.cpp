#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "kanmix/mixer.hpp"
#include "kanmix/rng.hpp"
#include "kanmix/training.hpp"
#include "oracles.hpp"

namespace kanmix {
namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<double> oracle_kan(const KanLinear<double>& layer, const std::vector<double>& x) {
  const auto& g = layer.grid();
  return oracle::kan_layer(layer.weight().storage(), layer.coeffs().storage(), layer.in_features(),
                           layer.out_features(), g.order(), g.grid_size(), g.x_min(), g.x_max(), x);
}

MixerConfig small_config(bool residual) {
  MixerConfig cfg;
  cfg.in_channels = 2;
  cfg.image_height = 6;
  cfg.image_width = 4;
  cfg.patch_size = 2;
  cfg.n_channels = 5;
  cfg.n_hiddens = 3;
  cfg.depth = 2;
  cfg.n_output = 4;
  cfg.residual = residual;
  cfg.seed = 11;
  return cfg;
}

TEST(Patches, FourByFourExample) {
  std::vector<double> v(16);
  std::iota(v.begin(), v.end(), 0.0);
  const auto p = image_to_patches(Tensor<double>(Shape{1, 1, 4, 4}, v), 2);
  ASSERT_EQ(p.shape(), (Shape{1, 4, 4}));
  const std::vector<double> expected = {0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
  EXPECT_EQ(p.storage(), expected);
}

TEST(Patches, WholeImagePatchIsFlattenedImage) {
  Rng rng(1);
  const auto x = random_tensor({2, 3, 4, 4}, rng);
  const auto p = image_to_patches(x, 4);
  ASSERT_EQ(p.shape(), (Shape{2, 1, 48}));
  EXPECT_EQ(p.storage(), x.storage());
}

TEST(Patches, RoundTripIsBitExact) {
  Rng rng(2);
  const auto x = random_tensor({3, 2, 6, 8}, rng, -5.0, 5.0);
  EXPECT_EQ(patches_to_image(image_to_patches(x, 2), 2, 6, 8, 2), x);
}

TEST(Patches, RejectsIndivisibleImage) {
  EXPECT_THROW(image_to_patches(Tensor<double>(Shape{1, 1, 5, 4}), 2), PatchDivisibility);
  EXPECT_THROW(image_to_patches(Tensor<double>(Shape{1, 4, 4}), 2), RankError);
}

TEST(MixerConfig, Validation) {
  MixerConfig cfg;
  cfg.patch_size = 5;
  EXPECT_THROW(cfg.validate(), PatchDivisibility);
  cfg = MixerConfig{};
  cfg.n_hiddens = 0;
  EXPECT_THROW(cfg.validate(), InvalidDim);
  cfg = MixerConfig{};
  cfg.grid_size = 0;
  EXPECT_THROW(cfg.validate(), InvalidGrid);
  EXPECT_EQ(MixerConfig{}.n_tokens(), 49u);
}

TEST(PerPatch, IdenticalPatchesGiveIdenticalRows) {
  KanMixer<double> model(small_config(false));
  Rng rng(3);
  auto p = random_tensor({1, 6, 8}, rng);
  for (std::size_t i = 0; i < 8; ++i) p[3 * 8 + i] = p[i];
  const auto y = model.per_patch_forward(p);
  for (std::size_t d = 0; d < 5; ++d) EXPECT_EQ(y[d], y[3 * 5 + d]);
}

TEST(PerPatch, MatchesLoopOracle) {
  KanMixer<double> model(small_config(false));
  Rng rng(4);
  const auto p = random_tensor({2, 6, 8}, rng, -1.5, 1.5);
  const auto y = model.per_patch_forward(p);
  ASSERT_EQ(y.shape(), (Shape{2, 6, 5}));
  for (std::size_t row = 0; row < 12; ++row) {
    const std::vector<double> x(p.storage().begin() + row * 8, p.storage().begin() + (row + 1) * 8);
    const auto ref = oracle_kan(model.embed(), x);
    for (std::size_t d = 0; d < 5; ++d) EXPECT_NEAR(y[row * 5 + d], ref[d], 1e-12);
  }
}

TEST(PerPatch, RejectsWrongShape) {
  KanMixer<double> model(small_config(false));
  EXPECT_THROW(model.per_patch_forward(Tensor<double>(Shape{1, 5, 8})), ShapeMismatch);
}

// [B,N,D] tensor with the given axis permuted.
Tensor<double> permute_axis(const Tensor<double>& x, std::size_t axis, const std::vector<std::size_t>& perm) {
  Tensor<double> out(x.shape());
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t st = axis == 1 ? perm[t] : t;
        const std::size_t sc = axis == 2 ? perm[c] : c;
        out[(i * n + t) * d + c] = x[(i * n + st) * d + sc];
      }
  return out;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0u);
  Rng rng(seed);
  rng.shuffle(p);
  return p;
}

TEST(TokenMixing, ChannelPermutationEquivariantExact) {
  KanMixer<double> model(small_config(false));
  auto& block = model.blocks()[0];
  Rng rng(5);
  const auto x = random_tensor({2, 6, 5}, rng);
  const auto perm = shuffled(5, 9);
  const auto y = block.token_mixing_forward(x);
  const auto yp = block.token_mixing_forward(permute_axis(x, 2, perm));
  EXPECT_EQ(yp, permute_axis(y, 2, perm));
}

TEST(TokenMixing, ChannelPermutationEquivariantResidual) {
  KanMixer<double> model(small_config(true));
  auto& block = model.blocks()[0];
  Rng rng(6);
  const auto x = random_tensor({2, 6, 5}, rng);
  const auto perm = shuffled(5, 10);
  const auto expected = permute_axis(block.token_mixing_forward(x), 2, perm);
  const auto yp = block.token_mixing_forward(permute_axis(x, 2, perm));
  for (std::size_t i = 0; i < yp.numel(); ++i) EXPECT_NEAR(yp[i], expected[i], 1e-12);
}

TEST(TokenMixing, MatchesPerChannelLoopOracle) {
  KanMixer<double> model(small_config(false));
  auto& block = model.blocks()[1];
  Rng rng(7);
  const auto x = random_tensor({2, 6, 5}, rng);
  const auto y = block.token_mixing_forward(x);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 5; ++c) {
      std::vector<double> col(6);
      for (std::size_t t = 0; t < 6; ++t) col[t] = x[(b * 6 + t) * 5 + c];
      const auto ref = oracle_kan(block.token_out(), oracle_kan(block.token_in(), col));
      for (std::size_t t = 0; t < 6; ++t) EXPECT_NEAR(y[(b * 6 + t) * 5 + c], ref[t], 1e-12);
    }
}

TEST(TokenMixing, SingleTokenReducesToPair) {
  for (bool residual : {false, true}) {
    MixerConfig cfg = small_config(residual);
    cfg.image_height = cfg.image_width = cfg.patch_size;
    KanMixer<double> model(cfg);
    auto& block = model.blocks()[0];
    Rng rng(8);
    const auto x = random_tensor({1, 1, 5}, rng);
    const auto y = block.token_mixing_forward(x);
    Tensor<double> u = x;
    if (residual) {
      LayerNorm<double> ln(5);
      u = ln.forward(x);
    }
    for (std::size_t c = 0; c < 5; ++c) {
      const auto ref = oracle_kan(block.token_out(), oracle_kan(block.token_in(), {u[c]}));
      EXPECT_NEAR(y[c], ref[0] + (residual ? x[c] : 0.0), 1e-12);
    }
  }
}

TEST(ChannelMixing, TokenPermutationEquivariantExact) {
  for (bool residual : {false, true}) {
    KanMixer<double> model(small_config(residual));
    auto& block = model.blocks()[0];
    Rng rng(9);
    const auto x = random_tensor({2, 6, 5}, rng);
    const auto perm = shuffled(6, 11);
    const auto y = block.channel_mixing_forward(x);
    EXPECT_EQ(block.channel_mixing_forward(permute_axis(x, 1, perm)), permute_axis(y, 1, perm));
  }
}

TEST(ChannelMixing, MatchesPerTokenLoopOracle) {
  for (bool residual : {false, true}) {
    KanMixer<double> model(small_config(residual));
    auto& block = model.blocks()[0];
    Rng rng(10);
    const auto x = random_tensor({2, 6, 5}, rng);
    const auto y = block.channel_mixing_forward(x);
    for (std::size_t row = 0; row < 12; ++row) {
      std::vector<double> v(x.storage().begin() + row * 5, x.storage().begin() + (row + 1) * 5);
      std::vector<double> u = v;
      if (residual) {
        // Layer norm with unit gain and zero bias, written out directly.
        double mean = 0, var = 0;
        for (double a : v) mean += a / 5.0;
        for (double a : v) var += (a - mean) * (a - mean) / 5.0;
        for (auto& a : u) a = (a - mean) / std::sqrt(var + 1e-5);
      }
      const auto ref = oracle_kan(block.channel_out(), oracle_kan(block.channel_in(), u));
      for (std::size_t d = 0; d < 5; ++d) {
        EXPECT_NEAR(y[row * 5 + d], ref[d] + (residual ? v[d] : 0.0), 1e-12);
      }
    }
  }
}

TEST(MixerBlock, RejectsWrongShape) {
  KanMixer<double> model(small_config(false));
  EXPECT_THROW(model.blocks()[0].forward(Tensor<double>(Shape{1, 5, 5})), ShapeMismatch);
  EXPECT_THROW(model.blocks()[0].forward(Tensor<double>(Shape{1, 6, 4})), ShapeMismatch);
}

TEST(Head, TokenPermutationInvariant) {
  // With no mixer blocks, permuting the patches permutes the head's input tokens.
  MixerConfig cfg = small_config(false);
  cfg.depth = 0;
  KanMixer<double> model(cfg);
  Rng rng(12);
  const auto x = random_tensor({3, 2, 6, 4}, rng);
  const auto logits = model.forward(x);
  const auto perm = shuffled(6, 13);
  const auto xp = patches_to_image(permute_axis(image_to_patches(x, 2), 1, perm), 2, 6, 4, 2);
  const auto lp = model.forward(xp);
  for (std::size_t i = 0; i < logits.numel(); ++i) EXPECT_NEAR(lp[i], logits[i], 1e-12);
}

TEST(Model, ZeroHeadWithoutBlocksGivesZeroLogits) {
  MixerConfig cfg = small_config(false);
  cfg.depth = 0;
  KanMixer<double> model(cfg);
  for (auto& v : model.head().weight().data()) v = 0.0;
  for (auto& v : model.head().coeffs().data()) v = 0.0;
  Rng rng(14);
  const auto logits = model.forward(random_tensor({2, 2, 6, 4}, rng));
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, OutputShapeForVariousConfigs) {
  Rng rng(15);
  for (std::size_t p : {1u, 2u, 4u}) {
    for (std::size_t depth : {0u, 1u, 3u}) {
      MixerConfig cfg;
      cfg.in_channels = 3;
      cfg.image_height = 8;
      cfg.image_width = 4;
      cfg.patch_size = p;
      cfg.n_channels = 3;
      cfg.n_hiddens = 2;
      cfg.depth = depth;
      cfg.n_output = 7;
      KanMixer<double> model(cfg);
      const auto x = random_tensor({2, 3, 8, 4}, rng);
      const auto tokens = model.per_patch_forward(image_to_patches(x, p));
      EXPECT_EQ(tokens.shape(), (Shape{2, cfg.n_tokens(), 3}));
      EXPECT_EQ(model.forward(x).shape(), (Shape{2, 7}));
    }
  }
}

TEST(Model, RejectsWrongInputShape) {
  KanMixer<double> model(small_config(false));
  EXPECT_THROW(model.forward(Tensor<double>(Shape{1, 1, 6, 4})), ShapeMismatch);
  EXPECT_THROW(model.forward(Tensor<double>(Shape{1, 2, 4, 6})), ShapeMismatch);
}

TEST(Model, BackwardRequiresForward) {
  KanMixer<double> model(small_config(false));
  EXPECT_THROW(model.backward(Tensor<double>(Shape{1, 4})), StaleCache);
}

TEST(Model, ParamCountFormula) {
  for (bool residual : {false, true}) {
    const MixerConfig cfg = small_config(residual);
    KanMixer<double> model(cfg);
    const std::size_t per_edge = 1 + static_cast<std::size_t>(cfg.grid_size + cfg.spline_order);
    const std::size_t n = cfg.n_tokens(), d = cfg.n_channels, h = cfg.n_hiddens;
    std::size_t block = (n * h + h * n + d * h + h * d) * per_edge;
    if (residual) block += 4 * d;
    const std::size_t expected = cfg.patch_dim() * d * per_edge + cfg.depth * block + 2 * d +
                                 d * cfg.n_output * per_edge;
    EXPECT_EQ(model.param_count(), expected);
  }
}

TEST(Model, ParameterNamesAreUnique) {
  KanMixer<double> model(small_config(true));
  std::vector<std::string> names;
  for (const auto& p : model.parameters()) names.push_back(p.name);
  EXPECT_EQ(names.front(), "embed.w");
  EXPECT_EQ(names.back(), "head.c");
  EXPECT_NE(std::find(names.begin(), names.end(), "blocks.1.channel_norm.gain"), names.end());
  std::sort(names.begin(), names.end());
  EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
}

TEST(Model, ZeroUpstreamGivesZeroGradients) {
  KanMixer<double> model(small_config(true));
  Rng rng(16);
  model.zero_grad();
  model.forward(random_tensor({2, 2, 6, 4}, rng));
  const auto dx = model.backward(Tensor<double>(Shape{2, 4}, 0.0));
  for (double v : dx.data()) EXPECT_EQ(v, 0.0);
  for (const auto& p : model.parameters()) {
    for (double v : p.tensor->grad()) ASSERT_EQ(v, 0.0) << p.name;
  }
}

TEST(Model, GradientsAreDeterministic) {
  auto run = [] {
    KanMixer<double> model(small_config(true));
    Rng rng(17);
    model.zero_grad();
    model.forward(random_tensor({2, 2, 6, 4}, rng));
    model.backward(random_tensor({2, 4}, rng));
    std::vector<double> all;
    for (const auto& p : model.parameters()) all.insert(all.end(), p.tensor->grad().begin(), p.tensor->grad().end());
    return all;
  };
  EXPECT_EQ(run(), run());
}

TEST(Model, SeedDeterminesParameters) {
  MixerConfig a = small_config(false);
  KanMixer<double> m1(a), m2(a);
  a.seed += 1;
  KanMixer<double> m3(a);
  EXPECT_EQ(m1.embed().weight(), m2.embed().weight());
  EXPECT_NE(m1.embed().weight(), m3.embed().weight());
  // Sibling layers draw from distinct streams.
  EXPECT_NE(m1.blocks()[0].token_in().weight().storage()[0], m1.blocks()[1].token_in().weight().storage()[0]);
}

class TinyGradCheck : public ::testing::TestWithParam<bool> {};

TEST_P(TinyGradCheck, AllGroupsMatchFiniteDifferences) {
  const auto report = grad_check_full(tiny_config(GetParam()), 1e-3);
  EXPECT_TRUE(report.passed) << "worst group " << report.worst_group << " rel " << report.max_rel_error;
  EXPECT_LT(report.max_rel_error, 1e-3);
  KanMixer<double> model(tiny_config(GetParam()));
  std::vector<std::string> groups;
  for (const auto& g : report.groups) groups.push_back(g.name);
  for (const auto& p : model.parameters()) {
    EXPECT_NE(std::find(groups.begin(), groups.end(), p.name), groups.end()) << p.name;
  }
  EXPECT_NE(std::find(groups.begin(), groups.end(), "input"), groups.end());
}

INSTANTIATE_TEST_SUITE_P(Residual, TinyGradCheck, ::testing::Bool());

}  // namespace
}  // namespace kanmix
