#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kanmix/dataset.hpp"
#include "kanmix/errors.hpp"
#include "kanmix/mixer.hpp"
#include "kanmix/rng.hpp"
#include "kanmix/tensor.hpp"

namespace kanmix {

template <typename Real>
struct LossResult {
  Real loss;
  Tensor<Real> dlogits;
};

/// Mean softmax cross-entropy over the batch and its gradient
/// (softmax - onehot) / B, computed with a max-shifted log-sum-exp.
template <typename Real>
LossResult<Real> softmax_cross_entropy(const Tensor<Real>& logits,
                                       std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeMismatch("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                        std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  LossResult<Real> out{Real(0), Tensor<Real>(logits.shape())};
  const Real inv_b = Real(1) / static_cast<Real>(b);
  for (std::size_t r = 0; r < b; ++r) {
    const auto label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw LabelOutOfRange("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(k) + ")");
    }
    const Real* z = logits.data().data() + r * k;
    Real* g = out.dlogits.data().data() + r * k;
    const Real zmax = *std::max_element(z, z + k);
    Real sum = 0;
    for (std::size_t j = 0; j < k; ++j) {
      g[j] = std::exp(z[j] - zmax);
      sum += g[j];
    }
    const Real lse = zmax + std::log(sum);
    out.loss += (lse - z[label]) * inv_b;
    for (std::size_t j = 0; j < k; ++j) g[j] = g[j] / sum * inv_b;
    g[label] -= inv_b;
  }
  return out;
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename Real>
struct OptimState {
  AdamOptions options;
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::uint64_t step = 0;

  OptimState() = default;
  explicit OptimState(AdamOptions opts) : options(opts) {}
};

/// One bias-corrected Adam update with decoupled weight decay.
/// Moment buffers are created on the first call and shape-checked afterwards.
template <typename Real>
void adam_step(std::span<const std::span<Real>> params, std::span<const std::span<const Real>> grads,
               OptimState<Real>& state) {
  const AdamOptions& o = state.options;
  if (!(o.lr > 0)) throw ConfigError("learning rate must be > 0");
  if (params.size() != grads.size()) throw ShapeMismatch("adam_step: params/grads count differ");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), Real(0));
      state.v.emplace_back(p.size(), Real(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeMismatch("adam_step: optimizer state mismatch");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const Real bc1 = static_cast<Real>(1.0 - std::pow(o.beta1, t));
  const Real bc2 = static_cast<Real>(1.0 - std::pow(o.beta2, t));
  const Real lr = static_cast<Real>(o.lr), b1 = static_cast<Real>(o.beta1),
             b2 = static_cast<Real>(o.beta2), eps = static_cast<Real>(o.eps),
             decay = static_cast<Real>(o.lr * o.weight_decay);
  for (std::size_t g = 0; g < params.size(); ++g) {
    auto p = params[g];
    auto gr = grads[g];
    auto& m = state.m[g];
    auto& v = state.v[g];
    if (gr.size() != p.size() || m.size() != p.size()) {
      throw ShapeMismatch("adam_step: parameter " + std::to_string(g) + " size changed");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (decay != Real(0)) p[i] -= decay * p[i];
      m[i] = b1 * m[i] + (Real(1) - b1) * gr[i];
      v[i] = b2 * v[i] + (Real(1) - b2) * gr[i] * gr[i];
      const Real mhat = m[i] / bc1;
      const Real vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename Real>
void adam_step(std::vector<NamedParam<Real>>& params, OptimState<Real>& state) {
  std::vector<std::span<Real>> ps;
  std::vector<std::span<const Real>> gs;
  for (auto& p : params) {
    ps.push_back(p.tensor->data());
    gs.push_back(p.tensor->grad());
  }
  adam_step<Real>(ps, gs, state);
}

struct EvalResult {
  double accuracy = 0.0;
  double elapsed_s = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};

/// Index of the largest entry; ties go to the lowest index.
template <typename Real>
std::size_t argmax(std::span<const Real> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

/// Top-1 accuracy of `model` over `ds`, in dataset order.
template <typename Model>
EvalResult evaluate(Model& model, const Dataset& ds, std::size_t batch_size = 256) {
  using Real = typename Model::real_type;
  if (model.n_output() != ds.n_classes) {
    throw ShapeMismatch("model predicts " + std::to_string(model.n_output()) +
                        " classes but dataset has " + std::to_string(ds.n_classes));
  }
  const auto start = std::chrono::steady_clock::now();
  EvalResult res;
  for (const auto& idx : batch_indices(ds.size(), batch_size, 0, 0, false)) {
    const auto batch = make_batch<Real>(ds, idx);
    const Tensor<Real> logits = model.forward(batch.images);
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto pred = argmax<Real>(logits.data().subspan(r * k, k));
      if (static_cast<std::int32_t>(pred) == batch.labels[r]) ++res.correct;
    }
    res.total += idx.size();
  }
  res.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  res.accuracy = res.total ? static_cast<double>(res.correct) / static_cast<double>(res.total) : 0.0;
  return res;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double epoch_time_s = 0.0;
  double train_loss = 0.0;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  std::vector<double> step_losses;
  double test_time_s = 0.0;
  double test_accuracy = 0.0;
  std::size_t param_count = 0;
  double est_memory_mb = 0.0;  // parameter bytes + peak activation-cache bytes
};

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  AdamOptions adam;
  std::size_t eval_batch_size = 256;
  bool evaluate_test = true;
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// Shuffled minibatch training with Adam, followed by one test-set evaluation.
template <typename Real>
RunMetrics train(KanMixer<Real>& model, const Dataset& train_ds, const Dataset& test_ds,
                 const TrainOptions& opts) {
  const auto& cfg = model.config();
  if (train_ds.channels() != cfg.in_channels || train_ds.height() != cfg.image_height ||
      train_ds.width() != cfg.image_width || train_ds.n_classes != cfg.n_output) {
    throw ShapeMismatch("dataset '" + train_ds.name + "' does not match the model configuration");
  }
  RunMetrics metrics;
  auto params = model.parameters();
  metrics.param_count = model.param_count();
  OptimState<Real> state(opts.adam);
  std::size_t peak_cache = 0;

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    for (const auto& idx : batch_indices(train_ds.size(), opts.batch_size, opts.seed, epoch, true)) {
      const auto batch = make_batch<Real>(train_ds, idx);
      model.zero_grad();
      const auto logits = model.forward(batch.images);
      peak_cache = std::max(peak_cache, model.cache_bytes());
      auto [loss, dlogits] = softmax_cross_entropy<Real>(logits, batch.labels);
      model.backward(dlogits);
      adam_step(params, state);
      metrics.step_losses.push_back(static_cast<double>(loss));
      loss_sum += static_cast<double>(loss) * static_cast<double>(idx.size());
    }
    EpochMetrics em;
    em.epoch = epoch + 1;
    em.epoch_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    em.train_loss = loss_sum / static_cast<double>(train_ds.size());
    metrics.epochs.push_back(em);
    if (opts.on_epoch) opts.on_epoch(em);
  }

  if (opts.evaluate_test) {
    const auto res = evaluate(model, test_ds, opts.eval_batch_size);
    metrics.test_accuracy = res.accuracy;
    metrics.test_time_s = res.elapsed_s;
  }
  if (peak_cache == 0) {
    // No training step ran; size the cache from a single training-size batch.
    const std::size_t b = std::min(opts.batch_size, train_ds.size());
    std::vector<std::size_t> idx(b);
    for (std::size_t i = 0; i < b; ++i) idx[i] = i;
    model.forward(make_batch<Real>(train_ds, idx).images);
    peak_cache = model.cache_bytes();
  }
  metrics.est_memory_mb =
      static_cast<double>(metrics.param_count * sizeof(Real) + peak_cache) / (1024.0 * 1024.0);
  return metrics;
}

struct GroupError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t count = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_group;
  std::size_t worst_index = 0;
  std::vector<GroupError> groups;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  std::size_t batch = 2;
  std::uint64_t seed = 7;
  double step = 1e-4;
  // Gradients smaller than this are compared in absolute terms.
  double abs_floor = 1e-6;
  // Replaces KanMixer::backward; the mutation test injects a broken one here.
  std::function<Tensor<double>(KanMixer<double>&, const Tensor<double>&)> backward;
};

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares every analytic parameter and input gradient of a fresh model
/// against central finite differences of the mean cross-entropy on one random
/// batch.
inline GradCheckReport grad_check_full(const MixerConfig& cfg, double tolerance,
                                       const GradCheckOptions& opts = {}) {
  KanMixer<double> model(cfg);
  Rng rng(opts.seed);
  Tensor<double> images(Shape{opts.batch, cfg.in_channels, cfg.image_height, cfg.image_width});
  for (auto& v : images.data()) v = rng.uniform(-1.0, 1.0);
  std::vector<std::int32_t> labels(opts.batch);
  for (auto& l : labels) l = static_cast<std::int32_t>(rng.below(cfg.n_output));

  auto loss_at = [&](const Tensor<double>& x) {
    return softmax_cross_entropy<double>(model.forward(x), labels).loss;
  };

  model.zero_grad();
  auto [loss0, dlogits] = softmax_cross_entropy<double>(model.forward(images), labels);
  const Tensor<double> dx = opts.backward ? opts.backward(model, dlogits) : model.backward(dlogits);

  GradCheckReport report;
  auto record = [&](GroupError& group, std::size_t index, double analytic, double numeric) {
    const double err = relative_error(analytic, numeric, opts.abs_floor);
    ++group.count;
    ++report.checked;
    group.max_rel_error = std::max(group.max_rel_error, err);
    if (err > report.max_rel_error || report.worst_group.empty()) {
      report.max_rel_error = std::max(report.max_rel_error, err);
      report.worst_group = group.name;
      report.worst_index = index;
    }
  };

  const double h = opts.step;
  for (auto& p : model.parameters()) {
    GroupError group{p.name, 0.0, 0};
    const std::vector<double> analytic(p.tensor->grad().begin(), p.tensor->grad().end());
    auto values = p.tensor->data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = loss_at(images);
      values[i] = orig - h;
      const double down = loss_at(images);
      values[i] = orig;
      record(group, i, analytic[i], (up - down) / (2 * h));
    }
    report.groups.push_back(group);
  }

  GroupError input_group{"input", 0.0, 0};
  Tensor<double> probe = images;
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = loss_at(probe);
    probe[i] = orig - h;
    const double down = loss_at(probe);
    probe[i] = orig;
    record(input_group, i, dx[i], (up - down) / (2 * h));
  }
  report.groups.push_back(input_group);
  report.passed = report.max_rel_error < tolerance;
  return report;
}

/// The small configuration used for full-model gradient checks:
/// one 4x4 channel, 2x2 patches, D = H = 4, one block, three classes.
inline MixerConfig tiny_config(bool residual) {
  MixerConfig cfg;
  cfg.in_channels = 1;
  cfg.image_height = 4;
  cfg.image_width = 4;
  cfg.patch_size = 2;
  cfg.n_channels = 4;
  cfg.n_hiddens = 4;
  cfg.depth = 1;
  cfg.n_output = 3;
  cfg.residual = residual;
  cfg.seed = 3;
  return cfg;
}

}  // namespace kanmix
