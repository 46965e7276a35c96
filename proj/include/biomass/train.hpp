#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "biomass/checkpoint.hpp"
#include "biomass/data.hpp"
#include "biomass/metrics.hpp"
#include "biomass/model.hpp"

namespace biomass {

struct TrainConfig {
  double lr_backbone = 1e-5;
  double lr_task = 5e-4;
  double weight_decay = 1e-2;
  int warmup_epochs = 5;
  int max_epochs = 50;
  int patience = 10;
  double huber_beta = 5.0;
  double clip_norm = 1.0;
  int batch_size = 8;
  bool components_only_loss = false;  // default supervises all five log targets
  bool augment = false;

  void validate() const {
    if (lr_backbone <= 0 || lr_task <= 0) throw ConfigError("learning rates must be > 0");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs > max_epochs) {
      throw ConfigError("warmup_epochs must be in [0, max_epochs]");
    }
    if (patience < 0 || patience > max_epochs) {
      throw ConfigError("patience must be in [0, max_epochs]");
    }
    if (huber_beta <= 0) throw ConfigError("huber_beta must be > 0");
    if (clip_norm <= 0) throw ConfigError("clip_norm must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }
};

// Linear warmup to the peak, then cosine decay to the floor.
inline double cosine_warmup_lr(int epoch, double peak, int warmup, int total) {
  if (epoch < 0 || epoch >= total) {
    throw ScheduleError("epoch " + std::to_string(epoch) + " outside schedule of " +
                        std::to_string(total));
  }
  if (epoch < warmup) return peak * static_cast<double>(epoch + 1) / warmup;
  if (total == warmup) return peak;
  const double phase = static_cast<double>(epoch - warmup) / (total - warmup);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * phase));
}

// Scales all gradients so the global L2 norm does not exceed max_norm;
// returns the pre-clip norm. Parameters without a gradient buffer count as
// zero gradient.
template <class T>
double clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (Tensor<T> p : params) {  // handles share storage
      if (!p.has_grad()) continue;
      for (T& g : p.grad_mut()) g *= s;
    }
  }
  return norm;
}

// Decoupled-weight-decay Adam over parameter groups with independent
// learning rates.
template <class T>
class AdamW {
 public:
  struct GroupSpec {
    std::vector<Tensor<T>> params;
    double lr = 1e-3;
  };

  AdamW(std::vector<GroupSpec> groups, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8)
      : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& g : groups) {
      Group grp;
      grp.params = std::move(g.params);
      grp.lr = g.lr;
      for (auto& p : grp.params) {
        grp.m.emplace_back(p.numel(), T(0));
        grp.v.emplace_back(p.numel(), T(0));
      }
      groups_.push_back(std::move(grp));
    }
  }

  void set_lr(std::size_t group, double lr) { groups_.at(group).lr = lr; }
  double lr(std::size_t group) const { return groups_.at(group).lr; }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

  std::vector<Tensor<T>> all_params() const {
    std::vector<Tensor<T>> out;
    for (const auto& g : groups_)
      for (const auto& p : g.params) out.push_back(p);
    return out;
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& g : groups_) {
      for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
        auto& p = g.params[pi];
        auto vals = p.data_mut();
        const bool has_grad = p.has_grad();
        auto grads = has_grad ? p.grad() : std::span<const T>();
        auto& m = g.m[pi];
        auto& v = g.v[pi];
        for (std::size_t i = 0; i < vals.size(); ++i) {
          const double gi = has_grad ? static_cast<double>(grads[i]) : 0.0;
          if (!std::isfinite(gi)) throw NumericError("non-finite gradient in optimizer step");
          const double mi = b1_ * static_cast<double>(m[i]) + (1.0 - b1_) * gi;
          const double vi = b2_ * static_cast<double>(v[i]) + (1.0 - b2_) * gi * gi;
          m[i] = static_cast<T>(mi);
          v[i] = static_cast<T>(vi);
          const double mhat = mi / bc1;
          const double vhat = vi / bc2;
          const double theta = static_cast<double>(vals[i]);
          vals[i] = static_cast<T>(theta - g.lr * mhat / (std::sqrt(vhat) + eps_) -
                                   g.lr * wd_ * theta);
        }
      }
    }
  }

 private:
  struct Group {
    std::vector<Tensor<T>> params;
    double lr = 0;
    std::vector<std::vector<T>> m, v;
  };
  std::vector<Group> groups_;
  double wd_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// per-fold training

// Strict-improvement early stopping: stop after `patience` consecutive
// non-improving epochs.
struct EarlyStopState {
  double best_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int epochs_since_improve = 0;

  bool observe(int epoch, double metric) {
    if (metric > best_metric) {
      best_metric = metric;
      best_epoch = epoch;
      epochs_since_improve = 0;
      return true;
    }
    ++epochs_since_improve;
    return false;
  }

  bool should_stop(int patience) const { return epochs_since_improve > patience; }
};

struct TrainSample {
  ImageTensor left, right;
  std::array<double, kNumTargets> log_targets{};
  std::optional<MetadataVector> meta;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double val_weighted_r2 = 0;
  double lr_backbone = 0;
  double lr_task = 0;
};

struct FoldReport {
  int fold = -1;
  std::vector<EpochStats> epochs;
  int best_epoch = -1;
  double best_weighted_r2 = -std::numeric_limits<double>::infinity();
  std::array<double, kNumTargets> best_per_target_r2{};
  double wall_time_sec = 0;
};

namespace detail_train {

template <class T>
Tensor<T> stack_scalars(const std::vector<Tensor<T>>& scalars) {
  Tensor<T> out = scalars.front();
  for (std::size_t i = 1; i < scalars.size(); ++i) out = ops::concat_cols(out, scalars[i]);
  return out;
}

}  // namespace detail_train

// Validation always scores with metadata absent (the deployment condition);
// the best checkpoint by validation weighted R^2 is restored into the model
// before returning.
template <class T>
FoldReport train_fold(DualViewModel<T>& model, const std::vector<TrainSample>& train_set,
                      const std::vector<TrainSample>& val_set, const TrainConfig& cfg,
                      int fold_index, RngStream fold_rng) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw DataError("train_fold needs non-empty splits");
  const auto t_start = std::chrono::steady_clock::now();

  auto backbone_named = model.backbone_parameters();
  auto task_named = model.task_parameters();
  std::vector<Tensor<T>> backbone_params, task_params;
  for (auto& [n, t] : backbone_named) backbone_params.push_back(t);
  for (auto& [n, t] : task_named) task_params.push_back(t);
  AdamW<T> opt({{backbone_params, cfg.lr_backbone}, {task_params, cfg.lr_task}},
               cfg.weight_decay);
  const std::vector<Tensor<T>> all_params = opt.all_params();

  auto all_named = model.named_parameters();
  std::vector<std::vector<T>> best_snapshot = snapshot_values(all_named);

  RngStream shuffle_rng = fold_rng.child("shuffle");
  RngStream dropout_rng = fold_rng.child("dropout");
  RngStream augment_rng = fold_rng.child("augment");
  const AugmentPolicy augment_policy;

  FoldReport report;
  report.fold = fold_index;
  EarlyStopState stopper;
  const int n_loss_targets = cfg.components_only_loss ? 3 : kNumTargets;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const double lr_b = cosine_warmup_lr(epoch, cfg.lr_backbone, cfg.warmup_epochs,
                                         cfg.max_epochs);
    const double lr_t = cosine_warmup_lr(epoch, cfg.lr_task, cfg.warmup_epochs, cfg.max_epochs);
    opt.set_lr(0, lr_b);
    opt.set_lr(1, lr_t);

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream erng = shuffle_rng.child(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[erng.uniform_int(i)]);

    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t bsize = end - start;
      std::vector<std::vector<Tensor<T>>> target_scalars(kNumTargets);
      std::vector<std::array<double, kNumTargets>> batch_truth;
      for (std::size_t k = start; k < end; ++k) {
        const TrainSample& s = train_set[order[k]];
        typename DualViewModel<T>::Outputs out;
        if (cfg.augment) {
          ImageTensor l = s.left, r = s.right;
          augment_pair(l, r, augment_policy, augment_rng);
          out = model.forward_views(l, r, s.meta, Mode::train, dropout_rng);
        } else {
          out = model.forward_views(s.left, s.right, s.meta, Mode::train, dropout_rng);
        }
        target_scalars[0].push_back(out.green);
        target_scalars[1].push_back(out.dead);
        target_scalars[2].push_back(out.clover);
        target_scalars[3].push_back(out.gdm);
        target_scalars[4].push_back(out.total);
        batch_truth.push_back(s.log_targets);
      }
      Tensor<T> loss;
      for (int t = 0; t < n_loss_targets; ++t) {
        Tensor<T> pred_log = ops::log1p(detail_train::stack_scalars(target_scalars[t]));
        std::vector<T> truth(bsize);
        for (std::size_t k = 0; k < bsize; ++k) truth[k] = static_cast<T>(batch_truth[k][t]);
        Tensor<T> target(Shape{bsize}, std::move(truth));
        Tensor<T> term = ops::huber_loss(pred_log, target, static_cast<T>(cfg.huber_beta));
        loss = loss.defined() ? ops::add(loss, term) : term;
      }
      loss = ops::scale(loss, T(1) / static_cast<T>(n_loss_targets));
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw NumericError("non-finite training loss (fold " + std::to_string(fold_index) +
                           ", epoch " + std::to_string(epoch) + ")");
      }
      opt.zero_grad();
      loss.backward();
      clip_grad_norm(all_params, cfg.clip_norm);
      opt.step();
      epoch_loss += loss_value * static_cast<double>(bsize);
    }
    epoch_loss /= static_cast<double>(train_set.size());

    // validation in eval mode, metadata absent
    TargetMatrix pred_log, truth_log;
    RngStream eval_rng(0);
    for (const TrainSample& s : val_set) {
      BiomassPrediction p =
          model.predict_views(s.left, s.right, std::nullopt, Mode::eval, eval_rng);
      const std::array<double, kNumTargets> grams = {p.green, p.dead, p.clover, p.gdm, p.total};
      for (int t = 0; t < kNumTargets; ++t) {
        pred_log[t].push_back(log1p_target(grams[t]));
        truth_log[t].push_back(s.log_targets[t]);
      }
    }
    MetricReport val = score_log_predictions(pred_log, truth_log);

    report.epochs.push_back({epoch, epoch_loss, val.weighted, lr_b, lr_t});
    if (stopper.observe(epoch, val.weighted)) {
      report.best_weighted_r2 = val.weighted;
      report.best_per_target_r2 = val.per_target_r2;
      report.best_epoch = epoch;
      best_snapshot = snapshot_values(all_named);
    } else if (stopper.should_stop(cfg.patience)) {
      break;
    }
  }

  restore_values(all_named, best_snapshot);
  report.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return report;
}

}  // namespace biomass
