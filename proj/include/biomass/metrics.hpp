#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "biomass/data.hpp"
#include "biomass/image.hpp"

namespace biomass {

// Eq-weighted combination: (green, dead, clover, gdm, total)
inline constexpr std::array<double, kNumTargets> kTargetWeights = {0.1, 0.1, 0.1, 0.2, 0.5};

// Coefficient of determination; throws MetricError when the truth is constant.
double r2(std::span<const double> pred, std::span<const double> truth);

double weighted_r2(std::span<const double, kNumTargets> per_target);
double weighted_r2(const std::array<double, kNumTargets>& per_target);

struct MetricReport {
  std::array<double, kNumTargets> per_target_r2{};
  double weighted = 0;
};

// log-space target matrices: one column of values per target
using TargetMatrix = std::array<std::vector<double>, kNumTargets>;

TargetMatrix to_log_targets(const std::vector<SampleRecord>& records,
                            std::span<const std::size_t> indices);

MetricReport score_log_predictions(const TargetMatrix& pred_log, const TargetMatrix& truth_log);

// Constant per-target training median (log space) scored on the eval split.
MetricReport median_predictor(const TargetMatrix& train_log, const TargetMatrix& eval_log);

struct FoldAggregate {
  double mean = 0;
  double stddev = 0;      // population
  double cv_percent = 0;  // 100 * std / mean
};

FoldAggregate aggregate_folds(std::span<const double> fold_metrics);

// One-decimal display, truncated toward zero (the reported table style).
std::string format_cv(double cv_percent);

struct ColorIndices {
  double exg = 0;        // mean of 2G - R - B
  double greenness = 0;  // mean of G / (R + G + B + eps)
  double brightness = 0; // mean of (R + G + B) / 3
};

ColorIndices color_indices(const ImageTensor& img);

// Spearman rank correlation with mid-rank tie handling; n >= 3.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace biomass
