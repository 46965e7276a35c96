#include "biomass/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "biomass/errors.hpp"

namespace biomass {

double r2(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw MetricError("r2: length mismatch");
  if (truth.size() < 2) throw MetricError("r2 needs at least 2 samples");
  double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / truth.size();
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot == 0.0) throw MetricError("r2 undefined: truth values are constant");
  return 1.0 - ss_res / ss_tot;
}

double weighted_r2(std::span<const double, kNumTargets> per_target) {
  double s = 0;
  for (int i = 0; i < kNumTargets; ++i) s += kTargetWeights[i] * per_target[i];
  return s;
}

double weighted_r2(const std::array<double, kNumTargets>& per_target) {
  return weighted_r2(std::span<const double, kNumTargets>(per_target));
}

TargetMatrix to_log_targets(const std::vector<SampleRecord>& records,
                            std::span<const std::size_t> indices) {
  TargetMatrix m;
  for (auto& col : m) col.reserve(indices.size());
  for (std::size_t idx : indices) {
    const auto arr = records[idx].targets.as_array();
    for (int t = 0; t < kNumTargets; ++t) m[t].push_back(log1p_target(arr[t]));
  }
  return m;
}

MetricReport score_log_predictions(const TargetMatrix& pred_log, const TargetMatrix& truth_log) {
  MetricReport report;
  for (int t = 0; t < kNumTargets; ++t) {
    report.per_target_r2[t] = r2(pred_log[t], truth_log[t]);
  }
  report.weighted = weighted_r2(report.per_target_r2);
  return report;
}

MetricReport median_predictor(const TargetMatrix& train_log, const TargetMatrix& eval_log) {
  if (train_log[0].empty() || eval_log[0].empty()) {
    throw MetricError("median_predictor needs non-empty splits");
  }
  TargetMatrix pred;
  for (int t = 0; t < kNumTargets; ++t) {
    std::vector<double> v = train_log[t];
    std::sort(v.begin(), v.end());
    const double med =
        (v.size() % 2) ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    pred[t].assign(eval_log[t].size(), med);
  }
  return score_log_predictions(pred, eval_log);
}

FoldAggregate aggregate_folds(std::span<const double> fold_metrics) {
  if (fold_metrics.size() < 2) throw MetricError("aggregate_folds needs at least 2 folds");
  FoldAggregate agg;
  agg.mean = std::accumulate(fold_metrics.begin(), fold_metrics.end(), 0.0) /
             static_cast<double>(fold_metrics.size());
  double var = 0;
  for (double v : fold_metrics) var += (v - agg.mean) * (v - agg.mean);
  var /= static_cast<double>(fold_metrics.size());
  agg.stddev = std::sqrt(var);
  if (agg.mean <= 0) throw MetricError("cv undefined for non-positive mean");
  agg.cv_percent = 100.0 * agg.stddev / agg.mean;
  return agg;
}

std::string format_cv(double cv_percent) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", std::floor(cv_percent * 10.0) / 10.0);
  return buf;
}

ColorIndices color_indices(const ImageTensor& img) {
  if (img.values.empty()) throw DataError("color_indices on empty image");
  constexpr double eps = 1e-8;
  ColorIndices out;
  const std::size_t n = img.height * img.width;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = img.values[i * 3 + 0];
    const double g = img.values[i * 3 + 1];
    const double b = img.values[i * 3 + 2];
    out.exg += 2 * g - r - b;
    out.greenness += g / (r + g + b + eps);
    out.brightness += (r + g + b) / 3.0;
  }
  out.exg /= static_cast<double>(n);
  out.greenness /= static_cast<double>(n);
  out.brightness /= static_cast<double>(n);
  return out;
}

namespace {

std::vector<double> mid_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw MetricError("spearman: length mismatch");
  if (x.size() < 3) throw MetricError("spearman needs at least 3 points");
  const auto rx = mid_ranks(x);
  const auto ry = mid_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) throw MetricError("spearman undefined: zero rank variance");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace biomass
