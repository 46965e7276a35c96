#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "biomass/checkpoint.hpp"
#include "biomass/config.hpp"
#include "biomass/train.hpp"

namespace biomass {

inline constexpr int kResultSchemaVersion = 1;

struct PreparedData {
  std::vector<SampleRecord> records;
  std::vector<TrainSample> samples;  // parallel to records
  Vocabulary vocab;
};

PreparedData prepare_dataset(const ExperimentConfig& cfg);

nlohmann::json experiment_config_json(const ExperimentConfig& cfg);

template <class T>
const char* precision_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

// Runs every fold (optionally across worker threads; one fold never spans
// two workers), aggregates, and writes result.json / curves.csv / per-fold
// checkpoints. All file writes happen on the calling thread after joining.
template <class T>
nlohmann::json run_experiment_typed(const ExperimentConfig& cfg, int workers,
                                    const std::string& out_dir) {
  const auto t_start = std::chrono::steady_clock::now();
  PreparedData data = prepare_dataset(cfg);
  FoldAssignment assignment = stratified_group_kfold(data.records, cfg.n_folds, cfg.seed);

  const int n_folds = cfg.n_folds;
  std::vector<std::unique_ptr<DualViewModel<T>>> models(n_folds);
  std::vector<FoldReport> reports(n_folds);
  std::vector<std::exception_ptr> errors(n_folds);

  auto run_fold = [&](int fold) {
    try {
      RngStream fold_rng = RngStream(cfg.seed).child("fold").child(static_cast<std::uint64_t>(fold));
      RngStream init_rng = fold_rng.child("init");
      models[fold] = std::make_unique<DualViewModel<T>>(cfg.model_config(), init_rng);
      std::vector<TrainSample> train_set, val_set;
      for (std::size_t i : assignment.indices_in_fold(data.records, fold, false)) {
        train_set.push_back(data.samples[i]);
      }
      for (std::size_t i : assignment.indices_in_fold(data.records, fold, true)) {
        val_set.push_back(data.samples[i]);
      }
      reports[fold] =
          train_fold(*models[fold], train_set, val_set, cfg.train, fold, fold_rng.child("train"));
    } catch (...) {
      errors[fold] = std::current_exception();
    }
  };

  const int n_workers = std::max(1, std::min(workers, n_folds));
  if (n_workers == 1) {
    for (int f = 0; f < n_folds; ++f) run_fold(f);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) {
      pool.emplace_back([&, w] {
        for (int f = w; f < n_folds; f += n_workers) run_fold(f);
      });
    }
    for (auto& t : pool) t.join();
  }

  nlohmann::json doc;
  doc["schema_version"] = kResultSchemaVersion;
  doc["artifact_version"] = kArtifactVersion;
  doc["precision"] = precision_name<T>();
  doc["config"] = experiment_config_json(cfg);

  nlohmann::json folds_json = nlohmann::json::array();
  std::vector<double> best_metrics;
  std::vector<int> failed;
  double wall_total = 0;
  for (int f = 0; f < n_folds; ++f) {
    if (errors[f]) {
      failed.push_back(f);
      continue;
    }
    const FoldReport& r = reports[f];
    nlohmann::json jf;
    jf["fold"] = r.fold;
    jf["best_epoch"] = r.best_epoch;
    jf["best_weighted_r2"] = r.best_weighted_r2;
    jf["per_target_r2"] = r.best_per_target_r2;
    jf["epochs_trained"] = r.epochs.size();
    jf["wall_time_sec"] = r.wall_time_sec;
    folds_json.push_back(jf);
    best_metrics.push_back(r.best_weighted_r2);
    wall_total += r.wall_time_sec;
  }
  doc["folds"] = folds_json;
  if (!failed.empty()) doc["failed_folds"] = failed;
  if (failed.empty() && best_metrics.size() >= 2) {
    try {
      FoldAggregate agg = aggregate_folds(best_metrics);
      doc["aggregate"] = {{"mean", agg.mean},
                          {"std", agg.stddev},
                          {"cv_percent", agg.cv_percent}};
    } catch (const MetricError&) {
      // cv is undefined for a non-positive mean; keep mean/std
      double mean = 0;
      for (double v : best_metrics) mean += v;
      mean /= static_cast<double>(best_metrics.size());
      double var = 0;
      for (double v : best_metrics) var += (v - mean) * (v - mean);
      var /= static_cast<double>(best_metrics.size());
      doc["aggregate"] = {{"mean", mean},
                          {"std", std::sqrt(var)},
                          {"cv_percent", nullptr}};
    }
  }
  doc["wall_time_sec"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  (void)wall_total;

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  {
    std::ofstream f(fs::path(out_dir) / "result.json", std::ios::binary);
    if (!f) throw IoError("cannot write result.json under '" + out_dir + "'");
    f << doc.dump(2) << "\n";
  }
  {
    std::ofstream f(fs::path(out_dir) / "curves.csv", std::ios::binary);
    if (!f) throw IoError("cannot write curves.csv under '" + out_dir + "'");
    f << "fold,epoch,train_loss,val_weighted_r2,lr_backbone,lr_task\n";
    char buf[256];
    for (int fold = 0; fold < n_folds; ++fold) {
      if (errors[fold]) continue;
      for (const EpochStats& e : reports[fold].epochs) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g,%.17g,%.17g\n", fold, e.epoch,
                      e.train_loss, e.val_weighted_r2, e.lr_backbone, e.lr_task);
        f << buf;
      }
    }
  }
  for (int fold = 0; fold < n_folds; ++fold) {
    if (errors[fold] || !models[fold]) continue;
    auto params = models[fold]->named_parameters();
    save_checkpoint(
        (fs::path(out_dir) / ("fold_" + std::to_string(fold) + ".ckpt")).string(), params);
  }

  if (!failed.empty()) std::rethrow_exception(errors[failed.front()]);
  return doc;
}

nlohmann::json run_experiment(const ExperimentConfig& cfg, int workers,
                              const std::string& out_dir);

// CLI entry points; each returns a process exit code.
int cmd_splits(const std::string& manifest_path, std::uint64_t seed, const std::string& out_csv,
               std::ostream& os);
int cmd_params(int d_model, int head_hidden, int depth, std::ostream& os);
int cmd_run(const ExperimentConfig& cfg, int workers, const std::string& out_dir,
            std::ostream& os);
int cmd_features(const std::string& manifest_path, const std::string& out_dir, std::ostream& os,
                 std::ostream& err);
int cmd_synth(const SynthSpec& spec, std::uint64_t seed, const std::string& out_dir,
              std::ostream& os);
int cmd_grad_check(std::ostream& os);

}  // namespace biomass
