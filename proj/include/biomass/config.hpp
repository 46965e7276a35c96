#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "biomass/data.hpp"
#include "biomass/fusion.hpp"
#include "biomass/model.hpp"
#include "biomass/train.hpp"

namespace biomass {

inline constexpr int kConfigVersion = 1;
inline constexpr const char* kArtifactVersion = "0.1.0";

// Flat `key = value` text format. '#' starts a comment line; keys are typed
// at the point of use and unknown keys are rejected.
class KeyValueConfig {
 public:
  static KeyValueConfig from_file(const std::string& path);
  static KeyValueConfig from_string(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& key) const;
  std::string require_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // throws ConfigError when any key was never consumed (typo guard)
  void finish() const;

 private:
  std::string origin_;
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

enum class DatasetKind { synth, manifest };

struct ExperimentConfig {
  std::uint64_t seed = 17;
  std::string precision = "f64";
  std::string output_dir = "out";
  int n_folds = 5;

  DatasetKind dataset_kind = DatasetKind::synth;
  SynthSpec synth;
  std::string manifest_path;
  std::string vocab_path;  // empty -> built-in vocabulary

  BackboneSpec backbone;
  FusionConfig fusion;
  bool metadata = false;
  double metadata_dropout = 0.2;
  int head_hidden = 64;
  double head_dropout = 0.2;
  TrainConfig train;

  static ExperimentConfig from_file(const std::string& path);
  static ExperimentConfig from_kv(const KeyValueConfig& kv);

  ModelConfig model_config() const;
  void validate() const;
};

}  // namespace biomass
