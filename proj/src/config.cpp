#include "biomass/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace biomass {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_string(ss.str(), path);
}

KeyValueConfig KeyValueConfig::from_string(const std::string& text, const std::string& origin) {
  KeyValueConfig cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(row) + ": expected 'key = value'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(origin + ":" + std::to_string(row) + ": empty key");
    }
    if (cfg.values_.count(key)) {
      throw ConfigError(origin + ":" + std::to_string(row) + ": duplicate key '" + key + "'");
    }
    cfg.values_[key] = value;
  }
  return cfg;
}

bool KeyValueConfig::has(const std::string& key) const { return values_.count(key) > 0; }

std::string KeyValueConfig::require_string(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(origin_ + ": missing required key '" + key + "'");
  consumed_.insert(key);
  return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  consumed_.insert(key);
  return it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  consumed_.insert(key);
  double v = 0;
  auto [p, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (ec != std::errc{} || p != it->second.data() + it->second.size()) {
    throw ConfigError(origin_ + ": key '" + key + "' is not a number: '" + it->second + "'");
  }
  return v;
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  consumed_.insert(key);
  int v = 0;
  auto [p, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (ec != std::errc{} || p != it->second.data() + it->second.size()) {
    throw ConfigError(origin_ + ": key '" + key + "' is not an integer: '" + it->second + "'");
  }
  return v;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  consumed_.insert(key);
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (ec != std::errc{} || p != it->second.data() + it->second.size()) {
    throw ConfigError(origin_ + ": key '" + key + "' is not an unsigned integer: '" + it->second +
                      "'");
  }
  return v;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  consumed_.insert(key);
  if (it->second == "true" || it->second == "1" || it->second == "on") return true;
  if (it->second == "false" || it->second == "0" || it->second == "off") return false;
  throw ConfigError(origin_ + ": key '" + key + "' is not a boolean: '" + it->second + "'");
}

void KeyValueConfig::finish() const {
  std::string unknown;
  for (const auto& [k, v] : values_) {
    if (!consumed_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  }
  if (!unknown.empty()) {
    throw ConfigError(origin_ + ": unknown key(s): " + unknown);
  }
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  return from_kv(KeyValueConfig::from_file(path));
}

ExperimentConfig ExperimentConfig::from_kv(const KeyValueConfig& kv) {
  const int version = kv.get_int("config_version", -1);
  if (version != kConfigVersion) {
    throw ConfigError("config_version must be present and equal " +
                      std::to_string(kConfigVersion));
  }
  ExperimentConfig cfg;
  cfg.seed = kv.get_u64("seed", cfg.seed);
  cfg.precision = kv.get_string("precision", cfg.precision);
  cfg.output_dir = kv.get_string("output_dir", cfg.output_dir);
  cfg.n_folds = kv.get_int("n_folds", cfg.n_folds);

  const std::string dk = kv.get_string("dataset.kind", "synth");
  if (dk == "synth") {
    cfg.dataset_kind = DatasetKind::synth;
  } else if (dk == "manifest") {
    cfg.dataset_kind = DatasetKind::manifest;
  } else {
    throw ConfigError("dataset.kind must be 'synth' or 'manifest'");
  }
  cfg.manifest_path = kv.get_string("dataset.manifest", "");
  cfg.vocab_path = kv.get_string("dataset.vocabulary", "");
  cfg.synth.n = kv.get_int("dataset.synth.n", cfg.synth.n);
  cfg.synth.image_height =
      static_cast<std::size_t>(kv.get_int("dataset.synth.image_height", cfg.synth.image_height));
  cfg.synth.image_width =
      static_cast<std::size_t>(kv.get_int("dataset.synth.image_width", cfg.synth.image_width));
  cfg.synth.pixel_noise = kv.get_double("dataset.synth.pixel_noise", cfg.synth.pixel_noise);
  cfg.synth.zero_green = kv.get_double("dataset.synth.zero_green", cfg.synth.zero_green);
  cfg.synth.zero_dead = kv.get_double("dataset.synth.zero_dead", cfg.synth.zero_dead);
  cfg.synth.zero_clover = kv.get_double("dataset.synth.zero_clover", cfg.synth.zero_clover);
  cfg.synth.meta_correlation =
      kv.get_double("dataset.synth.meta_correlation", cfg.synth.meta_correlation);
  cfg.synth.mass_per_pixel =
      kv.get_double("dataset.synth.mass_per_pixel", cfg.synth.mass_per_pixel);

  cfg.backbone.kind = kv.get_string("backbone.kind", cfg.backbone.kind);
  cfg.backbone.patch = kv.get_int("backbone.patch", cfg.backbone.patch);
  cfg.backbone.d_model = kv.get_int("backbone.d_model", cfg.backbone.d_model);
  cfg.backbone.view_size = kv.get_int("backbone.view_size", cfg.backbone.view_size);

  cfg.fusion.kind = fusion_kind_from_name(kv.get_string("fusion.kind", "gated_dwconv"));
  cfg.fusion.depth = kv.get_int("fusion.depth", 2);
  cfg.fusion.d_model = kv.get_int("fusion.d_model", cfg.backbone.d_model);
  cfg.fusion.kernel = kv.get_int("fusion.kernel", cfg.fusion.kernel);
  cfg.fusion.heads = kv.get_int("fusion.heads", cfg.fusion.heads);
  cfg.fusion.d_head = kv.get_int("fusion.d_head", cfg.fusion.d_head);
  cfg.fusion.d_state = kv.get_int("fusion.d_state", cfg.fusion.d_state);
  cfg.fusion.expand = kv.get_int("fusion.expand", cfg.fusion.expand);
  cfg.fusion.dt_rank = kv.get_int("fusion.dt_rank", cfg.fusion.dt_rank);
  cfg.fusion.dropout_p = kv.get_double("fusion.dropout", cfg.fusion.dropout_p);

  cfg.metadata = kv.get_bool("metadata.enabled", cfg.metadata);
  cfg.metadata_dropout = kv.get_double("metadata.dropout", cfg.metadata_dropout);
  cfg.head_hidden = kv.get_int("heads.hidden", cfg.head_hidden);
  cfg.head_dropout = kv.get_double("heads.dropout", cfg.head_dropout);

  cfg.train.lr_backbone = kv.get_double("train.lr_backbone", cfg.train.lr_backbone);
  cfg.train.lr_task = kv.get_double("train.lr_task", cfg.train.lr_task);
  cfg.train.weight_decay = kv.get_double("train.weight_decay", cfg.train.weight_decay);
  cfg.train.warmup_epochs = kv.get_int("train.warmup_epochs", cfg.train.warmup_epochs);
  cfg.train.max_epochs = kv.get_int("train.max_epochs", cfg.train.max_epochs);
  cfg.train.patience = kv.get_int("train.patience", cfg.train.patience);
  cfg.train.huber_beta = kv.get_double("train.huber_beta", cfg.train.huber_beta);
  cfg.train.clip_norm = kv.get_double("train.clip_norm", cfg.train.clip_norm);
  cfg.train.batch_size = kv.get_int("train.batch_size", cfg.train.batch_size);
  cfg.train.components_only_loss =
      kv.get_bool("train.components_only_loss", cfg.train.components_only_loss);
  cfg.train.augment = kv.get_bool("train.augment", cfg.train.augment);

  kv.finish();
  cfg.validate();
  return cfg;
}

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig m;
  m.backbone = backbone;
  m.fusion = fusion;
  m.metadata = metadata;
  m.metadata_dropout = metadata_dropout;
  m.head_hidden = head_hidden;
  m.head_dropout = head_dropout;
  return m;
}

void ExperimentConfig::validate() const {
  if (precision != "f32" && precision != "f64") {
    throw ConfigError("precision must be 'f32' or 'f64'");
  }
  if (n_folds < 2) throw ConfigError("n_folds must be >= 2");
  if (dataset_kind == DatasetKind::manifest && manifest_path.empty()) {
    throw ConfigError("dataset.kind = manifest requires dataset.manifest");
  }
  model_config().validate();
  train.validate();
}

}  // namespace biomass
