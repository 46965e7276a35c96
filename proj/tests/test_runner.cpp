#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "biomass/runner.hpp"

using namespace biomass;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const char* kTinyConfig =
    "config_version = 1\n"
    "seed = 17\n"
    "dataset.kind = synth\n"
    "dataset.synth.n = 40\n"
    "dataset.synth.image_height = 16\n"
    "dataset.synth.image_width = 32\n"
    "dataset.synth.zero_clover = 0.3\n"
    "backbone.patch = 4\n"
    "backbone.d_model = 16\n"
    "backbone.view_size = 16\n"
    "fusion.kind = gated_dwconv\n"
    "fusion.depth = 1\n"
    "heads.hidden = 16\n"
    "train.max_epochs = 3\n"
    "train.patience = 2\n"
    "train.warmup_epochs = 1\n"
    "train.batch_size = 8\n";

// wall times are the one legitimate difference between reruns
nlohmann::json strip_wall_times(nlohmann::json doc) {
  doc.erase("wall_time_sec");
  for (auto& f : doc["folds"]) f.erase("wall_time_sec");
  return doc;
}

}  // namespace

TEST_CASE("key-value config parsing") {
  auto kv = KeyValueConfig::from_string(
      "# comment\n"
      "config_version = 1\n"
      "seed = 99\n"
      "fusion.kind = cvga\n");
  CHECK(kv.get_int("config_version", -1) == 1);
  CHECK(kv.get_u64("seed", 0) == 99);
  CHECK(kv.get_string("fusion.kind", "") == "cvga");
  CHECK(kv.get_double("missing", 2.5) == 2.5);
  CHECK_NOTHROW(kv.finish());

  auto kv2 = KeyValueConfig::from_string("config_version = 1\nmystery = 3\n");
  kv2.get_int("config_version", -1);
  CHECK_THROWS_AS(kv2.finish(), ConfigError);

  CHECK_THROWS_AS(KeyValueConfig::from_string("a = 1\na = 2\n"), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::from_string("just a line\n"), ConfigError);

  CHECK_THROWS_AS(ExperimentConfig::from_kv(KeyValueConfig::from_string("seed = 1\n")),
                  ConfigError);  // config_version is required
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KeyValueConfig::from_string(
                      "config_version = 1\nprecision = f16\n")),
                  ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KeyValueConfig::from_string(
                      "config_version = 1\ndataset.kind = manifest\n")),
                  ConfigError);  // manifest path required
}

TEST_CASE("prepare_dataset produces consistent samples") {
  auto cfg = ExperimentConfig::from_kv(
      KeyValueConfig::from_string(std::string(kTinyConfig) + "metadata.enabled = true\n"));
  PreparedData data = prepare_dataset(cfg);
  REQUIRE(data.records.size() == 40);
  REQUIRE(data.samples.size() == 40);
  for (const auto& s : data.samples) {
    CHECK(s.left.height == 16);
    CHECK(s.left.width == 16);
    CHECK(s.right.width == 16);
    CHECK(s.meta.has_value());
    for (double v : s.log_targets) CHECK(v >= 0.0);
  }
}

TEST_CASE("run_experiment: determinism, worker independence, aggregate consistency") {
  auto cfg = ExperimentConfig::from_kv(KeyValueConfig::from_string(kTinyConfig));
  const fs::path base = fs::temp_directory_path() / "biomass_run_test";
  fs::remove_all(base);

  auto doc1 = run_experiment(cfg, 1, (base / "a").string());
  auto doc2 = run_experiment(cfg, 1, (base / "b").string());
  auto doc5 = run_experiment(cfg, 5, (base / "c").string());

  CHECK(strip_wall_times(doc1) == strip_wall_times(doc2));
  CHECK(strip_wall_times(doc1) == strip_wall_times(doc5));

  REQUIRE(doc1["folds"].size() == 5);
  REQUIRE(doc1.contains("aggregate"));
  std::vector<double> best;
  for (const auto& f : doc1["folds"]) best.push_back(f["best_weighted_r2"].get<double>());
  double mean = 0;
  for (double v : best) mean += v;
  mean /= static_cast<double>(best.size());
  double var = 0;
  for (double v : best) var += (v - mean) * (v - mean);
  var /= static_cast<double>(best.size());
  CHECK(std::abs(mean - doc1["aggregate"]["mean"].get<double>()) < 1e-12);
  CHECK(std::abs(std::sqrt(var) - doc1["aggregate"]["std"].get<double>()) < 1e-12);

  CHECK(fs::exists(base / "a" / "result.json"));
  CHECK(fs::exists(base / "a" / "curves.csv"));
  CHECK(fs::exists(base / "a" / "fold_0.ckpt"));
  CHECK(fs::exists(base / "a" / "fold_4.ckpt"));

  // result files from the two serial runs are byte-identical except wall time
  auto j1 = nlohmann::json::parse(slurp(base / "a" / "result.json"));
  auto j2 = nlohmann::json::parse(slurp(base / "b" / "result.json"));
  CHECK(strip_wall_times(j1) == strip_wall_times(j2));
  CHECK(slurp(base / "a" / "curves.csv") == slurp(base / "b" / "curves.csv"));
  fs::remove_all(base);
}

TEST_CASE("cmd_splits and cmd_synth round trip deterministically") {
  const fs::path base = fs::temp_directory_path() / "biomass_cmd_test";
  fs::remove_all(base);
  fs::create_directories(base);

  SynthSpec spec;
  spec.n = 60;
  spec.image_height = 16;
  spec.image_width = 32;
  std::ostringstream log;
  CHECK(cmd_synth(spec, 17, (base / "ds").string(), log) == 0);
  CHECK(fs::exists(base / "ds" / "manifest.csv"));
  CHECK(fs::exists(base / "ds" / "vocabulary.csv"));
  CHECK(fs::exists(base / "ds" / "images" / "synth_0000.ppm"));

  // the written manifest loads and the images decode
  auto records = load_manifest((base / "ds" / "manifest.csv").string());
  CHECK(records.size() == 60);
  auto img = read_ppm((base / "ds" / records[0].image_path).string());
  CHECK(img.height == 16);

  std::ostringstream log2;
  CHECK(cmd_splits((base / "ds" / "manifest.csv").string(), 17, (base / "s1.csv").string(),
                   log2) == 0);
  CHECK(cmd_splits((base / "ds" / "manifest.csv").string(), 17, (base / "s2.csv").string(),
                   log2) == 0);
  CHECK(slurp(base / "s1.csv") == slurp(base / "s2.csv"));
  CHECK(log2.str().find("fold 0") != std::string::npos);

  // features table: green pixel mass drives dry_green on the clean set
  std::ostringstream log3, err3;
  CHECK(cmd_features((base / "ds" / "manifest.csv").string(), (base / "feat").string(), log3,
                     err3) == 0);
  const std::string corr = slurp(base / "feat" / "correlations.csv");
  std::istringstream lines(corr);
  std::string line;
  double rho_exg_green = 0;
  while (std::getline(lines, line)) {
    if (line.rfind("exg,dry_green,", 0) == 0) {
      rho_exg_green = std::stod(line.substr(14));
    }
  }
  CHECK(rho_exg_green > 0.9);
  fs::remove_all(base);
}

TEST_CASE("cmd_params self-audit passes at a small dimension") {
  std::ostringstream os;
  CHECK(cmd_params(64, 16, 2, os) == 0);
  CHECK(os.str().find("parameter audit OK") != std::string::npos);
  CHECK(os.str().find("MISMATCH") == std::string::npos);
}
