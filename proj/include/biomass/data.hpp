#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "biomass/image.hpp"
#include "biomass/rng.hpp"

namespace biomass {

inline constexpr int kNumTargets = 5;
inline constexpr std::array<const char*, kNumTargets> kTargetNames = {
    "dry_green", "dry_dead", "dry_clover", "gdm", "dry_total"};

// grams; gdm and total are sums of components by construction
struct BiomassTargets {
  double green = 0, dead = 0, clover = 0, gdm = 0, total = 0;

  double operator[](int i) const {
    switch (i) {
      case 0: return green;
      case 1: return dead;
      case 2: return clover;
      case 3: return gdm;
      default: return total;
    }
  }

  std::array<double, kNumTargets> as_array() const { return {green, dead, clover, gdm, total}; }
};

struct SampleMeta {
  std::string state;
  std::string species;
  double ndvi = 0;
  double height = 0;
  int year = 0, month = 0, day = 0;
};

struct SampleRecord {
  std::string image_id;
  std::string image_path;
  BiomassTargets targets;
  SampleMeta meta;
};

// The 23-d metadata layout fixes these sizes.
inline constexpr int kNumStates = 4;
inline constexpr int kNumSpecies = 15;

struct Vocabulary {
  std::vector<std::string> states;
  std::vector<std::string> species;

  static Vocabulary defaults();
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int state_index(const std::string& s) const;    // throws VocabularyError
  int species_index(const std::string& s) const;  // throws VocabularyError
};

inline constexpr const char* kManifestHeader =
    "image_id,image_path,dry_green,dry_dead,dry_clover,gdm,dry_total,state,species,ndvi,"
    "height,date";

// Parses and validates; all row errors are collected and reported together.
std::vector<SampleRecord> load_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<SampleRecord>& records);

double log1p_target(double y);   // forward transform, y >= 0
double expm1_target(double z);   // inverse

// 5 bins split at the 20/40/60/80 empirical percentiles (nearest-rank);
// boundary values go to the lower bin.
std::vector<int> quintile_bins(std::span<const double> values);

struct FoldAssignment {
  int n_folds = 5;
  std::uint64_t seed = 17;
  std::vector<std::pair<std::string, int>> group_folds;  // sorted by group id

  int fold_of(const std::string& image_id) const;
  std::vector<std::size_t> indices_in_fold(const std::vector<SampleRecord>& records, int fold,
                                           bool validation) const;
};

FoldAssignment stratified_group_kfold(const std::vector<SampleRecord>& records, int n_folds = 5,
                                      std::uint64_t seed = 17);

void write_fold_csv(const std::string& path, const FoldAssignment& assignment);

// per-fold sample counts and per-fold quintile histograms on dry_total
struct FoldHistogram {
  std::vector<int> fold_sizes;
  std::vector<std::array<int, 5>> fold_bins;
  std::array<int, 5> global_bins{};
};
FoldHistogram fold_histograms(const std::vector<SampleRecord>& records,
                              const FoldAssignment& assignment);

// ---------------------------------------------------------------------------
// paired augmentation

struct AugmentPolicy {
  double flip_p = 0.5;
  double rotate_p = 0.5;
  double jitter_p = 0.5;
  double max_rotate_deg = 15.0;
  double max_jitter = 0.2;
};

// One parameter draw per call, applied identically to both views.
void augment_pair(ImageTensor& left, ImageTensor& right, const AugmentPolicy& policy,
                  RngStream& rng);

// ---------------------------------------------------------------------------
// synthetic dual-view dataset

struct SynthSpec {
  int n = 357;
  std::size_t image_height = 32;
  std::size_t image_width = 64;
  double pixel_noise = 0.0;       // uniform per-channel jitter amplitude
  double zero_green = 0.05;
  double zero_dead = 0.112;
  double zero_clover = 0.378;
  double meta_correlation = 0.0;  // 0 = independent metadata, 1 = strongly predictive
  double mass_per_pixel = 0.08;   // grams per painted pixel
};

struct SynthDataset {
  std::vector<SampleRecord> records;
  std::vector<ImageTensor> images;  // parallel to records
};

// Procedural pasture scenes: blobs of three vegetation classes over soil,
// some straddling the vertical centerline. Targets are exact functions of the
// painted pixel counts, so a pixel-counting oracle can recover them.
SynthDataset synth_dataset(const SynthSpec& spec, RngStream rng);

// canonical class colors: soil, green, dead (reddish dry matter), clover
// (blue-coded); near-orthogonal contrasts keep the classes identifiable from
// aggregate color statistics
inline constexpr std::array<std::array<float, 3>, 4> kSynthClassColors = {{
    {0.20f, 0.16f, 0.12f},
    {0.10f, 0.80f, 0.10f},
    {0.85f, 0.30f, 0.08f},
    {0.10f, 0.25f, 0.85f},
}};

int classify_synth_pixel(float r, float g, float b);

struct TargetSummary {
  std::array<double, kNumTargets> mean{}, stddev{}, min{}, median{}, max{}, skew{}, zero_frac{};
};
TargetSummary summarize_targets(const std::vector<SampleRecord>& records);
std::string format_target_summary(const TargetSummary& s);

}  // namespace biomass
