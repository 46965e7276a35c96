#include "biomass/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "biomass/errors.hpp"

namespace biomass {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const char* what) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw DataError(std::string("malformed number for ") + what + ": '" + s + "'");
  }
  return v;
}

void parse_date(const std::string& s, SampleMeta& meta) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') {
    throw DataError("date must be ISO-8601 YYYY-MM-DD, got '" + s + "'");
  }
  auto num = [&](int a, int b) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data() + a, s.data() + b, v);
    if (ec != std::errc{} || p != s.data() + b) throw DataError("bad date field in '" + s + "'");
    return v;
  };
  meta.year = num(0, 4);
  meta.month = num(5, 7);
  meta.day = num(8, 10);
  if (meta.month < 1 || meta.month > 12 || meta.day < 1 || meta.day > 31 || meta.year < 1) {
    throw DataError("date out of range: '" + s + "'");
  }
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

double quantize6(double v) { return std::round(v * 1e6) / 1e6; }

}  // namespace

// ---------------------------------------------------------------------------
// vocabulary

Vocabulary Vocabulary::defaults() {
  Vocabulary v;
  v.states = {"NSW", "Tasmania", "Victoria", "WA"};
  v.species = {"ryegrass",   "clover",     "ryegrass_clover", "lucerne",     "phalaris",
               "fescue",     "cocksfoot",  "kikuyu",          "paspalum",    "medic",
               "brome",      "native_mix", "oats",            "barley_grass", "silver_grass"};
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open vocabulary '" + path + "'");
  Vocabulary v;
  std::string line;
  int row = 0;
  while (std::getline(f, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 2) {
      throw VocabularyError("row " + std::to_string(row) + ": expected 'kind,name'");
    }
    if (fields[0] == "state") {
      v.states.push_back(fields[1]);
    } else if (fields[0] == "species") {
      v.species.push_back(fields[1]);
    } else {
      throw VocabularyError("row " + std::to_string(row) + ": unknown kind '" + fields[0] + "'");
    }
  }
  if (static_cast<int>(v.states.size()) != kNumStates ||
      static_cast<int>(v.species.size()) != kNumSpecies) {
    throw VocabularyError("vocabulary must list exactly " + std::to_string(kNumStates) +
                          " states and " + std::to_string(kNumSpecies) + " species");
  }
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write vocabulary '" + path + "'");
  for (const auto& s : states) f << "state," << s << "\n";
  for (const auto& s : species) f << "species," << s << "\n";
}

int Vocabulary::state_index(const std::string& s) const {
  for (std::size_t i = 0; i < states.size(); ++i)
    if (states[i] == s) return static_cast<int>(i);
  throw VocabularyError("unknown state '" + s + "'");
}

int Vocabulary::species_index(const std::string& s) const {
  for (std::size_t i = 0; i < species.size(); ++i)
    if (species[i] == s) return static_cast<int>(i);
  throw VocabularyError("unknown species '" + s + "'");
}

// ---------------------------------------------------------------------------
// manifest

std::vector<SampleRecord> load_manifest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open manifest '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw DataError("empty manifest (missing header)");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) {
    throw DataError("manifest header mismatch; expected '" + std::string(kManifestHeader) + "'");
  }
  std::vector<SampleRecord> records;
  std::vector<std::string> errors;
  int row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      auto fields = split_csv_line(line);
      if (fields.size() != 12) {
        throw DataError("expected 12 columns, got " + std::to_string(fields.size()));
      }
      SampleRecord r;
      r.image_id = fields[0];
      r.image_path = fields[1];
      r.targets.green = parse_double(fields[2], "dry_green");
      r.targets.dead = parse_double(fields[3], "dry_dead");
      r.targets.clover = parse_double(fields[4], "dry_clover");
      r.targets.gdm = parse_double(fields[5], "gdm");
      r.targets.total = parse_double(fields[6], "dry_total");
      r.meta.state = fields[7];
      r.meta.species = fields[8];
      r.meta.ndvi = parse_double(fields[9], "ndvi");
      r.meta.height = parse_double(fields[10], "height");
      parse_date(fields[11], r.meta);
      if (r.image_id.empty()) throw DataError("empty image_id");
      for (int i = 0; i < kNumTargets; ++i) {
        if (r.targets[i] < 0) {
          throw DataError(std::string(kTargetNames[i]) + " must be >= 0");
        }
      }
      if (std::abs(r.targets.gdm - (r.targets.green + r.targets.clover)) >
          1e-6 * std::max(1.0, r.targets.gdm)) {
        throw DataError("composition violation: gdm != dry_green + dry_clover");
      }
      if (std::abs(r.targets.total - (r.targets.gdm + r.targets.dead)) >
          1e-6 * std::max(1.0, r.targets.total)) {
        throw DataError("composition violation: dry_total != gdm + dry_dead");
      }
      if (r.meta.ndvi < 0 || r.meta.ndvi > 1) throw DataError("ndvi outside [0, 1]");
      if (r.meta.height < 0) throw DataError("height must be >= 0");
      records.push_back(std::move(r));
    } catch (const BiomassError& e) {
      errors.push_back("row " + std::to_string(row) + ": " + e.what());
    }
  }
  if (!errors.empty()) {
    std::ostringstream os;
    os << errors.size() << " manifest error(s) in '" << path << "':";
    for (const auto& e : errors) os << "\n  " << e;
    throw DataError(os.str());
  }
  return records;
}

void write_manifest(const std::string& path, const std::vector<SampleRecord>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write manifest '" + path + "'");
  f << kManifestHeader << "\n";
  char date[16];
  for (const auto& r : records) {
    std::snprintf(date, sizeof date, "%04d-%02d-%02d", r.meta.year, r.meta.month, r.meta.day);
    f << r.image_id << ',' << r.image_path << ',' << fmt6(r.targets.green) << ','
      << fmt6(r.targets.dead) << ',' << fmt6(r.targets.clover) << ',' << fmt6(r.targets.gdm)
      << ',' << fmt6(r.targets.total) << ',' << r.meta.state << ',' << r.meta.species << ','
      << fmt6(r.meta.ndvi) << ',' << fmt6(r.meta.height) << ',' << date << "\n";
  }
  if (!f) throw IoError("failed writing manifest '" + path + "'");
}

// ---------------------------------------------------------------------------
// transforms

double log1p_target(double y) {
  if (y < 0) throw DataError("log1p transform needs y >= 0");
  return std::log1p(y);
}

double expm1_target(double z) { return std::expm1(z); }

// ---------------------------------------------------------------------------
// quintiles

std::vector<int> quintile_bins(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n < 5) throw DataError("quintile_bins needs at least 5 values");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::array<double, 4> edges{};
  for (int k = 1; k <= 4; ++k) {
    // nearest-rank percentile at k*20%
    std::size_t idx = static_cast<std::size_t>(
        std::ceil(static_cast<double>(k) * static_cast<double>(n) / 5.0));
    edges[k - 1] = sorted[idx - 1];
  }
  std::vector<int> bins(n);
  for (std::size_t i = 0; i < n; ++i) {
    int b = 0;
    for (double e : edges) {
      if (e < values[i]) ++b;  // boundary values stay in the lower bin
    }
    bins[i] = b;
  }
  return bins;
}

// ---------------------------------------------------------------------------
// stratified group k-fold

int FoldAssignment::fold_of(const std::string& image_id) const {
  auto it = std::lower_bound(group_folds.begin(), group_folds.end(), image_id,
                             [](const auto& p, const std::string& id) { return p.first < id; });
  if (it == group_folds.end() || it->first != image_id) {
    throw DataError("no fold assignment for group '" + image_id + "'");
  }
  return it->second;
}

std::vector<std::size_t> FoldAssignment::indices_in_fold(
    const std::vector<SampleRecord>& records, int fold, bool validation) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const bool in_val = fold_of(records[i].image_id) == fold;
    if (in_val == validation) out.push_back(i);
  }
  return out;
}

FoldAssignment stratified_group_kfold(const std::vector<SampleRecord>& records, int n_folds,
                                      std::uint64_t seed) {
  if (n_folds < 2) throw DataError("need at least 2 folds");
  struct Group {
    std::string id;
    std::array<int, 5> bin_counts{};
    int size = 0;
    int majority_bin = 0;
  };

  std::vector<double> totals(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) totals[i] = records[i].targets.total;
  std::vector<int> bins = quintile_bins(totals);

  std::vector<Group> groups;
  {
    std::vector<std::pair<std::string, std::size_t>> order;
    for (std::size_t i = 0; i < records.size(); ++i) order.emplace_back(records[i].image_id, i);
    std::sort(order.begin(), order.end());
    for (auto& [id, idx] : order) {
      if (groups.empty() || groups.back().id != id) {
        groups.push_back(Group{id, {}, 0, 0});
      }
      groups.back().bin_counts[bins[idx]] += 1;
      groups.back().size += 1;
    }
  }
  if (static_cast<int>(groups.size()) < n_folds) {
    throw DataError("fewer groups (" + std::to_string(groups.size()) + ") than folds");
  }
  for (auto& g : groups) {
    int best = 0;
    for (int b = 1; b < 5; ++b) {
      if (g.bin_counts[b] > g.bin_counts[best]) best = b;  // ties keep the lower bin
    }
    g.majority_bin = best;
  }

  // canonical order, then a seeded shuffle, then a stable sort by bin: the
  // result is independent of the input record order
  RngStream rng = RngStream(seed).child("split");
  for (std::size_t i = groups.size(); i > 1; --i) {
    std::size_t j = rng.uniform_int(i);
    std::swap(groups[i - 1], groups[j]);
  }
  std::stable_sort(groups.begin(), groups.end(),
                   [](const Group& a, const Group& b) { return a.majority_bin < b.majority_bin; });

  std::vector<std::array<int, 5>> fold_bins(n_folds, std::array<int, 5>{});
  std::vector<int> fold_totals(n_folds, 0);
  FoldAssignment assignment;
  assignment.n_folds = n_folds;
  assignment.seed = seed;
  for (const auto& g : groups) {
    // fewest samples of this group's bin, then smallest fold, then lowest index
    int best_fold = 0;
    for (int f = 1; f < n_folds; ++f) {
      const int cand_bin = fold_bins[f][g.majority_bin];
      const int best_bin = fold_bins[best_fold][g.majority_bin];
      if (cand_bin < best_bin ||
          (cand_bin == best_bin && fold_totals[f] < fold_totals[best_fold])) {
        best_fold = f;
      }
    }
    for (int b = 0; b < 5; ++b) fold_bins[best_fold][b] += g.bin_counts[b];
    fold_totals[best_fold] += g.size;
    assignment.group_folds.emplace_back(g.id, best_fold);
  }
  std::sort(assignment.group_folds.begin(), assignment.group_folds.end());
  return assignment;
}

void write_fold_csv(const std::string& path, const FoldAssignment& assignment) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write fold csv '" + path + "'");
  f << "image_id,fold\n";
  for (const auto& [id, fold] : assignment.group_folds) f << id << ',' << fold << "\n";
}

FoldHistogram fold_histograms(const std::vector<SampleRecord>& records,
                              const FoldAssignment& assignment) {
  std::vector<double> totals(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) totals[i] = records[i].targets.total;
  std::vector<int> bins = quintile_bins(totals);
  FoldHistogram h;
  h.fold_sizes.assign(assignment.n_folds, 0);
  h.fold_bins.assign(assignment.n_folds, {});
  for (std::size_t i = 0; i < records.size(); ++i) {
    int f = assignment.fold_of(records[i].image_id);
    h.fold_sizes[f] += 1;
    h.fold_bins[f][bins[i]] += 1;
    h.global_bins[bins[i]] += 1;
  }
  return h;
}

// ---------------------------------------------------------------------------
// paired augmentation

void augment_pair(ImageTensor& left, ImageTensor& right, const AugmentPolicy& policy,
                  RngStream& rng) {
  if (left.height != right.height || left.width != right.width) {
    throw DataError("augment_pair: view sizes differ");
  }
  // one draw set per sample; every branch consumes the same number of draws
  const double u_flip = rng.uniform01();
  const double u_rot = rng.uniform01();
  const double deg = rng.uniform(-policy.max_rotate_deg, policy.max_rotate_deg);
  const double u_jit = rng.uniform01();
  const double bright = rng.uniform(1.0 - policy.max_jitter, 1.0 + policy.max_jitter);
  const double contrast = rng.uniform(1.0 - policy.max_jitter, 1.0 + policy.max_jitter);

  if (u_flip < policy.flip_p) {
    left = hflip(left);
    right = hflip(right);
  }
  if (u_rot < policy.rotate_p) {
    left = rotate_deg(left, deg);
    right = rotate_deg(right, deg);
  }
  if (u_jit < policy.jitter_p) {
    left = brightness_contrast(left, bright, contrast);
    right = brightness_contrast(right, bright, contrast);
  }
}

// ---------------------------------------------------------------------------
// synthetic dataset

namespace {

// Marsaglia-Tsang; shape >= 1
double gamma_sample(double shape, double scale, RngStream& rng) {
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = rng.normal();
    double v = 1.0 + c * x;
    if (v <= 0) continue;
    v = v * v * v;
    const double u = rng.uniform01();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v * scale;
  }
}

struct ClassCanvas {
  std::size_t h, w;
  std::vector<int> cls;  // 0 soil, 1 green, 2 dead, 3 clover
  std::array<int, 4> counts{};

  ClassCanvas(std::size_t h_, std::size_t w_) : h(h_), w(w_), cls(h_ * w_, 0) {
    counts[0] = static_cast<int>(h * w);
  }

  void paint(std::size_t y, std::size_t x, int c) {
    int& cur = cls[y * w + x];
    counts[cur] -= 1;
    counts[c] += 1;
    cur = c;
  }
};

void paint_class(ClassCanvas& canvas, int cls, int target_px, RngStream& rng) {
  int attempts = 0;
  while (canvas.counts[cls] < target_px && attempts < 400) {
    ++attempts;
    // a share of blobs straddles the vertical centerline so the two views
    // carry joint structure
    double cx;
    if (rng.uniform01() < 0.35) {
      cx = canvas.w / 2.0 + rng.uniform(-3.0, 3.0);
    } else {
      cx = rng.uniform(0.0, static_cast<double>(canvas.w));
    }
    const double cy = rng.uniform(0.0, static_cast<double>(canvas.h));
    const double r = rng.uniform(1.5, 4.5);
    const long y0 = std::max(0L, static_cast<long>(std::floor(cy - r)));
    const long y1 = std::min<long>(canvas.h - 1, static_cast<long>(std::ceil(cy + r)));
    const long x0 = std::max(0L, static_cast<long>(std::floor(cx - r)));
    const long x1 = std::min<long>(canvas.w - 1, static_cast<long>(std::ceil(cx + r)));
    for (long y = y0; y <= y1; ++y)
      for (long x = x0; x <= x1; ++x) {
        const double dy = y - cy, dx = x - cx;
        if (dy * dy + dx * dx <= r * r) {
          canvas.paint(static_cast<std::size_t>(y), static_cast<std::size_t>(x), cls);
        }
      }
  }
}

}  // namespace

int classify_synth_pixel(float r, float g, float b) {
  int best = 0;
  float best_d = 1e9f;
  for (int k = 0; k < 4; ++k) {
    const float dr = r - kSynthClassColors[k][0];
    const float dg = g - kSynthClassColors[k][1];
    const float db = b - kSynthClassColors[k][2];
    const float d = dr * dr + dg * dg + db * db;
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

SynthDataset synth_dataset(const SynthSpec& spec, RngStream rng) {
  if (spec.n < 25) throw DataError("synthetic dataset needs n >= 25");
  if (spec.image_width < 8 || spec.image_height < 8) {
    throw DataError("synthetic images must be at least 8x8");
  }
  Vocabulary vocab = Vocabulary::defaults();
  SynthDataset out;
  out.records.reserve(spec.n);
  out.images.reserve(spec.n);
  const double area = static_cast<double>(spec.image_height * spec.image_width);

  for (int i = 0; i < spec.n; ++i) {
    RngStream srng = rng.child("sample").child(static_cast<std::uint64_t>(i));
    ClassCanvas canvas(spec.image_height, spec.image_width);

    const bool zg = srng.uniform01() < spec.zero_green;
    const bool zd = srng.uniform01() < spec.zero_dead;
    const bool zc = srng.uniform01() < spec.zero_clover;
    const double fg = zg ? 0.0 : std::min(0.45, gamma_sample(1.5, 0.107, srng));
    const double fd = zd ? 0.0 : std::min(0.35, gamma_sample(1.5, 0.10, srng));
    const double fc = zc ? 0.0 : std::min(0.30, gamma_sample(1.5, 0.044, srng));

    // clover painted last so it survives overlaps; counts re-read from the map
    paint_class(canvas, 2, static_cast<int>(std::lround(fd * area)), srng);
    paint_class(canvas, 1, static_cast<int>(std::lround(fg * area)), srng);
    paint_class(canvas, 3, static_cast<int>(std::lround(fc * area)), srng);

    SampleRecord r;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "synth_%04d", i);
    r.image_id = idbuf;
    r.image_path = std::string("images/") + idbuf + ".ppm";
    r.targets.green = quantize6(spec.mass_per_pixel * canvas.counts[1]);
    r.targets.dead = quantize6(spec.mass_per_pixel * canvas.counts[2]);
    r.targets.clover = quantize6(spec.mass_per_pixel * canvas.counts[3]);
    r.targets.gdm = r.targets.green + r.targets.clover;
    r.targets.total = r.targets.gdm + r.targets.dead;

    ImageTensor img(spec.image_height, spec.image_width);
    for (std::size_t y = 0; y < spec.image_height; ++y)
      for (std::size_t x = 0; x < spec.image_width; ++x) {
        const auto& color = kSynthClassColors[canvas.cls[y * spec.image_width + x]];
        for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = color[ch];
      }
    if (spec.pixel_noise > 0) {
      for (auto& v : img.values) {
        v = static_cast<float>(
            std::clamp(v + srng.uniform(-spec.pixel_noise, spec.pixel_noise), 0.0, 1.0));
      }
    }

    // metadata: independent by default; the correlation knob blends in
    // target-derived signal to stage the training-only shortcut
    const double rho = spec.meta_correlation;
    const double green_norm = std::clamp(canvas.counts[1] / (0.5 * area), 0.0, 1.0);
    const double total_norm =
        std::clamp((canvas.counts[1] + canvas.counts[2] + canvas.counts[3]) / (0.7 * area), 0.0,
                   1.0);
    const double ndvi_u = srng.uniform(0.15, 0.9);
    const double height_u = srng.uniform(1.0, 12.0);
    int state_idx = static_cast<int>(srng.uniform_int(kNumStates));
    int species_idx = static_cast<int>(srng.uniform_int(kNumSpecies));
    r.meta.ndvi = std::clamp(rho * (0.15 + 0.75 * green_norm) + (1 - rho) * ndvi_u, 0.0, 1.0);
    r.meta.height = rho * (1.0 + 11.0 * total_norm) + (1 - rho) * height_u;
    if (srng.uniform01() < rho) {
      state_idx = total_norm > 0.35 ? 2 : 0;
      species_idx = canvas.counts[3] > 0 ? 1 : 0;
    }
    r.meta.state = vocab.states[state_idx];
    r.meta.species = vocab.species[species_idx];
    r.meta.year = 2014 + static_cast<int>(srng.uniform_int(4));
    r.meta.month = 1 + static_cast<int>(srng.uniform_int(12));
    r.meta.day = 1 + static_cast<int>(srng.uniform_int(28));

    out.records.push_back(std::move(r));
    out.images.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// summary

TargetSummary summarize_targets(const std::vector<SampleRecord>& records) {
  if (records.empty()) throw DataError("cannot summarize an empty record set");
  TargetSummary s;
  const double n = static_cast<double>(records.size());
  for (int t = 0; t < kNumTargets; ++t) {
    std::vector<double> vals(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) vals[i] = records[i].targets[t];
    double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / n;
    double var = 0, m3 = 0;
    int zeros = 0;
    for (double v : vals) {
      var += (v - mean) * (v - mean);
      m3 += (v - mean) * (v - mean) * (v - mean);
      if (v == 0.0) ++zeros;
    }
    var /= n;
    m3 /= n;
    std::sort(vals.begin(), vals.end());
    s.mean[t] = mean;
    s.stddev[t] = std::sqrt(var);
    s.min[t] = vals.front();
    s.max[t] = vals.back();
    s.median[t] = (vals.size() % 2) ? vals[vals.size() / 2]
                                    : 0.5 * (vals[vals.size() / 2 - 1] + vals[vals.size() / 2]);
    s.skew[t] = var > 0 ? m3 / std::pow(var, 1.5) : 0.0;
    s.zero_frac[t] = zeros / n;
  }
  return s;
}

std::string format_target_summary(const TargetSummary& s) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-11s %8s %8s %8s %8s %8s %7s %6s\n", "target", "mean", "std",
                "min", "median", "max", "skew", "zero%");
  os << buf;
  for (int t = 0; t < kNumTargets; ++t) {
    std::snprintf(buf, sizeof buf, "%-11s %8.2f %8.2f %8.2f %8.2f %8.2f %7.2f %6.1f\n",
                  kTargetNames[t], s.mean[t], s.stddev[t], s.min[t], s.median[t], s.max[t],
                  s.skew[t], 100.0 * s.zero_frac[t]);
    os << buf;
  }
  return os.str();
}

}  // namespace biomass
