#include "biomass/runner.hpp"

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "biomass/grad_check.hpp"
#include "biomass/metrics.hpp"

namespace fs = std::filesystem;

namespace biomass {

PreparedData prepare_dataset(const ExperimentConfig& cfg) {
  PreparedData out;
  out.vocab = cfg.vocab_path.empty() ? Vocabulary::defaults() : Vocabulary::load(cfg.vocab_path);
  std::vector<ImageTensor> images;
  if (cfg.dataset_kind == DatasetKind::synth) {
    SynthDataset ds = synth_dataset(cfg.synth, RngStream(cfg.seed).child("synth"));
    out.records = std::move(ds.records);
    images = std::move(ds.images);
  } else {
    out.records = load_manifest(cfg.manifest_path);
    const fs::path root = fs::path(cfg.manifest_path).parent_path();
    images.reserve(out.records.size());
    for (const auto& r : out.records) images.push_back(read_ppm((root / r.image_path).string()));
  }
  out.samples.reserve(out.records.size());
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    TrainSample s;
    auto [l, r] = split_views(images[i], cfg.backbone.view_size);
    s.left = std::move(l);
    s.right = std::move(r);
    const auto grams = out.records[i].targets.as_array();
    for (int t = 0; t < kNumTargets; ++t) s.log_targets[t] = log1p_target(grams[t]);
    if (cfg.metadata) s.meta = metadata_encode(out.records[i].meta, out.vocab);
    out.samples.push_back(std::move(s));
  }
  return out;
}

nlohmann::json experiment_config_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["seed"] = cfg.seed;
  j["precision"] = cfg.precision;
  j["n_folds"] = cfg.n_folds;
  j["dataset"]["kind"] = cfg.dataset_kind == DatasetKind::synth ? "synth" : "manifest";
  if (cfg.dataset_kind == DatasetKind::synth) {
    j["dataset"]["synth"] = {{"n", cfg.synth.n},
                             {"image_height", cfg.synth.image_height},
                             {"image_width", cfg.synth.image_width},
                             {"pixel_noise", cfg.synth.pixel_noise},
                             {"zero_green", cfg.synth.zero_green},
                             {"zero_dead", cfg.synth.zero_dead},
                             {"zero_clover", cfg.synth.zero_clover},
                             {"meta_correlation", cfg.synth.meta_correlation},
                             {"mass_per_pixel", cfg.synth.mass_per_pixel}};
  } else {
    j["dataset"]["manifest"] = cfg.manifest_path;
  }
  j["backbone"] = {{"kind", cfg.backbone.kind},
                   {"patch", cfg.backbone.patch},
                   {"d_model", cfg.backbone.d_model},
                   {"view_size", cfg.backbone.view_size}};
  j["fusion"] = {{"kind", fusion_kind_name(cfg.fusion.kind)},
                 {"depth", cfg.fusion.depth},
                 {"d_model", cfg.fusion.d_model},
                 {"kernel", cfg.fusion.kernel},
                 {"heads", cfg.fusion.heads},
                 {"d_head", cfg.fusion.d_head},
                 {"d_state", cfg.fusion.d_state},
                 {"expand", cfg.fusion.expand},
                 {"dt_rank", cfg.fusion.resolved_dt_rank()},
                 {"dropout", cfg.fusion.dropout_p}};
  j["metadata"] = {{"enabled", cfg.metadata}, {"dropout", cfg.metadata_dropout}};
  j["heads"] = {{"hidden", cfg.head_hidden}, {"dropout", cfg.head_dropout}};
  j["train"] = {{"lr_backbone", cfg.train.lr_backbone},
                {"lr_task", cfg.train.lr_task},
                {"weight_decay", cfg.train.weight_decay},
                {"warmup_epochs", cfg.train.warmup_epochs},
                {"max_epochs", cfg.train.max_epochs},
                {"patience", cfg.train.patience},
                {"huber_beta", cfg.train.huber_beta},
                {"clip_norm", cfg.train.clip_norm},
                {"batch_size", cfg.train.batch_size},
                {"components_only_loss", cfg.train.components_only_loss},
                {"augment", cfg.train.augment}};
  return j;
}

nlohmann::json run_experiment(const ExperimentConfig& cfg, int workers,
                              const std::string& out_dir) {
  if (cfg.precision == "f32") return run_experiment_typed<float>(cfg, workers, out_dir);
  return run_experiment_typed<double>(cfg, workers, out_dir);
}

// ---------------------------------------------------------------------------
// splits

int cmd_splits(const std::string& manifest_path, std::uint64_t seed, const std::string& out_csv,
               std::ostream& os) {
  const auto records = load_manifest(manifest_path);
  const FoldAssignment assignment = stratified_group_kfold(records, 5, seed);
  write_fold_csv(out_csv, assignment);
  const FoldHistogram hist = fold_histograms(records, assignment);
  os << "seed " << seed << ", " << records.size() << " samples, "
     << assignment.group_folds.size() << " groups, 5 folds\n";
  for (int f = 0; f < assignment.n_folds; ++f) {
    os << "fold " << f << ": " << hist.fold_sizes[f] << " samples, bins [";
    for (int b = 0; b < 5; ++b) os << (b ? " " : "") << hist.fold_bins[f][b];
    os << "]\n";
  }
  os << "global bins [";
  for (int b = 0; b < 5; ++b) os << (b ? " " : "") << hist.global_bins[b];
  os << "]\n";
  os << "wrote " << out_csv << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// parameter audit

namespace {

struct AuditRow {
  std::string name;
  std::uint64_t symbolic = 0;
  std::uint64_t allocated = 0;
};

void print_rows(const std::vector<AuditRow>& rows, std::ostream& os, bool& ok) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-34s %14s %14s %9s\n", "component", "symbolic", "allocated",
                "M");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-34s %14llu %14llu %9.2f%s\n", r.name.c_str(),
                  static_cast<unsigned long long>(r.symbolic),
                  static_cast<unsigned long long>(r.allocated), r.symbolic / 1e6,
                  r.symbolic == r.allocated ? "" : "  MISMATCH");
    os << buf;
    ok = ok && (r.symbolic == r.allocated);
  }
}

std::uint64_t allocated_fusion(const FusionConfig& cfg) {
  RngStream rng(1);
  FusionStack<double> stack(cfg, rng);
  return stack.allocated_param_count();
}

}  // namespace

int cmd_params(int d_model, int head_hidden, int depth, std::ostream& os) {
  bool ok = true;
  std::vector<AuditRow> rows;
  for (FusionKind kind : {FusionKind::gated_dwconv, FusionKind::cvga, FusionKind::bidir_ssm,
                          FusionKind::full_ssm, FusionKind::identity}) {
    FusionConfig f;
    f.kind = kind;
    f.depth = depth;
    f.d_model = d_model;
    if (kind == FusionKind::cvga) {
      // keep heads * d_head == d_model at any audit dimension
      f.heads = 8;
      while (d_model % f.heads != 0) f.heads /= 2;
      f.d_head = d_model / f.heads;
    }
    rows.push_back({std::string(fusion_kind_name(kind)) + " x" + std::to_string(depth),
                    param_count(f), allocated_fusion(f)});
  }

  RngStream rng(2);
  const auto d = static_cast<std::size_t>(d_model);
  PredictionHead<double> hg(d, head_hidden, 0.2, rng), hd(d, head_hidden, 0.2, rng),
      hc(d, head_hidden, 0.2, rng);
  std::uint64_t heads_alloc = 0;
  for (auto* h : {&hg, &hd, &hc}) {
    for (auto& [n, t] : h->named_parameters("h")) heads_alloc += t.numel();
  }
  rows.push_back({"heads (hidden=" + std::to_string(head_hidden) + ")",
                  head_param_count(d_model, head_hidden), heads_alloc});

  FusionConfig gdw;
  gdw.kind = FusionKind::gated_dwconv;
  gdw.depth = depth;
  gdw.d_model = d_model;
  rows.push_back({"task total (gated_dwconv + heads)",
                  param_count(gdw) + head_param_count(d_model, head_hidden),
                  allocated_fusion(gdw) + heads_alloc});

  MetadataBranch<double> mb(d, 0.2, rng);
  std::uint64_t meta_alloc = 0;
  for (auto& [n, t] : mb.named_parameters()) meta_alloc += t.numel();
  rows.push_back({"metadata branch", metadata_param_count(d_model), meta_alloc});

  print_rows(rows, os, ok);
  if (!ok) {
    os << "parameter audit FAILED: symbolic and allocated counts differ\n";
    return 1;
  }
  os << "parameter audit OK\n";
  return 0;
}

// ---------------------------------------------------------------------------
// run

int cmd_run(const ExperimentConfig& cfg, int workers, const std::string& out_dir,
            std::ostream& os) {
  try {
    nlohmann::json doc = run_experiment(cfg, workers, out_dir);
    if (doc.contains("aggregate")) {
      os << "weighted R2 mean " << doc["aggregate"]["mean"].get<double>() << " +/- "
         << doc["aggregate"]["std"].get<double>() << " (cv "
         << format_cv(doc["aggregate"]["cv_percent"].get<double>()) << "%)\n";
    }
    os << "results written to " << out_dir << "\n";
    return 0;
  } catch (const std::exception& e) {
    os << "run failed: " << e.what() << "\n";
    return 1;
  }
}

// ---------------------------------------------------------------------------
// features

int cmd_features(const std::string& manifest_path, const std::string& out_dir, std::ostream& os,
                 std::ostream& err) {
  const auto records = load_manifest(manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();
  fs::create_directories(out_dir);

  std::vector<std::array<double, 3>> features;
  std::vector<std::array<double, kNumTargets>> targets;
  int skipped = 0;
  std::ofstream per_sample(fs::path(out_dir) / "features.csv", std::ios::binary);
  per_sample << "image_id,exg,greenness,brightness\n";
  char buf[256];
  for (const auto& r : records) {
    try {
      const ImageTensor img = read_ppm((root / r.image_path).string());
      const ColorIndices ci = color_indices(img);
      features.push_back({ci.exg, ci.greenness, ci.brightness});
      targets.push_back(r.targets.as_array());
      std::snprintf(buf, sizeof buf, "%s,%.8f,%.8f,%.8f\n", r.image_id.c_str(), ci.exg,
                    ci.greenness, ci.brightness);
      per_sample << buf;
    } catch (const BiomassError& e) {
      ++skipped;
      err << "sample '" << r.image_id << "': " << e.what() << "\n";
    }
  }

  std::ofstream corr(fs::path(out_dir) / "correlations.csv", std::ios::binary);
  corr << "feature,target,rho,n\n";
  const std::array<const char*, 3> feature_names = {"exg", "greenness", "brightness"};
  for (int fi = 0; fi < 3; ++fi) {
    std::vector<double> x(features.size());
    for (std::size_t i = 0; i < features.size(); ++i) x[i] = features[i][fi];
    for (int t = 0; t < kNumTargets; ++t) {
      std::vector<double> y(targets.size());
      for (std::size_t i = 0; i < targets.size(); ++i) y[i] = targets[i][t];
      std::string rho = "nan";
      try {
        std::snprintf(buf, sizeof buf, "%.6f", spearman(x, y));
        rho = buf;
      } catch (const MetricError&) {
        // undefined correlation stays as an explicit nan row
      }
      corr << feature_names[fi] << ',' << kTargetNames[t] << ',' << rho << ',' << x.size()
           << "\n";
    }
  }
  os << "features for " << features.size() << " samples";
  if (skipped) os << " (" << skipped << " skipped)";
  os << ", tables under " << out_dir << "\n";
  return skipped == static_cast<int>(records.size()) && !records.empty() ? 1 : 0;
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(const SynthSpec& spec, std::uint64_t seed, const std::string& out_dir,
              std::ostream& os) {
  SynthDataset ds = synth_dataset(spec, RngStream(seed).child("synth"));
  fs::create_directories(fs::path(out_dir) / "images");
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    write_ppm((fs::path(out_dir) / ds.records[i].image_path).string(), ds.images[i]);
  }
  write_manifest((fs::path(out_dir) / "manifest.csv").string(), ds.records);
  Vocabulary::defaults().save((fs::path(out_dir) / "vocabulary.csv").string());
  os << "wrote " << ds.records.size() << " samples to " << out_dir << "\n";
  os << format_target_summary(summarize_targets(ds.records));
  return 0;
}

// ---------------------------------------------------------------------------
// gradient check suite

namespace {

bool report_check(std::ostream& os, const std::string& name, const GradCheckReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-28s rel_err %.3e  %s\n", name.c_str(), r.max_rel_err,
                r.passed ? "PASS" : "FAIL");
  os << buf;
  return r.passed;
}

}  // namespace

int cmd_grad_check(std::ostream& os) {
  bool ok = true;
  RngStream rng(20250801);

  {
    auto x = Tensor<double>::uniform({3, 4}, -1, 1, rng, true);
    auto w = Tensor<double>::uniform({4, 2}, -1, 1, rng, true);
    auto b = Tensor<double>::uniform({2}, -1, 1, rng, true);
    ok &= report_check(os, "linear",
                       grad_check<double>([&] { return ops::sum(ops::linear(x, w, b)); },
                                          {x, w, b}, 1e-5, 1e-6));
  }
  {
    auto x = Tensor<double>::uniform({4, 6}, -1, 1, rng, true);
    auto g = Tensor<double>::uniform({6}, 0.5, 1.5, rng, true);
    auto be = Tensor<double>::uniform({6}, -0.5, 0.5, rng, true);
    auto probe = Tensor<double>::uniform({4, 6}, -1, 1, rng);
    ok &= report_check(
        os, "layer_norm",
        grad_check<double>(
            [&] { return ops::sum(ops::mul(ops::layer_norm(x, g, be, 1e-5), probe)); },
            {x, g, be}, 1e-5, 1e-4));
  }
  {
    auto x = Tensor<double>::uniform({10, 3}, -1, 1, rng, true);
    auto k = Tensor<double>::uniform({3, 5}, -1, 1, rng, true);
    auto b = Tensor<double>::uniform({3}, -1, 1, rng, true);
    auto probe = Tensor<double>::uniform({10, 3}, -1, 1, rng);
    ok &= report_check(
        os, "depthwise_conv1d",
        grad_check<double>(
            [&] { return ops::sum(ops::mul(ops::depthwise_conv1d(x, k, b), probe)); }, {x, k, b},
            1e-5, 1e-6));
  }
  for (auto [kind, name] : {std::pair{ops::Activation::sigmoid, "sigmoid"},
                            {ops::Activation::gelu, "gelu"},
                            {ops::Activation::softplus, "softplus"}}) {
    auto x = Tensor<double>::uniform({3, 5}, -2, 2, rng, true);
    auto probe = Tensor<double>::uniform({3, 5}, -1, 1, rng);
    ok &= report_check(
        os, name,
        grad_check<double>([&, k = kind] { return ops::sum(ops::mul(ops::activation(k, x), probe)); },
                           {x}, 1e-5, 1e-5));
  }
  {
    const std::size_t d = 6, heads = 2, dh = 3;
    ops::AttentionParams<double> p;
    p.wq = Tensor<double>::uniform({d, d}, -0.5, 0.5, rng, true);
    p.bq = Tensor<double>::uniform({d}, -0.1, 0.1, rng, true);
    p.wk = Tensor<double>::uniform({d, d}, -0.5, 0.5, rng, true);
    p.bk = Tensor<double>::uniform({d}, -0.1, 0.1, rng, true);
    p.wv = Tensor<double>::uniform({d, d}, -0.5, 0.5, rng, true);
    p.bv = Tensor<double>::uniform({d}, -0.1, 0.1, rng, true);
    p.wo = Tensor<double>::uniform({d, d}, -0.5, 0.5, rng, true);
    p.bo = Tensor<double>::uniform({d}, -0.1, 0.1, rng, true);
    auto q = Tensor<double>::uniform({4, d}, -1, 1, rng, true);
    auto k = Tensor<double>::uniform({4, d}, -1, 1, rng, true);
    auto v = Tensor<double>::uniform({4, d}, -1, 1, rng, true);
    std::vector<Tensor<double>> params = {q, k, v};
    for (auto& t : p.parameters()) params.push_back(t);
    ok &= report_check(
        os, "multihead_attention",
        grad_check<double>(
            [&] { return ops::sum(ops::multihead_attention(q, k, v, p, heads, dh)); }, params,
            1e-5, 1e-5));
  }
  {
    const std::size_t L = 6, di = 3, ds = 2;
    auto x = Tensor<double>::uniform({L, di}, -1, 1, rng, true);
    auto a = Tensor<double>::uniform({di, ds}, -2, -0.2, rng, true);
    auto b = Tensor<double>::uniform({L, ds}, -1, 1, rng, true);
    auto c = Tensor<double>::uniform({L, ds}, -1, 1, rng, true);
    auto dl = Tensor<double>::uniform({L, di}, 0.1, 1.0, rng, true);
    auto dv = Tensor<double>::uniform({di}, -1, 1, rng, true);
    ok &= report_check(
        os, "selective_scan",
        grad_check<double>(
            [&] {
              return ops::sum(
                  ops::selective_scan(x, a, b, c, dl, dv, ops::ScanDirection::forward));
            },
            {x, a, b, c, dl, dv}, 1e-6, 1e-4));
  }

  // every fusion block kind end to end at toy dimensions
  for (FusionKind kind : {FusionKind::gated_dwconv, FusionKind::cvga, FusionKind::full_ssm,
                          FusionKind::bidir_ssm}) {
    FusionConfig cfg;
    cfg.kind = kind;
    cfg.depth = 1;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.d_head = 4;
    cfg.d_state = 3;
    cfg.expand = 2;
    cfg.dt_rank = 2;
    cfg.dropout_p = 0.0;
    RngStream srng = rng.child(fusion_kind_name(kind));
    FusionStack<double> stack(cfg, srng);
    auto x = Tensor<double>::uniform({6, 8}, -1, 1, srng, true);
    std::vector<Tensor<double>> params = {x};
    for (auto& [n, t] : stack.named_parameters()) params.push_back(t);
    RngStream dummy(0);
    ok &= report_check(
        os, std::string("block ") + fusion_kind_name(kind),
        grad_check<double>([&] { return ops::sum(stack.forward(x, Mode::eval, dummy)); }, params,
                           1e-5, 1e-4));
  }

  os << (ok ? "gradient suite OK\n" : "gradient suite FAILED\n");
  return ok ? 0 : 1;
}

}  // namespace biomass
