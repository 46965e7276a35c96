#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "biomass/checkpoint.hpp"
#include "biomass/grad_check.hpp"
#include "biomass/model.hpp"

using namespace biomass;

namespace {

ModelConfig toy_model_config(int d = 16, int patch = 4, int view = 8,
                             FusionKind kind = FusionKind::gated_dwconv, int depth = 1,
                             bool metadata = false) {
  ModelConfig cfg;
  cfg.backbone = BackboneSpec{"toy_patch", patch, d, view};
  cfg.fusion.kind = kind;
  cfg.fusion.depth = depth;
  cfg.fusion.d_model = d;
  cfg.fusion.heads = 2;
  cfg.fusion.d_head = d / 2;
  cfg.fusion.d_state = 3;
  cfg.fusion.expand = 2;
  cfg.fusion.dt_rank = 2;
  cfg.fusion.dropout_p = 0.1;
  cfg.metadata = metadata;
  cfg.head_hidden = 8;
  cfg.head_dropout = 0.1;
  return cfg;
}

ImageTensor random_image(std::size_t h, std::size_t w, RngStream& rng) {
  ImageTensor img(h, w);
  for (auto& v : img.values) v = static_cast<float>(rng.uniform01());
  return img;
}

}  // namespace

TEST_CASE("split_views fixtures") {
  auto img = constant_image(4, 4, 0.25f, 0.5f, 0.75f);
  auto [l, r] = split_views(img, 8);
  CHECK(l.height == 8);
  CHECK(l.width == 8);
  for (float v : l.values) CHECK((v == doctest::Approx(0.25) || v == doctest::Approx(0.5) ||
                                  v == doctest::Approx(0.75)));
  CHECK(l.at(3, 3, 1) == doctest::Approx(0.5));
  CHECK(r.at(0, 0, 2) == doctest::Approx(0.75));

  // area resample of a 2x2 block to 1x1 is the mean of the four pixels
  ImageTensor block(2, 2);
  block.at(0, 0, 0) = 0.0f;
  block.at(0, 1, 0) = 1.0f;
  block.at(1, 0, 0) = 0.5f;
  block.at(1, 1, 0) = 0.5f;
  auto small = resize_area(block, 1, 1);
  CHECK(small.at(0, 0, 0) == doctest::Approx(0.5));

  // left half 0, right half 1 separates cleanly
  ImageTensor split_img(4, 8);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) split_img.at(y, x, c) = x < 4 ? 0.f : 1.f;
  auto [lv, rv] = split_views(split_img, 4);
  for (float v : lv.values) CHECK(v == doctest::Approx(0.0));
  for (float v : rv.values) CHECK(v == doctest::Approx(1.0));

  ImageTensor degenerate(3, 1);
  CHECK_THROWS_AS(split_views(degenerate, 4), DataError);

  // odd width: the extra column goes to the left half
  ImageTensor odd(2, 3);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 3; ++x) odd.at(y, x, 0) = static_cast<float>(x);
  auto [lo, ro] = split_views(odd, 2);
  CHECK(lo.at(0, 1, 0) > 0.4);       // columns {0,1}
  CHECK(ro.at(0, 0, 0) == doctest::Approx(2.0));  // column {2}
}

TEST_CASE("weight-tied encoding: identical views give identical halves") {
  RngStream rng(7);
  ModelConfig cfg = toy_model_config();
  RngStream init = RngStream(1).child("init");
  DualViewModel<double> model(cfg, init);
  auto view = random_image(8, 8, rng);
  auto tokens = model.encode_views(view, view);
  const std::size_t half = tokens.shape()[0] / 2;
  const std::size_t d = tokens.shape()[1];
  for (std::size_t i = 0; i < half; ++i)
    for (std::size_t c = 0; c < d; ++c) CHECK(tokens.at(i, c) == tokens.at(half + i, c));

  // swapping views permutes the two halves
  auto view2 = random_image(8, 8, rng);
  auto t12 = model.encode_views(view, view2);
  auto t21 = model.encode_views(view2, view);
  for (std::size_t i = 0; i < half; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(t12.at(i, c) == t21.at(half + i, c));
      CHECK(t12.at(half + i, c) == t21.at(i, c));
    }
}

TEST_CASE("identity patch embedding exposes raw patches") {
  // d_model = patch*patch*3 so the embedding can be the identity
  const int patch = 2, view = 4, d = patch * patch * 3;
  ModelConfig cfg = toy_model_config(d, patch, view);
  RngStream init = RngStream(2).child("init");
  DualViewModel<double> model(cfg, init);
  auto& bb = model.backbone();
  auto w = bb.embed_w().data_mut();
  std::fill(w.begin(), w.end(), 0.0);
  for (int i = 0; i < d; ++i) w[i * d + i] = 1.0;
  std::fill(bb.embed_b().data_mut().begin(), bb.embed_b().data_mut().end(), 0.0);
  std::fill(bb.pos().data_mut().begin(), bb.pos().data_mut().end(), 0.0);

  RngStream rng(3);
  auto img = random_image(view, view, rng);
  auto tokens = bb.encode_view(img);
  // independent patch-extraction oracle
  const int grid = view / patch;
  for (int py = 0; py < grid; ++py)
    for (int px = 0; px < grid; ++px) {
      int col = 0;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          for (int c = 0; c < 3; ++c) {
            const double expect = img.at(py * patch + y, px * patch + x, c);
            CHECK(tokens.at(py * grid + px, col) == doctest::Approx(expect).epsilon(1e-12));
            ++col;
          }
    }
}

TEST_CASE("metadata encoding layout and errors") {
  Vocabulary vocab = Vocabulary::defaults();
  SampleMeta meta;
  meta.state = "NSW";
  meta.species = "ryegrass";
  meta.ndvi = 0.5;
  meta.height = 10;
  meta.year = 2015;
  meta.month = 6;
  meta.day = 1;
  auto v = metadata_encode(meta, vocab);
  int unit_bits = 0;
  for (int i = 0; i < 19; ++i) {
    if (v[i] == 1.0) ++unit_bits;
    else CHECK(v[i] == 0.0);
  }
  CHECK(unit_bits == 2);
  CHECK(v[0] == 1.0);   // NSW is the first state
  CHECK(v[4] == 1.0);   // ryegrass is the first species slot
  CHECK(v[19] == doctest::Approx(0.5));
  CHECK(v[20] == doctest::Approx(10.0));
  CHECK(v[21] * v[21] + v[22] * v[22] == doctest::Approx(1.0).epsilon(1e-9));

  meta.month = 12;
  v = metadata_encode(meta, vocab);
  CHECK(v[21] == doctest::Approx(0.0));
  CHECK(v[22] == doctest::Approx(1.0));
  meta.month = 3;
  v = metadata_encode(meta, vocab);
  CHECK(v[21] == doctest::Approx(1.0));
  CHECK(v[22] == doctest::Approx(0.0).epsilon(1e-12));

  meta.species = "tumbleweed";
  CHECK_THROWS_AS(metadata_encode(meta, vocab), VocabularyError);
  meta.species = "ryegrass";
  meta.month = 13;
  CHECK_THROWS_AS(metadata_encode(meta, vocab), DataError);
}

TEST_CASE("predictions are positive and composites are exact sums") {
  RngStream rng(11);
  for (auto kind : {FusionKind::identity, FusionKind::gated_dwconv, FusionKind::cvga}) {
    ModelConfig cfg = toy_model_config(16, 4, 8, kind, kind == FusionKind::identity ? 0 : 1);
    RngStream init = RngStream(100 + static_cast<int>(kind)).child("init");
    DualViewModel<double> model(cfg, init);
    for (int trial = 0; trial < 20; ++trial) {
      auto img = random_image(8, 16, rng);
      RngStream dummy(0);
      auto p = model.predict(img, std::nullopt, Mode::eval, dummy);
      CHECK(p.green > 0);
      CHECK(p.dead > 0);
      CHECK(p.clover > 0);
      CHECK(p.gdm - (p.green + p.clover) == 0.0);
      CHECK(p.total - (p.gdm + p.dead) == 0.0);
    }
  }
}

TEST_CASE("heads stay positive in the negative-bias limit") {
  ModelConfig cfg = toy_model_config();
  RngStream init = RngStream(5).child("init");
  DualViewModel<double> model(cfg, init);
  for (auto* head : {&model.head_green(), &model.head_dead(), &model.head_clover()}) {
    for (auto& v : head->b2.data_mut()) v = -50.0;
  }
  RngStream rng(6), dummy(0);
  auto img = random_image(8, 16, rng);
  auto p = model.predict(img, std::nullopt, Mode::eval, dummy);
  CHECK(p.green > 0);
  CHECK(p.green < 1e-10);
  CHECK(p.total > 0);
}

TEST_CASE("metadata branch wiring") {
  RngStream rng(13), dummy(0);
  auto img = random_image(8, 16, rng);
  Vocabulary vocab = Vocabulary::defaults();
  SampleMeta meta{"WA", "lucerne", 0.7, 5.0, 2016, 9, 3};
  const MetadataVector mv = metadata_encode(meta, vocab);

  ModelConfig plain = toy_model_config();
  RngStream init1 = RngStream(21).child("init");
  DualViewModel<double> no_meta(plain, init1);
  CHECK_THROWS_AS(no_meta.predict(img, mv, Mode::eval, dummy), ConfigError);

  ModelConfig with_meta = toy_model_config(16, 4, 8, FusionKind::gated_dwconv, 1, true);
  RngStream init2 = RngStream(21).child("init");
  DualViewModel<double> meta_model(with_meta, init2);
  // absent metadata at eval is the all-zero path and stays finite
  auto p_absent = meta_model.predict(img, std::nullopt, Mode::eval, dummy);
  CHECK(std::isfinite(p_absent.total));
  // supplying metadata changes the prediction
  auto p_meta = meta_model.predict(img, mv, Mode::eval, dummy);
  CHECK(p_meta.total != p_absent.total);
  // drop_p = 1 in train mode matches the zero-vector path for every sample
  ModelConfig always_drop = with_meta;
  always_drop.metadata_dropout = 1.0 - 1e-12;
  RngStream init3 = RngStream(21).child("init");
  DualViewModel<double> drop_model(always_drop, init3);
  auto [l, r] = split_views(img, 8);
  RngStream r1(55), r2(55);
  auto with_mv = drop_model.predict_views(l, r, mv, Mode::train, r1);
  auto with_zero = drop_model.predict_views(l, r, MetadataVector{}, Mode::train, r2);
  CHECK(with_mv.total == doctest::Approx(with_zero.total).epsilon(1e-15));
}

TEST_CASE("parameter count fixtures at paper scale") {
  CHECK(head_param_count(1024, 512) == 1575939ULL);
  CHECK(std::abs(head_param_count(1024, 512) / 1e6 - 1.58) / 1.58 < 0.01);
  CHECK(head_param_count(1024, 1) == 3081ULL);

  FusionConfig f;
  f.kind = FusionKind::gated_dwconv;
  f.depth = 2;
  f.d_model = 1024;
  const double task_total = (param_count(f) + head_param_count(1024, 512)) / 1e6;
  CHECK(std::abs(task_total - 5.79) / 5.79 < 0.01);

  CHECK(metadata_param_count(1024) == 1120832ULL);
  CHECK(std::abs(metadata_param_count(1024) / 1e6 - 1.12) / 1.12 < 0.01);
}

TEST_CASE("allocated model parameters match the symbolic accounting") {
  ModelConfig cfg = toy_model_config(16, 4, 8, FusionKind::gated_dwconv, 2, true);
  RngStream init = RngStream(31).child("init");
  DualViewModel<double> model(cfg, init);
  std::uint64_t backbone = 0, task = 0;
  for (auto& [n, t] : model.backbone_parameters()) backbone += t.numel();
  for (auto& [n, t] : model.task_parameters()) task += t.numel();
  CHECK(backbone == backbone_param_count(cfg.backbone));
  CHECK(task == param_count(cfg.fusion) + head_param_count(16, cfg.head_hidden) +
                    metadata_param_count(16));
}

TEST_CASE("checkpoint round-trip is bit exact") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "biomass_ckpt_test.bin").string();
  ModelConfig cfg = toy_model_config(16, 4, 8, FusionKind::bidir_ssm, 1, true);
  RngStream init = RngStream(41).child("init");
  DualViewModel<double> model(cfg, init);
  auto params = model.named_parameters();
  const auto saved = snapshot_values(params);
  save_checkpoint(path, params);

  // scramble, reload, compare bitwise
  for (auto& [n, t] : params)
    for (auto& v : t.data_mut()) v = -123.0;
  load_checkpoint(path, params);
  std::size_t pi = 0;
  for (auto& [n, t] : params) {
    auto now = t.data();
    for (std::size_t i = 0; i < now.size(); ++i) CHECK(now[i] == saved[pi][i]);
    ++pi;
  }

  // precision mismatch is rejected
  ModelConfig cfg32 = cfg;
  RngStream init32 = RngStream(41).child("init");
  DualViewModel<float> model32(cfg32, init32);
  auto params32 = model32.named_parameters();
  CHECK_THROWS_AS(load_checkpoint(path, params32), ConfigError);
  fs::remove(path);
}

TEST_CASE("end-to-end gradient check of the toy model") {
  ModelConfig cfg = toy_model_config(8, 2, 4, FusionKind::gated_dwconv, 1);
  cfg.head_hidden = 4;
  RngStream init = RngStream(51).child("init");
  DualViewModel<double> model(cfg, init);
  RngStream rng(52), dummy(0);
  auto left = random_image(4, 4, rng);
  auto right = random_image(4, 4, rng);
  std::vector<Tensor<double>> params;
  for (auto& [n, t] : model.named_parameters()) params.push_back(t);
  auto f = [&] {
    auto out = model.forward_views(left, right, std::nullopt, Mode::eval, dummy);
    return out.total;  // total already sums every head
  };
  auto report = grad_check<double>(f, params, 1e-5, 1e-4);
  INFO("rel err ", report.max_rel_err);
  CHECK(report.passed);
}
