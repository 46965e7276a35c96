#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "biomass/data.hpp"
#include "biomass/fusion.hpp"
#include "biomass/image.hpp"
#include "biomass/ops.hpp"

namespace biomass {

// ---------------------------------------------------------------------------
// metadata encoding: state one-hot (4) | species one-hot (15) | ndvi | height
// | month_sin | month_cos

inline constexpr int kMetaDim = 23;
using MetadataVector = std::array<double, kMetaDim>;

inline MetadataVector metadata_encode(const SampleMeta& meta, const Vocabulary& vocab) {
  if (meta.month < 1 || meta.month > 12) {
    throw DataError("month out of range: " + std::to_string(meta.month));
  }
  MetadataVector v{};
  v[vocab.state_index(meta.state)] = 1.0;
  v[kNumStates + vocab.species_index(meta.species)] = 1.0;
  v[19] = meta.ndvi;
  v[20] = meta.height;
  const double angle = 2.0 * 3.14159265358979323846 * ((meta.month % 12) / 12.0);
  v[21] = std::sin(angle);
  v[22] = std::cos(angle);
  return v;
}

// ---------------------------------------------------------------------------
// backbone

struct BackboneSpec {
  std::string kind = "toy_patch";
  int patch = 8;
  int d_model = 32;
  int view_size = 32;

  int grid() const { return view_size / patch; }
  int tokens_per_view() const { return grid() * grid(); }

  void validate() const {
    if (kind != "toy_patch") throw ConfigError("unknown backbone kind '" + kind + "'");
    if (patch < 1 || d_model < 1 || view_size < 1) throw ConfigError("backbone dims must be >= 1");
    if (view_size % patch != 0) throw ConfigError("view_size must be divisible by patch");
  }
};

inline std::uint64_t backbone_param_count(const BackboneSpec& spec) {
  spec.validate();
  const std::uint64_t pv = static_cast<std::uint64_t>(spec.patch) * spec.patch * 3;
  const std::uint64_t d = spec.d_model;
  return pv * d + d + static_cast<std::uint64_t>(spec.tokens_per_view()) * d;
}

// Patchify + linear embedding + learned positional offsets. Both views are
// encoded by the same parameter set; the token grid contract matches the
// paper-scale backbone it stands in for.
template <class T>
class ToyPatchBackbone {
 public:
  ToyPatchBackbone(const BackboneSpec& spec, RngStream& rng) : spec_(spec) {
    spec_.validate();
    const std::size_t pv = static_cast<std::size_t>(spec_.patch) * spec_.patch * 3;
    const std::size_t d = spec_.d_model;
    embed_w_ = init::fan_in_uniform<T>({pv, d}, pv, rng);
    embed_b_ = Tensor<T>::zeros({d}, true);
    pos_ = Tensor<T>::uniform({static_cast<std::size_t>(spec_.tokens_per_view()), d}, T(-0.02),
                              T(0.02), rng, true);
  }

  Tensor<T> encode_view(const ImageTensor& view) const {
    if (view.height != static_cast<std::size_t>(spec_.view_size) ||
        view.width != static_cast<std::size_t>(spec_.view_size)) {
      throw ShapeError("backbone expects a " + std::to_string(spec_.view_size) + "x" +
                       std::to_string(spec_.view_size) + " view");
    }
    const std::size_t grid = spec_.grid(), patch = spec_.patch;
    const std::size_t pv = patch * patch * 3;
    std::vector<T> patches(grid * grid * pv);
    for (std::size_t py = 0; py < grid; ++py)
      for (std::size_t px = 0; px < grid; ++px) {
        T* dst = patches.data() + (py * grid + px) * pv;
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            for (std::size_t c = 0; c < 3; ++c)
              *dst++ = static_cast<T>(view.at(py * patch + y, px * patch + x, c));
      }
    Tensor<T> tokens(Shape{grid * grid, pv}, std::move(patches));
    return ops::add(ops::linear(tokens, embed_w_, embed_b_), pos_);
  }

  NamedParams<T> named_parameters() const {
    return {{"embed.w", embed_w_}, {"embed.b", embed_b_}, {"pos", pos_}};
  }

  const BackboneSpec& spec() const { return spec_; }

  Tensor<T>& embed_w() { return embed_w_; }
  Tensor<T>& embed_b() { return embed_b_; }
  Tensor<T>& pos() { return pos_; }

 private:
  BackboneSpec spec_;
  Tensor<T> embed_w_, embed_b_, pos_;
};

// ---------------------------------------------------------------------------
// prediction heads (gram-space positive outputs)

inline std::uint64_t head_param_count(std::uint64_t d_model, std::uint64_t hidden) {
  return 3 * ((d_model * hidden + hidden) + (hidden + 1));
}

template <class T>
struct PredictionHead {
  Tensor<T> w1, b1, w2, b2;
  double dropout_p = 0.2;

  PredictionHead() = default;
  PredictionHead(std::size_t d, std::size_t hidden, double p, RngStream& rng)
      : w1(init::fan_in_uniform<T>({d, hidden}, d, rng)),
        b1(Tensor<T>::zeros({hidden}, true)),
        w2(init::fan_in_uniform<T>({hidden, 1}, hidden, rng)),
        b2(Tensor<T>::zeros({1}, true)),
        dropout_p(p) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode, RngStream& rng) const {
    Tensor<T> h = ops::gelu(ops::linear(x, w1, b1));
    h = ops::dropout(h, dropout_p, mode, rng);
    return ops::softplus(ops::linear(h, w2, b2));
  }

  NamedParams<T> named_parameters(const std::string& prefix) const {
    return {{prefix + ".w1", w1}, {prefix + ".b1", b1}, {prefix + ".w2", w2},
            {prefix + ".b2", b2}};
  }
};

// ---------------------------------------------------------------------------
// metadata injection branch

inline std::uint64_t metadata_param_count(std::uint64_t d_model) {
  return (23ULL * 64 + 64) + (64ULL * 64 + 64) + ((d_model + 64) * d_model + d_model);
}

template <class T>
class MetadataBranch {
 public:
  MetadataBranch() = default;
  MetadataBranch(std::size_t d, double drop_p, RngStream& rng)
      : drop_p_(drop_p),
        w1_(init::fan_in_uniform<T>({kMetaDim, 64}, kMetaDim, rng)),
        b1_(Tensor<T>::zeros({64}, true)),
        w2_(init::fan_in_uniform<T>({64, 64}, 64, rng)),
        b2_(Tensor<T>::zeros({64}, true)),
        proj_w_(init::fan_in_uniform<T>({d + 64, d}, d + 64, rng)),
        proj_b_(Tensor<T>::zeros({d}, true)) {}

  // Train mode zeroes the raw 23-d vector with probability drop_p per
  // sample; an absent vector at eval time is the all-zero path.
  Tensor<T> forward(const Tensor<T>& pooled, const MetadataVector& meta, Mode mode,
                    RngStream& rng) const {
    std::vector<T> mv(kMetaDim, T(0));
    const bool dropped = (mode == Mode::train) && (rng.uniform01() < drop_p_);
    if (!dropped) {
      for (int i = 0; i < kMetaDim; ++i) mv[i] = static_cast<T>(meta[i]);
    }
    Tensor<T> m(Shape{kMetaDim}, std::move(mv));
    Tensor<T> emb = ops::gelu(ops::linear(m, w1_, b1_));
    emb = ops::linear(emb, w2_, b2_);
    return ops::linear(ops::concat_cols(pooled, emb), proj_w_, proj_b_);
  }

  NamedParams<T> named_parameters() const {
    return {{"meta.w1", w1_}, {"meta.b1", b1_}, {"meta.w2", w2_},
            {"meta.b2", b2_}, {"meta.proj.w", proj_w_}, {"meta.proj.b", proj_b_}};
  }

 private:
  double drop_p_ = 0.2;
  Tensor<T> w1_, b1_, w2_, b2_, proj_w_, proj_b_;
};

// ---------------------------------------------------------------------------
// full model

struct ModelConfig {
  BackboneSpec backbone;
  FusionConfig fusion;
  bool metadata = false;
  double metadata_dropout = 0.2;
  int head_hidden = 64;
  double head_dropout = 0.2;

  void validate() const {
    backbone.validate();
    if (fusion.d_model != backbone.d_model) {
      throw ConfigError("fusion d_model must match backbone d_model");
    }
    fusion.validate();
    if (head_hidden < 1) throw ConfigError("head_hidden must be >= 1");
  }
};

struct BiomassPrediction {
  double green = 0, dead = 0, clover = 0, gdm = 0, total = 0;
};

template <class T>
class DualViewModel {
 public:
  struct Outputs {
    Tensor<T> green, dead, clover, gdm, total;  // gram-space scalars on tape
  };

  DualViewModel(const ModelConfig& cfg, RngStream& rng) : cfg_(cfg) {
    cfg_.validate();
    RngStream r_backbone = rng.child("backbone");
    RngStream r_fusion = rng.child("fusion");
    RngStream r_heads = rng.child("heads");
    RngStream r_meta = rng.child("metadata");
    backbone_ = std::make_unique<ToyPatchBackbone<T>>(cfg_.backbone, r_backbone);
    fusion_ = std::make_unique<FusionStack<T>>(cfg_.fusion, r_fusion);
    const auto d = static_cast<std::size_t>(cfg_.backbone.d_model);
    green_ = PredictionHead<T>(d, cfg_.head_hidden, cfg_.head_dropout, r_heads);
    dead_ = PredictionHead<T>(d, cfg_.head_hidden, cfg_.head_dropout, r_heads);
    clover_ = PredictionHead<T>(d, cfg_.head_hidden, cfg_.head_dropout, r_heads);
    if (cfg_.metadata) {
      meta_branch_ = MetadataBranch<T>(d, cfg_.metadata_dropout, r_meta);
    }
  }

  // Both views through the shared backbone, concatenated left-then-right.
  Tensor<T> encode_views(const ImageTensor& left, const ImageTensor& right) const {
    return ops::concat_rows(backbone_->encode_view(left), backbone_->encode_view(right));
  }

  Outputs forward_views(const ImageTensor& left, const ImageTensor& right,
                        const std::optional<MetadataVector>& meta, Mode mode,
                        RngStream& rng) const {
    if (meta.has_value() && !cfg_.metadata) {
      throw ConfigError("metadata supplied to a model built without the metadata branch");
    }
    Tensor<T> tokens = encode_views(left, right);
    Tensor<T> fused = fusion_->forward(tokens, mode, rng);
    Tensor<T> pooled = ops::mean_pool(fused);
    if (cfg_.metadata) {
      pooled = meta_branch_->forward(pooled, meta.value_or(MetadataVector{}), mode, rng);
    }
    Outputs out;
    out.green = green_.forward(pooled, mode, rng);
    out.dead = dead_.forward(pooled, mode, rng);
    out.clover = clover_.forward(pooled, mode, rng);
    out.gdm = ops::add(out.green, out.clover);
    out.total = ops::add(out.gdm, out.dead);
    return out;
  }

  // Composite values are exact double sums of the component predictions.
  BiomassPrediction predict(const ImageTensor& img, const std::optional<MetadataVector>& meta,
                            Mode mode, RngStream& rng) const {
    auto [left, right] = split_views(img, cfg_.backbone.view_size);
    return predict_views(left, right, meta, mode, rng);
  }

  BiomassPrediction predict_views(const ImageTensor& left, const ImageTensor& right,
                                  const std::optional<MetadataVector>& meta, Mode mode,
                                  RngStream& rng) const {
    Outputs out = forward_views(left, right, meta, mode, rng);
    BiomassPrediction p;
    p.green = static_cast<double>(out.green.item());
    p.dead = static_cast<double>(out.dead.item());
    p.clover = static_cast<double>(out.clover.item());
    p.gdm = p.green + p.clover;
    p.total = p.gdm + p.dead;
    return p;
  }

  NamedParams<T> backbone_parameters() const {
    NamedParams<T> out;
    for (auto& [n, t] : backbone_->named_parameters()) out.emplace_back("backbone." + n, t);
    return out;
  }

  NamedParams<T> task_parameters() const {
    NamedParams<T> out;
    for (auto& [n, t] : fusion_->named_parameters()) out.emplace_back("fusion." + n, t);
    for (auto& [n, t] : green_.named_parameters("heads.green")) out.emplace_back(n, t);
    for (auto& [n, t] : dead_.named_parameters("heads.dead")) out.emplace_back(n, t);
    for (auto& [n, t] : clover_.named_parameters("heads.clover")) out.emplace_back(n, t);
    if (cfg_.metadata) {
      for (auto& [n, t] : meta_branch_->named_parameters()) out.emplace_back(n, t);
    }
    return out;
  }

  NamedParams<T> named_parameters() const {
    NamedParams<T> out = backbone_parameters();
    for (auto& [n, t] : task_parameters()) out.emplace_back(n, t);
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  FusionStack<T>& fusion() { return *fusion_; }
  ToyPatchBackbone<T>& backbone() { return *backbone_; }
  PredictionHead<T>& head_green() { return green_; }
  PredictionHead<T>& head_dead() { return dead_; }
  PredictionHead<T>& head_clover() { return clover_; }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ToyPatchBackbone<T>> backbone_;
  std::unique_ptr<FusionStack<T>> fusion_;
  PredictionHead<T> green_, dead_, clover_;
  std::optional<MetadataBranch<T>> meta_branch_;
};

}  // namespace biomass
