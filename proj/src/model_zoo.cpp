#include "tumorseg/model_zoo.hpp"

#include "tumorseg/backbones.hpp"
#include "tumorseg/error.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <optional>
#include <sstream>
#include <utility>

namespace tumorseg {

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view s, const std::array<std::pair<std::string_view, Enum>, N>& table,
                ErrorCode code, std::string_view what) {
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  throw Error(code, "unknown " + std::string(what) + " '" + std::string(s) + "'");
}

constexpr std::array<std::pair<std::string_view, Family>, 5> kFamilies{{
    {"unet", Family::kUNet},
    {"attention_unet", Family::kAttentionUNet},
    {"resunet", Family::kResUNet},
    {"resunetpp", Family::kResUNetPP},
    {"r2unet", Family::kR2UNet},
}};

constexpr std::array<std::pair<std::string_view, Backbone>, 4> kBackbones{{
    {"none", Backbone::kNone},
    {"vgg19", Backbone::kVgg19},
    {"resnet152", Backbone::kResNet152},
    {"densenet201", Backbone::kDenseNet201},
}};

constexpr std::array<std::pair<std::string_view, GateSource>, 2> kGateSources{{
    {"decoder", GateSource::kDecoder},
    {"encoder", GateSource::kEncoder},
}};

template <typename Enum, std::size_t N>
std::string_view name_of(Enum e, const std::array<std::pair<std::string_view, Enum>, N>& table) {
  for (const auto& [name, value] : table) {
    if (value == e) return name;
  }
  return "?";
}

bool family_batch_norm(Family f) { return f != Family::kUNet && f != Family::kAttentionUNet; }

BlockKind block_kind(Family f) {
  switch (f) {
    case Family::kResUNet:
    case Family::kResUNetPP:
      return BlockKind::kResidual;
    case Family::kR2UNet:
      return BlockKind::kRecurrentResidual;
    default:
      return BlockKind::kDoubleConv;
  }
}

template <typename Scalar>
Var<Scalar> replicate_channels(const Var<Scalar>& x, Index channels) {
  if (channels == x.shape().c) return x;
  return concat_channels(std::vector<Var<Scalar>>(static_cast<std::size_t>(channels), x));
}

// Encoder / decoder with skip connections. Covers U-Net, Attention U-Net,
// ResUNet and R2U-Net, with or without a backbone trunk.
template <typename Scalar>
class EncoderDecoderNet : public Network<Scalar> {
 public:
  EncoderDecoderNet(const ArchConfig& cfg, Initializer& init) : depth_(cfg.depth), gate_source_(cfg.gate_source) {
    const BlockKind kind = block_kind(cfg.family);
    const bool bn = cfg.batch_norm.value_or(family_batch_norm(cfg.family));
    BlockConfig block;
    block.recurrence_steps = cfg.recurrence_steps;
    block.use_batch_norm = bn;

    switch (cfg.backbone) {
      case Backbone::kNone:
        encoder_ = make_plain_encoder<Scalar>(kind, cfg.depth, cfg.base_width, block, init);
        break;
      case Backbone::kVgg19:
        encoder_ = make_vgg19_encoder<Scalar>(cfg.depth, cfg.base_width, cfg.batch_norm.value_or(false), init);
        break;
      case Backbone::kResNet152:
        encoder_ = make_resnet152_encoder<Scalar>(cfg.depth, cfg.base_width, init);
        break;
      case Backbone::kDenseNet201:
        encoder_ = make_densenet201_encoder<Scalar>(cfg.depth, cfg.base_width, init);
        break;
    }

    const std::vector<Index> skips = encoder_->skip_channels();
    Index prev = encoder_->bottom_channels();
    for (int i = cfg.depth - 1; i >= 0; --i) {
      const Index out = cfg.base_width << i;
      const Index skip = skips[static_cast<std::size_t>(i)];
      Level level{UpConv2x2<Scalar>(prev, out, init), {}, nullptr};
      if (cfg.family == Family::kAttentionUNet) {
        const Index gate = gate_source_ == GateSource::kDecoder ? prev
                           : i + 1 < cfg.depth                  ? skips[static_cast<std::size_t>(i + 1)]
                                                                : encoder_->bottom_channels();
        level.gate.emplace(gate, skip, std::max<Index>(1, skip / 2), init);
      }
      BlockConfig c = block;
      c.in_channels = out + skip;
      c.out_channels = out;
      level.block = make_block<Scalar>(kind, c, init);
      levels_.push_back(std::move(level));
      prev = out;
    }
    head_ = Conv2d<Scalar>(ConvOptions{.in = prev, .out = 1, .kernel = 1}, init);
  }

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase) override {
    EncoderFeatures<Scalar> f = encoder_->forward(replicate_channels(x, encoder_->input_channels()), phase);
    Var<Scalar> d = f.bottom;
    for (std::size_t k = 0; k < levels_.size(); ++k) {
      const std::size_t i = static_cast<std::size_t>(depth_) - 1 - k;
      Level& level = levels_[k];
      Var<Scalar> skip = f.skips[i];
      if (level.gate) {
        const Var<Scalar>& g = gate_source_ == GateSource::kDecoder ? d
                               : i + 1 < f.skips.size()             ? f.skips[i + 1]
                                                                    : f.bottom;
        skip = level.gate->forward(g, skip, phase);
      }
      d = level.block->forward(concat_channels<Scalar>({level.up.forward(d), skip}), phase);
    }
    return probability(head_.forward(d));
  }

  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override {
    encoder_->visit(v, join_name(prefix, "encoder"));
    for (std::size_t k = 0; k < levels_.size(); ++k) {
      const std::string name = join_name(prefix, "decoder" + std::to_string(depth_ - 1 - static_cast<int>(k)));
      levels_[k].up.visit(v, join_name(name, "up"));
      if (levels_[k].gate) levels_[k].gate->visit(v, join_name(name, "gate"));
      levels_[k].block->visit(v, join_name(name, "block"));
    }
    head_.visit(v, join_name(prefix, "head"));
  }

 private:
  struct Level {
    UpConv2x2<Scalar> up;
    std::optional<AttentionGate<Scalar>> gate;
    std::unique_ptr<Block<Scalar>> block;
  };

  int depth_;
  GateSource gate_source_;
  std::unique_ptr<Encoder<Scalar>> encoder_;
  std::vector<Level> levels_;
  Conv2d<Scalar> head_;
};

// Stem -> (residual unit + SE) encoder -> ASPP bridge -> (attention +
// residual unit) decoder -> ASPP -> 1x1 sigmoid head.
template <typename Scalar>
class ResUNetPlusPlus : public Network<Scalar> {
 public:
  ResUNetPlusPlus(const ArchConfig& cfg, Initializer& init)
      : depth_(cfg.depth), gate_source_(cfg.gate_source), strided_stem_(cfg.stem_stride == 2) {
    const bool bn = cfg.batch_norm.value_or(true);
    const Index base = cfg.base_width;
    auto se_ratio = [&](Index channels) { return static_cast<int>(std::gcd<Index>(cfg.se_ratio, channels)); };

    BlockConfig stem;
    stem.in_channels = 1;
    stem.out_channels = base;
    stem.stride = cfg.stem_stride;
    stem.use_batch_norm = bn;
    encoder_.push_back(std::make_unique<Stem<Scalar>>(stem, init));
    excite_.emplace_back(base, se_ratio(base), init);
    for (int i = 1; i < cfg.depth; ++i) {
      BlockConfig c;
      c.in_channels = base << (i - 1);
      c.out_channels = base << i;
      c.stride = 2;
      c.use_batch_norm = bn;
      encoder_.push_back(std::make_unique<ResidualUnit<Scalar>>(c, init));
      excite_.emplace_back(c.out_channels, se_ratio(c.out_channels), init);
    }
    bridge_ = std::make_unique<Aspp<Scalar>>(base << (cfg.depth - 1), base << cfg.depth, cfg.aspp_rates, bn, init);

    Index prev = base << cfg.depth;
    for (int i = cfg.depth - 2; i >= 0; --i) {
      const Index skip = base << i;
      const Index gate = gate_source_ == GateSource::kDecoder ? prev : base << (i + 1);
      BlockConfig c;
      c.in_channels = skip * 2;
      c.out_channels = skip;
      c.use_batch_norm = bn;
      levels_.push_back(Level{AttentionGate<Scalar>(gate, skip, std::max<Index>(1, skip / 2), init),
                              UpConv2x2<Scalar>(prev, skip, init),
                              std::make_unique<ResidualUnit<Scalar>>(c, init)});
      prev = skip;
    }
    if (strided_stem_) final_up_ = UpConv2x2<Scalar>(prev, base, init);
    out_aspp_ = std::make_unique<Aspp<Scalar>>(base, base, cfg.aspp_rates, bn, init);
    head_ = Conv2d<Scalar>(ConvOptions{.in = base, .out = 1, .kernel = 1}, init);
  }

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase) override {
    std::vector<Var<Scalar>> e;
    Var<Scalar> h = x;
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      h = excite_[i].forward(encoder_[i]->forward(h, phase), phase);
      e.push_back(h);
    }
    Var<Scalar> d = bridge_->forward(h, phase);
    for (std::size_t k = 0; k < levels_.size(); ++k) {
      const std::size_t i = static_cast<std::size_t>(depth_) - 2 - k;
      Level& level = levels_[k];
      const Var<Scalar>& g = gate_source_ == GateSource::kDecoder ? d : e[i + 1];
      Var<Scalar> skip = level.gate.forward(g, e[i], phase);
      d = level.block->forward(concat_channels<Scalar>({level.up.forward(d), skip}), phase);
    }
    if (strided_stem_) d = final_up_.forward(d);
    return probability(head_.forward(out_aspp_->forward(d, phase)));
  }

  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override {
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      const std::string name = join_name(prefix, i == 0 ? std::string("stem") : "encoder" + std::to_string(i));
      encoder_[i]->visit(v, name);
      excite_[i].visit(v, join_name(name, "se"));
    }
    bridge_->visit(v, join_name(prefix, "bridge"));
    for (std::size_t k = 0; k < levels_.size(); ++k) {
      const std::string name = join_name(prefix, "decoder" + std::to_string(depth_ - 2 - static_cast<int>(k)));
      levels_[k].gate.visit(v, join_name(name, "gate"));
      levels_[k].up.visit(v, join_name(name, "up"));
      levels_[k].block->visit(v, join_name(name, "block"));
    }
    if (strided_stem_) final_up_.visit(v, join_name(prefix, "final_up"));
    out_aspp_->visit(v, join_name(prefix, "aspp"));
    head_.visit(v, join_name(prefix, "head"));
  }

 private:
  struct Level {
    AttentionGate<Scalar> gate;
    UpConv2x2<Scalar> up;
    std::unique_ptr<Block<Scalar>> block;
  };

  int depth_;
  GateSource gate_source_;
  bool strided_stem_;
  std::vector<std::unique_ptr<Block<Scalar>>> encoder_;
  std::vector<SqueezeExcitation<Scalar>> excite_;
  std::unique_ptr<Aspp<Scalar>> bridge_;
  std::vector<Level> levels_;
  UpConv2x2<Scalar> final_up_;
  std::unique_ptr<Aspp<Scalar>> out_aspp_;
  Conv2d<Scalar> head_;
};

}  // namespace

std::string_view to_string(Family f) { return name_of(f, kFamilies); }
std::string_view to_string(Backbone b) { return name_of(b, kBackbones); }
std::string_view to_string(GateSource g) { return name_of(g, kGateSources); }

Family parse_family(std::string_view s) { return parse_enum(s, kFamilies, ErrorCode::kInvalidConfig, "family"); }
Backbone parse_backbone(std::string_view s) {
  return parse_enum(s, kBackbones, ErrorCode::kInvalidBackbone, "backbone");
}
GateSource parse_gate_source(std::string_view s) {
  return parse_enum(s, kGateSources, ErrorCode::kInvalidConfig, "gate source");
}

void ArchConfig::validate() const {
  if (backbone != Backbone::kNone && family != Family::kUNet && family != Family::kAttentionUNet) {
    throw Error(ErrorCode::kInvalidBackbone, "backbone " + std::string(to_string(backbone)) +
                                                 " is only available for unet and attention_unet, not " +
                                                 std::string(to_string(family)));
  }
  const int max_depth = backbone == Backbone::kVgg19 ? 4 : backbone == Backbone::kNone ? 8 : 5;
  if (depth < 1 || depth > max_depth) {
    throw Error(ErrorCode::kInvalidConfig, "depth must be in 1.." + std::to_string(max_depth));
  }
  if (family == Family::kResUNetPP && depth < 2) throw Error(ErrorCode::kInvalidConfig, "resunetpp needs depth >= 2");
  if (base_width < 1) throw Error(ErrorCode::kInvalidConfig, "base_width must be positive");
  if (recurrence_steps < 1) throw Error(ErrorCode::kInvalidConfig, "recurrence_steps must be positive");
  if (se_ratio < 1) throw Error(ErrorCode::kInvalidConfig, "se_ratio must be positive");
  if (aspp_rates.empty()) throw Error(ErrorCode::kEmptyRates, "aspp_rates is empty");
  if (stem_stride != 1 && stem_stride != 2) throw Error(ErrorCode::kInvalidConfig, "stem_stride must be 1 or 2");
  const Index step = Index(1) << depth;
  if (input_h < 1 || input_w < 1 || input_h % step != 0 || input_w % step != 0) {
    throw Error(ErrorCode::kBadInputSize, "input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                                              " is not divisible by 2^" + std::to_string(depth));
  }
}

std::string display_name(const ArchConfig& cfg) {
  std::string name;
  switch (cfg.family) {
    case Family::kUNet: name = "UNET"; break;
    case Family::kAttentionUNet: name = "Attention UNET"; break;
    case Family::kResUNet: name = "ResUnet"; break;
    case Family::kResUNetPP: name = "ResUnet++"; break;
    case Family::kR2UNet: name = "Recurrent Residual UNET"; break;
  }
  switch (cfg.backbone) {
    case Backbone::kNone: break;
    case Backbone::kVgg19: name += " (VGG-19 backbone)"; break;
    case Backbone::kResNet152: name += " (ResNet152 backbone)"; break;
    case Backbone::kDenseNet201: name += " (Densenet201 backbone)"; break;
  }
  return name;
}

std::vector<ArchConfig> comparison_configs(Index base_width, Index size, std::uint64_t seed) {
  std::vector<ArchConfig> out;
  auto add = [&](Family f, Backbone b) {
    ArchConfig c;
    c.family = f;
    c.backbone = b;
    c.base_width = base_width;
    c.input_h = c.input_w = size;
    c.seed = seed;
    out.push_back(c);
  };
  for (Family f : {Family::kUNet, Family::kAttentionUNet}) {
    for (Backbone b : {Backbone::kVgg19, Backbone::kResNet152, Backbone::kDenseNet201}) add(f, b);
  }
  add(Family::kResUNet, Backbone::kNone);
  add(Family::kResUNetPP, Backbone::kNone);
  add(Family::kR2UNet, Backbone::kNone);
  return out;
}

void to_json(nlohmann::json& j, const ArchConfig& cfg) {
  j = nlohmann::json{
      {"family", to_string(cfg.family)},
      {"backbone", to_string(cfg.backbone)},
      {"depth", cfg.depth},
      {"base_width", cfg.base_width},
      {"input_size", {cfg.input_h, cfg.input_w}},
      {"t", cfg.recurrence_steps},
      {"se_ratio", cfg.se_ratio},
      {"aspp_rates", cfg.aspp_rates},
      {"stem_stride", cfg.stem_stride},
      {"gate_source", to_string(cfg.gate_source)},
      {"batch_norm", cfg.batch_norm ? nlohmann::json(*cfg.batch_norm) : nlohmann::json(nullptr)},
      {"seed", cfg.seed},
  };
}

void from_json(const nlohmann::json& j, ArchConfig& cfg) {
  try {
    cfg.family = parse_family(j.at("family").get<std::string>());
    cfg.backbone = parse_backbone(j.at("backbone").get<std::string>());
    cfg.depth = j.at("depth").get<int>();
    cfg.base_width = j.at("base_width").get<Index>();
    const auto& size = j.at("input_size");
    cfg.input_h = size.at(0).get<Index>();
    cfg.input_w = size.at(1).get<Index>();
    cfg.recurrence_steps = j.at("t").get<int>();
    cfg.se_ratio = j.value("se_ratio", 8);
    cfg.aspp_rates = j.value("aspp_rates", std::vector<int>{1, 2, 4});
    cfg.stem_stride = j.value("stem_stride", 2);
    cfg.gate_source = parse_gate_source(j.value("gate_source", std::string("decoder")));
    const auto bn = j.find("batch_norm");
    cfg.batch_norm = bn == j.end() || bn->is_null() ? std::nullopt : std::optional<bool>(bn->get<bool>());
    cfg.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigMismatch, std::string("malformed architecture record: ") + e.what());
  }
}

template <typename Scalar>
ModelHandle<Scalar>::ModelHandle(ArchConfig cfg, std::unique_ptr<Network<Scalar>> net)
    : cfg_(std::move(cfg)), net_(std::move(net)) {}

template <typename Scalar>
Var<Scalar> ModelHandle<Scalar>::forward(const Var<Scalar>& x, Phase phase) {
  const Shape& s = x.shape();
  if (s.c != 1 || s.h != cfg_.input_h || s.w != cfg_.input_w) {
    std::ostringstream msg;
    msg << "model expects (N, 1, " << cfg_.input_h << ", " << cfg_.input_w << "), got " << s;
    throw Error(ErrorCode::kBadInputSize, msg.str());
  }
  return net_->forward(x, phase);
}

template <typename Scalar>
Tensor<Scalar> ModelHandle<Scalar>::predict(const Tensor<Scalar>& images, Index batch_size) {
  NoGradGuard no_grad;
  Shape s = images.shape();
  Tensor<Scalar> out(Shape{s.n, 1, s.h, s.w});
  for (Index first = 0; first < s.n; first += batch_size) {
    const Index count = std::min(batch_size, s.n - first);
    Var<Scalar> y = forward(Var<Scalar>(slice_batch(images, first, count)), Phase::kEval);
    out.vec().segment(first * s.plane(), count * s.plane()) = y.value().vec();
  }
  return out;
}

template <typename Scalar>
ModelHandle<Scalar> build_model(const ArchConfig& cfg) {
  cfg.validate();
  Initializer init(cfg.seed);
  std::unique_ptr<Network<Scalar>> net;
  if (cfg.family == Family::kResUNetPP) {
    net = std::make_unique<ResUNetPlusPlus<Scalar>>(cfg, init);
  } else {
    net = std::make_unique<EncoderDecoderNet<Scalar>>(cfg, init);
  }
  return ModelHandle<Scalar>(cfg, std::move(net));
}

template <typename Scalar>
std::int64_t param_count(ModelHandle<Scalar>& model) {
  return parameter_count(model.network());
}

template class ModelHandle<float>;
template class ModelHandle<double>;
template ModelHandle<float> build_model(const ArchConfig&);
template ModelHandle<double> build_model(const ArchConfig&);
template std::int64_t param_count(ModelHandle<float>&);
template std::int64_t param_count(ModelHandle<double>&);

}  // namespace tumorseg
