#pragma once

#include "tumorseg/blocks.hpp"

#include "json.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tumorseg {

enum class Family { kUNet, kAttentionUNet, kResUNet, kResUNetPP, kR2UNet };
enum class Backbone { kNone, kVgg19, kResNet152, kDenseNet201 };

/// Where an attention gate takes its gating signal from: the decoder feature
/// one level deeper (default) or the encoder feature one level deeper.
enum class GateSource { kDecoder, kEncoder };

std::string_view to_string(Family f);
std::string_view to_string(Backbone b);
std::string_view to_string(GateSource g);
Family parse_family(std::string_view s);
Backbone parse_backbone(std::string_view s);
GateSource parse_gate_source(std::string_view s);

/// Everything needed to rebuild a model bit-for-bit.
struct ArchConfig {
  Family family = Family::kUNet;
  Backbone backbone = Backbone::kNone;
  int depth = 4;
  Index base_width = 16;
  Index input_h = 64;
  Index input_w = 64;
  int recurrence_steps = 2;
  int se_ratio = 8;
  std::vector<int> aspp_rates{1, 2, 4};
  int stem_stride = 2;
  GateSource gate_source = GateSource::kDecoder;
  /// Global batch-norm override; unset keeps each family's own convention
  /// (off for plain U-Net convolutions and VGG, on elsewhere).
  std::optional<bool> batch_norm;
  std::uint64_t seed = 0;

  /// Throws InvalidBackbone, BadInputSize or InvalidConfig.
  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

/// Table-style label, e.g. "Attention UNET (ResNet152 backbone)".
std::string display_name(const ArchConfig& cfg);

/// The nine compared configurations: U-Net and Attention U-Net with each
/// backbone, then ResUNet, ResUNet++ and R2U-Net.
std::vector<ArchConfig> comparison_configs(Index base_width = 16, Index size = 64, std::uint64_t seed = 0);

void to_json(nlohmann::json& j, const ArchConfig& cfg);
void from_json(const nlohmann::json& j, ArchConfig& cfg);

/// Network body; maps (N, 1, H, W) images to (N, 1, H, W) probabilities.
template <typename Scalar>
class Network : public Module<Scalar> {
 public:
  virtual Var<Scalar> forward(const Var<Scalar>& x, Phase phase) = 0;
};

/// A built model: parameters plus the configuration that produced them.
template <typename Scalar>
class ModelHandle {
 public:
  ModelHandle(ArchConfig cfg, std::unique_ptr<Network<Scalar>> net);

  const ArchConfig& config() const { return cfg_; }
  Network<Scalar>& network() { return *net_; }

  /// Probabilities; checks the input against the configured size.
  Var<Scalar> forward(const Var<Scalar>& x, Phase phase);

  /// Inference without graph recording, evaluated in chunks of batch_size.
  Tensor<Scalar> predict(const Tensor<Scalar>& images, Index batch_size = 8);

  std::vector<Var<Scalar>> parameters() { return tumorseg::parameters(*net_); }
  void visit(ParameterVisitor<Scalar>& v) { net_->visit(v, ""); }

 private:
  ArchConfig cfg_;
  std::unique_ptr<Network<Scalar>> net_;
};

/// Randomly initialized (seeded by cfg.seed) model for the configuration.
template <typename Scalar>
ModelHandle<Scalar> build_model(const ArchConfig& cfg);

/// Exact number of trainable scalars.
template <typename Scalar>
std::int64_t param_count(ModelHandle<Scalar>& model);

}  // namespace tumorseg
