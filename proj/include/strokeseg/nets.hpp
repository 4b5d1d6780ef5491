#pragma once

#include "strokeseg/tensor.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace strokeseg {

enum class Variant { single_encoder, dual_encoder };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

/// Architecture selector plus every network hyperparameter.
struct ModelConfig {
  Variant variant = Variant::dual_encoder;
  int slices_per_modality = 3;  // S
  std::array<int, 4> encoder_widths = {32, 64, 128, 256};
  int transformer_layers = 4;
  int transformer_heads = 4;
  int transformer_dim = 256;
  int fusion_proj_width = 256;  // dual variant only
  int input_hw = 128;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::ordered_json& j);

  int bottleneck_hw() const { return input_hw / 16; }
  int tokens() const { return bottleneck_hw() * bottleneck_hw(); }
  /// Channels entering and leaving the transformer stage.
  int bottleneck_width() const {
    return variant == Variant::dual_encoder ? fusion_proj_width : encoder_widths[3];
  }
};

struct Parameter {
  std::string name;
  std::string group;
  nn::Var var;
  bool trainable = true;
};

/// Segmentation network: per-modality (or shared) convolutional encoder,
/// transformer over the bottleneck grid, decoder with skip connections,
/// 1-channel logit head.
class SegModel {
 public:
  explicit SegModel(ModelConfig config, std::uint64_t init_seed = 0);
  ~SegModel();

  SegModel(const SegModel&) = delete;
  SegModel& operator=(const SegModel&) = delete;
  SegModel(SegModel&&) noexcept;
  SegModel& operator=(SegModel&&) noexcept;

  struct ForwardResult {
    nn::Var logits;          // [B,1,H,W]
    nn::Var bottleneck_dwi;  // pre-fusion, dual variant only
    nn::Var bottleneck_adc;  // pre-fusion, dual variant only
    nn::Var bottleneck;      // shared bottleneck, single variant only
  };

  /// Inputs are [B,S,H,W] per modality; returns logits [B,1,H,W].
  ForwardResult forward(const nn::Tensor& dwi, const nn::Tensor& adc);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  std::vector<std::string> group_names() const;
  std::int64_t parameter_count(const std::string& group = "") const;
  void set_group_trainable(const std::string& group, bool trainable);
  bool group_is_trainable(const std::string& group) const;
  void zero_grad();

  /// Expected channel count of the first convolution (per encoder).
  int first_layer_in_channels() const;

  struct Layout;  // parameter index map, defined in the implementation

 private:
  friend class InferenceScope;
  ModelConfig config_;
  std::vector<Parameter> params_;
  std::unique_ptr<Layout> layout_;

  int add_param(const std::string& name, const std::string& group, nn::Tensor value);
};

/// Temporarily disables gradient tracking on every parameter.
class InferenceScope {
 public:
  explicit InferenceScope(SegModel& model);
  ~InferenceScope();
  InferenceScope(const InferenceScope&) = delete;
  InferenceScope& operator=(const InferenceScope&) = delete;

 private:
  SegModel& model_;
  std::vector<bool> saved_;
};

SegModel build_model(const ModelConfig& config, std::uint64_t init_seed = 0);

/// Self-describing checkpoint archive: parameters + ModelConfig + a free-form
/// training-state JSON. Round-trips parameter bytes exactly.
void save_checkpoint(const SegModel& model, const nlohmann::ordered_json& train_state,
                     const std::filesystem::path& path);
SegModel load_checkpoint(const std::filesystem::path& path,
                         nlohmann::ordered_json* train_state = nullptr);

}  // namespace strokeseg
