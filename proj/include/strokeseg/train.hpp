#pragma once

#include "strokeseg/nets.hpp"
#include "strokeseg/preprocess.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace strokeseg {

/// Mask-consistent geometric augmentation: flips plus right-angle rotations.
struct AugmentConfig {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  std::vector<int> rotation_choices = {0, 90, 180, 270};
  int out_hw = 128;

  void validate() const;
};

struct TrainConfig {
  int batch_size = 16;
  int epochs = 100;
  int freeze_epochs = 5;
  double learning_rate = 1e-4;
  std::int64_t seed = 0;
  bool augment_enabled = true;
  AugmentConfig augment;
  // model selection is fixed: minimum validation loss

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::ordered_json& j);
};

/// Mean over all pixels of the numerically stable logit-form BCE.
double bce_with_logits_loss(const nn::Tensor& logits, const nn::Tensor& targets);

/// One sampled geometric transform; applied identically to both modality
/// stacks and the target, per-slice for S=3.
struct Transform2D {
  bool hflip = false;
  bool vflip = false;
  int rot_quarters = 0;  // counter-clockwise quarter turns, applied after flips

  Transform2D inverse() const;
  bool is_identity() const { return !hflip && !vflip && rot_quarters == 0; }
};

Transform2D draw_transform(const AugmentConfig& cfg, std::mt19937_64& rng);
SampleRecord apply_transform(const SampleRecord& record, const Transform2D& t);
ImageU8 apply_transform(const ImageU8& img, const Transform2D& t);
SampleRecord augment_sample(const SampleRecord& record, const AugmentConfig& cfg,
                            std::mt19937_64& rng);

struct EpochMetrics {
  int epoch = 0;
  std::string stage;  // "freeze" or "finetune"
  double train_loss = 0;
  double val_loss = 0;
  double val_dice = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> log;
  int best_epoch = 0;
  double best_val_loss = 0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path metrics_csv;
};

/// Batches samples into the model's [B,S,H,W] input pair plus [B,1,H,W]
/// targets.
void assemble_batch(const std::vector<SampleRecord>& samples, const std::vector<int>& indices,
                    nn::Tensor& dwi, nn::Tensor& adc, nn::Tensor& targets);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Two-stage training: epochs 1..freeze_epochs update only non-encoder
/// groups, the rest fine-tune everything. After each epoch validation loss
/// and Dice are logged (augmentation off) and the checkpoint with minimal
/// validation loss is retained as best.ckpt.
TrainResult train_loop(SegModel& model, const std::vector<SampleRecord>& train_samples,
                       const std::vector<SampleRecord>& val_samples, const TrainConfig& config,
                       const std::filesystem::path& run_dir, const EpochCallback& on_epoch = {});

}  // namespace strokeseg
