#pragma once

#include "strokeseg/nets.hpp"
#include "strokeseg/preprocess.hpp"

#include <functional>
#include <string>
#include <vector>

namespace strokeseg {

/// 2|P∩G| / (|P|+|G|). Both empty -> 1.0; exactly one empty -> 0.0.
double dice(const VolumeU8& pred, const VolumeU8& gt);
double dice(const ImageU8& pred, const ImageU8& gt);

/// Pooled overlap bookkeeping, used to aggregate per-slice counts.
struct DiceCounts {
  std::int64_t intersection = 0;
  std::int64_t pred = 0;
  std::int64_t gt = 0;

  DiceCounts& operator+=(const DiceCounts& o) {
    intersection += o.intersection;
    pred += o.pred;
    gt += o.gt;
    return *this;
  }
  double dice() const {
    return (pred + gt) == 0
               ? 1.0
               : 2.0 * static_cast<double>(intersection) / static_cast<double>(pred + gt);
  }
};

DiceCounts dice_counts(const ImageU8& pred, const ImageU8& gt);

struct EvalCaseResult {
  std::string case_id;
  double dice = 0;
  std::int64_t lesion_voxels_gt = 0;
  std::int64_t lesion_voxels_pred = 0;
};

struct EvalReport {
  std::vector<EvalCaseResult> per_case;
  double mean_dice = 0;
  std::string config_fingerprint;
  double threshold = 0.5;

  nlohmann::ordered_json to_json() const;
  /// Plain-text summary table (configuration vs mean Dice).
  std::string table(const std::string& model_label) const;
};

/// Predicts one slice stack; receives the model-ready sample and returns
/// 128x128 logits. Lets tests substitute an oracle for the network.
using SlicePredictor = std::function<ImageF(const SampleRecord&)>;

/// Runs the preprocessing pipeline without the low-signal filter, predicts
/// every valid center slice, thresholds sigmoid(z) > threshold, and
/// reassembles a binary volume on the cropped grid. Boundary slices
/// excluded by the S=3 rule come back empty.
VolumeU8 predict_case_with(const SlicePredictor& predictor, const CaseVolume& raw_case,
                           const PreprocessConfig& cfg, double threshold = 0.5);

VolumeU8 predict_case(SegModel& model, const CaseVolume& raw_case, const PreprocessConfig& cfg,
                      double threshold = 0.5);

/// Ground-truth mask on the same cropped grid as predict_case output.
VolumeU8 cropped_ground_truth(const CaseVolume& raw_case);

EvalReport evaluate_split(SegModel& model, const std::vector<std::string>& case_ids,
                          const std::filesystem::path& dataset_root, const PreprocessConfig& cfg,
                          double threshold = 0.5);

std::string config_fingerprint(const nlohmann::ordered_json& resolved_config);

}  // namespace strokeseg
