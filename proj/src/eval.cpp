#include "strokeseg/eval.hpp"

#include "strokeseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace strokeseg {

using nn::Tensor;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kPredictBatch = 8;

template <typename Container>
void check_binary(const Container& data, const char* name) {
  for (auto v : data)
    if (v != 0 && v != 1)
      throw std::invalid_argument(std::string("dice: ") + name + " is not binary");
}

struct PredictPipeline {
  CaseVolume cropped;
  std::vector<SampleRecord> records;  // one per valid center slice
};

// Normalize, crop to the DWI bounding box, and enumerate every valid
// center slice (the low-signal filter is bypassed so all slices are scored).
PredictPipeline prepare_prediction(const CaseVolume& raw_case, const PreprocessConfig& cfg) {
  cfg.validate();
  PredictPipeline p;
  p.cropped = raw_case;
  p.cropped.dwi = minmax_normalize(raw_case.dwi);
  p.cropped.adc = minmax_normalize(raw_case.adc);
  p.cropped = crop_case(p.cropped, nonzero_bbox(p.cropped.dwi));
  if (p.cropped.dwi.depth < cfg.slices_per_modality)
    throw std::runtime_error("case " + raw_case.case_id + ": cropped depth " +
                             std::to_string(p.cropped.dwi.depth) +
                             " < S=" + std::to_string(cfg.slices_per_modality));
  PreprocessConfig all = cfg;
  all.signal_threshold = -1.f;
  p.records = extract_samples(p.cropped, all);
  return p;
}

VolumeU8 assemble_prediction(const PredictPipeline& p, const std::vector<ImageF>& logits,
                             const PreprocessConfig& cfg, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("predict: threshold must lie in (0,1)");
  // sigmoid(z) > threshold, strictly, evaluated in logit space
  const double logit_threshold = std::log(threshold / (1.0 - threshold));

  const VolumeF& geom = p.cropped.dwi;
  VolumeU8 pred(geom.height, geom.width, geom.depth);
  for (std::size_t i = 0; i < p.records.size(); ++i) {
    const ImageF& z = logits[i];
    if (z.height != cfg.out_hw || z.width != cfg.out_hw)
      throw std::runtime_error("predictor returned wrong resolution");
    ImageU8 binary(cfg.out_hw, cfg.out_hw);
    for (std::size_t k = 0; k < binary.data.size(); ++k)
      binary.data[k] = z.data[k] > logit_threshold;
    const ImageU8 resized = resize_nearest(binary, geom.height, geom.width);
    std::memcpy(pred.slice(p.records[i].center_slice), resized.data.data(),
                resized.data.size());
  }
  return pred;
}

}  // namespace

double dice(const VolumeU8& pred, const VolumeU8& gt) {
  if (!pred.same_shape(gt))
    throw std::invalid_argument("dice: shape mismatch " + pred.shape_str() + " vs " +
                                gt.shape_str());
  check_binary(pred.data, "prediction");
  check_binary(gt.data, "ground truth");
  std::int64_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    inter += pred.data[i] & gt.data[i];
    p += pred.data[i];
    g += gt.data[i];
  }
  DiceCounts c{inter, p, g};
  return c.dice();
}

double dice(const ImageU8& pred, const ImageU8& gt) { return dice_counts(pred, gt).dice(); }

DiceCounts dice_counts(const ImageU8& pred, const ImageU8& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw std::invalid_argument("dice: image shape mismatch");
  check_binary(pred.data, "prediction");
  check_binary(gt.data, "ground truth");
  DiceCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    c.intersection += pred.data[i] & gt.data[i];
    c.pred += pred.data[i];
    c.gt += gt.data[i];
  }
  return c;
}

ordered_json EvalReport::to_json() const {
  ordered_json j;
  j["threshold"] = threshold;
  j["config_fingerprint"] = config_fingerprint;
  j["mean_dice"] = mean_dice;
  ordered_json cases = ordered_json::array();
  for (const auto& c : per_case) {
    ordered_json e;
    e["case_id"] = c.case_id;
    e["dice"] = c.dice;
    e["lesion_voxels_gt"] = c.lesion_voxels_gt;
    e["lesion_voxels_pred"] = c.lesion_voxels_pred;
    cases.push_back(e);
  }
  j["per_case"] = cases;
  return j;
}

std::string EvalReport::table(const std::string& model_label) const {
  std::ostringstream os;
  os << "Model Configuration                        | Mean Dice\n";
  os << "-------------------------------------------|----------\n";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", mean_dice);
  os << model_label;
  for (std::size_t i = model_label.size(); i < 43; ++i) os << ' ';
  os << "| " << buf << "\n";
  return os.str();
}

VolumeU8 predict_case_with(const SlicePredictor& predictor, const CaseVolume& raw_case,
                           const PreprocessConfig& cfg, double threshold) {
  const PredictPipeline p = prepare_prediction(raw_case, cfg);
  std::vector<ImageF> logits;
  logits.reserve(p.records.size());
  for (const SampleRecord& rec : p.records) logits.push_back(predictor(rec));
  return assemble_prediction(p, logits, cfg, threshold);
}

VolumeU8 predict_case(SegModel& model, const CaseVolume& raw_case, const PreprocessConfig& cfg,
                      double threshold) {
  if (model.config().slices_per_modality != cfg.slices_per_modality)
    throw std::invalid_argument(
        "predict: model S=" + std::to_string(model.config().slices_per_modality) +
        " does not match preprocess S=" + std::to_string(cfg.slices_per_modality));
  if (model.config().input_hw != cfg.out_hw)
    throw std::invalid_argument("predict: model input resolution does not match preprocess");
  InferenceScope scope(model);

  const PredictPipeline p = prepare_prediction(raw_case, cfg);
  const int hw = cfg.out_hw;
  std::vector<ImageF> logits;
  logits.reserve(p.records.size());
  for (std::size_t off = 0; off < p.records.size(); off += kPredictBatch) {
    const std::size_t end = std::min(off + kPredictBatch, p.records.size());
    std::vector<int> idx;
    for (std::size_t i = off; i < end; ++i) idx.push_back(static_cast<int>(i));
    Tensor dwi, adc, targets;
    assemble_batch(p.records, idx, dwi, adc, targets);
    const Tensor z = model.forward(dwi, adc).logits.value();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      ImageF img(hw, hw);
      const nn::Scalar* src = z.data() + static_cast<std::int64_t>(b) * hw * hw;
      for (std::size_t i = 0; i < img.data.size(); ++i)
        img.data[i] = static_cast<float>(src[i]);
      logits.push_back(std::move(img));
    }
  }
  return assemble_prediction(p, logits, cfg, threshold);
}

VolumeU8 cropped_ground_truth(const CaseVolume& raw_case) {
  CaseVolume cv = raw_case;
  cv.dwi = minmax_normalize(raw_case.dwi);
  cv.adc = minmax_normalize(raw_case.adc);
  return crop_case(cv, nonzero_bbox(cv.dwi)).mask;
}

EvalReport evaluate_split(SegModel& model, const std::vector<std::string>& case_ids,
                          const std::filesystem::path& dataset_root, const PreprocessConfig& cfg,
                          double threshold) {
  if (case_ids.empty()) throw std::invalid_argument("evaluate: empty split");
  EvalReport report;
  report.threshold = threshold;
  ordered_json fp;
  fp["model_config"] = model.config().to_json();
  fp["slices_per_modality"] = cfg.slices_per_modality;
  fp["out_hw"] = cfg.out_hw;
  fp["threshold"] = threshold;
  report.config_fingerprint = config_fingerprint(fp);

  double dice_sum = 0;
  for (const auto& id : case_ids) {
    const CaseVolume raw = load_case(dataset_root, id);
    const VolumeU8 pred = predict_case(model, raw, cfg, threshold);
    const VolumeU8 gt = cropped_ground_truth(raw);
    EvalCaseResult r;
    r.case_id = id;
    r.dice = dice(pred, gt);
    for (auto v : gt.data) r.lesion_voxels_gt += v;
    for (auto v : pred.data) r.lesion_voxels_pred += v;
    dice_sum += r.dice;
    report.per_case.push_back(std::move(r));
  }
  report.mean_dice = dice_sum / static_cast<double>(case_ids.size());
  return report;
}

std::string config_fingerprint(const ordered_json& resolved_config) {
  const std::string s = resolved_config.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace strokeseg
