#include "strokeseg/eval.hpp"

#include "strokeseg/phantom.hpp"

#include "doctest.h"

#include <random>

using namespace strokeseg;

namespace {

VolumeU8 random_mask(int h, int w, int d, std::mt19937_64& rng, int inv_density = 4) {
  VolumeU8 m(h, w, d);
  for (auto& v : m.data) v = rng() % inv_density == 0;
  return m;
}

// triple-loop set-counting oracle
double dice_oracle(const VolumeU8& p, const VolumeU8& g) {
  std::int64_t inter = 0, np = 0, ng = 0;
  for (int r = 0; r < p.height; ++r)
    for (int c = 0; c < p.width; ++c)
      for (int d = 0; d < p.depth; ++d) {
        inter += p.at(r, c, d) && g.at(r, c, d);
        np += p.at(r, c, d);
        ng += g.at(r, c, d);
      }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

ModelConfig tiny_model(int slices, int hw) {
  ModelConfig cfg;
  cfg.variant = Variant::dual_encoder;
  cfg.slices_per_modality = slices;
  cfg.encoder_widths = {4, 8, 16, 32};
  cfg.transformer_layers = 1;
  cfg.transformer_heads = 2;
  cfg.transformer_dim = 16;
  cfg.fusion_proj_width = 16;
  cfg.input_hw = hw;
  return cfg;
}

}  // namespace

TEST_CASE("dice reference values and conventions") {
  VolumeU8 a(2, 2, 2), b(2, 2, 2);
  CHECK(dice(a, b) == 1.0);  // both empty

  a.at(0, 0, 0) = 1;
  CHECK(dice(a, b) == 0.0);  // one-sided empty
  CHECK(dice(b, a) == 0.0);

  b = a;
  CHECK(dice(a, b) == 1.0);  // identical non-empty

  // |P|=4, |G|=4, |P∩G|=2 -> 0.5
  VolumeU8 p(4, 4, 1), g(4, 4, 1);
  p.at(0, 0, 0) = p.at(0, 1, 0) = p.at(1, 0, 0) = p.at(1, 1, 0) = 1;
  g.at(1, 0, 0) = g.at(1, 1, 0) = g.at(2, 0, 0) = g.at(2, 1, 0) = 1;
  CHECK(dice(p, g) == 0.5);

  VolumeU8 wrong(3, 3, 1);
  CHECK_THROWS_AS(dice(p, wrong), std::invalid_argument);
  VolumeU8 nonbinary(4, 4, 1);
  nonbinary.at(0, 0, 0) = 2;
  CHECK_THROWS_AS(dice(nonbinary, g), std::invalid_argument);
}

TEST_CASE("dice is symmetric and agrees with the brute-force oracle") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const VolumeU8 p = random_mask(16, 16, 16, rng, 2 + static_cast<int>(rng() % 6));
    const VolumeU8 g = random_mask(16, 16, 16, rng, 2 + static_cast<int>(rng() % 6));
    const double d = dice(p, g);
    CHECK(d == dice(g, p));
    CHECK(d == dice_oracle(p, g));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }
}

TEST_CASE("volume dice equals pooled per-slice counts") {
  std::mt19937_64 rng(78);
  const VolumeU8 p = random_mask(12, 10, 8, rng);
  const VolumeU8 g = random_mask(12, 10, 8, rng);
  DiceCounts pooled;
  for (int d = 0; d < p.depth; ++d) {
    ImageU8 ps(p.height, p.width), gs(p.height, p.width);
    std::copy(p.slice(d), p.slice(d) + p.height * p.width, ps.data.begin());
    std::copy(g.slice(d), g.slice(d) + g.height * g.width, gs.data.begin());
    pooled += dice_counts(ps, gs);
  }
  CHECK(pooled.dice() == dice(p, g));
}

TEST_CASE("predict_case_with: oracle logits recover the mask exactly") {
  // full-support case so the crop is the identity and 32->32 resize is exact
  const int hw = 32, depth = 8;
  CaseVolume cv;
  cv.case_id = "oracle";
  cv.dwi = VolumeF(hw, hw, depth);
  cv.adc = VolumeF(hw, hw, depth);
  cv.mask = VolumeU8(hw, hw, depth);
  std::mt19937_64 rng(79);
  std::uniform_real_distribution<float> dist(0.1f, 1.f);
  for (auto& v : cv.dwi.data) v = dist(rng);
  for (auto& v : cv.adc.data) v = dist(rng);
  for (int d = 2; d < 6; ++d)
    for (int r = 10; r < 20; ++r)
      for (int c = 8; c < 24; ++c) cv.mask.at(r, c, d) = 1;

  PreprocessConfig cfg;
  cfg.slices_per_modality = 3;
  cfg.out_hw = hw;

  const SlicePredictor oracle = [&](const SampleRecord& rec) {
    ImageF logits(hw, hw);
    for (int r = 0; r < hw; ++r)
      for (int c = 0; c < hw; ++c)
        logits.at(r, c) = cv.mask.at(r, c, rec.center_slice) ? 10.f : -10.f;
    return logits;
  };
  const VolumeU8 pred = predict_case_with(oracle, cv, cfg);
  REQUIRE(pred.depth == depth);
  // boundary slices are excluded by the S=3 rule and come back empty
  for (int r = 0; r < hw; ++r)
    for (int c = 0; c < hw; ++c) {
      CHECK(pred.at(r, c, 0) == 0);
      CHECK(pred.at(r, c, depth - 1) == 0);
    }
  // interior mask slices recovered exactly -> case dice 1.0 (mask empty on
  // boundary slices by construction)
  CHECK(dice(pred, cv.mask) == 1.0);
}

TEST_CASE("all-negative logits yield an empty prediction volume") {
  CaseVolume cv;
  cv.case_id = "neg";
  cv.dwi = VolumeF(16, 16, 5);
  cv.adc = VolumeF(16, 16, 5);
  cv.mask = VolumeU8(16, 16, 5);
  std::mt19937_64 noise_rng(80);
  std::uniform_real_distribution<float> band(0.2f, 0.8f);
  for (auto& v : cv.dwi.data) v = band(noise_rng);
  for (auto& v : cv.adc.data) v = band(noise_rng);
  PreprocessConfig cfg;
  cfg.slices_per_modality = 1;
  cfg.out_hw = 16;
  const VolumeU8 pred = predict_case_with(
      [&](const SampleRecord&) { return ImageF(16, 16); },  // z = 0 everywhere: not > 0
      cv, cfg);
  for (auto v : pred.data) CHECK(v == 0);
}

TEST_CASE("predict_case with a real model honors the boundary rule") {
  const int hw = 32;
  PhantomSpec spec;
  spec.n_cases = 1;
  spec.shape = {48, 48, 10};
  spec.seed = 4;
  const CaseVolume cv = generate_case(spec, 0);

  SegModel model = build_model(tiny_model(3, hw), 3);
  PreprocessConfig cfg;
  cfg.slices_per_modality = 3;
  cfg.out_hw = hw;
  const VolumeU8 pred = predict_case(model, cv, cfg);
  const VolumeU8 gt = cropped_ground_truth(cv);
  REQUIRE(pred.same_shape(gt));
  for (int r = 0; r < pred.height; ++r)
    for (int c = 0; c < pred.width; ++c) {
      CHECK(pred.at(r, c, 0) == 0);
      CHECK(pred.at(r, c, pred.depth - 1) == 0);
    }
  // S mismatch is rejected
  PreprocessConfig wrong = cfg;
  wrong.slices_per_modality = 1;
  SegModel model1 = build_model(tiny_model(3, hw), 3);
  CHECK_THROWS_AS(predict_case(model1, cv, wrong), std::invalid_argument);
}

TEST_CASE("ground-truth oracle reaches near-perfect mean dice on phantoms") {
  PhantomSpec spec;
  spec.n_cases = 3;
  spec.shape = {48, 48, 12};
  spec.lesion_radius_range = {3.f, 6.f};
  spec.seed = 9;

  PreprocessConfig cfg;
  cfg.slices_per_modality = 3;
  cfg.out_hw = 64;  // upsampling keeps the nearest-neighbor round trip tight

  double dice_sum = 0;
  for (int i = 0; i < spec.n_cases; ++i) {
    const CaseVolume cv = generate_case(spec, i);
    const VolumeU8 gt = cropped_ground_truth(cv);
    const SlicePredictor oracle = [&](const SampleRecord& rec) {
      ImageU8 slice(gt.height, gt.width);
      std::copy(gt.slice(rec.center_slice), gt.slice(rec.center_slice) + gt.height * gt.width,
                slice.data.begin());
      const ImageU8 up = resize_nearest(slice, cfg.out_hw, cfg.out_hw);
      ImageF logits(cfg.out_hw, cfg.out_hw);
      for (std::size_t k = 0; k < up.data.size(); ++k) logits.data[k] = up.data[k] ? 10.f : -10.f;
      return logits;
    };
    const VolumeU8 pred = predict_case_with(oracle, cv, cfg);
    dice_sum += dice(pred, gt);
  }
  CHECK(dice_sum / spec.n_cases >= 0.95);
}

TEST_CASE("evaluate_split produces a consistent report") {
  PhantomSpec spec;
  spec.n_cases = 3;
  spec.shape = {48, 48, 10};
  spec.seed = 31;
  const auto root = std::filesystem::temp_directory_path() / "strokeseg_eval_root";
  std::filesystem::remove_all(root);
  write_phantom_dataset(spec, root);

  SegModel model = build_model(tiny_model(3, 32), 5);
  PreprocessConfig cfg;
  cfg.slices_per_modality = 3;
  cfg.out_hw = 32;

  // untrained model: report well-formed, dice within range
  const EvalReport report = evaluate_split(model, {"c0000", "c0001", "c0002"}, root, cfg);
  REQUIRE(report.per_case.size() == 3);
  double sum = 0;
  for (const auto& c : report.per_case) {
    CHECK(c.dice >= 0.0);
    CHECK(c.dice <= 1.0);
    CHECK(c.lesion_voxels_gt > 0);
    sum += c.dice;
  }
  CHECK(report.mean_dice == doctest::Approx(sum / 3).epsilon(1e-15));
  CHECK_FALSE(report.config_fingerprint.empty());

  // single-case split: mean equals that case's dice
  const EvalReport single = evaluate_split(model, {"c0001"}, root, cfg);
  CHECK(single.mean_dice == single.per_case[0].dice);

  // fingerprint is sensitive to the threshold
  const EvalReport other = evaluate_split(model, {"c0001"}, root, cfg, 0.7);
  CHECK(other.config_fingerprint != single.config_fingerprint);

  const auto j = report.to_json();
  CHECK(j.at("per_case").size() == 3);
  CHECK(j.at("mean_dice").get<double>() == report.mean_dice);
  CHECK(report.table("Dual-Encoder TransUNet (Three Slices)").find("0.") != std::string::npos);

  CHECK_THROWS_AS(evaluate_split(model, {}, root, cfg), std::invalid_argument);
  std::filesystem::remove_all(root);
}
