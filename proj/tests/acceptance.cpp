// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Criteria run in order and do not abort the others.

#include "strokeseg/cli.hpp"
#include "strokeseg/eval.hpp"
#include "strokeseg/phantom.hpp"
#include "strokeseg/preprocess.hpp"
#include "strokeseg/train.hpp"
#include "strokeseg/volume_io.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <vector>

using namespace strokeseg;
using nn::Tensor;
namespace fs = std::filesystem;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool cond, const std::string& msg) {
  if (!cond) throw Failure(msg);
}

fs::path g_work;

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv = {"strokeseg"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_dispatch(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(static_cast<bool>(in), "cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.variant = Variant::dual_encoder;
  cfg.slices_per_modality = 3;
  cfg.encoder_widths = {4, 8, 16, 32};
  cfg.transformer_layers = 1;
  cfg.transformer_heads = 2;
  cfg.transformer_dim = 32;
  cfg.fusion_proj_width = 32;
  return cfg;
}

Tensor random_input(int b, int s, int hw, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Tensor t({b, s, hw, hw});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

std::vector<SampleRecord> phantom_samples(const PhantomSpec& spec, int slices,
                                          bool lesion_only) {
  PreprocessConfig cfg;
  cfg.slices_per_modality = slices;
  cfg.signal_threshold = 0.01f;
  std::vector<SampleRecord> out;
  for (int i = 0; i < spec.n_cases; ++i) {
    CaseVolume cv = generate_case(spec, i);
    cv.dwi = minmax_normalize(cv.dwi);
    cv.adc = minmax_normalize(cv.adc);
    cv = crop_case(cv, nonzero_bbox(cv.dwi));
    for (auto& rec : extract_samples(cv, cfg)) {
      if (lesion_only) {
        std::int64_t ones = 0;
        for (auto t : rec.target.data) ones += t;
        if (ones == 0) continue;
      }
      out.push_back(std::move(rec));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void criterion1_metric_oracle() {
  std::mt19937_64 rng(101);
  auto brute_force = [](const VolumeU8& p, const VolumeU8& g) {
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
  };

  // fixed conventions first
  VolumeU8 empty(16, 16, 16);
  require(dice(empty, empty) == 1.0, "empty/empty must give 1.0");
  VolumeU8 one(16, 16, 16);
  one.at(3, 3, 3) = 1;
  require(dice(one, empty) == 0.0 && dice(empty, one) == 0.0,
          "one-sided empty must give 0.0");

  for (int trial = 0; trial < 1000; ++trial) {
    VolumeU8 p(16, 16, 16), g(16, 16, 16);
    // density sweep includes fully-empty masks
    const int dp = static_cast<int>(rng() % 8);
    const int dg = static_cast<int>(rng() % 8);
    for (auto& v : p.data) v = dp > 0 && rng() % dp == 0;
    for (auto& v : g.data) v = dg > 0 && rng() % dg == 0;
    const double got = dice(p, g);
    const double expected = brute_force(p, g);
    require(got == expected, "dice mismatch vs brute force at trial " + std::to_string(trial));
  }
}

void criterion2_preprocessing() {
  const fs::path dir = g_work / "c2";
  fs::create_directories(dir);
  for (int depth : {10, 12, 14}) {
    PhantomSpec spec;
    spec.n_cases = 2;
    spec.shape = {48, 48, depth};
    spec.lesion_radius_range = {2.5f, 5.f};
    spec.seed = 200 + depth;
    for (int i = 0; i < spec.n_cases; ++i) {
      CaseVolume cv = generate_case(spec, i);
      cv.dwi = minmax_normalize(cv.dwi);
      cv.adc = minmax_normalize(cv.adc);

      // bounding box vs a triple-loop scan
      const BoundingBox3D box = nonzero_bbox(cv.dwi);
      std::array<int, 3> lo{cv.dwi.height, cv.dwi.width, cv.dwi.depth}, hi{0, 0, 0};
      for (int r = 0; r < cv.dwi.height; ++r)
        for (int c = 0; c < cv.dwi.width; ++c)
          for (int d = 0; d < cv.dwi.depth; ++d)
            if (std::abs(cv.dwi.at(r, c, d)) > 0.f) {
              lo = {std::min(lo[0], r), std::min(lo[1], c), std::min(lo[2], d)};
              hi = {std::max(hi[0], r + 1), std::max(hi[1], c + 1), std::max(hi[2], d + 1)};
            }
      require(box.lo == lo && box.hi == hi, "nonzero_bbox differs from brute-force scan");

      // candidate rule before signal filtering: exactly D-2 for S=3
      const CaseVolume cropped = crop_case(cv, box);
      PreprocessConfig cfg;
      cfg.signal_threshold = -1.f;  // keep everything
      const auto samples = extract_samples(cropped, cfg);
      require(static_cast<int>(samples.size()) == cropped.dwi.depth - 2,
              "expected D-2 candidates, got " + std::to_string(samples.size()) + " for D=" +
                  std::to_string(cropped.dwi.depth));

      int k = 0;
      for (const auto& rec : samples) {
        for (float v : rec.dwi_stack)
          require(v >= 0.f && v <= 1.f, "DWI intensity outside [0,1]");
        for (float v : rec.adc_stack)
          require(v >= 0.f && v <= 1.f, "ADC intensity outside [0,1]");
        for (auto t : rec.target.data) require(t == 0 || t == 1, "non-binary target");

        // bit-exact round trip, twice for byte identity
        const fs::path f1 = dir / (rec.case_id + "_" + std::to_string(k) + "a.smp");
        const fs::path f2 = dir / (rec.case_id + "_" + std::to_string(k) + "b.smp");
        write_sample(rec, f1);
        write_sample(rec, f2);
        const SampleRecord back = read_sample(f1);
        require(back.dwi_stack == rec.dwi_stack && back.adc_stack == rec.adc_stack &&
                    back.target.data == rec.target.data &&
                    back.center_slice == rec.center_slice && back.case_id == rec.case_id,
                "sample round trip not bit-exact");
        require(slurp(f1) == slurp(f2), "sample serialization not byte-deterministic");
        ++k;
      }
    }
  }
}

void criterion3_architecture() {
  struct Case {
    Variant variant;
    int slices;
  };
  for (const Case c : {Case{Variant::single_encoder, 1}, Case{Variant::dual_encoder, 1},
                       Case{Variant::dual_encoder, 3}}) {
    ModelConfig cfg;
    cfg.variant = c.variant;
    cfg.slices_per_modality = c.slices;
    cfg.validate();
    SegModel model = build_model(cfg, 301);
    const Tensor dwi = random_input(2, c.slices, 128, 31);
    const Tensor adc = random_input(2, c.slices, 128, 32);
    InferenceScope scope(model);
    const auto out = model.forward(dwi, adc);
    require(out.logits.value().shape() == nn::Shape{2, 1, 128, 128},
            "logits shape wrong for variant");
    require(out.logits.value().all_finite(), "non-finite logits");
  }

  // single variant first layer consumes 2*S channels
  for (int s : {1, 3}) {
    ModelConfig cfg;
    cfg.variant = Variant::single_encoder;
    cfg.slices_per_modality = s;
    SegModel model = build_model(cfg, 302);
    require(model.first_layer_in_channels() == 2 * s, "single-encoder channel arithmetic");
    require(model.parameters()[0].var.value().shape() == nn::Shape{32, 9 * 2 * s},
            "first conv weight shape");
  }

  // dual variant: parameter disjointness and modality separation
  ModelConfig cfg;
  cfg.variant = Variant::dual_encoder;
  cfg.slices_per_modality = 3;
  SegModel model = build_model(cfg, 303);
  require(model.first_layer_in_channels() == 3, "dual-encoder channel arithmetic");
  std::int64_t dwi_count = 0, adc_count = 0;
  for (const auto& p : model.parameters()) {
    if (p.group == "encoder_dwi") dwi_count += p.var.value().numel();
    if (p.group == "encoder_adc") adc_count += p.var.value().numel();
  }
  require(dwi_count == adc_count && dwi_count > 0, "encoder groups not symmetric");

  InferenceScope scope(model);
  const Tensor dwi = random_input(2, 3, 128, 33);
  const Tensor adc = random_input(2, 3, 128, 34);
  const Tensor adc_zero({2, 3, 128, 128});
  const auto base = model.forward(dwi, adc);
  const auto zeroed = model.forward(dwi, adc_zero);
  const Tensor& a = base.bottleneck_dwi.value();
  const Tensor& b = zeroed.bottleneck_dwi.value();
  for (std::int64_t i = 0; i < a.numel(); ++i)
    require(a[i] == b[i], "pre-fusion DWI features changed when ADC input was zeroed");
  bool adc_changed = false;
  for (std::int64_t i = 0; i < base.bottleneck_adc.value().numel() && !adc_changed; ++i)
    adc_changed = base.bottleneck_adc.value()[i] != zeroed.bottleneck_adc.value()[i];
  require(adc_changed, "ADC bottleneck did not react to its input");

  // disjoint storage: perturbing ADC encoder leaves DWI bottleneck intact
  for (auto& p : model.parameters())
    if (p.group == "encoder_adc")
      for (std::int64_t i = 0; i < p.var.value().numel(); ++i) p.var.value()[i] += 0.01;
  const auto perturbed = model.forward(dwi, adc);
  for (std::int64_t i = 0; i < a.numel(); ++i)
    require(a[i] == perturbed.bottleneck_dwi.value()[i],
            "DWI bottleneck changed after perturbing encoder_adc parameters");
}

void criterion4_gradients() {
  // tiny-config finite differences at the full 128x128 contract
  ModelConfig cfg = tiny_config();
  SegModel model = build_model(cfg, 401);
  const Tensor dwi = random_input(1, 3, 128, 41);
  const Tensor adc = random_input(1, 3, 128, 42);
  Tensor target({1, 1, 128, 128});
  std::mt19937_64 trng(43);
  for (std::int64_t i = 0; i < target.numel(); ++i) target[i] = trng() % 6 == 0 ? 1.0 : 0.0;

  auto loss_value = [&]() {
    InferenceScope scope(model);
    auto out = model.forward(dwi, adc);
    return nn::bce_with_logits_mean(out.logits, nn::constant(target)).value().scalar();
  };
  {
    auto out = model.forward(dwi, adc);
    nn::Var loss = nn::bce_with_logits_mean(out.logits, nn::constant(target));
    nn::backward(loss);
  }
  std::mt19937_64 rng(404);
  const double h = 1e-5;
  for (int probe = 0; probe < 10; ++probe) {
    auto& p = model.parameters()[rng() % model.parameters().size()];
    const std::int64_t i = static_cast<std::int64_t>(rng() % p.var.value().numel());
    const double analytic = p.var.grad()[i];
    const double saved = p.var.value()[i];
    p.var.value()[i] = saved + h;
    const double lp = loss_value();
    p.var.value()[i] = saved - h;
    const double lm = loss_value();
    p.var.value()[i] = saved;
    const double fd = (lp - lm) / (2 * h);
    const double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-8});
    require(rel <= 1e-2, "finite-difference mismatch at " + p.name + "[" + std::to_string(i) +
                             "]: analytic=" + std::to_string(analytic) +
                             " fd=" + std::to_string(fd));
  }
  model.zero_grad();

  // full-config gradient coverage: every parameter receives a gradient
  ModelConfig full;
  full.variant = Variant::dual_encoder;
  full.slices_per_modality = 3;
  SegModel big = build_model(full, 402);
  const Tensor bdwi = random_input(1, 3, 128, 44);
  const Tensor badc = random_input(1, 3, 128, 45);
  Tensor btarget({1, 1, 128, 128});
  for (std::int64_t i = 0; i < btarget.numel(); ++i) btarget[i] = trng() % 6 == 0 ? 1.0 : 0.0;
  auto out = big.forward(bdwi, badc);
  nn::backward(nn::bce_with_logits_mean(out.logits, nn::constant(btarget)));
  for (const auto& p : big.parameters())
    require(!p.var.grad().empty(), "parameter without gradient: " + p.name);
}

void criterion5_schedule() {
  PhantomSpec spec;
  spec.n_cases = 2;
  spec.shape = {48, 48, 10};
  spec.seed = 500;
  const auto train_set = phantom_samples(spec, 3, false);
  require(train_set.size() >= 6, "not enough phantom samples");
  const std::vector<SampleRecord> train_split(train_set.begin(), train_set.begin() + 4);
  const std::vector<SampleRecord> val_split(train_set.begin() + 4, train_set.begin() + 6);

  SegModel model = build_model(tiny_config(), 501);
  auto snapshot_encoders = [&]() {
    std::vector<double> out;
    for (const auto& p : model.parameters())
      if (p.group.rfind("encoder", 0) == 0)
        out.insert(out.end(), p.var.value().data(), p.var.value().data() + p.var.value().numel());
    return out;
  };
  const std::vector<double> init = snapshot_encoders();

  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 6;
  cfg.freeze_epochs = 5;
  cfg.learning_rate = 1e-3;
  cfg.seed = 502;
  cfg.augment_enabled = false;

  std::vector<bool> changed;
  std::vector<double> prev = init;
  const TrainResult result = train_loop(model, train_split, val_split, cfg, g_work / "c5_run",
                                        [&](const EpochMetrics&) {
                                          const auto now = snapshot_encoders();
                                          changed.push_back(now != prev);
                                          prev = now;
                                        });
  for (int e = 0; e < 5; ++e)
    require(!changed[static_cast<std::size_t>(e)],
            "encoder changed during frozen epoch " + std::to_string(e + 1));
  require(changed[5], "encoder did not change at epoch 6");

  double min_val = result.log[0].val_loss;
  for (const auto& em : result.log) min_val = std::min(min_val, em.val_loss);
  require(result.best_val_loss == min_val, "best checkpoint is not the minimum validation loss");
  nlohmann::ordered_json state;
  load_checkpoint(result.best_checkpoint, &state);
  require(state.at("val_loss").get<double>() == min_val,
          "best.ckpt train_state val_loss mismatch");
}

void criterion6_loss() {
  Tensor z({3, 1, 4, 4}, 0.0);
  Tensor t({3, 1, 4, 4}, 0.0);
  for (std::int64_t i = 0; i < t.numel(); i += 3) t[i] = 1.0;
  require(std::abs(bce_with_logits_loss(z, t) - std::log(2.0)) <= 1e-9,
          "loss at z=0 deviates from ln 2");

  Tensor z2({1}, -100.0);
  Tensor t2({1}, 1.0);
  const double l = bce_with_logits_loss(z2, t2);
  require(std::isfinite(l) && std::abs(l - 100.0) <= 1e-9,
          "saturated-wrong loss not ~100, got " + std::to_string(l));

  Tensor z3({2}, 0.0);
  z3[0] = 1e4;
  z3[1] = -1e4;
  Tensor t3({2}, 0.0);
  t3[0] = 1.0;
  require(std::isfinite(bce_with_logits_loss(z3, t3)) &&
              bce_with_logits_loss(z3, t3) < 1e-9,
          "loss overflows for |z| = 1e4");
}

void criterion7_learning() {
  // (a) overfit 4 lesion-bearing phantom samples within 300 steps
  PhantomSpec spec;
  spec.n_cases = 2;
  spec.shape = {64, 64, 12};
  spec.lesion_count_range = {1, 2};
  spec.lesion_radius_range = {4.f, 8.f};
  spec.seed = 700;
  auto pool = phantom_samples(spec, 3, true);
  require(pool.size() >= 4, "not enough lesion-bearing samples");
  pool.resize(4);

  SegModel model = build_model(tiny_config(), 701);
  Tensor dwi, adc, targets;
  assemble_batch(pool, {0, 1, 2, 3}, dwi, adc, targets);

  struct AdamState {
    Tensor m, v;
    std::int64_t t = 0;
  };
  std::vector<AdamState> states(model.parameters().size());
  const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;

  double train_dice = 0;
  int steps = 0;
  for (; steps < 300; ++steps) {
    auto out = model.forward(dwi, adc);
    nn::Var loss = nn::bce_with_logits_mean(out.logits, nn::constant(targets));
    require(std::isfinite(loss.value().scalar()), "non-finite loss while overfitting");
    nn::backward(loss);
    auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].var.grad().empty()) continue;
      AdamState& s = states[i];
      Tensor& val = params[i].var.value();
      const Tensor& g = params[i].var.grad();
      if (s.m.empty()) {
        s.m = Tensor(val.shape());
        s.v = Tensor(val.shape());
      }
      ++s.t;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
      for (std::int64_t k = 0; k < val.numel(); ++k) {
        s.m[k] = b1 * s.m[k] + (1 - b1) * g[k];
        s.v[k] = b2 * s.v[k] + (1 - b2) * g[k] * g[k];
        val[k] -= lr * (s.m[k] / c1) / (std::sqrt(s.v[k] / c2) + eps);
      }
    }
    model.zero_grad();

    if ((steps + 1) % 10 == 0) {
      InferenceScope scope(model);
      const Tensor z = model.forward(dwi, adc).logits.value();
      std::int64_t inter = 0, np = 0, ng = 0;
      for (std::int64_t i = 0; i < z.numel(); ++i) {
        const bool p = z[i] > 0, g = targets[i] > 0.5;
        inter += p && g;
        np += p;
        ng += g;
      }
      train_dice = (np + ng) == 0 ? 1.0 : 2.0 * inter / static_cast<double>(np + ng);
      if (train_dice > 0.90) break;
    }
  }
  require(train_dice > 0.90, "overfit dice " + std::to_string(train_dice) + " after " +
                                 std::to_string(steps + 1) + " steps");
  std::printf("    overfit: dice %.3f after %d steps\n", train_dice, steps + 1);

  // (b) 20-case train / 5-case test pipeline within the CPU budget
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = g_work / "c7";
  const std::string ds = (dir / "ds").string();
  const std::string samples = (dir / "samples").string();
  const std::string run = (dir / "run").string();
  require(run_cli({"phantom", "--out", ds, "--cases", "30", "--shape", "64,64,14",
                   "--lesion-count", "1,3", "--lesion-radius", "3,7", "--noise-sigma", "0.03",
                   "--seed", "20"}) == 0,
          "phantom generation failed");
  require(run_cli({"split", "--root", ds, "--seed", "3", "--ratios", "0.667,0.166,0.167"}) == 0,
          "split failed");
  const SplitManifest manifest = read_manifest(fs::path(ds) / "split.json");
  require(manifest.train_ids.size() == 20 && manifest.test_ids.size() == 5,
          "expected a 20/5 train/test split");
  require(run_cli({"preprocess", "--root", ds, "--out", samples, "--slices", "3"}) == 0,
          "preprocess failed");
  require(run_cli({"train", "--root", ds, "--samples", samples, "--run-dir", run, "--widths",
                   "4,8,16,32", "--tf-layers", "1", "--tf-heads", "2", "--tf-dim", "32",
                   "--fusion-width", "32", "--epochs", "12", "--freeze-epochs", "1",
                   "--batch-size", "16", "--lr", "3e-3", "--seed", "11"}) == 0,
          "training failed");

  SegModel trained = load_checkpoint(fs::path(run) / "best.ckpt");
  PreprocessConfig pp;
  pp.slices_per_modality = 3;
  const EvalReport report = evaluate_split(trained, manifest.test_ids, ds, pp);
  const double minutes =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  std::printf("    pipeline: mean test dice %.4f in %.1f min\n", report.mean_dice, minutes);
  require(report.mean_dice >= 0.60,
          "mean test dice " + std::to_string(report.mean_dice) + " below 0.60");
  require(minutes <= 15.0, "pipeline exceeded 15 minutes");
}

void criterion8_determinism() {
  const fs::path dir = g_work / "c8";
  auto run_pipeline = [&](const std::string& tag) {
    const std::string ds = (dir / ("ds_" + tag)).string();
    const std::string samples = (dir / ("samples_" + tag)).string();
    const std::string run = (dir / ("run_" + tag)).string();
    require(run_cli({"phantom", "--out", ds, "--cases", "6", "--shape", "48,48,12",
                     "--lesion-radius", "2.5,5", "--seed", "80"}) == 0,
            "phantom failed");
    require(run_cli({"split", "--root", ds, "--seed", "81", "--ratios", "0.5,0.17,0.33"}) == 0,
            "split failed");
    require(run_cli({"preprocess", "--root", ds, "--out", samples, "--slices", "3"}) == 0,
            "preprocess failed");
    require(run_cli({"train", "--root", ds, "--samples", samples, "--run-dir", run, "--widths",
                     "4,8,16,32", "--tf-layers", "1", "--tf-heads", "2", "--tf-dim", "32",
                     "--fusion-width", "32", "--epochs", "2", "--freeze-epochs", "1",
                     "--batch-size", "8", "--lr", "1e-3", "--seed", "82"}) == 0,
            "train failed");
    return std::tuple{ds, samples, run};
  };

  const auto [ds1, samples1, run1] = run_pipeline("a");
  const auto [ds2, samples2, run2] = run_pipeline("b");

  require(slurp(fs::path(ds1) / "split.json") == slurp(fs::path(ds2) / "split.json"),
          "split manifests differ");
  for (const std::string split : {"train", "val", "test"}) {
    const auto files1 = read_sample_index(fs::path(samples1) / (split + "_index.json"));
    const auto files2 = read_sample_index(fs::path(samples2) / (split + "_index.json"));
    require(files1 == files2, "sample index differs for split " + split);
    for (const auto& f : files1)
      require(slurp(fs::path(samples1) / f) == slurp(fs::path(samples2) / f),
              "sample bytes differ: " + f);
  }
  require(slurp(fs::path(run1) / "metrics.csv") == slurp(fs::path(run2) / "metrics.csv"),
          "metric logs differ");
}

void criterion9_augmentation() {
  std::mt19937_64 rng(900);
  AugmentConfig cfg;
  cfg.out_hw = 32;
  std::uniform_real_distribution<float> dist(0.f, 1.f);
  for (int trial = 0; trial < 100; ++trial) {
    SampleRecord rec;
    rec.case_id = "aug";
    rec.center_slice = 1;
    rec.slices = 3;
    rec.height = rec.width = 32;
    rec.dwi_stack.resize(32 * 32 * 3);
    rec.adc_stack.resize(32 * 32 * 3);
    for (auto& v : rec.dwi_stack) v = dist(rng);
    for (auto& v : rec.adc_stack) v = dist(rng);
    rec.target = ImageU8(32, 32);
    for (auto& t : rec.target.data) t = rng() % 5 == 0;

    // marker pixel present in both image and mask tracks the transform
    const int mr = static_cast<int>(rng() % 32);
    const int mc = static_cast<int>(rng() % 32);
    rec.dwi_at(mr, mc, 1) = 1.f;
    rec.target.at(mr, mc) = 1;

    const Transform2D t = draw_transform(cfg, rng);
    const SampleRecord aug = apply_transform(rec, t);

    // inverse recovers the target exactly
    const ImageU8 recovered = apply_transform(aug.target, t.inverse());
    require(recovered.data == rec.target.data, "inverse transform failed to recover target");

    // image and mask moved together: wherever the image marker went, the
    // mask marker must be set too
    bool consistent = true;
    for (int r = 0; r < 32 && consistent; ++r)
      for (int c = 0; c < 32 && consistent; ++c)
        if (aug.dwi_at(r, c, 1) == 1.f && rec.dwi_at(r, c, 1) != 1.f)
          consistent = aug.target.at(r, c) == 1;
    require(consistent, "image and mask received different transforms");
  }
}

}  // namespace

int main() {
  g_work = fs::temp_directory_path() / "strokeseg_acceptance";
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  struct Criterion {
    int id;
    const char* name;
    std::function<void()> fn;
  };
  const std::vector<Criterion> criteria = {
      {1, "metric oracle vs brute force (1000 x 16^3, <30 s)", criterion1_metric_oracle},
      {2, "preprocessing conformance on phantoms", criterion2_preprocessing},
      {3, "architecture contracts for all three variants", criterion3_architecture},
      {4, "gradient correctness (FD + coverage, <2 min)", criterion4_gradients},
      {5, "two-stage schedule and model selection", criterion5_schedule},
      {6, "BCE-with-logits reference values", criterion6_loss},
      {7, "end-to-end learning on phantoms (<=15 min)", criterion7_learning},
      {8, "end-to-end determinism", criterion8_determinism},
      {9, "augmentation equivariance (100 samples)", criterion9_augmentation},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.fn();
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("[PASS] criterion %d: %s (%.1f s)\n", c.id, c.name, secs);
    } catch (const std::exception& e) {
      ++failures;
      std::printf("[FAIL] criterion %d: %s -- %s\n", c.id, c.name, e.what());
    }
    std::fflush(stdout);
  }

  fs::remove_all(g_work);
  if (failures) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all %zu criteria passed\n", criteria.size());
  return 0;
}
