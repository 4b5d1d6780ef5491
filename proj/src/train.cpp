#include "strokeseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace strokeseg {

namespace fs = std::filesystem;
using nn::Tensor;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::mt19937_64 seeded_rng(std::int64_t seed, int a, int b, unsigned tag) {
  std::seed_seq seq{static_cast<unsigned>(seed), static_cast<unsigned>(seed >> 32),
                    static_cast<unsigned>(a), static_cast<unsigned>(b), tag};
  return std::mt19937_64(seq);
}

void shuffle_indices(std::vector<int>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

// Coordinate mapping of the canonical transform (flips first, then CCW
// quarter turns); square planes only for odd turns.
void transform_plane(const float* src, float* dst, int n, const Transform2D& t, int channels,
                     int chan) {
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      int sr = r, sc = c;
      // invert the rotation to find the source pixel
      switch (t.rot_quarters & 3) {
        case 1: {  // out(r,c) = flipped(c, n-1-r)
          sr = c;
          sc = n - 1 - r;
          break;
        }
        case 2:
          sr = n - 1 - r;
          sc = n - 1 - c;
          break;
        case 3: {
          sr = n - 1 - c;
          sc = r;
          break;
        }
        default: break;
      }
      if (t.vflip) sr = n - 1 - sr;
      if (t.hflip) sc = n - 1 - sc;
      dst[(static_cast<std::size_t>(r) * n + c) * channels + chan] =
          src[(static_cast<std::size_t>(sr) * n + sc) * channels + chan];
    }
}

struct Adam {
  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  struct State {
    Tensor m, v;
    std::int64_t t = 0;
  };
  std::vector<State> states;

  void step(std::vector<Parameter>& params) {
    if (states.empty()) states.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = params[i];
      if (!p.trainable || p.var.grad().empty()) continue;
      State& s = states[i];
      if (s.m.empty()) {
        s.m = Tensor(p.var.value().shape());
        s.v = Tensor(p.var.value().shape());
      }
      ++s.t;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.t));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.t));
      Tensor& val = p.var.value();
      const Tensor& g = p.var.grad();
      for (std::int64_t k = 0; k < val.numel(); ++k) {
        s.m[k] = beta1 * s.m[k] + (1.0 - beta1) * g[k];
        s.v[k] = beta2 * s.v[k] + (1.0 - beta2) * g[k] * g[k];
        val[k] -= lr * (s.m[k] / c1) / (std::sqrt(s.v[k] / c2) + eps);
      }
    }
  }
};

struct ValMetrics {
  double loss = 0;
  double dice = 0;
};

ValMetrics validate_model(SegModel& model, const std::vector<SampleRecord>& samples,
                          int batch_size) {
  InferenceScope scope(model);
  double loss_sum = 0;
  std::int64_t inter = 0, pred = 0, gt = 0;
  std::vector<int> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  for (std::size_t off = 0; off < idx.size(); off += static_cast<std::size_t>(batch_size)) {
    const std::vector<int> batch(idx.begin() + static_cast<std::ptrdiff_t>(off),
                                 idx.begin() + static_cast<std::ptrdiff_t>(std::min(
                                                   off + static_cast<std::size_t>(batch_size),
                                                   idx.size())));
    Tensor dwi, adc, targets;
    assemble_batch(samples, batch, dwi, adc, targets);
    auto out = model.forward(dwi, adc);
    const Tensor& z = out.logits.value();
    loss_sum += bce_with_logits_loss(z, targets) * static_cast<double>(batch.size());
    for (std::int64_t i = 0; i < z.numel(); ++i) {
      const bool p = z[i] > 0.0;
      const bool g = targets[i] > 0.5;
      inter += p && g;
      pred += p;
      gt += g;
    }
  }
  ValMetrics m;
  m.loss = loss_sum / static_cast<double>(samples.size());
  m.dice = (pred + gt) == 0 ? 1.0
                            : 2.0 * static_cast<double>(inter) / static_cast<double>(pred + gt);
  return m;
}

}  // namespace

void AugmentConfig::validate() const {
  if (p_hflip < 0 || p_hflip > 1 || p_vflip < 0 || p_vflip > 1)
    throw std::invalid_argument("augment: flip probabilities must lie in [0,1]");
  if (rotation_choices.empty())
    throw std::invalid_argument("augment: rotation_choices must be non-empty");
  for (int deg : rotation_choices)
    if (deg != 0 && deg != 90 && deg != 180 && deg != 270)
      throw std::invalid_argument("augment: rotations must be multiples of 90 in [0,270], got " +
                                  std::to_string(deg));
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (freeze_epochs < 0 || freeze_epochs > epochs)
    throw std::invalid_argument("train: freeze_epochs must lie in [0, epochs]");
  if (!(learning_rate > 0)) throw std::invalid_argument("train: learning_rate must be > 0");
  augment.validate();
}

ordered_json TrainConfig::to_json() const {
  ordered_json j;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["freeze_epochs"] = freeze_epochs;
  j["learning_rate"] = learning_rate;
  j["seed"] = seed;
  j["augment_enabled"] = augment_enabled;
  j["augment"] = {{"p_hflip", augment.p_hflip},
                  {"p_vflip", augment.p_vflip},
                  {"rotation_choices", augment.rotation_choices},
                  {"out_hw", augment.out_hw}};
  j["select_metric"] = "val_loss";
  return j;
}

TrainConfig TrainConfig::from_json(const ordered_json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.freeze_epochs = j.at("freeze_epochs").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.seed = j.at("seed").get<std::int64_t>();
  c.augment_enabled = j.at("augment_enabled").get<bool>();
  const auto& a = j.at("augment");
  c.augment.p_hflip = a.at("p_hflip").get<double>();
  c.augment.p_vflip = a.at("p_vflip").get<double>();
  c.augment.rotation_choices = a.at("rotation_choices").get<std::vector<int>>();
  c.augment.out_hw = a.at("out_hw").get<int>();
  c.validate();
  return c;
}

double bce_with_logits_loss(const Tensor& logits, const Tensor& targets) {
  if (!logits.same_shape(targets))
    throw std::invalid_argument("bce_with_logits: shape mismatch: logits " +
                                nn::shape_str(logits.shape()) + " vs targets " +
                                nn::shape_str(targets.shape()));
  return nn::bce_with_logits_mean(nn::constant(logits), nn::constant(targets)).value().scalar();
}

Transform2D Transform2D::inverse() const {
  Transform2D inv;
  inv.hflip = hflip;
  inv.vflip = vflip;
  // with exactly one reflection the composite is itself an involution
  const bool one_flip = hflip != vflip;
  inv.rot_quarters = one_flip ? rot_quarters : (4 - rot_quarters) & 3;
  return inv;
}

Transform2D draw_transform(const AugmentConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Transform2D t;
  t.hflip = unit(rng) < cfg.p_hflip;
  t.vflip = unit(rng) < cfg.p_vflip;
  const int deg = cfg.rotation_choices[rng() % cfg.rotation_choices.size()];
  t.rot_quarters = deg / 90;
  return t;
}

ImageU8 apply_transform(const ImageU8& img, const Transform2D& t) {
  if (img.height != img.width && (t.rot_quarters & 1))
    throw std::invalid_argument("augment: quarter rotations require square images");
  ImageU8 out(img.height, img.width);
  std::vector<float> src(img.data.size()), dst(img.data.size());
  for (std::size_t i = 0; i < src.size(); ++i) src[i] = img.data[i];
  transform_plane(src.data(), dst.data(), img.height, t, 1, 0);
  for (std::size_t i = 0; i < dst.size(); ++i) out.data[i] = static_cast<std::uint8_t>(dst[i]);
  return out;
}

SampleRecord apply_transform(const SampleRecord& record, const Transform2D& t) {
  if (record.height != record.width && (t.rot_quarters & 1))
    throw std::invalid_argument("augment: quarter rotations require square samples");
  SampleRecord out = record;
  for (int s = 0; s < record.slices; ++s) {
    transform_plane(record.dwi_stack.data(), out.dwi_stack.data(), record.height, t,
                    record.slices, s);
    transform_plane(record.adc_stack.data(), out.adc_stack.data(), record.height, t,
                    record.slices, s);
  }
  out.target = apply_transform(record.target, t);
  return out;
}

SampleRecord augment_sample(const SampleRecord& record, const AugmentConfig& cfg,
                            std::mt19937_64& rng) {
  const Transform2D t = draw_transform(cfg, rng);
  if (t.is_identity()) return record;
  return apply_transform(record, t);
}

void assemble_batch(const std::vector<SampleRecord>& samples, const std::vector<int>& indices,
                    Tensor& dwi, Tensor& adc, Tensor& targets) {
  if (indices.empty()) throw std::invalid_argument("assemble_batch: empty batch");
  const SampleRecord& first = samples[static_cast<std::size_t>(indices[0])];
  const int B = static_cast<int>(indices.size());
  const int S = first.slices;
  const int H = first.height, W = first.width;
  dwi = Tensor({B, S, H, W});
  adc = Tensor({B, S, H, W});
  targets = Tensor({B, 1, H, W});
  for (int b = 0; b < B; ++b) {
    const SampleRecord& rec = samples[static_cast<std::size_t>(indices[static_cast<std::size_t>(b)])];
    if (rec.slices != S || rec.height != H || rec.width != W)
      throw std::invalid_argument("assemble_batch: heterogeneous sample shapes");
    for (int s = 0; s < S; ++s)
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
          dwi[((static_cast<std::int64_t>(b) * S + s) * H + r) * W + c] = rec.dwi_at(r, c, s);
    for (int s = 0; s < S; ++s)
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
          adc[((static_cast<std::int64_t>(b) * S + s) * H + r) * W + c] = rec.adc_at(r, c, s);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c)
        targets[(static_cast<std::int64_t>(b) * H + r) * W + c] = rec.target.at(r, c);
  }
}

TrainResult train_loop(SegModel& model, const std::vector<SampleRecord>& train_samples,
                       const std::vector<SampleRecord>& val_samples, const TrainConfig& config,
                       const fs::path& run_dir, const EpochCallback& on_epoch) {
  config.validate();
  if (train_samples.empty() || val_samples.empty())
    throw std::invalid_argument("train_loop: empty sample set");
  for (const auto* set : {&train_samples, &val_samples})
    for (const auto& rec : *set) {
      if (rec.slices != model.config().slices_per_modality)
        throw std::invalid_argument(
            "train_loop: sample S=" + std::to_string(rec.slices) + " does not match model S=" +
            std::to_string(model.config().slices_per_modality));
      if (rec.height != model.config().input_hw || rec.width != model.config().input_hw)
        throw std::invalid_argument("train_loop: sample resolution does not match model input");
    }

  fs::create_directories(run_dir);
  {
    std::ofstream mc(run_dir / "model_config.json", std::ios::binary);
    mc << model.config().to_json().dump(2) << "\n";
    std::ofstream tc(run_dir / "train_config.json", std::ios::binary);
    tc << config.to_json().dump(2) << "\n";
  }

  std::vector<std::string> encoder_groups;
  for (const auto& g : model.group_names())
    if (g.rfind("encoder", 0) == 0) encoder_groups.push_back(g);

  Adam opt{config.learning_rate};
  TrainResult result;
  result.metrics_csv = run_dir / "metrics.csv";
  result.best_checkpoint = run_dir / "best.ckpt";
  result.last_checkpoint = run_dir / "last.ckpt";
  std::ofstream csv(result.metrics_csv, std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + result.metrics_csv.string());
  csv << "epoch,stage,train_loss,val_loss,val_dice\n";

  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;

  std::vector<int> order(train_samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const bool frozen = epoch <= config.freeze_epochs;
    for (const auto& g : encoder_groups) model.set_group_trainable(g, !frozen);

    auto perm_rng = seeded_rng(config.seed, epoch, 0, 0x9e37u);
    shuffle_indices(order, perm_rng);

    double loss_sum = 0;
    int batch_index = 0;
    for (std::size_t off = 0; off < order.size();
         off += static_cast<std::size_t>(config.batch_size), ++batch_index) {
      const std::vector<int> batch(
          order.begin() + static_cast<std::ptrdiff_t>(off),
          order.begin() + static_cast<std::ptrdiff_t>(
                              std::min(off + static_cast<std::size_t>(config.batch_size),
                                       order.size())));

      std::vector<SampleRecord> staged;
      const std::vector<SampleRecord>* source = &train_samples;
      std::vector<int> local = batch;
      if (config.augment_enabled) {
        staged.reserve(batch.size());
        for (std::size_t k = 0; k < batch.size(); ++k) {
          auto rng = seeded_rng(config.seed, epoch, batch[k], 0xa465u);
          staged.push_back(augment_sample(train_samples[static_cast<std::size_t>(batch[k])],
                                          config.augment, rng));
          local[k] = static_cast<int>(k);
        }
        source = &staged;
      }

      Tensor dwi, adc, targets;
      assemble_batch(*source, local, dwi, adc, targets);
      auto out = model.forward(dwi, adc);
      nn::Var loss = nn::bce_with_logits_mean(out.logits, nn::constant(targets));
      const double loss_value = loss.value().scalar();
      if (!std::isfinite(loss_value))
        throw std::runtime_error("non-finite training loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(batch_index));
      nn::backward(loss);
      opt.step(model.parameters());
      model.zero_grad();
      loss_sum += loss_value * static_cast<double>(batch.size());
    }

    const ValMetrics vm = validate_model(model, val_samples, config.batch_size);
    EpochMetrics em;
    em.epoch = epoch;
    em.stage = frozen ? "freeze" : "finetune";
    em.train_loss = loss_sum / static_cast<double>(train_samples.size());
    em.val_loss = vm.loss;
    em.val_dice = vm.dice;
    result.log.push_back(em);
    csv << em.epoch << "," << em.stage << "," << fmt_double(em.train_loss) << ","
        << fmt_double(em.val_loss) << "," << fmt_double(em.val_dice) << "\n";
    csv.flush();
    if (on_epoch) on_epoch(em);

    ordered_json state;
    state["epoch"] = epoch;
    state["stage"] = em.stage;
    state["val_loss"] = em.val_loss;
    state["val_dice"] = em.val_dice;
    save_checkpoint(model, state, result.last_checkpoint);
    if (em.val_loss < best_val) {
      best_val = em.val_loss;
      best_epoch = epoch;
      state["best"] = true;
      save_checkpoint(model, state, result.best_checkpoint);
    }
  }

  result.best_epoch = best_epoch;
  result.best_val_loss = best_val;
  return result;
}

}  // namespace strokeseg
