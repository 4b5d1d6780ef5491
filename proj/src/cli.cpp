#include "strokeseg/cli.hpp"

#include "strokeseg/eval.hpp"
#include "strokeseg/nifti.hpp"
#include "strokeseg/phantom.hpp"
#include "strokeseg/preprocess.hpp"
#include "strokeseg/train.hpp"
#include "strokeseg/volume_io.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

namespace strokeseg {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

/// Missing or inconsistent arguments detected after parsing; exits 1 like a
/// parse error.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
std::vector<T> parse_csv(const std::string& text, std::size_t expected, const char* flag) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      if constexpr (std::is_same_v<T, int>)
        out.push_back(std::stoi(item));
      else
        out.push_back(static_cast<T>(std::stod(item)));
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": cannot parse '" + item + "'");
    }
  }
  if (out.size() != expected)
    throw UsageError(std::string(flag) + ": expected " + std::to_string(expected) +
                     " comma-separated values, got " + std::to_string(out.size()));
  return out;
}

/// All subcommand settings with their defaults; a JSON config file overlays
/// these, and command-line flags override both.
struct CliConfig {
  std::string dataset_root;
  std::string manifest;
  std::string samples_dir;
  std::string run_dir;
  std::string checkpoint;
  std::string out;
  std::string split = "test";
  std::vector<std::string> cases;
  int workers = 1;
  double threshold = 0.5;

  std::int64_t split_seed = 0;
  std::string ratios = "0.64,0.16,0.20";

  std::string variant = "dual_encoder";
  std::string widths = "32,64,128,256";
  ModelConfig model;
  TrainConfig train;
  PreprocessConfig preprocess;

  PhantomSpec phantom;
  std::string phantom_shape = "64,64,16";
  std::string lesion_count = "1,3";
  std::string lesion_radius = "2.5,6";
  std::string rotations = "0,90,180,270";
};

void overlay_config_file(CliConfig& cfg, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("config file " + path.string() + ": " + e.what());
  }

  cfg.dataset_root = j.value("dataset_root", cfg.dataset_root);
  cfg.manifest = j.value("manifest", cfg.manifest);
  cfg.samples_dir = j.value("samples_dir", cfg.samples_dir);
  cfg.run_dir = j.value("run_dir", cfg.run_dir);
  cfg.checkpoint = j.value("checkpoint", cfg.checkpoint);
  cfg.out = j.value("out", cfg.out);
  cfg.split = j.value("split", cfg.split);
  cfg.workers = j.value("workers", cfg.workers);
  cfg.threshold = j.value("threshold", cfg.threshold);

  if (j.contains("split_config")) {
    const auto& s = j.at("split_config");
    cfg.split_seed = s.value("seed", cfg.split_seed);
    if (s.contains("ratios")) {
      const auto r = s.at("ratios").get<std::vector<double>>();
      std::ostringstream os;
      for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
      cfg.ratios = os.str();
    }
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    cfg.variant = m.value("variant", cfg.variant);
    cfg.model.slices_per_modality = m.value("slices_per_modality", cfg.model.slices_per_modality);
    if (m.contains("encoder_widths")) {
      const auto w = m.at("encoder_widths").get<std::vector<int>>();
      std::ostringstream os;
      for (std::size_t i = 0; i < w.size(); ++i) os << (i ? "," : "") << w[i];
      cfg.widths = os.str();
    }
    cfg.model.transformer_layers = m.value("transformer_layers", cfg.model.transformer_layers);
    cfg.model.transformer_heads = m.value("transformer_heads", cfg.model.transformer_heads);
    cfg.model.transformer_dim = m.value("transformer_dim", cfg.model.transformer_dim);
    cfg.model.fusion_proj_width = m.value("fusion_proj_width", cfg.model.fusion_proj_width);
    cfg.model.input_hw = m.value("input_hw", cfg.model.input_hw);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.freeze_epochs = t.value("freeze_epochs", cfg.train.freeze_epochs);
    cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
    cfg.train.seed = t.value("seed", cfg.train.seed);
    cfg.train.augment_enabled = t.value("augment_enabled", cfg.train.augment_enabled);
    if (t.contains("augment")) {
      const auto& a = t.at("augment");
      cfg.train.augment.p_hflip = a.value("p_hflip", cfg.train.augment.p_hflip);
      cfg.train.augment.p_vflip = a.value("p_vflip", cfg.train.augment.p_vflip);
      if (a.contains("rotation_choices")) {
        const auto r = a.at("rotation_choices").get<std::vector<int>>();
        std::ostringstream os;
        for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
        cfg.rotations = os.str();
      }
    }
  }
  if (j.contains("preprocess")) {
    const auto& p = j.at("preprocess");
    cfg.preprocess.slices_per_modality =
        p.value("slices_per_modality", cfg.preprocess.slices_per_modality);
    cfg.preprocess.signal_threshold = p.value("signal_threshold", cfg.preprocess.signal_threshold);
    cfg.preprocess.out_hw = p.value("out_hw", cfg.preprocess.out_hw);
  }
  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    cfg.phantom.n_cases = p.value("n_cases", cfg.phantom.n_cases);
    if (p.contains("shape")) {
      const auto s = p.at("shape").get<std::vector<int>>();
      std::ostringstream os;
      for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
      cfg.phantom_shape = os.str();
    }
    if (p.contains("lesion_count_range")) {
      const auto r = p.at("lesion_count_range").get<std::vector<int>>();
      cfg.lesion_count = std::to_string(r.at(0)) + "," + std::to_string(r.at(1));
    }
    if (p.contains("lesion_radius_range")) {
      const auto r = p.at("lesion_radius_range").get<std::vector<double>>();
      std::ostringstream os;
      os << r.at(0) << "," << r.at(1);
      cfg.lesion_radius = os.str();
    }
    cfg.phantom.dwi_lesion_contrast = p.value("dwi_lesion_contrast", cfg.phantom.dwi_lesion_contrast);
    cfg.phantom.adc_lesion_contrast = p.value("adc_lesion_contrast", cfg.phantom.adc_lesion_contrast);
    cfg.phantom.noise_sigma = p.value("noise_sigma", cfg.phantom.noise_sigma);
    cfg.phantom.seed = p.value("seed", cfg.phantom.seed);
  }
}

std::string default_manifest(const CliConfig& cfg) {
  if (!cfg.manifest.empty()) return cfg.manifest;
  if (cfg.dataset_root.empty()) throw UsageError("--root is required");
  return (fs::path(cfg.dataset_root) / "split.json").string();
}

std::string resolve_run_dir(const CliConfig& cfg) {
  if (!cfg.run_dir.empty()) return cfg.run_dir;
  if (const char* env = std::getenv("STROKESEG_RUN_DIR"); env && *env) return env;
  const std::time_t now = std::time(nullptr);
  std::tm tm_buf{};
  gmtime_r(&now, &tm_buf);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm_buf);
  fs::path base = fs::path("runs") / stamp;
  fs::path candidate = base;
  for (int i = 1; fs::exists(candidate); ++i)
    candidate = base.string() + "-" + std::to_string(i);
  return candidate.string();
}

ModelConfig resolve_model_config(const CliConfig& cfg) {
  ModelConfig m = cfg.model;
  m.variant = variant_from_name(cfg.variant);
  const auto w = parse_csv<int>(cfg.widths, 4, "--widths");
  std::copy(w.begin(), w.end(), m.encoder_widths.begin());
  m.validate();
  return m;
}

TrainConfig resolve_train_config(const CliConfig& cfg) {
  TrainConfig t = cfg.train;
  std::stringstream ss(cfg.rotations);
  std::string item;
  t.augment.rotation_choices.clear();
  while (std::getline(ss, item, ','))
    t.augment.rotation_choices.push_back(std::stoi(item));
  t.validate();
  return t;
}

PhantomSpec resolve_phantom_spec(const CliConfig& cfg) {
  PhantomSpec spec = cfg.phantom;
  const auto shape = parse_csv<int>(cfg.phantom_shape, 3, "--shape");
  std::copy(shape.begin(), shape.end(), spec.shape.begin());
  const auto count = parse_csv<int>(cfg.lesion_count, 2, "--lesion-count");
  spec.lesion_count_range = {count[0], count[1]};
  const auto radius = parse_csv<float>(cfg.lesion_radius, 2, "--lesion-radius");
  spec.lesion_radius_range = {radius[0], radius[1]};
  spec.validate();
  return spec;
}

std::string model_label(const ModelConfig& cfg) {
  const std::string slices = cfg.slices_per_modality == 3 ? "Three Slices" : "Single Slice";
  if (cfg.variant == Variant::dual_encoder) return "Dual-Encoder TransUNet (" + slices + ")";
  return "TransUNet (Single Encoder, " + slices + ")";
}

void ensure_preprocessed(const CliConfig& cfg, const fs::path& samples_dir,
                         const SplitManifest& manifest, const std::vector<std::string>& splits) {
  for (const auto& split : splits) {
    if (fs::exists(samples_dir / (split + "_index.json"))) continue;
    std::cout << "preprocessing split '" << split << "' into " << samples_dir.string() << "\n";
    preprocess_split(cfg.dataset_root, manifest.ids_for(split), split, cfg.preprocess,
                     samples_dir, cfg.workers);
  }
}

int run_phantom(const CliConfig& cfg) {
  if (cfg.out.empty()) throw UsageError("--out is required");
  const PhantomSpec spec = resolve_phantom_spec(cfg);
  write_phantom_dataset(spec, cfg.out, cfg.workers);
  std::cout << "wrote " << spec.n_cases << " phantom cases to " << cfg.out << "\n";
  return 0;
}

int run_split(const CliConfig& cfg) {
  const auto ratio_values = parse_csv<double>(cfg.ratios, 3, "--ratios");
  const auto ids = discover_cases(cfg.dataset_root);
  const SplitManifest manifest =
      make_split(ids, cfg.split_seed, {ratio_values[0], ratio_values[1], ratio_values[2]});
  const fs::path out = cfg.out.empty() ? fs::path(default_manifest(cfg)) : fs::path(cfg.out);
  write_manifest(manifest, out);
  std::cout << "split " << ids.size() << " cases into " << manifest.train_ids.size() << "/"
            << manifest.val_ids.size() << "/" << manifest.test_ids.size()
            << " (train/val/test), manifest: " << out.string() << "\n";
  return 0;
}

int run_preprocess(const CliConfig& cfg) {
  if (cfg.out.empty()) throw UsageError("--out is required");
  const SplitManifest manifest = read_manifest(default_manifest(cfg));
  for (const std::string split : {"train", "val", "test"}) {
    preprocess_split(cfg.dataset_root, manifest.ids_for(split), split, cfg.preprocess, cfg.out,
                     cfg.workers);
    const auto files = read_sample_index(fs::path(cfg.out) / (split + "_index.json"));
    std::cout << split << ": " << files.size() << " samples\n";
  }
  return 0;
}

int run_train(const CliConfig& cfg) {
  const ModelConfig model_cfg = resolve_model_config(cfg);
  TrainConfig train_cfg = resolve_train_config(cfg);
  CliConfig effective = cfg;
  effective.preprocess.slices_per_modality = model_cfg.slices_per_modality;
  effective.preprocess.out_hw = model_cfg.input_hw;
  train_cfg.augment.out_hw = model_cfg.input_hw;

  const fs::path run_dir = resolve_run_dir(cfg);
  fs::create_directories(run_dir);
  const fs::path manifest_path = default_manifest(cfg);
  const SplitManifest manifest = read_manifest(manifest_path);

  const fs::path samples_dir =
      cfg.samples_dir.empty()
          ? fs::path(cfg.dataset_root) /
                ("preprocessed_s" + std::to_string(model_cfg.slices_per_modality))
          : fs::path(cfg.samples_dir);

  // resolved configuration is recorded before any work starts
  {
    ordered_json rc;
    rc["dataset_root"] = cfg.dataset_root;
    rc["manifest"] = manifest_path.string();
    rc["samples_dir"] = samples_dir.string();
    rc["run_dir"] = run_dir.string();
    rc["workers"] = cfg.workers;
    rc["model"] = model_cfg.to_json();
    rc["train"] = train_cfg.to_json();
    rc["preprocess"] = {{"slices_per_modality", effective.preprocess.slices_per_modality},
                        {"signal_threshold", effective.preprocess.signal_threshold},
                        {"out_hw", effective.preprocess.out_hw}};
    std::ofstream out(run_dir / "run_config.json", std::ios::binary);
    out << rc.dump(2) << "\n";
  }
  fs::copy_file(manifest_path, run_dir / "split.json", fs::copy_options::overwrite_existing);

  ensure_preprocessed(effective, samples_dir, manifest, {"train", "val"});
  const auto train_samples = load_split_samples(samples_dir, "train");
  const auto val_samples = load_split_samples(samples_dir, "val");
  std::cout << "training on " << train_samples.size() << " samples, validating on "
            << val_samples.size() << "\n";

  SegModel model = build_model(model_cfg, static_cast<std::uint64_t>(train_cfg.seed));
  const TrainResult result =
      train_loop(model, train_samples, val_samples, train_cfg, run_dir,
                 [](const EpochMetrics& em) {
                   std::printf("epoch %3d [%s] train %.4f val %.4f dice %.4f\n", em.epoch,
                               em.stage.c_str(), em.train_loss, em.val_loss, em.val_dice);
                   std::fflush(stdout);
                 });
  std::cout << "best epoch " << result.best_epoch << " (val loss " << result.best_val_loss
            << "), checkpoints in " << run_dir.string() << "\n";
  return 0;
}

SegModel load_checkpoint_or_fail(const CliConfig& cfg) {
  if (cfg.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(cfg.checkpoint))
    throw std::runtime_error("checkpoint not found: " + cfg.checkpoint);
  return load_checkpoint(cfg.checkpoint);
}

int run_evaluate(const CliConfig& cfg) {
  SegModel model = load_checkpoint_or_fail(cfg);
  const SplitManifest manifest = read_manifest(default_manifest(cfg));
  PreprocessConfig pp = cfg.preprocess;
  pp.slices_per_modality = model.config().slices_per_modality;
  pp.out_hw = model.config().input_hw;

  const EvalReport report =
      evaluate_split(model, manifest.ids_for(cfg.split), cfg.dataset_root, pp, cfg.threshold);
  const fs::path out = cfg.out.empty()
                           ? fs::path(cfg.checkpoint).parent_path() / "eval_report.json"
                           : fs::path(cfg.out);
  std::ofstream f(out, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write report " + out.string());
  f << report.to_json().dump(2) << "\n";
  std::cout << report.table(model_label(model.config()));
  std::cout << "report: " << out.string() << "\n";
  return 0;
}

int run_predict(const CliConfig& cfg) {
  SegModel model = load_checkpoint_or_fail(cfg);
  if (cfg.out.empty()) throw UsageError("--out is required");
  std::vector<std::string> ids = cfg.cases;
  if (ids.empty()) ids = read_manifest(default_manifest(cfg)).ids_for(cfg.split);
  if (cfg.dataset_root.empty()) throw UsageError("--root is required");
  PreprocessConfig pp = cfg.preprocess;
  pp.slices_per_modality = model.config().slices_per_modality;
  pp.out_hw = model.config().input_hw;

  fs::create_directories(cfg.out);
  for (const auto& id : ids) {
    const CaseVolume raw = load_case(cfg.dataset_root, id);
    const VolumeU8 pred = predict_case(model, raw, pp, cfg.threshold);
    const fs::path out = fs::path(cfg.out) / (id + "_pred.nii.gz");
    write_nifti_u8(out, pred);
    std::cout << id << " -> " << out.string() << "\n";
  }
  return 0;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv) {
  CliConfig cfg;
  std::string config_file;

  // config file first, so its values become the defaults flags override
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc)
      config_file = argv[i + 1];
    else if (arg.rfind("--config=", 0) == 0)
      config_file = arg.substr(9);
  }
  try {
    if (!config_file.empty()) overlay_config_file(cfg, config_file);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  CLI::App app{"Multimodal DWI/ADC stroke lesion segmentation pipeline"};
  app.require_subcommand(1);
  std::string config_sink;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_sink, "JSON config file (flags override it)");
    sub->add_option("--workers", cfg.workers, "max parallel worker threads");
  };
  auto add_model_flags = [&](CLI::App* sub) {
    sub->add_option("--variant", cfg.variant, "single_encoder|dual_encoder");
    sub->add_option("--slices", cfg.model.slices_per_modality, "slices per modality (1 or 3)");
    sub->add_option("--widths", cfg.widths, "encoder stage widths, e.g. 32,64,128,256");
    sub->add_option("--tf-layers", cfg.model.transformer_layers, "transformer depth");
    sub->add_option("--tf-heads", cfg.model.transformer_heads, "attention heads");
    sub->add_option("--tf-dim", cfg.model.transformer_dim, "transformer embedding dim");
    sub->add_option("--fusion-width", cfg.model.fusion_proj_width,
                    "bottleneck fusion projection width (dual)");
    sub->add_option("--input-hw", cfg.model.input_hw, "input resolution (multiple of 16)");
  };

  CLI::App* phantom = app.add_subcommand("phantom", "generate a synthetic dataset root");
  add_common(phantom);
  phantom->add_option("--out", cfg.out, "output dataset root")->required();
  phantom->add_option("--cases", cfg.phantom.n_cases, "number of cases");
  phantom->add_option("--shape", cfg.phantom_shape, "volume shape H,W,D");
  phantom->add_option("--lesion-count", cfg.lesion_count, "lesion count range min,max");
  phantom->add_option("--lesion-radius", cfg.lesion_radius, "lesion radius range min,max");
  phantom->add_option("--dwi-contrast", cfg.phantom.dwi_lesion_contrast, "DWI lesion contrast (>0)");
  phantom->add_option("--adc-contrast", cfg.phantom.adc_lesion_contrast, "ADC lesion contrast (<0)");
  phantom->add_option("--noise-sigma", cfg.phantom.noise_sigma, "Gaussian noise sigma");
  phantom->add_option("--seed", cfg.phantom.seed, "generator seed");

  CLI::App* split = app.add_subcommand("split", "create a train/val/test manifest");
  add_common(split);
  split->add_option("--root", cfg.dataset_root, "dataset root")->required();
  split->add_option("--seed", cfg.split_seed, "shuffle seed");
  split->add_option("--ratios", cfg.ratios, "train,val,test fractions");
  split->add_option("--out", cfg.out, "manifest path (default <root>/split.json)");

  CLI::App* preprocess = app.add_subcommand("preprocess", "normalize, crop and extract samples");
  add_common(preprocess);
  preprocess->add_option("--root", cfg.dataset_root, "dataset root")->required();
  preprocess->add_option("--manifest", cfg.manifest, "manifest path (default <root>/split.json)");
  preprocess->add_option("--out", cfg.out, "output samples directory")->required();
  preprocess->add_option("--slices", cfg.preprocess.slices_per_modality, "slices per modality");
  preprocess->add_option("--signal-threshold", cfg.preprocess.signal_threshold,
                         "min mean DWI intensity of the center slice");
  preprocess->add_option("--out-hw", cfg.preprocess.out_hw, "sample resolution");

  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common(train);
  train->add_option("--root", cfg.dataset_root, "dataset root")->required();
  train->add_option("--manifest", cfg.manifest, "manifest path (default <root>/split.json)");
  train->add_option("--samples", cfg.samples_dir,
                    "preprocessed samples dir (default <root>/preprocessed_s<S>)");
  train->add_option("--run-dir", cfg.run_dir,
                    "run directory (default $STROKESEG_RUN_DIR or runs/<timestamp>)");
  add_model_flags(train);
  train->add_option("--batch-size", cfg.train.batch_size, "batch size");
  train->add_option("--epochs", cfg.train.epochs, "total epochs");
  train->add_option("--freeze-epochs", cfg.train.freeze_epochs, "initial frozen-encoder epochs");
  train->add_option("--lr", cfg.train.learning_rate, "learning rate");
  train->add_option("--seed", cfg.train.seed, "training seed");
  bool no_augment = false;
  train->add_flag("--no-augment", no_augment, "disable augmentation");
  train->add_option("--p-hflip", cfg.train.augment.p_hflip, "horizontal flip probability");
  train->add_option("--p-vflip", cfg.train.augment.p_vflip, "vertical flip probability");
  train->add_option("--rotations", cfg.rotations, "rotation choices in degrees");
  train->add_option("--signal-threshold", cfg.preprocess.signal_threshold,
                    "preprocessing signal threshold");

  CLI::App* evaluate = app.add_subcommand("evaluate", "compute Dice on a split");
  add_common(evaluate);
  evaluate->add_option("--root", cfg.dataset_root, "dataset root");
  evaluate->add_option("--manifest", cfg.manifest, "manifest path (default <root>/split.json)");
  evaluate->add_option("--split", cfg.split, "split to evaluate (train|val|test)");
  evaluate->add_option("--checkpoint", cfg.checkpoint, "model checkpoint")->required();
  evaluate->add_option("--threshold", cfg.threshold, "sigmoid threshold");
  evaluate->add_option("--out", cfg.out, "report path (default <ckpt dir>/eval_report.json)");

  CLI::App* predict = app.add_subcommand("predict", "write per-case prediction masks");
  add_common(predict);
  predict->add_option("--root", cfg.dataset_root, "dataset root");
  predict->add_option("--checkpoint", cfg.checkpoint, "model checkpoint")->required();
  predict->add_option("--out", cfg.out, "output directory")->required();
  predict->add_option("--case", cfg.cases, "case ID (repeatable; default: whole split)");
  predict->add_option("--split", cfg.split, "split to predict when no --case given");
  predict->add_option("--manifest", cfg.manifest, "manifest path (default <root>/split.json)");
  predict->add_option("--threshold", cfg.threshold, "sigmoid threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  if (no_augment) cfg.train.augment_enabled = false;

  try {
    if (phantom->parsed()) return run_phantom(cfg);
    if (split->parsed()) return run_split(cfg);
    if (preprocess->parsed()) return run_preprocess(cfg);
    if (train->parsed()) return run_train(cfg);
    if (evaluate->parsed()) return run_evaluate(cfg);
    if (predict->parsed()) return run_predict(cfg);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace strokeseg
