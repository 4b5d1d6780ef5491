#include "strokeseg/volume_io.hpp"

#include "strokeseg/nifti.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace strokeseg {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

const char* kModalities[] = {"dwi", "adc", "msk"};

std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string modality_label(const std::string& modality) {
  if (modality == "msk") return "mask";
  std::string up = modality;
  for (char& c : up) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return up;
}

// Portable Fisher-Yates; std::shuffle is not pinned across standard
// library implementations.
void seeded_shuffle(std::vector<std::string>& v, std::int64_t seed) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace

const std::vector<std::string>& SplitManifest::ids_for(const std::string& split) const {
  if (split == "train") return train_ids;
  if (split == "val") return val_ids;
  if (split == "test") return test_ids;
  throw std::invalid_argument("unknown split '" + split + "' (expected train|val|test)");
}

fs::path case_file(const fs::path& dataset_root, const std::string& case_id,
                   const std::string& modality) {
  const fs::path dir = dataset_root / case_id;
  const fs::path gz = dir / (case_id + "_" + modality + ".nii.gz");
  if (fs::exists(gz)) return gz;
  const fs::path plain = dir / (case_id + "_" + modality + ".nii");
  if (fs::exists(plain)) return plain;
  throw std::runtime_error("case " + case_id + ": " + modality_label(modality) +
                           " file not found under " + dir.string());
}

std::vector<std::string> discover_cases(const fs::path& dataset_root) {
  if (!fs::is_directory(dataset_root))
    throw std::runtime_error("dataset root does not exist: " + dataset_root.string());
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dataset_root))
    if (entry.is_directory()) ids.push_back(entry.path().filename().string());
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw std::runtime_error("no cases discovered under " + dataset_root.string());
  for (const auto& id : ids)
    for (const char* mod : kModalities) case_file(dataset_root, id, mod);
  return ids;
}

CaseVolume load_case(const fs::path& dataset_root, const std::string& case_id) {
  const VolumeF dwi = read_nifti(case_file(dataset_root, case_id, "dwi")).data;
  const VolumeF adc = read_nifti(case_file(dataset_root, case_id, "adc")).data;
  const VolumeF msk = read_nifti(case_file(dataset_root, case_id, "msk")).data;

  if (!dwi.same_shape(adc) || !dwi.same_shape(msk))
    throw std::runtime_error("case " + case_id + ": shape mismatch, DWI " + dwi.shape_str() +
                             " vs ADC " + adc.shape_str() + " vs mask " + msk.shape_str());
  if (dwi.height < 3 || dwi.width < 3 || dwi.depth < 3)
    throw std::runtime_error("case " + case_id + ": volume " + dwi.shape_str() +
                             " too small, need at least 3 along each axis");
  for (const auto* v : {&dwi, &adc, &msk})
    for (float x : v->data)
      if (!std::isfinite(x))
        throw std::runtime_error("case " + case_id + ": non-finite voxel values");

  CaseVolume out;
  out.case_id = case_id;
  out.dwi = dwi;
  out.adc = adc;
  out.mask = VolumeU8(msk.height, msk.width, msk.depth);
  for (std::int64_t i = 0; i < msk.numel(); ++i)
    out.mask.data[static_cast<std::size_t>(i)] = msk.data[static_cast<std::size_t>(i)] > 0.5f;
  return out;
}

std::string dataset_fingerprint(std::vector<std::string> case_ids) {
  std::sort(case_ids.begin(), case_ids.end());
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& id : case_ids) h = fnv1a64(id + "\n", h);
  return hex64(h);
}

SplitManifest make_split(std::vector<std::string> case_ids, std::int64_t seed,
                         std::array<double, 3> ratios) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split ratios must sum to 1, got " + std::to_string(sum));
  for (double r : ratios)
    if (r < 0) throw std::invalid_argument("split ratios must be non-negative");
  const auto n = static_cast<std::int64_t>(case_ids.size());
  if (n < 3) throw std::invalid_argument("need at least 3 cases to split, got " + std::to_string(n));

  const auto n_train = std::lround(static_cast<double>(n) * ratios[0]);
  const auto n_val = std::lround(static_cast<double>(n) * ratios[1]);
  const auto n_test = n - n_train - n_val;
  if (n_train < 1 || n_val < 1 || n_test < 1)
    throw std::invalid_argument("split sizes (" + std::to_string(n_train) + "," +
                                std::to_string(n_val) + "," + std::to_string(n_test) +
                                ") leave a split empty");

  SplitManifest m;
  m.seed = seed;
  m.created_from = dataset_fingerprint(case_ids);
  std::sort(case_ids.begin(), case_ids.end());
  seeded_shuffle(case_ids, seed);
  m.train_ids.assign(case_ids.begin(), case_ids.begin() + n_train);
  m.val_ids.assign(case_ids.begin() + n_train, case_ids.begin() + n_train + n_val);
  m.test_ids.assign(case_ids.begin() + n_train + n_val, case_ids.end());
  return m;
}

void write_manifest(const SplitManifest& manifest, const fs::path& path) {
  ordered_json j;
  j["seed"] = manifest.seed;
  j["created_from"] = manifest.created_from;
  j["train_ids"] = manifest.train_ids;
  j["val_ids"] = manifest.val_ids;
  j["test_ids"] = manifest.test_ids;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("short write to " + path.string());
}

SplitManifest read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("manifest " + path.string() + ": " + e.what());
  }
  SplitManifest m;
  m.seed = j.at("seed").get<std::int64_t>();
  m.created_from = j.at("created_from").get<std::string>();
  m.train_ids = j.at("train_ids").get<std::vector<std::string>>();
  m.val_ids = j.at("val_ids").get<std::vector<std::string>>();
  m.test_ids = j.at("test_ids").get<std::vector<std::string>>();
  return m;
}

}  // namespace strokeseg
