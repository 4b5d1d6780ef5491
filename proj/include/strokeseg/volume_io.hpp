#pragma once

#include "strokeseg/volume.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace strokeseg {

/// One subject's aligned DWI, ADC and lesion mask.
struct CaseVolume {
  std::string case_id;
  VolumeF dwi;
  VolumeF adc;
  VolumeU8 mask;  // values 0/1
};

/// Deterministic train/validation/test partition of the discovered cases.
struct SplitManifest {
  std::int64_t seed = 0;
  std::string created_from;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;

  bool operator==(const SplitManifest&) const = default;
  const std::vector<std::string>& ids_for(const std::string& split) const;
};

/// Case IDs under `dataset_root`, sorted lexicographically. Every
/// subdirectory is a case and must contain the three modality files.
std::vector<std::string> discover_cases(const std::filesystem::path& dataset_root);

CaseVolume load_case(const std::filesystem::path& dataset_root, const std::string& case_id);

/// Content fingerprint of a case-ID set (order-independent).
std::string dataset_fingerprint(std::vector<std::string> case_ids);

SplitManifest make_split(std::vector<std::string> case_ids, std::int64_t seed,
                         std::array<double, 3> ratios);

void write_manifest(const SplitManifest& manifest, const std::filesystem::path& path);
SplitManifest read_manifest(const std::filesystem::path& path);

/// Paths of the three modality files for a case (.nii.gz preferred over .nii).
std::filesystem::path case_file(const std::filesystem::path& dataset_root,
                                const std::string& case_id, const std::string& modality);

}  // namespace strokeseg
