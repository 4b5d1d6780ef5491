#pragma once

#include "strokeseg/volume_io.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace strokeseg {

/// Axis-aligned box, lo inclusive / hi exclusive, in (row, col, depth) order.
struct BoundingBox3D {
  std::array<int, 3> lo;
  std::array<int, 3> hi;

  bool operator==(const BoundingBox3D&) const = default;
};

/// One training sample: per-modality slice stacks plus the center-slice
/// mask. Stacks are H x W x S with the slice index innermost.
struct SampleRecord {
  std::string case_id;
  int center_slice = 0;
  int slices = 1;  // S
  int height = 0;
  int width = 0;
  std::vector<float> dwi_stack;
  std::vector<float> adc_stack;
  ImageU8 target;

  float& dwi_at(int r, int c, int s) {
    return dwi_stack[(static_cast<std::size_t>(r) * width + c) * slices + s];
  }
  float dwi_at(int r, int c, int s) const {
    return dwi_stack[(static_cast<std::size_t>(r) * width + c) * slices + s];
  }
  float& adc_at(int r, int c, int s) {
    return adc_stack[(static_cast<std::size_t>(r) * width + c) * slices + s];
  }
  float adc_at(int r, int c, int s) const {
    return adc_stack[(static_cast<std::size_t>(r) * width + c) * slices + s];
  }
};

struct PreprocessConfig {
  int slices_per_modality = 3;   // S, 1 or 3
  float signal_threshold = 0.01f;
  int out_hw = 128;

  void validate() const;
};

/// (v - min) / (max - min); a constant volume maps to all zeros.
VolumeF minmax_normalize(const VolumeF& volume);

/// Tightest box containing every voxel with |v| > 0.
BoundingBox3D nonzero_bbox(const VolumeF& dwi);

CaseVolume crop_case(const CaseVolume& cv, const BoundingBox3D& box);

/// Center-slice candidates: interior slices for S=3, all slices for S=1.
std::vector<int> candidate_centers(int depth, int slices_per_modality);

/// Slice-stack extraction from a normalized, cropped case. A candidate is
/// kept iff the mean DWI intensity of its center slice exceeds the
/// threshold; stacks are resized to out_hw (bilinear) and the target mask
/// with nearest-neighbor.
std::vector<SampleRecord> extract_samples(const CaseVolume& cv, const PreprocessConfig& cfg);

void write_sample(const SampleRecord& record, const std::filesystem::path& path);
SampleRecord read_sample(const std::filesystem::path& path);

/// Index of sample files belonging to one split.
void write_sample_index(const std::string& split, const std::vector<std::string>& files,
                        const std::filesystem::path& path);
std::vector<std::string> read_sample_index(const std::filesystem::path& path,
                                           std::string* split = nullptr);

/// Full per-split preprocessing of a dataset root into `out_dir`:
/// normalize, crop to the DWI bounding box, extract samples, write one
/// .smp file per sample plus a `<split>_index.json`.
void preprocess_split(const std::filesystem::path& dataset_root,
                      const std::vector<std::string>& case_ids, const std::string& split,
                      const PreprocessConfig& cfg, const std::filesystem::path& out_dir,
                      int workers = 1);

std::vector<SampleRecord> load_split_samples(const std::filesystem::path& out_dir,
                                             const std::string& split);

}  // namespace strokeseg
