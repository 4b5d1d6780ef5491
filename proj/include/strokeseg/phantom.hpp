#pragma once

#include "strokeseg/volume_io.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace strokeseg {

/// Synthetic paired DWI/ADC/mask volumes with ellipsoidal lesions. Lesions
/// are bright on DWI and dark on ADC, mirroring diffusion restriction.
struct PhantomSpec {
  int n_cases = 20;
  std::array<int, 3> shape = {64, 64, 16};  // H, W, D
  std::array<int, 2> lesion_count_range = {1, 3};
  std::array<float, 2> lesion_radius_range = {2.5f, 6.f};
  float dwi_lesion_contrast = 0.4f;   // > 0
  float adc_lesion_contrast = -0.4f;  // < 0
  float noise_sigma = 0.02f;
  std::int64_t seed = 0;

  void validate() const;
};

struct Ellipsoid {
  std::array<float, 3> center;  // (r, c, d) voxel coordinates
  std::array<float, 3> radii;
};

bool ellipsoid_contains(const Ellipsoid& e, int r, int c, int d);

/// Deterministic in (spec.seed, index). Optionally reports the sampled
/// lesion geometry for verification.
CaseVolume generate_case(const PhantomSpec& spec, int index,
                         std::vector<Ellipsoid>* lesions_out = nullptr);

std::string phantom_case_id(int index);

/// Writes `n_cases` cases in the dataset-root layout consumed by
/// discover_cases/load_case.
void write_phantom_dataset(const PhantomSpec& spec, const std::filesystem::path& root,
                           int workers = 1);

}  // namespace strokeseg
