#pragma once

#include "strokeseg/volume.hpp"

#include <array>
#include <filesystem>

namespace strokeseg {

struct NiftiVolume {
  VolumeF data;
  std::array<float, 3> spacing = {1.f, 1.f, 1.f};  // read but not acted upon
};

/// Reads a single-file NIfTI-1 volume (.nii or .nii.gz). Supports the common
/// scalar datatypes and applies scl_slope/scl_inter. 4D files are accepted
/// only when the trailing dimensions are 1.
NiftiVolume read_nifti(const std::filesystem::path& path);

/// Writes a float32 .nii / .nii.gz volume (gzip chosen by extension).
void write_nifti(const std::filesystem::path& path, const VolumeF& vol,
                 std::array<float, 3> spacing = {1.f, 1.f, 1.f});

/// Writes a uint8 volume, used for label masks.
void write_nifti_u8(const std::filesystem::path& path, const VolumeU8& vol,
                    std::array<float, 3> spacing = {1.f, 1.f, 1.f});

}  // namespace strokeseg
