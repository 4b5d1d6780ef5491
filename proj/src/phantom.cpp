#include "strokeseg/phantom.hpp"

#include "strokeseg/nifti.hpp"
#include "strokeseg/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace strokeseg {

namespace {

constexpr float kSupportScale = 0.42f;  // support semi-axis as fraction of extent
constexpr float kLesionMaxRho = 0.85f;  // lesions stay strictly inside the support
constexpr float kDwiBase = 0.55f;
constexpr float kAdcBase = 0.65f;

struct Support {
  std::array<float, 3> center;
  std::array<float, 3> axes;

  float rho2(float r, float c, float d) const {
    const float x = (r - center[0]) / axes[0];
    const float y = (c - center[1]) / axes[1];
    const float z = (d - center[2]) / axes[2];
    return x * x + y * y + z * z;
  }
};

Support make_support(const std::array<int, 3>& shape) {
  Support s;
  for (int i = 0; i < 3; ++i) {
    s.center[i] = (static_cast<float>(shape[i]) - 1.f) / 2.f;
    s.axes[i] = kSupportScale * static_cast<float>(shape[i]);
  }
  return s;
}

// True when every voxel of the lesion lies strictly inside the support and
// the volume bounds, so the mask equals the plain ellipsoid membership.
bool lesion_fits(const Ellipsoid& e, const Support& sup, const std::array<int, 3>& shape) {
  const int r0 = static_cast<int>(std::floor(e.center[0] - e.radii[0]));
  const int r1 = static_cast<int>(std::ceil(e.center[0] + e.radii[0]));
  const int c0 = static_cast<int>(std::floor(e.center[1] - e.radii[1]));
  const int c1 = static_cast<int>(std::ceil(e.center[1] + e.radii[1]));
  const int d0 = static_cast<int>(std::floor(e.center[2] - e.radii[2]));
  const int d1 = static_cast<int>(std::ceil(e.center[2] + e.radii[2]));
  if (r0 < 0 || c0 < 0 || d0 < 0 || r1 >= shape[0] || c1 >= shape[1] || d1 >= shape[2])
    return false;
  const float max_rho2 = kLesionMaxRho * kLesionMaxRho;
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c)
      for (int d = d0; d <= d1; ++d)
        if (ellipsoid_contains(e, r, c, d) &&
            sup.rho2(static_cast<float>(r), static_cast<float>(c), static_cast<float>(d)) >
                max_rho2)
          return false;
  return true;
}

}  // namespace

void PhantomSpec::validate() const {
  if (n_cases < 1) throw std::invalid_argument("phantom: n_cases must be >= 1");
  if (shape[0] < 16 || shape[1] < 16 || shape[2] < 8)
    throw std::invalid_argument("phantom: shape must be at least (16,16,8)");
  if (lesion_count_range[0] > lesion_count_range[1] || lesion_count_range[0] < 0)
    throw std::invalid_argument("phantom: invalid lesion count range");
  if (lesion_radius_range[0] > lesion_radius_range[1] || lesion_radius_range[0] <= 0)
    throw std::invalid_argument("phantom: invalid lesion radius range");
  if (dwi_lesion_contrast <= 0) throw std::invalid_argument("phantom: DWI contrast must be > 0");
  if (adc_lesion_contrast >= 0) throw std::invalid_argument("phantom: ADC contrast must be < 0");
  if (noise_sigma < 0) throw std::invalid_argument("phantom: noise sigma must be >= 0");
}

bool ellipsoid_contains(const Ellipsoid& e, int r, int c, int d) {
  const float x = (static_cast<float>(r) - e.center[0]) / e.radii[0];
  const float y = (static_cast<float>(c) - e.center[1]) / e.radii[1];
  const float z = (static_cast<float>(d) - e.center[2]) / e.radii[2];
  return x * x + y * y + z * z <= 1.f;
}

std::string phantom_case_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "c%04d", index);
  return buf;
}

CaseVolume generate_case(const PhantomSpec& spec, int index, std::vector<Ellipsoid>* lesions_out) {
  spec.validate();
  if (index < 0 || index >= spec.n_cases)
    throw std::invalid_argument("phantom: case index " + std::to_string(index) + " out of range");

  std::seed_seq seq{static_cast<unsigned>(spec.seed), static_cast<unsigned>(spec.seed >> 32),
                    static_cast<unsigned>(index), 0x7068746du};
  std::mt19937_64 rng(seq);

  const int H = spec.shape[0], W = spec.shape[1], D = spec.shape[2];
  const Support sup = make_support(spec.shape);

  CaseVolume cv;
  cv.case_id = phantom_case_id(index);
  cv.dwi = VolumeF(H, W, D);
  cv.adc = VolumeF(H, W, D);
  cv.mask = VolumeU8(H, W, D);

  for (int d = 0; d < D; ++d)
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const float rho2 = sup.rho2(static_cast<float>(r), static_cast<float>(c),
                                    static_cast<float>(d));
        if (rho2 >= 1.f) continue;
        const float profile = std::exp(-3.f * rho2 * rho2);
        cv.dwi.at(r, c, d) = kDwiBase * profile;
        cv.adc.at(r, c, d) = kAdcBase * profile;
      }

  std::uniform_int_distribution<int> count_dist(spec.lesion_count_range[0],
                                                spec.lesion_count_range[1]);
  const int n_lesions = count_dist(rng);
  std::uniform_real_distribution<float> radius_dist(spec.lesion_radius_range[0],
                                                    spec.lesion_radius_range[1]);
  std::uniform_real_distribution<float> unit(0.f, 1.f);

  std::vector<Ellipsoid> lesions;
  for (int l = 0; l < n_lesions; ++l) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      Ellipsoid e;
      for (int i = 0; i < 3; ++i) e.radii[i] = radius_dist(rng);
      // centers drawn from the inner half of the support
      for (int i = 0; i < 3; ++i)
        e.center[i] = sup.center[i] + (unit(rng) - 0.5f) * sup.axes[i];
      if (lesion_fits(e, sup, spec.shape)) {
        lesions.push_back(e);
        break;
      }
    }
  }

  for (const Ellipsoid& e : lesions) {
    const int r0 = static_cast<int>(std::floor(e.center[0] - e.radii[0]));
    const int r1 = static_cast<int>(std::ceil(e.center[0] + e.radii[0]));
    const int c0 = static_cast<int>(std::floor(e.center[1] - e.radii[1]));
    const int c1 = static_cast<int>(std::ceil(e.center[1] + e.radii[1]));
    const int d0 = static_cast<int>(std::floor(e.center[2] - e.radii[2]));
    const int d1 = static_cast<int>(std::ceil(e.center[2] + e.radii[2]));
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c)
        for (int d = d0; d <= d1; ++d)
          if (ellipsoid_contains(e, r, c, d)) {
            cv.mask.at(r, c, d) = 1;
            cv.dwi.at(r, c, d) += spec.dwi_lesion_contrast;
            cv.adc.at(r, c, d) += spec.adc_lesion_contrast;
          }
  }

  if (spec.noise_sigma > 0.f) {
    std::normal_distribution<float> noise(0.f, spec.noise_sigma);
    for (int d = 0; d < D; ++d)
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
          if (sup.rho2(static_cast<float>(r), static_cast<float>(c), static_cast<float>(d)) >= 1.f)
            continue;  // keep the outside exactly zero
          cv.dwi.at(r, c, d) += noise(rng);
          cv.adc.at(r, c, d) += noise(rng);
        }
  }
  for (auto* vol : {&cv.dwi, &cv.adc})
    for (float& v : vol->data) v = std::max(v, 0.f);

  if (lesions_out) *lesions_out = std::move(lesions);
  return cv;
}

void write_phantom_dataset(const PhantomSpec& spec, const std::filesystem::path& root,
                           int workers) {
  spec.validate();
  std::filesystem::create_directories(root);
  parallel_for(spec.n_cases, workers, [&](int i) {
    const CaseVolume cv = generate_case(spec, i);
    const std::filesystem::path dir = root / cv.case_id;
    std::filesystem::create_directories(dir);
    write_nifti(dir / (cv.case_id + "_dwi.nii.gz"), cv.dwi);
    write_nifti(dir / (cv.case_id + "_adc.nii.gz"), cv.adc);
    write_nifti_u8(dir / (cv.case_id + "_msk.nii.gz"), cv.mask);
  });
}

}  // namespace strokeseg
