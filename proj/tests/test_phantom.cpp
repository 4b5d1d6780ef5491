#include "strokeseg/phantom.hpp"

#include "strokeseg/preprocess.hpp"

#include "doctest.h"

using namespace strokeseg;

namespace {

PhantomSpec small_spec() {
  PhantomSpec spec;
  spec.n_cases = 4;
  spec.shape = {48, 48, 16};
  spec.lesion_count_range = {1, 2};
  spec.lesion_radius_range = {2.5f, 5.f};
  spec.noise_sigma = 0.02f;
  spec.seed = 11;
  return spec;
}

}  // namespace

TEST_CASE("generate_case is deterministic in (seed, index)") {
  const PhantomSpec spec = small_spec();
  const CaseVolume a = generate_case(spec, 1);
  const CaseVolume b = generate_case(spec, 1);
  CHECK(a.dwi.data == b.dwi.data);
  CHECK(a.adc.data == b.adc.data);
  CHECK(a.mask.data == b.mask.data);

  const CaseVolume c = generate_case(spec, 2);
  CHECK(a.dwi.data != c.dwi.data);
}

TEST_CASE("noise-free lesion mask equals brute-force ellipsoid membership") {
  PhantomSpec spec = small_spec();
  spec.noise_sigma = 0.f;
  spec.lesion_count_range = {1, 1};
  for (int index = 0; index < spec.n_cases; ++index) {
    std::vector<Ellipsoid> lesions;
    const CaseVolume cv = generate_case(spec, index, &lesions);
    REQUIRE(lesions.size() == 1);

    std::int64_t expected = 0;
    for (int r = 0; r < cv.mask.height; ++r)
      for (int c = 0; c < cv.mask.width; ++c)
        for (int d = 0; d < cv.mask.depth; ++d) {
          const bool inside = ellipsoid_contains(lesions[0], r, c, d);
          expected += inside;
          CHECK(cv.mask.at(r, c, d) == (inside ? 1 : 0));
        }
    std::int64_t actual = 0;
    for (auto m : cv.mask.data) actual += m;
    CHECK(actual == expected);
    CHECK(actual > 0);
  }
}

TEST_CASE("no-lesion spec yields empty mask but nonzero DWI support") {
  PhantomSpec spec = small_spec();
  spec.lesion_count_range = {0, 0};
  const CaseVolume cv = generate_case(spec, 0);
  for (auto m : cv.mask.data) CHECK(m == 0);
  bool any = false;
  for (float v : cv.dwi.data) any = any || v > 0.f;
  CHECK(any);
  CHECK_NOTHROW(nonzero_bbox(cv.dwi));
}

TEST_CASE("mask voxels lie strictly inside the DWI nonzero support") {
  const PhantomSpec spec = small_spec();
  for (int index = 0; index < spec.n_cases; ++index) {
    const CaseVolume cv = generate_case(spec, index);
    for (int r = 0; r < cv.mask.height; ++r)
      for (int c = 0; c < cv.mask.width; ++c)
        for (int d = 0; d < cv.mask.depth; ++d)
          if (cv.mask.at(r, c, d)) CHECK(cv.dwi.at(r, c, d) > 0.f);
  }
}

TEST_CASE("lesions are DWI-bright and ADC-dark") {
  const PhantomSpec spec = small_spec();  // sigma well below contrast/4
  for (int index = 0; index < spec.n_cases; ++index) {
    const CaseVolume cv = generate_case(spec, index);
    double in_dwi = 0, out_dwi = 0, in_adc = 0, out_adc = 0;
    std::int64_t n_in = 0, n_out = 0;
    for (int r = 0; r < cv.mask.height; ++r)
      for (int c = 0; c < cv.mask.width; ++c)
        for (int d = 0; d < cv.mask.depth; ++d) {
          if (cv.dwi.at(r, c, d) == 0.f && !cv.mask.at(r, c, d)) continue;  // outside support
          if (cv.mask.at(r, c, d)) {
            in_dwi += cv.dwi.at(r, c, d);
            in_adc += cv.adc.at(r, c, d);
            ++n_in;
          } else {
            out_dwi += cv.dwi.at(r, c, d);
            out_adc += cv.adc.at(r, c, d);
            ++n_out;
          }
        }
    REQUIRE(n_in > 0);
    REQUIRE(n_out > 0);
    CHECK(in_dwi / n_in > out_dwi / n_out);
    CHECK(in_adc / n_in < out_adc / n_out);
  }
}

TEST_CASE("phantom spec validation") {
  PhantomSpec spec = small_spec();
  spec.shape = {8, 8, 4};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = small_spec();
  spec.adc_lesion_contrast = 0.2f;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = small_spec();
  CHECK_THROWS_AS(generate_case(spec, spec.n_cases), std::invalid_argument);
}

TEST_CASE("write_phantom_dataset produces a loadable dataset root") {
  PhantomSpec spec = small_spec();
  spec.n_cases = 3;
  const auto tmp = std::filesystem::temp_directory_path() / "strokeseg_phantom_ds";
  std::filesystem::remove_all(tmp);
  write_phantom_dataset(spec, tmp);
  const auto ids = discover_cases(tmp);
  CHECK(ids == std::vector<std::string>{"c0000", "c0001", "c0002"});
  const CaseVolume cv = load_case(tmp, "c0001");
  const CaseVolume direct = generate_case(spec, 1);
  CHECK(cv.dwi.data == direct.dwi.data);
  CHECK(cv.mask.data == direct.mask.data);
  std::filesystem::remove_all(tmp);
}
