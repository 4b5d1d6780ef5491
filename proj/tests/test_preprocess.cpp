#include "strokeseg/preprocess.hpp"

#include "strokeseg/phantom.hpp"

#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>

using namespace strokeseg;
namespace fs = std::filesystem;

namespace {

CaseVolume unit_case(int h, int w, int d) {
  CaseVolume cv;
  cv.case_id = "t";
  cv.dwi = VolumeF(h, w, d);
  cv.adc = VolumeF(h, w, d);
  cv.mask = VolumeU8(h, w, d);
  for (auto& v : cv.dwi.data) v = 0.5f;
  for (auto& v : cv.adc.data) v = 0.5f;
  return cv;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("minmax_normalize maps the range to [0,1]") {
  VolumeF v(2, 2, 2);
  v.data = {0, 50, 100, 150, 200, 25, 75, 125};
  const VolumeF n = minmax_normalize(v);
  CHECK(n.data[1] == 0.25f);
  CHECK(n.data[0] == 0.f);
  CHECK(n.data[4] == 1.f);

  VolumeF constant(2, 2, 2);
  for (auto& x : constant.data) x = 7.f;
  const VolumeF z = minmax_normalize(constant);
  for (float x : z.data) CHECK(x == 0.f);

  VolumeF unit(2, 2, 2);
  unit.data = {0.f, 1.f, 0.25f, 0.5f, 0.75f, 0.1f, 0.9f, 0.3f};
  CHECK(minmax_normalize(unit).data == unit.data);

  VolumeF bad(2, 2, 2);
  bad.data[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(minmax_normalize(bad), std::invalid_argument);
}

TEST_CASE("nonzero_bbox matches a brute-force scan") {
  VolumeF v(10, 10, 10);
  std::mt19937_64 rng(5);
  // nonzeros exactly within r in [2,5], c in [3,7], d in [1,4]
  for (int r = 2; r <= 5; ++r)
    for (int c = 3; c <= 7; ++c)
      for (int d = 1; d <= 4; ++d) v.at(r, c, d) = 0.5f;
  const BoundingBox3D box = nonzero_bbox(v);
  CHECK(box.lo == std::array<int, 3>{2, 3, 1});
  CHECK(box.hi == std::array<int, 3>{6, 8, 5});

  // randomized volumes vs. triple-loop oracle
  for (int trial = 0; trial < 20; ++trial) {
    VolumeF x(8, 7, 6);
    std::uniform_int_distribution<int> coin(0, 9);
    for (auto& val : x.data) val = coin(rng) == 0 ? 1.f : 0.f;
    bool any = false;
    std::array<int, 3> lo{8, 7, 6}, hi{0, 0, 0};
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 7; ++c)
        for (int d = 0; d < 6; ++d)
          if (std::abs(x.at(r, c, d)) > 0.f) {
            any = true;
            lo = {std::min(lo[0], r), std::min(lo[1], c), std::min(lo[2], d)};
            hi = {std::max(hi[0], r + 1), std::max(hi[1], c + 1), std::max(hi[2], d + 1)};
          }
    if (!any) {
      CHECK_THROWS_WITH_AS(nonzero_bbox(x), doctest::Contains("empty DWI signal"),
                           std::runtime_error);
    } else {
      const BoundingBox3D b = nonzero_bbox(x);
      CHECK(b.lo == lo);
      CHECK(b.hi == hi);
    }
  }
}

TEST_CASE("nonzero_bbox edge cases") {
  VolumeF v(4, 4, 4);
  v.at(0, 0, 0) = 2.f;
  const BoundingBox3D single = nonzero_bbox(v);
  CHECK(single.lo == std::array<int, 3>{0, 0, 0});
  CHECK(single.hi == std::array<int, 3>{1, 1, 1});

  VolumeF full(3, 3, 3);
  for (auto& x : full.data) x = -1.f;  // sign must not matter
  const BoundingBox3D fb = nonzero_bbox(full);
  CHECK(fb.lo == std::array<int, 3>{0, 0, 0});
  CHECK(fb.hi == std::array<int, 3>{3, 3, 3});

  VolumeF zeros(3, 3, 3);
  CHECK_THROWS_AS(nonzero_bbox(zeros), std::runtime_error);
}

TEST_CASE("crop_case applies one box to all modalities") {
  CaseVolume cv = unit_case(10, 10, 10);
  for (std::size_t i = 0; i < cv.dwi.data.size(); ++i) cv.dwi.data[i] = static_cast<float>(i);
  cv.mask.at(3, 4, 2) = 1;

  const BoundingBox3D full{{0, 0, 0}, {10, 10, 10}};
  const CaseVolume same = crop_case(cv, full);
  CHECK(same.dwi.data == cv.dwi.data);
  CHECK(same.mask.data == cv.mask.data);

  const BoundingBox3D box{{2, 3, 1}, {6, 8, 5}};
  const CaseVolume cropped = crop_case(cv, box);
  CHECK(cropped.dwi.height == 4);
  CHECK(cropped.dwi.width == 5);
  CHECK(cropped.dwi.depth == 4);
  CHECK(cropped.adc.same_shape(cropped.dwi));
  CHECK(cropped.mask.at(1, 1, 1) == 1);  // (3,4,2) - lo
  // index arithmetic vs direct lookup over the whole box
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 5; ++c)
      for (int d = 0; d < 4; ++d)
        CHECK(cropped.dwi.at(r, c, d) == cv.dwi.at(r + 2, c + 3, d + 1));

  CHECK_THROWS_AS(crop_case(cv, BoundingBox3D{{0, 0, 0}, {11, 10, 10}}), std::invalid_argument);
  CHECK_THROWS_AS(crop_case(cv, BoundingBox3D{{3, 0, 0}, {3, 10, 10}}), std::invalid_argument);
}

TEST_CASE("candidate_centers excludes first and last slice for S=3") {
  CHECK(candidate_centers(10, 3) == std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(candidate_centers(3, 3) == std::vector<int>{1});
  CHECK(candidate_centers(3, 1) == std::vector<int>{0, 1, 2});
  CHECK_THROWS_AS(candidate_centers(2, 3), std::invalid_argument);
}

TEST_CASE("extract_samples keeps D-2 bright slices at S=3 and filters dark centers") {
  PreprocessConfig cfg;
  cfg.signal_threshold = 0.f;
  cfg.out_hw = 32;

  CaseVolume cv = unit_case(16, 16, 10);
  auto samples = extract_samples(cv, cfg);
  REQUIRE(samples.size() == 8);
  for (int i = 0; i < 8; ++i) {
    CHECK(samples[static_cast<std::size_t>(i)].center_slice == i + 1);
    CHECK(samples[static_cast<std::size_t>(i)].slices == 3);
    CHECK(samples[static_cast<std::size_t>(i)].height == 32);
  }

  // zero out one interior center slice; threshold 0.01 drops exactly it
  cfg.signal_threshold = 0.01f;
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) cv.dwi.at(r, c, 4) = 0.f;
  samples = extract_samples(cv, cfg);
  CHECK(samples.size() == 7);
  for (const auto& s : samples) CHECK(s.center_slice != 4);

  // minimal depth
  CaseVolume tiny = unit_case(16, 16, 3);
  cfg.signal_threshold = 0.f;
  samples = extract_samples(tiny, cfg);
  REQUIRE(samples.size() == 1);
  CHECK(samples[0].center_slice == 1);

  CaseVolume too_thin = unit_case(16, 16, 2);
  CHECK_THROWS_AS(extract_samples(too_thin, cfg), std::invalid_argument);

  CaseVolume unnormalized = unit_case(16, 16, 4);
  unnormalized.dwi.at(0, 0, 0) = 2.f;
  CHECK_THROWS_AS(extract_samples(unnormalized, cfg), std::invalid_argument);
}

TEST_CASE("extract_samples S=1 keeps every bright slice") {
  PreprocessConfig cfg;
  cfg.slices_per_modality = 1;
  cfg.signal_threshold = 0.f;
  cfg.out_hw = 16;
  const CaseVolume cv = unit_case(8, 8, 5);
  const auto samples = extract_samples(cv, cfg);
  REQUIRE(samples.size() == 5);
  CHECK(samples[0].center_slice == 0);
  CHECK(samples[4].center_slice == 4);
  CHECK(samples[0].dwi_stack.size() == 16u * 16u);
}

TEST_CASE("marker voxel stays aligned across modalities and target") {
  // identity-resolution case: 32x32 slices, out_hw 32, so no resampling blur
  PreprocessConfig cfg;
  cfg.signal_threshold = 0.f;
  cfg.out_hw = 32;
  CaseVolume cv = unit_case(32, 32, 7);
  const int mr = 11, mc = 23, md = 4;
  cv.dwi.at(mr, mc, md) = 1.f;
  cv.adc.at(mr, mc, md) = 1.f;
  cv.mask.at(mr, mc, md) = 1;

  const auto samples = extract_samples(cv, cfg);
  for (const auto& rec : samples) {
    const int s = md - (rec.center_slice - 1);
    const bool in_window = s >= 0 && s < 3;
    if (!in_window) continue;
    CHECK(rec.dwi_at(mr, mc, s) == 1.f);
    CHECK(rec.adc_at(mr, mc, s) == 1.f);
    // only the center slice contributes the target
    const bool is_center = rec.center_slice == md;
    CHECK(rec.target.at(mr, mc) == (is_center ? 1 : 0));
  }
  // stacks never reference slices outside [center-1, center+1]: markers in
  // other slices must not appear
  for (const auto& rec : samples) {
    if (std::abs(rec.center_slice - md) > 1) {
      for (int s = 0; s < 3; ++s) CHECK(rec.dwi_at(mr, mc, s) == 0.5f);
    }
  }
}

TEST_CASE("emitted intensities stay in [0,1] and targets binary on phantoms") {
  PhantomSpec spec;
  spec.n_cases = 2;
  spec.shape = {48, 48, 12};
  spec.seed = 3;
  PreprocessConfig cfg;
  for (int index = 0; index < spec.n_cases; ++index) {
    CaseVolume cv = generate_case(spec, index);
    cv.dwi = minmax_normalize(cv.dwi);
    cv.adc = minmax_normalize(cv.adc);
    cv = crop_case(cv, nonzero_bbox(cv.dwi));
    for (const auto& rec : extract_samples(cv, cfg)) {
      for (float v : rec.dwi_stack) {
        CHECK(v >= 0.f);
        CHECK(v <= 1.f);
      }
      for (float v : rec.adc_stack) {
        CHECK(v >= 0.f);
        CHECK(v <= 1.f);
      }
      for (auto t : rec.target.data) CHECK((t == 0 || t == 1));
    }
  }
}

TEST_CASE("sample files round-trip bit-exactly") {
  PreprocessConfig cfg;
  cfg.out_hw = 32;
  cfg.signal_threshold = 0.f;
  CaseVolume cv = unit_case(20, 24, 5);
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<float> dist(0.f, 1.f);
  for (auto& v : cv.dwi.data) v = dist(rng);
  for (auto& v : cv.adc.data) v = dist(rng);
  for (auto& m : cv.mask.data) m = rng() % 4 == 0;

  const auto samples = extract_samples(cv, cfg);
  REQUIRE_FALSE(samples.empty());
  const auto tmp = fs::temp_directory_path() / "strokeseg_sample_rt";
  fs::create_directories(tmp);
  const SampleRecord& rec = samples.front();
  const fs::path p = tmp / "t_1.smp";
  write_sample(rec, p);
  const SampleRecord back = read_sample(p);
  CHECK(back.case_id == rec.case_id);
  CHECK(back.center_slice == rec.center_slice);
  CHECK(back.slices == rec.slices);
  CHECK(back.dwi_stack == rec.dwi_stack);
  CHECK(back.adc_stack == rec.adc_stack);
  CHECK(back.target.data == rec.target.data);

  // writing twice yields identical bytes
  const fs::path p2 = tmp / "t_1b.smp";
  write_sample(rec, p2);
  CHECK(slurp(p) == slurp(p2));

  // S=3 tensor shapes as stored in the header
  const std::string header = slurp(p);
  CHECK(header.find("\"dwi_stack\":[32,32,3]") != std::string::npos);
  CHECK(header.find("\"target\":[32,32]") != std::string::npos);
  fs::remove_all(tmp);
}

TEST_CASE("truncated and corrupted sample files are rejected with offsets") {
  PreprocessConfig cfg;
  cfg.out_hw = 16;
  cfg.signal_threshold = 0.f;
  const CaseVolume cv = unit_case(16, 16, 3);
  const auto samples = extract_samples(cv, cfg);
  const auto tmp = fs::temp_directory_path() / "strokeseg_sample_bad";
  fs::create_directories(tmp);
  const fs::path p = tmp / "ok.smp";
  write_sample(samples[0], p);

  std::string bytes = slurp(p);
  {
    std::ofstream out(tmp / "trunc.smp", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_WITH_AS(read_sample(tmp / "trunc.smp"), doctest::Contains("offset"),
                       std::runtime_error);
  {
    std::string corrupted = bytes;
    corrupted[0] = 'X';
    std::ofstream out(tmp / "magic.smp", std::ios::binary);
    out.write(corrupted.data(), static_cast<std::streamsize>(corrupted.size()));
  }
  CHECK_THROWS_WITH_AS(read_sample(tmp / "magic.smp"), doctest::Contains("bad magic"),
                       std::runtime_error);
  fs::remove_all(tmp);
}

TEST_CASE("preprocess_split is byte-deterministic and indexed") {
  PhantomSpec spec;
  spec.n_cases = 3;
  spec.shape = {40, 40, 10};
  spec.seed = 21;
  const auto root = fs::temp_directory_path() / "strokeseg_pp_root";
  fs::remove_all(root);
  write_phantom_dataset(spec, root);

  PreprocessConfig cfg;
  const std::vector<std::string> ids = {"c0000", "c0001", "c0002"};
  const auto out1 = fs::temp_directory_path() / "strokeseg_pp_out1";
  const auto out2 = fs::temp_directory_path() / "strokeseg_pp_out2";
  fs::remove_all(out1);
  fs::remove_all(out2);
  preprocess_split(root, ids, "train", cfg, out1);
  preprocess_split(root, ids, "train", cfg, out2);

  const auto files = read_sample_index(out1 / "train_index.json");
  REQUIRE_FALSE(files.empty());
  CHECK(read_sample_index(out2 / "train_index.json") == files);
  for (const auto& f : files) CHECK(slurp(out1 / f) == slurp(out2 / f));

  const auto samples = load_split_samples(out1, "train");
  CHECK(samples.size() == files.size());
  for (const auto& rec : samples) {
    CHECK(rec.height == 128);
    CHECK(rec.slices == 3);
  }
  fs::remove_all(root);
  fs::remove_all(out1);
  fs::remove_all(out2);
}
