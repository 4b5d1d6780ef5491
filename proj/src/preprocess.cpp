#include "strokeseg/preprocess.hpp"

#include "strokeseg/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace strokeseg {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr char kSampleMagic[8] = {'S', 'T', 'R', 'K', 'S', 'E', 'G', '1'};

ImageF slice_image(const VolumeF& vol, int d) {
  ImageF img(vol.height, vol.width);
  std::memcpy(img.data.data(), vol.slice(d),
              sizeof(float) * static_cast<std::size_t>(vol.height) * vol.width);
  return img;
}

ImageU8 slice_mask(const VolumeU8& vol, int d) {
  ImageU8 img(vol.height, vol.width);
  std::memcpy(img.data.data(), vol.slice(d),
              sizeof(std::uint8_t) * static_cast<std::size_t>(vol.height) * vol.width);
  return img;
}

[[noreturn]] void corrupt(const fs::path& path, std::size_t offset, const std::string& what) {
  throw std::runtime_error("sample file " + path.string() + ": " + what + " at offset " +
                           std::to_string(offset));
}

}  // namespace

void PreprocessConfig::validate() const {
  if (slices_per_modality != 1 && slices_per_modality != 3)
    throw std::invalid_argument("slices per modality must be 1 or 3, got " +
                                std::to_string(slices_per_modality));
  if (out_hw < 8) throw std::invalid_argument("output resolution too small");
}

VolumeF minmax_normalize(const VolumeF& volume) {
  float lo = std::numeric_limits<float>::infinity();
  float hi = -std::numeric_limits<float>::infinity();
  for (float v : volume.data) {
    if (!std::isfinite(v)) throw std::invalid_argument("minmax_normalize: non-finite input voxel");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  VolumeF out(volume.height, volume.width, volume.depth);
  if (hi == lo) return out;  // constant volume -> all zeros
  const float scale = 1.f / (hi - lo);
  for (std::size_t i = 0; i < volume.data.size(); ++i) out.data[i] = (volume.data[i] - lo) * scale;
  return out;
}

BoundingBox3D nonzero_bbox(const VolumeF& dwi) {
  BoundingBox3D box{{dwi.height, dwi.width, dwi.depth}, {0, 0, 0}};
  bool any = false;
  for (int d = 0; d < dwi.depth; ++d)
    for (int r = 0; r < dwi.height; ++r)
      for (int c = 0; c < dwi.width; ++c)
        if (std::abs(dwi.at(r, c, d)) > 0.f) {
          any = true;
          box.lo[0] = std::min(box.lo[0], r);
          box.lo[1] = std::min(box.lo[1], c);
          box.lo[2] = std::min(box.lo[2], d);
          box.hi[0] = std::max(box.hi[0], r + 1);
          box.hi[1] = std::max(box.hi[1], c + 1);
          box.hi[2] = std::max(box.hi[2], d + 1);
        }
  if (!any) throw std::runtime_error("empty DWI signal");
  return box;
}

CaseVolume crop_case(const CaseVolume& cv, const BoundingBox3D& box) {
  const std::array<int, 3> extent = {cv.dwi.height, cv.dwi.width, cv.dwi.depth};
  for (int i = 0; i < 3; ++i)
    if (box.lo[i] < 0 || box.hi[i] > extent[i] || box.lo[i] >= box.hi[i])
      throw std::invalid_argument("crop box out of range for volume " + cv.dwi.shape_str());

  const int h = box.hi[0] - box.lo[0];
  const int w = box.hi[1] - box.lo[1];
  const int d = box.hi[2] - box.lo[2];
  CaseVolume out;
  out.case_id = cv.case_id;
  out.dwi = VolumeF(h, w, d);
  out.adc = VolumeF(h, w, d);
  out.mask = VolumeU8(h, w, d);
  for (int dd = 0; dd < d; ++dd)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        out.dwi.at(r, c, dd) = cv.dwi.at(r + box.lo[0], c + box.lo[1], dd + box.lo[2]);
        out.adc.at(r, c, dd) = cv.adc.at(r + box.lo[0], c + box.lo[1], dd + box.lo[2]);
        out.mask.at(r, c, dd) = cv.mask.at(r + box.lo[0], c + box.lo[1], dd + box.lo[2]);
      }
  return out;
}

std::vector<int> candidate_centers(int depth, int slices_per_modality) {
  if (depth < slices_per_modality)
    throw std::invalid_argument("volume depth " + std::to_string(depth) +
                                " smaller than slices per modality " +
                                std::to_string(slices_per_modality));
  std::vector<int> centers;
  if (slices_per_modality == 3) {
    for (int d = 1; d + 1 < depth; ++d) centers.push_back(d);
  } else {
    for (int d = 0; d < depth; ++d) centers.push_back(d);
  }
  return centers;
}

std::vector<SampleRecord> extract_samples(const CaseVolume& cv, const PreprocessConfig& cfg) {
  cfg.validate();
  const int S = cfg.slices_per_modality;
  const int D = cv.dwi.depth;
  for (float v : cv.dwi.data)
    if (v < 0.f || v > 1.f)
      throw std::invalid_argument("extract_samples: DWI intensities not normalized to [0,1]");
  for (float v : cv.adc.data)
    if (v < 0.f || v > 1.f)
      throw std::invalid_argument("extract_samples: ADC intensities not normalized to [0,1]");

  const std::int64_t plane = static_cast<std::int64_t>(cv.dwi.height) * cv.dwi.width;
  std::vector<SampleRecord> samples;
  for (int center : candidate_centers(D, S)) {
    double mean = 0;
    const float* sl = cv.dwi.slice(center);
    for (std::int64_t i = 0; i < plane; ++i) mean += sl[i];
    mean /= static_cast<double>(plane);
    if (!(mean > cfg.signal_threshold)) continue;

    SampleRecord rec;
    rec.case_id = cv.case_id;
    rec.center_slice = center;
    rec.slices = S;
    rec.height = cfg.out_hw;
    rec.width = cfg.out_hw;
    rec.dwi_stack.assign(static_cast<std::size_t>(cfg.out_hw) * cfg.out_hw * S, 0.f);
    rec.adc_stack.assign(static_cast<std::size_t>(cfg.out_hw) * cfg.out_hw * S, 0.f);
    for (int s = 0; s < S; ++s) {
      const int d = center + s - S / 2;
      const ImageF dwi = resize_bilinear(slice_image(cv.dwi, d), cfg.out_hw, cfg.out_hw);
      const ImageF adc = resize_bilinear(slice_image(cv.adc, d), cfg.out_hw, cfg.out_hw);
      for (int r = 0; r < cfg.out_hw; ++r)
        for (int c = 0; c < cfg.out_hw; ++c) {
          rec.dwi_at(r, c, s) = std::clamp(dwi.at(r, c), 0.f, 1.f);
          rec.adc_at(r, c, s) = std::clamp(adc.at(r, c), 0.f, 1.f);
        }
    }
    rec.target = resize_nearest(slice_mask(cv.mask, center), cfg.out_hw, cfg.out_hw);
    samples.push_back(std::move(rec));
  }
  return samples;
}

void write_sample(const SampleRecord& record, const fs::path& path) {
  ordered_json hdr;
  hdr["case_id"] = record.case_id;
  hdr["center_slice"] = record.center_slice;
  hdr["S"] = record.slices;
  hdr["shapes"] = {
      {"dwi_stack", {record.height, record.width, record.slices}},
      {"adc_stack", {record.height, record.width, record.slices}},
      {"target", {record.height, record.width}},
  };
  hdr["dtype"] = "float32";
  hdr["order"] = "row-major";
  const std::string hdr_str = hdr.dump();
  const std::uint32_t hdr_len = static_cast<std::uint32_t>(hdr_str.size());

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write sample " + tmp.string());
    out.write(kSampleMagic, sizeof(kSampleMagic));
    out.write(reinterpret_cast<const char*>(&hdr_len), sizeof(hdr_len));
    out.write(hdr_str.data(), hdr_len);
    out.write(reinterpret_cast<const char*>(record.dwi_stack.data()),
              static_cast<std::streamsize>(record.dwi_stack.size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(record.adc_stack.data()),
              static_cast<std::streamsize>(record.adc_stack.size() * sizeof(float)));
    std::vector<float> tgt(record.target.data.size());
    for (std::size_t i = 0; i < tgt.size(); ++i) tgt[i] = record.target.data[i];
    out.write(reinterpret_cast<const char*>(tgt.data()),
              static_cast<std::streamsize>(tgt.size() * sizeof(float)));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

SampleRecord read_sample(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open sample " + path.string());

  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kSampleMagic, 8) != 0)
    corrupt(path, 0, "bad magic");
  std::uint32_t hdr_len = 0;
  if (!in.read(reinterpret_cast<char*>(&hdr_len), sizeof(hdr_len)))
    corrupt(path, 8, "truncated header length");
  std::string hdr_str(hdr_len, '\0');
  if (!in.read(hdr_str.data(), hdr_len)) corrupt(path, 12, "truncated header");

  ordered_json hdr;
  try {
    hdr = ordered_json::parse(hdr_str);
  } catch (const std::exception& e) {
    corrupt(path, 12, std::string("header parse error: ") + e.what());
  }
  if (hdr.at("dtype").get<std::string>() != "float32")
    corrupt(path, 12, "unsupported dtype " + hdr.at("dtype").get<std::string>());

  SampleRecord rec;
  rec.case_id = hdr.at("case_id").get<std::string>();
  rec.center_slice = hdr.at("center_slice").get<int>();
  rec.slices = hdr.at("S").get<int>();
  const auto dwi_shape = hdr.at("shapes").at("dwi_stack").get<std::vector<int>>();
  const auto adc_shape = hdr.at("shapes").at("adc_stack").get<std::vector<int>>();
  const auto tgt_shape = hdr.at("shapes").at("target").get<std::vector<int>>();
  if (dwi_shape.size() != 3 || adc_shape != dwi_shape || tgt_shape.size() != 2 ||
      tgt_shape[0] != dwi_shape[0] || tgt_shape[1] != dwi_shape[1] || dwi_shape[2] != rec.slices)
    corrupt(path, 12, "inconsistent shapes in header");
  rec.height = dwi_shape[0];
  rec.width = dwi_shape[1];

  const std::size_t stack_n = static_cast<std::size_t>(rec.height) * rec.width * rec.slices;
  const std::size_t tgt_n = static_cast<std::size_t>(rec.height) * rec.width;
  const std::size_t payload = 12 + hdr_len;
  rec.dwi_stack.resize(stack_n);
  rec.adc_stack.resize(stack_n);
  std::vector<float> tgt(tgt_n);
  if (!in.read(reinterpret_cast<char*>(rec.dwi_stack.data()),
               static_cast<std::streamsize>(stack_n * sizeof(float))))
    corrupt(path, payload, "truncated DWI stack");
  if (!in.read(reinterpret_cast<char*>(rec.adc_stack.data()),
               static_cast<std::streamsize>(stack_n * sizeof(float))))
    corrupt(path, payload + stack_n * sizeof(float), "truncated ADC stack");
  if (!in.read(reinterpret_cast<char*>(tgt.data()),
               static_cast<std::streamsize>(tgt_n * sizeof(float))))
    corrupt(path, payload + 2 * stack_n * sizeof(float), "truncated target");

  rec.target = ImageU8(rec.height, rec.width);
  for (std::size_t i = 0; i < tgt_n; ++i) {
    if (tgt[i] != 0.f && tgt[i] != 1.f)
      corrupt(path, payload + 2 * stack_n * sizeof(float), "non-binary target value");
    rec.target.data[i] = static_cast<std::uint8_t>(tgt[i]);
  }
  return rec;
}

void write_sample_index(const std::string& split, const std::vector<std::string>& files,
                        const fs::path& path) {
  ordered_json j;
  j["split"] = split;
  j["files"] = files;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write index " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<std::string> read_sample_index(const fs::path& path, std::string* split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open index " + path.string());
  ordered_json j;
  in >> j;
  if (split) *split = j.at("split").get<std::string>();
  return j.at("files").get<std::vector<std::string>>();
}

void preprocess_split(const fs::path& dataset_root, const std::vector<std::string>& case_ids,
                      const std::string& split, const PreprocessConfig& cfg,
                      const fs::path& out_dir, int workers) {
  cfg.validate();
  const fs::path split_dir = out_dir / split;
  fs::create_directories(split_dir);

  std::vector<std::vector<std::string>> per_case(case_ids.size());
  parallel_for(static_cast<int>(case_ids.size()), workers, [&](int i) {
    const CaseVolume raw = load_case(dataset_root, case_ids[static_cast<std::size_t>(i)]);
    CaseVolume cv = raw;
    cv.dwi = minmax_normalize(raw.dwi);
    cv.adc = minmax_normalize(raw.adc);
    const BoundingBox3D box = nonzero_bbox(cv.dwi);
    cv = crop_case(cv, box);
    for (const SampleRecord& rec : extract_samples(cv, cfg)) {
      const std::string name = rec.case_id + "_" + std::to_string(rec.center_slice) + ".smp";
      write_sample(rec, split_dir / name);
      per_case[static_cast<std::size_t>(i)].push_back(split + "/" + name);
    }
  });

  std::vector<std::string> files;
  for (const auto& v : per_case) files.insert(files.end(), v.begin(), v.end());
  write_sample_index(split, files, out_dir / (split + "_index.json"));
}

std::vector<SampleRecord> load_split_samples(const fs::path& out_dir, const std::string& split) {
  const std::vector<std::string> files = read_sample_index(out_dir / (split + "_index.json"));
  std::vector<SampleRecord> samples;
  samples.reserve(files.size());
  for (const auto& f : files) samples.push_back(read_sample(out_dir / f));
  return samples;
}

}  // namespace strokeseg
