#include "strokeseg/nifti.hpp"

#include <zlib.h>

#include <cstring>
#include <stdexcept>

namespace strokeseg {

namespace {

// NIfTI-1 header, 348 bytes. Only the fields this pipeline touches are
// named; the rest are kept as padding so offsets line up.
#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char unused0[36];
  std::int16_t dim[8];
  char unused1[14];
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  char unused2[28];
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern[6];
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

enum NiftiDatatype : std::int16_t {
  DT_UINT8 = 2,
  DT_INT16 = 4,
  DT_INT32 = 8,
  DT_FLOAT32 = 16,
  DT_FLOAT64 = 64,
};

std::vector<char> read_all(const std::filesystem::path& path) {
  // gzread handles both gzip and plain files, which covers .nii and .nii.gz.
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> buf;
  char chunk[1 << 16];
  int n;
  while ((n = gzread(f, chunk, sizeof(chunk))) > 0) buf.insert(buf.end(), chunk, chunk + n);
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw std::runtime_error("decompression failed for " + path.string());
  return buf;
}

template <typename T>
void convert_voxels(const char* src, std::int64_t n, float slope, float inter, float* dst) {
  for (std::int64_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, src + i * sizeof(T), sizeof(T));
    dst[i] = static_cast<float>(v) * slope + inter;
  }
}

Nifti1Header make_header(int h, int w, int d, std::int16_t datatype, std::int16_t bitpix,
                         std::array<float, 3> spacing) {
  Nifti1Header hdr{};
  hdr.sizeof_hdr = 348;
  hdr.dim[0] = 3;
  hdr.dim[1] = static_cast<std::int16_t>(h);
  hdr.dim[2] = static_cast<std::int16_t>(w);
  hdr.dim[3] = static_cast<std::int16_t>(d);
  for (int i = 4; i < 8; ++i) hdr.dim[i] = 1;
  hdr.datatype = datatype;
  hdr.bitpix = bitpix;
  hdr.pixdim[0] = 1.f;
  hdr.pixdim[1] = spacing[0];
  hdr.pixdim[2] = spacing[1];
  hdr.pixdim[3] = spacing[2];
  hdr.vox_offset = 352.f;
  hdr.scl_slope = 1.f;
  hdr.scl_inter = 0.f;
  hdr.sform_code = 1;
  hdr.srow_x[0] = spacing[0];
  hdr.srow_y[1] = spacing[1];
  hdr.srow_z[2] = spacing[2];
  std::memcpy(hdr.magic, "n+1", 4);
  return hdr;
}

void write_all(const std::filesystem::path& path, const Nifti1Header& hdr, const char* payload,
               std::size_t nbytes) {
  const char ext_flag[4] = {0, 0, 0, 0};
  const bool gz = path.extension() == ".gz";
  if (gz) {
    gzFile f = gzopen(path.string().c_str(), "wb");
    if (!f) throw std::runtime_error("cannot write " + path.string());
    bool ok = gzwrite(f, &hdr, sizeof(hdr)) == static_cast<int>(sizeof(hdr)) &&
              gzwrite(f, ext_flag, 4) == 4 &&
              gzwrite(f, payload, static_cast<unsigned>(nbytes)) == static_cast<int>(nbytes);
    ok = gzclose(f) == Z_OK && ok;
    if (!ok) throw std::runtime_error("short write to " + path.string());
  } else {
    FILE* f = std::fopen(path.string().c_str(), "wb");
    if (!f) throw std::runtime_error("cannot write " + path.string());
    bool ok = std::fwrite(&hdr, 1, sizeof(hdr), f) == sizeof(hdr) &&
              std::fwrite(ext_flag, 1, 4, f) == 4 && std::fwrite(payload, 1, nbytes, f) == nbytes;
    ok = std::fclose(f) == 0 && ok;
    if (!ok) throw std::runtime_error("short write to " + path.string());
  }
}

// The on-disk order is x-fastest; in memory each axial slice is a
// contiguous row-major image, so a per-slice transpose happens here.
template <typename T>
std::vector<char> to_disk_order(const Volume3D<T>& vol) {
  std::vector<char> out(static_cast<std::size_t>(vol.numel()) * sizeof(T));
  T* dst = reinterpret_cast<T*>(out.data());
  const int H = vol.height, W = vol.width, D = vol.depth;
  for (int d = 0; d < D; ++d)
    for (int c = 0; c < W; ++c)
      for (int r = 0; r < H; ++r)
        dst[r + static_cast<std::size_t>(H) * (c + static_cast<std::size_t>(W) * d)] =
            vol.at(r, c, d);
  return out;
}

}  // namespace

NiftiVolume read_nifti(const std::filesystem::path& path) {
  const std::vector<char> raw = read_all(path);
  if (raw.size() < sizeof(Nifti1Header))
    throw std::runtime_error(path.string() + ": file shorter than a NIfTI-1 header");
  Nifti1Header hdr;
  std::memcpy(&hdr, raw.data(), sizeof(hdr));
  if (hdr.sizeof_hdr != 348)
    throw std::runtime_error(path.string() + ": not a little-endian NIfTI-1 file");
  if (std::memcmp(hdr.magic, "n+1", 3) != 0)
    throw std::runtime_error(path.string() + ": only single-file NIfTI (magic n+1) is supported");

  const int ndim = hdr.dim[0];
  if (ndim < 3 || ndim > 7)
    throw std::runtime_error(path.string() + ": expected a 3D volume, dim[0]=" + std::to_string(ndim));
  for (int i = 4; i <= ndim; ++i)
    if (hdr.dim[i] > 1)
      throw std::runtime_error(path.string() + ": non-singleton dimension " + std::to_string(i));
  const int h = hdr.dim[1], w = hdr.dim[2], d = hdr.dim[3];
  if (h <= 0 || w <= 0 || d <= 0)
    throw std::runtime_error(path.string() + ": invalid dimensions");

  const std::int64_t n = static_cast<std::int64_t>(h) * w * d;
  const std::size_t offset = static_cast<std::size_t>(hdr.vox_offset);
  const float slope = hdr.scl_slope == 0.f ? 1.f : hdr.scl_slope;
  const float inter = hdr.scl_slope == 0.f ? 0.f : hdr.scl_inter;

  std::size_t elem = 0;
  switch (hdr.datatype) {
    case DT_UINT8: elem = 1; break;
    case DT_INT16: elem = 2; break;
    case DT_INT32: elem = 4; break;
    case DT_FLOAT32: elem = 4; break;
    case DT_FLOAT64: elem = 8; break;
    default:
      throw std::runtime_error(path.string() + ": unsupported NIfTI datatype " +
                               std::to_string(hdr.datatype));
  }
  if (raw.size() < offset + static_cast<std::size_t>(n) * elem)
    throw std::runtime_error(path.string() + ": truncated voxel data");

  std::vector<float> disk(static_cast<std::size_t>(n));
  const char* src = raw.data() + offset;
  switch (hdr.datatype) {
    case DT_UINT8: convert_voxels<std::uint8_t>(src, n, slope, inter, disk.data()); break;
    case DT_INT16: convert_voxels<std::int16_t>(src, n, slope, inter, disk.data()); break;
    case DT_INT32: convert_voxels<std::int32_t>(src, n, slope, inter, disk.data()); break;
    case DT_FLOAT32: convert_voxels<float>(src, n, slope, inter, disk.data()); break;
    case DT_FLOAT64: convert_voxels<double>(src, n, slope, inter, disk.data()); break;
  }

  NiftiVolume out;
  out.data = VolumeF(h, w, d);
  out.spacing = {hdr.pixdim[1], hdr.pixdim[2], hdr.pixdim[3]};
  for (int dd = 0; dd < d; ++dd)
    for (int c = 0; c < w; ++c)
      for (int r = 0; r < h; ++r)
        out.data.at(r, c, dd) =
            disk[r + static_cast<std::size_t>(h) * (c + static_cast<std::size_t>(w) * dd)];
  return out;
}

void write_nifti(const std::filesystem::path& path, const VolumeF& vol,
                 std::array<float, 3> spacing) {
  const Nifti1Header hdr = make_header(vol.height, vol.width, vol.depth, DT_FLOAT32, 32, spacing);
  const std::vector<char> payload = to_disk_order(vol);
  write_all(path, hdr, payload.data(), payload.size());
}

void write_nifti_u8(const std::filesystem::path& path, const VolumeU8& vol,
                    std::array<float, 3> spacing) {
  const Nifti1Header hdr = make_header(vol.height, vol.width, vol.depth, DT_UINT8, 8, spacing);
  const std::vector<char> payload = to_disk_order(vol);
  write_all(path, hdr, payload.data(), payload.size());
}

}  // namespace strokeseg
