#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace strokeseg {

/// 3D array of H rows x W cols x D axial slices. Slice-major storage:
/// each axial slice is a contiguous row-major H x W image.
template <typename T>
struct Volume3D {
  int height = 0;
  int width = 0;
  int depth = 0;
  std::vector<T> data;

  Volume3D() = default;
  Volume3D(int h, int w, int d)
      : height(h), width(w), depth(d),
        data(static_cast<std::size_t>(h) * w * d, T{}) {}

  std::int64_t numel() const { return static_cast<std::int64_t>(height) * width * depth; }

  T& at(int r, int c, int d) {
    return data[static_cast<std::size_t>(d) * height * width + static_cast<std::size_t>(r) * width + c];
  }
  T at(int r, int c, int d) const {
    return data[static_cast<std::size_t>(d) * height * width + static_cast<std::size_t>(r) * width + c];
  }

  const T* slice(int d) const { return data.data() + static_cast<std::size_t>(d) * height * width; }
  T* slice(int d) { return data.data() + static_cast<std::size_t>(d) * height * width; }

  bool same_shape(const Volume3D& o) const {
    return height == o.height && width == o.width && depth == o.depth;
  }
  std::string shape_str() const {
    return "(" + std::to_string(height) + "," + std::to_string(width) + "," +
           std::to_string(depth) + ")";
  }
};

using VolumeF = Volume3D<float>;
using VolumeU8 = Volume3D<std::uint8_t>;

template <typename T>
struct Image2D {
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Image2D() = default;
  Image2D(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, T{}) {}

  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * width + c]; }
  T at(int r, int c) const { return data[static_cast<std::size_t>(r) * width + c]; }
};

using ImageF = Image2D<float>;
using ImageU8 = Image2D<std::uint8_t>;

/// Bilinear resample with half-pixel-center coordinate mapping. Output
/// values stay within the input value range.
ImageF resize_bilinear(const ImageF& in, int out_h, int out_w);

/// Nearest-neighbor resample; preserves the input value set exactly.
ImageU8 resize_nearest(const ImageU8& in, int out_h, int out_w);

}  // namespace strokeseg
