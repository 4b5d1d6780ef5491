#include "strokeseg/volume.hpp"

#include <algorithm>
#include <cmath>

namespace strokeseg {

ImageF resize_bilinear(const ImageF& in, int out_h, int out_w) {
  if (in.height <= 0 || in.width <= 0 || out_h <= 0 || out_w <= 0)
    throw std::invalid_argument("resize_bilinear: empty image");
  ImageF out(out_h, out_w);
  const float sy = static_cast<float>(in.height) / static_cast<float>(out_h);
  const float sx = static_cast<float>(in.width) / static_cast<float>(out_w);
  for (int r = 0; r < out_h; ++r) {
    float fy = (static_cast<float>(r) + 0.5f) * sy - 0.5f;
    fy = std::clamp(fy, 0.f, static_cast<float>(in.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, in.height - 1);
    const float wy = fy - static_cast<float>(y0);
    for (int c = 0; c < out_w; ++c) {
      float fx = (static_cast<float>(c) + 0.5f) * sx - 0.5f;
      fx = std::clamp(fx, 0.f, static_cast<float>(in.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, in.width - 1);
      const float wx = fx - static_cast<float>(x0);
      const float top = in.at(y0, x0) * (1.f - wx) + in.at(y0, x1) * wx;
      const float bot = in.at(y1, x0) * (1.f - wx) + in.at(y1, x1) * wx;
      out.at(r, c) = top * (1.f - wy) + bot * wy;
    }
  }
  return out;
}

ImageU8 resize_nearest(const ImageU8& in, int out_h, int out_w) {
  if (in.height <= 0 || in.width <= 0 || out_h <= 0 || out_w <= 0)
    throw std::invalid_argument("resize_nearest: empty image");
  ImageU8 out(out_h, out_w);
  const float sy = static_cast<float>(in.height) / static_cast<float>(out_h);
  const float sx = static_cast<float>(in.width) / static_cast<float>(out_w);
  for (int r = 0; r < out_h; ++r) {
    const int y = std::min(static_cast<int>((static_cast<float>(r) + 0.5f) * sy), in.height - 1);
    for (int c = 0; c < out_w; ++c) {
      const int x = std::min(static_cast<int>((static_cast<float>(c) + 0.5f) * sx), in.width - 1);
      out.at(r, c) = in.at(y, x);
    }
  }
  return out;
}

}  // namespace strokeseg
