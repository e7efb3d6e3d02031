#include "privreg/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "privreg/error.hpp"
#include "privreg/geometry.hpp"

namespace privreg {

Volume normalize(const Volume& v) {
  const auto [lo, hi] = v.intensity_range();
  if (!(hi > lo)) fail(ErrorKind::DegenerateIntensity, "cannot normalize a constant volume");
  const double scale = 1.0 / (hi - lo);
  std::vector<double> out(v.size());
  for (std::size_t n = 0; n < out.size(); ++n) {
    out[n] = std::clamp((v[n] - lo) * scale, 0.0, 1.0);
  }
  // extremes land exactly on 0 and 1
  for (std::size_t n = 0; n < out.size(); ++n) {
    if (v[n] == lo) out[n] = 0.0;
    if (v[n] == hi) out[n] = 1.0;
  }
  return v.with_values(std::move(out));
}

Volume center_crop_or_pad(const Volume& v, const Shape3& target) {
  if (!target.positive()) fail(ErrorKind::InvalidArgument, "target shape must be positive");
  const Shape3& src = v.shape();
  // offset maps target index -> source index
  const int off_d = (src.d - target.d) >= 0 ? (src.d - target.d) / 2 : -((target.d - src.d) / 2);
  const int off_h = (src.h - target.h) >= 0 ? (src.h - target.h) / 2 : -((target.h - src.h) / 2);
  const int off_w = (src.w - target.w) >= 0 ? (src.w - target.w) / 2 : -((target.w - src.w) / 2);
  Volume out(target, v.spacing(), v.modality());
  for (int i = 0; i < target.d; ++i) {
    for (int j = 0; j < target.h; ++j) {
      for (int k = 0; k < target.w; ++k) {
        const int si = i + off_d, sj = j + off_h, sk = k + off_w;
        if (src.contains(si, sj, sk)) out.at(i, j, k) = v.at(si, sj, sk);
      }
    }
  }
  return out;
}

Volume resample_to_spacing(const Volume& v, const Spacing& target_spacing) {
  for (double s : target_spacing) {
    if (!(s > 0.0)) fail(ErrorKind::InvalidArgument, "target spacing must be positive");
  }
  const Shape3& src = v.shape();
  const Spacing& sp = v.spacing();
  std::array<int, 3> n{};
  std::array<double, 3> ratio{};
  for (int a = 0; a < 3; ++a) {
    ratio[a] = target_spacing[a] / sp[a];
    n[a] = static_cast<int>(std::floor((src[a] - 1) / ratio[a] + 1e-9)) + 1;
  }
  const Shape3 shape{n[0], n[1], n[2]};
  Volume out(shape, target_spacing, v.modality());
  for (int i = 0; i < shape.d; ++i) {
    for (int j = 0; j < shape.h; ++j) {
      for (int k = 0; k < shape.w; ++k) {
        out.at(i, j, k) = sample_trilinear(v, i * ratio[0], j * ratio[1], k * ratio[2]);
      }
    }
  }
  return out;
}

}  // namespace privreg
