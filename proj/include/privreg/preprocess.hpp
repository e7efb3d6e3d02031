#pragma once

#include "privreg/volume.hpp"

namespace privreg {

// Min-max scaling to [0,1]. Throws degenerate-intensity on a constant volume.
Volume normalize(const Volume& v);

// Symmetric crop and/or zero-pad to target_shape; an odd surplus or deficit
// is taken on the high-index side.
Volume center_crop_or_pad(const Volume& v, const Shape3& target_shape);

// Trilinear resampling onto a grid with the requested spacing. Voxel
// centres keep the first voxel as the shared origin and the new grid covers
// the centre-to-centre extent of the input.
Volume resample_to_spacing(const Volume& v, const Spacing& target_spacing);

}  // namespace privreg
