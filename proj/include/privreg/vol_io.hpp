#pragma once

#include <filesystem>

#include "privreg/volume.hpp"

namespace privreg {

// .vol container: one UTF-8 JSON header line, then little-endian float32
// samples in C order. Scalar volumes have shape [D,H,W]; displacement
// fields have shape [D,H,W,3] and carry a "direction" entry.
void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);
// Header line only; the samples are not read.
Modality read_volume_modality(const std::filesystem::path& path);
void write_ddf(const std::filesystem::path& path, const DenseDisplacementField& f);
DenseDisplacementField read_ddf(const std::filesystem::path& path);

// Values are stored as float32; this rounds a volume to what a save/load
// cycle would return.
Volume round_to_storage(const Volume& v);
DenseDisplacementField round_to_storage(const DenseDisplacementField& f);

struct LoadOptions {
  bool landmarks = true;
  bool gt_ddf = true;
  bool privileged = true;  // false: privileged.vol is neither required nor read
};

// Layout: <dir>/{moving,fixed,privileged}.vol, optional gt_ddf.vol and
// landmarks/<pair_id>_<fixed|moving>_<kind>.vol.
void save_study(const std::filesystem::path& dir, const StudyTrio& trio);
StudyTrio load_study(const std::filesystem::path& dir, const LoadOptions& options = {});

}  // namespace privreg
