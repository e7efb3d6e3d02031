#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "privreg/vol_io.hpp"
#include "privreg/volume.hpp"

namespace privreg {

struct NoiseSigmas {
  double t2w = 0.02;
  double b0 = 0.03;
  double high_b = 0.10;
};

struct PhantomConfig {
  Shape3 grid_shape{32, 32, 28};
  int n_structures = 5;  // body, bladder, rectum, peripheral gland, central gland
  int min_tumors = 1;
  int max_tumors = 3;
  NoiseSigmas noise;
  double distortion_amplitude = 2.0;  // shared by both DWI volumes
  double motion_amplitude = 4.0;      // DWI frame vs T2w frame
  double residual_amplitude = 0.8;    // b0 vs high-b
  double smoothness = 8.0;            // Gaussian filter width of the random fields, voxels
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const PhantomConfig& cfg);
PhantomConfig phantom_config_from_json(const nlohmann::json& j);

// Fixed frame = T2w. privileged(y) renders the anatomy at y + inv(P<-F)(y),
// moving likewise with M<-F = residual o distortion o motion; gt_ddf is the
// exact M<-F field. Values are rounded to storage precision.
StudyTrio make_phantom(const PhantomConfig& cfg);

struct DatasetManifest {
  std::uint64_t seed = 0;
  PhantomConfig phantom;
  std::map<std::string, std::vector<std::string>> splits;  // train / val / holdout
  std::map<std::string, std::uint64_t> study_seeds;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

// Writes <root>/<study_id>/... for every study plus <root>/manifest.json.
DatasetManifest make_dataset(const std::filesystem::path& root, int n_train, int n_val, int n_holdout,
                             const PhantomConfig& cfg, std::uint64_t seed);

DatasetManifest read_dataset_manifest(const std::filesystem::path& root);
std::vector<StudyTrio> load_split(const std::filesystem::path& root, const std::string& split,
                                  const LoadOptions& options = {});

}  // namespace privreg
