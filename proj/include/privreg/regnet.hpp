#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "privreg/nn.hpp"
#include "privreg/volume.hpp"

namespace privreg {

struct ArchConfig {
  int levels = 3;          // resolution halvings
  int base_channels = 8;
  double max_disp = 10.0;  // saturation cap, voxels
  bool smooth_output = true;
  double smooth_sigma = 1.0;
  int output_level = 1;    // decoder stops here; the head is smoothed and upsampled back to full resolution
  bool normalized_output = true;  // head predicts in [-1,1] grid units, scaled by (n-1)/2 per axis

  void validate() const;
  nlohmann::json to_json() const;
  static ArchConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

// Each axis rounded up to a multiple of 2^levels.
Shape3 padded_grid(const Shape3& grid, int levels);

// U-Net style encoder-decoder over the (moving, fixed) channel pair. Inputs
// are zero padded symmetrically to padded_grid and the field is cropped back.
class RegNet {
 public:
  struct Context {
    nn::Tensor input;
    std::vector<nn::Tensor> enc;  // indexed by level
    std::vector<nn::Tensor> cat;  // decoder inputs, by level
    std::vector<nn::Tensor> dec;  // decoder outputs, by level
    Shape3 head_shape{0, 0, 0};
    std::vector<double> out;      // saturated field on the unpadded grid
  };

  RegNet(const ArchConfig& arch, const Shape3& grid, std::uint64_t seed);
  RegNet(const RegNet& other);
  RegNet& operator=(const RegNet& other);
  RegNet(RegNet&&) = default;
  RegNet& operator=(RegNet&&) = default;

  const ArchConfig& arch() const { return arch_; }
  const Shape3& grid() const { return grid_; }
  std::uint64_t init_seed() const { return seed_; }

  // M<-F field for the pair.
  DenseDisplacementField predict(const Volume& moving, const Volume& fixed) const;
  DenseDisplacementField forward(const Volume& moving, const Volume& fixed, Context& ctx) const;
  // Accumulates parameter gradients for an upstream gradient on the field.
  void backward(const Context& ctx, const DenseDisplacementField& grad);

  std::vector<nn::Param*> parameters();
  const std::vector<nn::Param>& params() const { return params_; }
  std::vector<nn::Param>& params_mut() { return params_; }
  void zero_grad();
  double grad_norm_sq() const;
  std::uint64_t checksum() const;

 private:
  void build();
  void wire();
  nn::Param& add_conv(const std::string& name, int cin, int cout, int stride, std::vector<nn::Conv3d>& into,
                      int ksize = 3);
  void smooth_head(nn::Tensor& t, bool adjoint) const;
  Vec3 output_unit() const;

  ArchConfig arch_;
  Shape3 grid_;
  Shape3 padded_;
  std::uint64_t seed_;
  std::vector<nn::Param> params_;
  std::vector<nn::Conv3d> enc_;  // enc_[l] for l >= first level; unused slots have cin == 0
  std::vector<nn::Conv3d> dec_;
  std::vector<nn::Conv3d> head_;
};

RegNet init_model(const ArchConfig& arch, const Shape3& grid, std::uint64_t seed);

struct CheckpointCounters {
  std::int64_t iteration = 0;
  std::int64_t adam_step = 0;
  std::string strategy;
  std::string role;  // theta, phi1, phi2
};

// One JSON header line followed by float32 values, Adam first and second
// moments for every named parameter.
void save_checkpoint(const std::filesystem::path& path, const RegNet& net, const CheckpointCounters& counters);
RegNet load_checkpoint(const std::filesystem::path& path, CheckpointCounters* counters = nullptr);

}  // namespace privreg
