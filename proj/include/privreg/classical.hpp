#pragma once

#include <string_view>
#include <vector>

#include <json.hpp>

#include "privreg/similarity.hpp"
#include "privreg/volume.hpp"

namespace privreg {

enum class SimilarityKind { MI, NMI };
std::string_view similarity_name(SimilarityKind s);
SimilarityKind parse_similarity(std::string_view name);

struct IterRegConfig {
  SimilarityKind similarity = SimilarityKind::MI;
  double reg_weight = 0.005;
  int levels = 3;
  int steps_per_level = 100;
  double step_size = 0.5;        // largest per-step update, voxels of the current level
  double smoothing_sigma = 8.0;  // Gaussian applied to each update, voxels of the current level
  MIConfig mi;

  void validate() const;
  nlohmann::json to_json() const;
  static IterRegConfig from_json(const nlohmann::json& j);
};

struct LevelTrace {
  Shape3 grid;
  double zero_objective = 0.0;  // identity field at this grid
  double start_objective = 0.0;
  double end_objective = 0.0;
  int accepted_steps = 0;
};

struct IterRegReport {
  std::vector<LevelTrace> levels;  // coarse to fine
  double mi_before = 0.0;
  double mi_after = 0.0;
};

// Coarse-to-fine gradient ascent on a dense field for similarity minus
// reg_weight * ddf_gradient_l2. Returns the M<-F field at full resolution.
DenseDisplacementField iterative_register(const Volume& moving, const Volume& fixed, const IterRegConfig& cfg = {},
                                          IterRegReport* report = nullptr);

// Objective value at one grid: similarity(fixed, warp(moving, u)) - w * reg(u).
double iterreg_objective(const Volume& moving, const Volume& fixed, const DenseDisplacementField& u,
                         const IterRegConfig& cfg);

}  // namespace privreg
