#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "privreg/geometry.hpp"
#include "privreg/regnet.hpp"
#include "privreg/similarity.hpp"
#include "privreg/volume.hpp"

namespace privreg {

enum class Strategy { Direct, Mixed, Joint, Privileged };
std::string_view strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);

enum class DirectPair { MovingFixed, PrivilegedFixed };
std::string_view direct_pair_name(DirectPair p);
DirectPair parse_direct_pair(std::string_view name);

// Units in which the regularizer differentiates the field. Normalized maps
// each axis onto [-1, 1] (displacement scaled by 2/(n-1)).
enum class RegUnits { Voxel, Normalized };
std::string_view reg_units_name(RegUnits u);
RegUnits parse_reg_units(std::string_view name);
Vec3 reg_component_scale(RegUnits units, const Shape3& grid);

struct TrainConfig {
  Strategy strategy = Strategy::Privileged;
  double alpha = 0.5;
  double beta = 1000.0;
  int mc_samples = 5;
  bool mc_include_identity = true;
  double mc_affine_magnitude = 0.1;
  int batch_size = 4;
  double lr = 1e-4;
  std::int64_t iterations = 5000;
  double augment_magnitude = 0.1;  // 0 disables augmentation
  std::uint64_t seed = 0;
  DirectPair direct_pair = DirectPair::MovingFixed;
  bool joint_msd_on_ddf = false;  // joint consistency on fields instead of warped moving images
  RegUnits reg_units = RegUnits::Normalized;
  std::int64_t checkpoint_every = 1000;
  std::int64_t validate_every = 500;
  ArchConfig arch;
  MIConfig mi;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Raw (unweighted) components; total = -alpha*mi_terms + beta*regularizer + msd_consistency.
struct LossBreakdown {
  double total = 0.0;
  double mi_terms = 0.0;
  double regularizer = 0.0;
  double msd_consistency = 0.0;
};

struct LossRecord {
  std::int64_t iteration = 0;
  Strategy strategy = Strategy::Privileged;
  LossBreakdown loss;
  double grad_norm = 0.0;
  std::optional<double> val_mi;

  nlohmann::json to_json() const;
};

struct McSelection {
  Volume volume;
  AffineTransform affine;
  int index = 0;  // position in the candidate list
  double mi = 0.0;
  std::vector<double> candidate_mi;
};

// Candidate 0 is the identity when include_identity is set, followed by
// I random corner affines. Plugin MI to moving decides; ties keep the
// lowest index.
McSelection mc_select_privileged(const Volume& moving, const Volume& privileged, int samples, double magnitude,
                                 bool include_identity, std::uint64_t seed);
McSelection mc_select_from(const Volume& moving, const Volume& privileged,
                           const std::vector<AffineTransform>& candidates);

double direct_loss(const Volume& fixed, const Volume& source, const DenseDisplacementField& mu, double alpha,
                   double beta, const MIConfig& mi = {}, const Vec3& scale = {1.0, 1.0, 1.0});
double privileged_loss(const Volume& fixed, const Volume& privileged_tilde, const DenseDisplacementField& mu,
                       double alpha, double beta, const MIConfig& mi = {}, const Vec3& scale = {1.0, 1.0, 1.0});
LossBreakdown joint_loss(const StudyTrio& trio, const DenseDisplacementField& mu_mf,
                         const DenseDisplacementField& mu_mp, const DenseDisplacementField& mu_pf, double alpha,
                         double beta, const MIConfig& mi = {}, const Vec3& scale = {1.0, 1.0, 1.0},
                         bool msd_on_ddf = false);
LossBreakdown mixed_loss(const StudyTrio& trio, const DenseDisplacementField& mu_mf,
                         const DenseDisplacementField& mu_pf, double alpha, double beta, const MIConfig& mi = {},
                         const Vec3& scale = {1.0, 1.0, 1.0});

// Loss of one (fixed, source warped by mu) term with its field gradient.
struct TermGradient {
  double mi = 0.0;
  double reg = 0.0;
  DenseDisplacementField grad;
};
TermGradient pair_term_grad(const Volume& fixed, const Volume& source, const DenseDisplacementField& mu,
                            double alpha, double beta, const MIConfig& mi, const Vec3& scale);

struct JointGradient {
  LossBreakdown loss;
  DenseDisplacementField grad_mf, grad_mp, grad_pf;
};
JointGradient joint_loss_grad(const StudyTrio& trio, const DenseDisplacementField& mu_mf,
                              const DenseDisplacementField& mu_mp, const DenseDisplacementField& mu_pf, double alpha,
                              double beta, const MIConfig& mi, const Vec3& scale, bool msd_on_ddf);

// Triangle-inequality check with the RMS (scaled L2) image distance d.
// J = d(fixed, warp(moving, mu)) and J_surr = d(fixed, warp(x~P, mu)).
struct BiasBoundReport {
  double j = 0.0;
  double j_surrogate = 0.0;
  double gap = 0.0;    // j_surrogate - j
  double bound = 0.0;  // d(warp(x~P, mu), warp(moving, mu))
  bool holds = false;
  double d_before = 0.0;  // d(privileged, moving)
  double d_after = 0.0;   // d(x~P, moving)
  double bound_ratio = 0.0;  // bound / d_after, 0 when d_after is 0

  nlohmann::json to_json() const;
};
BiasBoundReport bias_bound_check(const StudyTrio& trio, const Volume& privileged_tilde,
                                 const DenseDisplacementField& mu);

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::ostream* loss_log = nullptr;
  std::function<void(const LossRecord&)> on_record;
  std::int64_t val_studies = 0;  // 0: whole validation split
};

struct TrainResult {
  RegNet theta;
  std::optional<RegNet> phi1;  // joint only: M->P
  std::optional<RegNet> phi2;  // joint only: P->F
  std::vector<LossRecord> records;
  std::vector<std::pair<std::int64_t, double>> val_mi;
};

TrainResult train(const std::vector<StudyTrio>& train_set, const std::vector<StudyTrio>& val_set,
                  const TrainConfig& cfg, const TrainOptions& options = {});

// Mean Parzen MI(fixed, warp(moving, predicted)) over a set.
double validation_mi(const RegNet& net, const std::vector<StudyTrio>& studies, const MIConfig& mi,
                     std::int64_t limit = 0);

}  // namespace privreg
