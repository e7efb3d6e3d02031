#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "privreg/similarity.hpp"
#include "privreg/volume.hpp"

namespace privreg {

// Intensity-weighted mean position in mm.
Vec3 landmark_centroid(const Volume& mask, const Spacing& spacing);
inline Vec3 landmark_centroid(const LandmarkMask& m) { return landmark_centroid(m.mask, m.mask.spacing()); }

struct PairTre {
  int pair_id = 0;
  LandmarkKind kind = LandmarkKind::Tumor;
  double tre_mm = 0.0;
  bool excluded = false;  // warped mask lost its mass
};

struct TreResult {
  std::vector<PairTre> pairs;
  std::optional<double> rms_mm;  // over non-excluded pairs
  int excluded = 0;
};

// Pairs are matched by pair_id. With mu set, each moving mask is warped
// before its centroid is taken.
TreResult tre(const std::vector<LandmarkMask>& fixed_masks, const std::vector<LandmarkMask>& moving_masks,
              const DenseDisplacementField* mu, const Spacing& spacing);

struct EvaluationRecord {
  std::string study_id;
  int pair_id = 0;
  LandmarkKind landmark_kind = LandmarkKind::Tumor;
  double tre_before_mm = 0.0;
  double tre_after_mm = 0.0;
  double mi_before = 0.0;
  double mi_after = 0.0;
  double jacobian_neg_fraction = 0.0;
  std::string method;

  void validate() const;
  friend bool operator==(const EvaluationRecord&, const EvaluationRecord&) = default;
};

inline constexpr const char* kRecordHeader =
    "study_id,pair_id,landmark_kind,tre_before_mm,tre_after_mm,mi_before,mi_after,jacobian_neg_fraction,method";

void write_records_csv(std::ostream& os, const std::vector<EvaluationRecord>& records);
void write_records_csv(const std::filesystem::path& path, const std::vector<EvaluationRecord>& records);
std::vector<EvaluationRecord> read_records_csv(const std::filesystem::path& path);

struct Summary {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
  double median = 0.0;
  double p90 = 0.0;

  nlohmann::json to_json() const;
};

// Linear interpolation between order statistics at rank q*(n-1).
double percentile(std::vector<double> values, double q);
Summary summarize(const std::vector<double>& values);

struct StudyTre {
  std::string study_id;
  double rms_before_mm = 0.0;
  double rms_after_mm = 0.0;
};

struct MethodEvaluation {
  std::string method;
  std::vector<EvaluationRecord> records;
  std::vector<StudyTre> studies;  // per-study RMS over pairs
  std::vector<std::string> excluded;  // "study_id:pair_id" of pairs that lost their mask
  std::vector<std::string> failures;  // "study_id: error-name: detail"
  Summary tre_before, tre_after, mi_before, mi_after;
  Summary study_rms_before, study_rms_after;

  nlohmann::json summary_json() const;
};

using FieldSource = std::function<DenseDisplacementField(const StudyTrio&)>;

// Failures are recorded per study and never abort the batch.
MethodEvaluation evaluate_method(const std::vector<StudyTrio>& studies, const FieldSource& source,
                                 const std::string& method, const MIConfig& mi = {});

enum class StratifyKey { InitialMisalignment, Improvement };
std::string_view stratify_key_name(StratifyKey k);
StratifyKey parse_stratify_key(std::string_view name);

struct Stratum {
  StratifyKey key = StratifyKey::InitialMisalignment;
  double fraction = 1.0;
  bool selective = false;  // set for the improvement key
  std::vector<EvaluationRecord> records;
  Summary tre_before, tre_after;

  nlohmann::json to_json() const;
};

// Top ceil(fraction * n) records by the key, largest first.
Stratum stratify(const std::vector<EvaluationRecord>& records, double fraction, StratifyKey key);

struct TTestResult {
  double t = 0.0;
  int df = 0;
  double p = 1.0;
  double mean_difference = 0.0;  // after - before
};

// Paired two-sided t-test on after - before.
TTestResult paired_ttest_full(const std::vector<double>& before, const std::vector<double>& after);
double paired_ttest(const std::vector<double>& before, const std::vector<double>& after);

struct JacobianStats {
  double neg_fraction = 0.0;
  double min_det = 1.0;
  double mean_det = 1.0;
};

// Over interior voxels (all voxels when an axis is shorter than 3).
JacobianStats jacobian_stats(const DenseDisplacementField& mu);

enum class Metric { TRE, MI };
Metric parse_metric(std::string_view name);

struct BlandAltmanRow {
  double x = 0.0;  // before
  double y = 0.0;  // after - before
  std::string kind;
  friend bool operator==(const BlandAltmanRow&, const BlandAltmanRow&) = default;
};

std::vector<BlandAltmanRow> bland_altman_rows(const std::vector<EvaluationRecord>& records, Metric metric);
void bland_altman_export(const std::filesystem::path& path, const std::vector<EvaluationRecord>& records,
                         Metric metric);
std::vector<BlandAltmanRow> read_bland_altman(const std::filesystem::path& path);

}  // namespace privreg
