#include "privreg/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "privreg/error.hpp"
#include "privreg/geometry.hpp"

namespace privreg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kEmptyMass = 1e-6;

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) fail(ErrorKind::Io, "bad number '" + s + "' in " + what);
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) fail(ErrorKind::Io, "cannot write " + path.string());
  return os;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot read " + path.string());
  return is;
}

double mass(const Volume& m) {
  double s = 0.0;
  for (double v : m.values()) s += v;
  return s;
}

}  // namespace

Vec3 landmark_centroid(const Volume& mask, const Spacing& spacing) {
  const Shape3& s = mask.shape();
  double total = 0.0;
  Vec3 c{0.0, 0.0, 0.0};
  std::size_t n = 0;
  for (int i = 0; i < s.d; ++i) {
    for (int j = 0; j < s.h; ++j) {
      for (int k = 0; k < s.w; ++k, ++n) {
        const double w = mask[n];
        total += w;
        c[0] += w * i;
        c[1] += w * j;
        c[2] += w * k;
      }
    }
  }
  if (!(total > kEmptyMass)) fail(ErrorKind::EmptyLandmark, "landmark mask has no mass");
  for (int a = 0; a < 3; ++a) c[a] = c[a] / total * spacing[a];
  return c;
}

TreResult tre(const std::vector<LandmarkMask>& fixed_masks, const std::vector<LandmarkMask>& moving_masks,
              const DenseDisplacementField* mu, const Spacing& spacing) {
  if (fixed_masks.size() != moving_masks.size())
    fail(ErrorKind::InvalidArgument, "landmark lists differ in length");
  TreResult out;
  double acc = 0.0;
  int used = 0;
  for (const LandmarkMask& f : fixed_masks) {
    auto it = std::find_if(moving_masks.begin(), moving_masks.end(),
                           [&](const LandmarkMask& m) { return m.pair_id == f.pair_id; });
    if (it == moving_masks.end())
      fail(ErrorKind::InvalidArgument, "landmark pair " + std::to_string(f.pair_id) + " has no moving mask");
    PairTre p{f.pair_id, f.kind, 0.0, false};
    const Vec3 a = landmark_centroid(f.mask, spacing);
    Volume moved = mu ? warp(it->mask, *mu) : it->mask;
    if (!(mass(moved) > kEmptyMass)) {
      p.excluded = true;
      ++out.excluded;
    } else {
      const Vec3 b = landmark_centroid(moved, spacing);
      double d2 = 0.0;
      for (int c = 0; c < 3; ++c) d2 += (a[c] - b[c]) * (a[c] - b[c]);
      p.tre_mm = std::sqrt(d2);
      acc += d2;
      ++used;
    }
    out.pairs.push_back(p);
  }
  if (used > 0) out.rms_mm = std::sqrt(acc / used);
  return out;
}

void EvaluationRecord::validate() const {
  if (!(tre_before_mm >= 0.0) || !(tre_after_mm >= 0.0)) fail(ErrorKind::InvalidArgument, "TRE must be >= 0");
  if (!std::isfinite(mi_before) || !std::isfinite(mi_after)) fail(ErrorKind::InvalidArgument, "MI must be finite");
  if (!(jacobian_neg_fraction >= 0.0 && jacobian_neg_fraction <= 1.0))
    fail(ErrorKind::InvalidArgument, "jacobian_neg_fraction must lie in [0,1]");
}

void write_records_csv(std::ostream& os, const std::vector<EvaluationRecord>& records) {
  os << kRecordHeader << '\n';
  for (const auto& r : records) {
    if (r.study_id.find(',') != std::string::npos || r.method.find(',') != std::string::npos)
      fail(ErrorKind::InvalidArgument, "study ids and method tags may not contain commas");
    os << r.study_id << ',' << r.pair_id << ',' << landmark_kind_name(r.landmark_kind) << ',' << fmt(r.tre_before_mm)
       << ',' << fmt(r.tre_after_mm) << ',' << fmt(r.mi_before) << ',' << fmt(r.mi_after) << ','
       << fmt(r.jacobian_neg_fraction) << ',' << r.method << '\n';
  }
}

void write_records_csv(const fs::path& path, const std::vector<EvaluationRecord>& records) {
  auto os = open_out(path);
  write_records_csv(os, records);
}

std::vector<EvaluationRecord> read_records_csv(const fs::path& path) {
  auto is = open_in(path);
  std::string line;
  if (!std::getline(is, line) || line != kRecordHeader) fail(ErrorKind::Io, "unexpected header in " + path.string());
  std::vector<EvaluationRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 9) fail(ErrorKind::Io, "expected 9 columns in " + path.string());
    EvaluationRecord r;
    r.study_id = c[0];
    r.pair_id = int(parse_double(c[1], path.string()));
    r.landmark_kind = parse_landmark_kind(c[2]);
    r.tre_before_mm = parse_double(c[3], path.string());
    r.tre_after_mm = parse_double(c[4], path.string());
    r.mi_before = parse_double(c[5], path.string());
    r.mi_after = parse_double(c[6], path.string());
    r.jacobian_neg_fraction = parse_double(c[7], path.string());
    r.method = c[8];
    out.push_back(std::move(r));
  }
  return out;
}

json Summary::to_json() const { return {{"n", n}, {"mean", mean}, {"std", std}, {"median", median}, {"p90", p90}}; }

double percentile(std::vector<double> values, double q) {
  if (values.empty()) fail(ErrorKind::InvalidArgument, "percentile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) fail(ErrorKind::InvalidArgument, "percentile rank must lie in [0,1]");
  std::sort(values.begin(), values.end());
  const double pos = q * double(values.size() - 1);
  const std::size_t lo = std::size_t(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - double(lo)) * (values[hi] - values[lo]);
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / double(s.n - 1));
  }
  s.median = percentile(values, 0.5);
  s.p90 = percentile(values, 0.9);
  return s;
}

json MethodEvaluation::summary_json() const {
  return {{"method", method},
          {"records", records.size()},
          {"tre_before_mm", tre_before.to_json()},
          {"tre_after_mm", tre_after.to_json()},
          {"mi_before", mi_before.to_json()},
          {"mi_after", mi_after.to_json()},
          {"study_rms_tre_before_mm", study_rms_before.to_json()},
          {"study_rms_tre_after_mm", study_rms_after.to_json()},
          {"excluded_pairs", excluded},
          {"failures", failures}};
}

MethodEvaluation evaluate_method(const std::vector<StudyTrio>& studies, const FieldSource& source,
                                 const std::string& method, const MIConfig& mi) {
  MethodEvaluation ev;
  ev.method = method;
  for (const StudyTrio& s : studies) {
    try {
      if (s.landmarks_fixed.empty()) fail(ErrorKind::EmptyLandmark, "study has no landmark pairs");
      const DenseDisplacementField mu = source(s);
      require_same_shape(mu.shape(), s.fixed.shape(), "field vs fixed");
      const Spacing& sp = s.fixed.spacing();
      const TreResult before = tre(s.landmarks_fixed, s.landmarks_moving, nullptr, sp);
      const TreResult after = tre(s.landmarks_fixed, s.landmarks_moving, &mu, sp);
      // reported with the hard-binned estimator, independent of the training loss
      const double mi0 = plugin_mutual_information(s.fixed, s.moving, mi.bins);
      const double mi1 = plugin_mutual_information(s.fixed, warp(s.moving, mu), mi.bins);
      const double neg = jacobian_stats(mu).neg_fraction;
      double sb = 0.0, sa = 0.0;
      int used = 0;
      for (std::size_t p = 0; p < after.pairs.size(); ++p) {
        const PairTre& b = before.pairs[p];
        const PairTre& a = after.pairs[p];
        if (a.excluded || b.excluded) {
          ev.excluded.push_back(s.study_id + ":" + std::to_string(a.pair_id));
          continue;
        }
        EvaluationRecord r{s.study_id, a.pair_id, a.kind, b.tre_mm, a.tre_mm, mi0, mi1, neg, method};
        r.validate();
        ev.records.push_back(std::move(r));
        sb += b.tre_mm * b.tre_mm;
        sa += a.tre_mm * a.tre_mm;
        ++used;
      }
      if (used > 0) ev.studies.push_back({s.study_id, std::sqrt(sb / used), std::sqrt(sa / used)});
    } catch (const Error& e) {
      ev.failures.push_back(s.study_id + ": " + std::string(e.name()) + ": " + e.what());
    }
  }
  auto column = [&](auto get) {
    std::vector<double> v;
    for (const auto& r : ev.records) v.push_back(get(r));
    return v;
  };
  ev.tre_before = summarize(column([](const EvaluationRecord& r) { return r.tre_before_mm; }));
  ev.tre_after = summarize(column([](const EvaluationRecord& r) { return r.tre_after_mm; }));
  // MI is a per-study quantity; summarize it once per study
  std::vector<double> m0, m1, r0, r1;
  std::string last;
  for (const auto& r : ev.records) {
    if (r.study_id == last) continue;
    last = r.study_id;
    m0.push_back(r.mi_before);
    m1.push_back(r.mi_after);
  }
  for (const auto& s : ev.studies) {
    r0.push_back(s.rms_before_mm);
    r1.push_back(s.rms_after_mm);
  }
  ev.mi_before = summarize(m0);
  ev.mi_after = summarize(m1);
  ev.study_rms_before = summarize(r0);
  ev.study_rms_after = summarize(r1);
  return ev;
}

std::string_view stratify_key_name(StratifyKey k) {
  return k == StratifyKey::InitialMisalignment ? "initial_misalignment" : "improvement";
}

StratifyKey parse_stratify_key(std::string_view name) {
  if (name == "initial_misalignment") return StratifyKey::InitialMisalignment;
  if (name == "improvement") return StratifyKey::Improvement;
  fail(ErrorKind::InvalidArgument, "unknown stratification key '" + std::string(name) + "'");
}

json Stratum::to_json() const {
  return {{"key", std::string(stratify_key_name(key))},
          {"fraction", fraction},
          {"selective", selective},
          {"n", records.size()},
          {"tre_before_mm", tre_before.to_json()},
          {"tre_after_mm", tre_after.to_json()}};
}

Stratum stratify(const std::vector<EvaluationRecord>& records, double fraction, StratifyKey key) {
  if (!(fraction > 0.0 && fraction <= 1.0)) fail(ErrorKind::InvalidArgument, "fraction must lie in (0,1]");
  auto score = [key](const EvaluationRecord& r) {
    return key == StratifyKey::InitialMisalignment ? r.tre_before_mm : r.tre_before_mm - r.tre_after_mm;
  };
  std::vector<EvaluationRecord> sorted = records;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [&](const EvaluationRecord& a, const EvaluationRecord& b) { return score(a) > score(b); });
  const auto take = std::size_t(std::ceil(fraction * double(sorted.size()) - 1e-9));
  sorted.resize(std::min(take, sorted.size()));
  Stratum s;
  s.key = key;
  s.fraction = fraction;
  s.selective = key == StratifyKey::Improvement;
  std::vector<double> b, a;
  for (const auto& r : sorted) {
    b.push_back(r.tre_before_mm);
    a.push_back(r.tre_after_mm);
  }
  s.tre_before = summarize(b);
  s.tre_after = summarize(a);
  s.records = std::move(sorted);
  return s;
}

TTestResult paired_ttest_full(const std::vector<double>& before, const std::vector<double>& after) {
  if (before.size() != after.size()) fail(ErrorKind::InvalidArgument, "paired samples differ in length");
  const std::size_t n = before.size();
  if (n < 2) fail(ErrorKind::InvalidArgument, "paired t-test needs at least 2 pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = after[i] - before[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / double(n);
  double ss = 0.0, scale = 0.0;
  for (double v : d) {
    ss += (v - mean) * (v - mean);
    scale = std::max(scale, std::abs(v));
  }
  const double sd = std::sqrt(ss / double(n - 1));
  if (!(sd > 1e-12 * std::max(scale, 1e-300))) fail(ErrorKind::DegenerateTest, "differences have zero variance");
  TTestResult r;
  r.mean_difference = mean;
  r.df = int(n - 1);
  r.t = mean / (sd / std::sqrt(double(n)));
  const boost::math::students_t dist(double(r.df));
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

double paired_ttest(const std::vector<double>& before, const std::vector<double>& after) {
  return paired_ttest_full(before, after).p;
}

JacobianStats jacobian_stats(const DenseDisplacementField& mu) {
  const JacobianMap jm = jacobian_det(mu);
  const Shape3& s = jm.shape;
  const bool interior = s.d >= 3 && s.h >= 3 && s.w >= 3;
  JacobianStats out;
  out.min_det = std::numeric_limits<double>::infinity();
  double sum = 0.0;
  std::size_t count = 0, neg = 0;
  for (int i = 0; i < s.d; ++i) {
    for (int j = 0; j < s.h; ++j) {
      for (int k = 0; k < s.w; ++k) {
        if (interior && (i == 0 || j == 0 || k == 0 || i == s.d - 1 || j == s.h - 1 || k == s.w - 1)) continue;
        const double det = jm.det[s.index(i, j, k)];
        sum += det;
        out.min_det = std::min(out.min_det, det);
        if (det < 0.0) ++neg;
        ++count;
      }
    }
  }
  if (count == 0) return JacobianStats{};
  out.neg_fraction = double(neg) / double(count);
  out.mean_det = sum / double(count);
  return out;
}

Metric parse_metric(std::string_view name) {
  if (name == "TRE" || name == "tre") return Metric::TRE;
  if (name == "MI" || name == "mi") return Metric::MI;
  fail(ErrorKind::InvalidArgument, "unknown metric '" + std::string(name) + "'");
}

std::vector<BlandAltmanRow> bland_altman_rows(const std::vector<EvaluationRecord>& records, Metric metric) {
  if (records.empty()) fail(ErrorKind::InvalidArgument, "no records to export");
  std::vector<BlandAltmanRow> rows;
  for (const auto& r : records) {
    const double before = metric == Metric::TRE ? r.tre_before_mm : r.mi_before;
    const double after = metric == Metric::TRE ? r.tre_after_mm : r.mi_after;
    rows.push_back({before, after - before, std::string(landmark_kind_name(r.landmark_kind))});
  }
  return rows;
}

void bland_altman_export(const fs::path& path, const std::vector<EvaluationRecord>& records, Metric metric) {
  const auto rows = bland_altman_rows(records, metric);
  auto os = open_out(path);
  os << "x,y,kind\n";
  for (const auto& r : rows) os << fmt(r.x) << ',' << fmt(r.y) << ',' << r.kind << '\n';
}

std::vector<BlandAltmanRow> read_bland_altman(const fs::path& path) {
  auto is = open_in(path);
  std::string line;
  if (!std::getline(is, line) || line != "x,y,kind") fail(ErrorKind::Io, "unexpected header in " + path.string());
  std::vector<BlandAltmanRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 3) fail(ErrorKind::Io, "expected 3 columns in " + path.string());
    rows.push_back({parse_double(c[0], path.string()), parse_double(c[1], path.string()), c[2]});
  }
  return rows;
}

}  // namespace privreg
