#include "privreg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "privreg/error.hpp"

namespace privreg {

std::string to_string(const Shape3& s) {
  return std::to_string(s.d) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::T2W: return "T2W";
    case Modality::DwiHighB: return "DWI_HIGH_B";
    case Modality::DwiB0: return "DWI_B0";
    case Modality::Mask: return "MASK";
    case Modality::Synth: return "SYNTH";
  }
  return "SYNTH";
}

Modality parse_modality(std::string_view name) {
  for (Modality m : {Modality::T2W, Modality::DwiHighB, Modality::DwiB0, Modality::Mask, Modality::Synth}) {
    if (modality_name(m) == name) return m;
  }
  fail(ErrorKind::InvalidArgument, "unknown modality '" + std::string(name) + "'");
}

Volume::Volume(Shape3 shape, Spacing spacing, Modality modality, std::vector<double> data)
    : shape_(shape), spacing_(spacing), modality_(modality), data_(std::move(data)) {
  if (!shape_.positive()) fail(ErrorKind::InvalidArgument, "volume shape must be positive");
  if (data_.size() != shape_.voxels()) {
    fail(ErrorKind::GridMismatch, "volume data length " + std::to_string(data_.size()) +
                                      " does not match shape " + to_string(shape_));
  }
  for (double s : spacing_) {
    if (!(s > 0.0) || !std::isfinite(s)) fail(ErrorKind::InvalidArgument, "spacing must be positive");
  }
  for (double v : data_) {
    if (!std::isfinite(v)) fail(ErrorKind::InvalidArgument, "volume contains non-finite values");
  }
}

Volume::Volume(Shape3 shape, Spacing spacing, Modality modality)
    : Volume(shape, spacing, modality, std::vector<double>(shape.positive() ? shape.voxels() : 0, 0.0)) {}

std::pair<double, double> Volume::intensity_range() const {
  if (data_.empty()) return {0.0, 0.0};
  auto [lo, hi] = std::minmax_element(data_.begin(), data_.end());
  return {*lo, *hi};
}

double Volume::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

Volume Volume::with_modality(Modality m) const {
  Volume out = *this;
  out.modality_ = m;
  return out;
}

Volume Volume::with_values(std::vector<double> data) const {
  return Volume(shape_, spacing_, modality_, std::move(data));
}

std::string_view direction_name(Direction d) {
  switch (d) {
    case Direction::MovingFromFixed: return "M<-F";
    case Direction::MovingFromPrivileged: return "M<-P";
    case Direction::PrivilegedFromFixed: return "P<-F";
    case Direction::Composed: return "composed";
  }
  return "composed";
}

Direction parse_direction(std::string_view name) {
  for (Direction d : {Direction::MovingFromFixed, Direction::MovingFromPrivileged,
                      Direction::PrivilegedFromFixed, Direction::Composed}) {
    if (direction_name(d) == name) return d;
  }
  fail(ErrorKind::InvalidArgument, "unknown DDF direction '" + std::string(name) + "'");
}

DenseDisplacementField::DenseDisplacementField(Shape3 shape, Direction direction)
    : shape_(shape), direction_(direction), data_(3 * shape.voxels(), 0.0) {
  if (!shape_.positive()) fail(ErrorKind::InvalidArgument, "DDF shape must be positive");
}

DenseDisplacementField::DenseDisplacementField(Shape3 shape, Direction direction, std::vector<double> data)
    : shape_(shape), direction_(direction), data_(std::move(data)) {
  if (!shape_.positive()) fail(ErrorKind::InvalidArgument, "DDF shape must be positive");
  if (data_.size() != 3 * shape_.voxels()) {
    fail(ErrorKind::GridMismatch, "DDF data length does not match shape " + to_string(shape_));
  }
  for (double v : data_) {
    if (!std::isfinite(v)) fail(ErrorKind::InvalidArgument, "DDF contains non-finite values");
  }
}

DenseDisplacementField DenseDisplacementField::constant(Shape3 shape, const Vec3& v, Direction direction) {
  DenseDisplacementField f(shape, direction);
  for (std::size_t n = 0; n < f.voxels(); ++n) f.set(n, v);
  return f;
}

Volume DenseDisplacementField::component_volume(int c) const {
  std::vector<double> out(voxels());
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = data_[3 * n + c];
  return Volume(shape_, {1.0, 1.0, 1.0}, Modality::Synth, std::move(out));
}

double DenseDisplacementField::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

double DenseDisplacementField::max_norm() const {
  double m = 0.0;
  for (std::size_t n = 0; n < voxels(); ++n) {
    const Vec3 v = at(n);
    m = std::max(m, std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]));
  }
  return m;
}

std::string_view landmark_kind_name(LandmarkKind k) {
  switch (k) {
    case LandmarkKind::Tumor: return "tumor";
    case LandmarkKind::Urethra: return "urethra";
    case LandmarkKind::Gland: return "gland";
    case LandmarkKind::Zonal: return "zonal";
  }
  return "tumor";
}

LandmarkKind parse_landmark_kind(std::string_view name) {
  for (LandmarkKind k : {LandmarkKind::Tumor, LandmarkKind::Urethra, LandmarkKind::Gland, LandmarkKind::Zonal}) {
    if (landmark_kind_name(k) == name) return k;
  }
  fail(ErrorKind::InvalidArgument, "unknown landmark kind '" + std::string(name) + "'");
}

void require_same_shape(const Shape3& a, const Shape3& b, std::string_view what) {
  if (!(a == b)) {
    fail(ErrorKind::GridMismatch, std::string(what) + ": " + to_string(a) + " vs " + to_string(b));
  }
}

void StudyTrio::validate() const {
  require_same_shape(moving.shape(), fixed.shape(), "moving vs fixed");
  // an inference-side load leaves privileged empty
  if (privileged.size() > 0) require_same_shape(privileged.shape(), fixed.shape(), "privileged vs fixed");
  if (gt_ddf) require_same_shape(gt_ddf->shape(), fixed.shape(), "gt_ddf vs fixed");
  if (landmarks_fixed.size() != landmarks_moving.size()) {
    fail(ErrorKind::GridMismatch, "study " + study_id + ": landmark list lengths differ");
  }
  if (landmarks_fixed.size() > 3) {
    fail(ErrorKind::GridMismatch, "study " + study_id + ": more than three landmark pairs");
  }
  for (std::size_t n = 0; n < landmarks_fixed.size(); ++n) {
    const auto& lf = landmarks_fixed[n];
    const auto& lm = landmarks_moving[n];
    if (lf.pair_id != lm.pair_id || lf.kind != lm.kind) {
      fail(ErrorKind::GridMismatch, "study " + study_id + ": landmark pair_id/kind mismatch at position " +
                                        std::to_string(n));
    }
    require_same_shape(lf.mask.shape(), fixed.shape(), "fixed landmark vs fixed");
    require_same_shape(lm.mask.shape(), fixed.shape(), "moving landmark vs fixed");
    if (!(lf.mask.sum() > 0.0) || !(lm.mask.sum() > 0.0)) {
      fail(ErrorKind::EmptyLandmark, "study " + study_id + ": landmark pair " + std::to_string(lf.pair_id) +
                                         " has an empty mask");
    }
  }
}

}  // namespace privreg
