#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace privreg {

// Grid extent in voxels, ordered (D, H, W). Linear index is (i*H + j)*W + k.
struct Shape3 {
  int d = 0;
  int h = 0;
  int w = 0;

  std::size_t voxels() const { return std::size_t(d) * std::size_t(h) * std::size_t(w); }
  int operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
  std::size_t index(int i, int j, int k) const {
    return (std::size_t(i) * std::size_t(h) + std::size_t(j)) * std::size_t(w) + std::size_t(k);
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < d && j < h && k < w;
  }
  bool positive() const { return d > 0 && h > 0 && w > 0; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

std::string to_string(const Shape3& s);

using Vec3 = std::array<double, 3>;
using Spacing = Vec3;  // mm per voxel along (D, H, W)

enum class Modality { T2W, DwiHighB, DwiB0, Mask, Synth };

std::string_view modality_name(Modality m);
Modality parse_modality(std::string_view name);

// Scalar field on a voxel grid with physical spacing and a modality tag.
class Volume {
 public:
  Volume() = default;
  Volume(Shape3 shape, Spacing spacing, Modality modality, std::vector<double> data);
  // Zero-filled.
  Volume(Shape3 shape, Spacing spacing, Modality modality);

  const Shape3& shape() const { return shape_; }
  const Spacing& spacing() const { return spacing_; }
  Modality modality() const { return modality_; }
  std::size_t size() const { return data_.size(); }

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  double operator[](std::size_t n) const { return data_[n]; }
  double& operator[](std::size_t n) { return data_[n]; }
  double at(int i, int j, int k) const { return data_[shape_.index(i, j, k)]; }
  double& at(int i, int j, int k) { return data_[shape_.index(i, j, k)]; }

  std::pair<double, double> intensity_range() const;
  double sum() const;

  Volume with_modality(Modality m) const;
  Volume with_values(std::vector<double> data) const;

 private:
  Shape3 shape_{};
  Spacing spacing_{1.0, 1.0, 1.0};
  Modality modality_ = Modality::Synth;
  std::vector<double> data_;
};

// Which image a DDF samples (left) for points of which grid (right).
// Composed is a wildcard produced by generic transforms (affines, sums).
enum class Direction { MovingFromFixed, MovingFromPrivileged, PrivilegedFromFixed, Composed };

std::string_view direction_name(Direction d);
Direction parse_direction(std::string_view name);

// Per-voxel displacement in voxel units, stored interleaved (3 per voxel).
// out(x) = v(x + u(x)) when used for warping.
class DenseDisplacementField {
 public:
  DenseDisplacementField() = default;
  DenseDisplacementField(Shape3 shape, Direction direction);
  DenseDisplacementField(Shape3 shape, Direction direction, std::vector<double> data);

  static DenseDisplacementField constant(Shape3 shape, const Vec3& v,
                                         Direction direction = Direction::Composed);

  const Shape3& shape() const { return shape_; }
  Direction direction() const { return direction_; }
  void set_direction(Direction d) { direction_ = d; }
  std::size_t voxels() const { return shape_.voxels(); }

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  Vec3 at(std::size_t n) const { return {data_[3 * n], data_[3 * n + 1], data_[3 * n + 2]}; }
  Vec3 at(int i, int j, int k) const { return at(shape_.index(i, j, k)); }
  double& component(std::size_t n, int c) { return data_[3 * n + c]; }
  double component(std::size_t n, int c) const { return data_[3 * n + c]; }
  void set(std::size_t n, const Vec3& v) {
    data_[3 * n] = v[0];
    data_[3 * n + 1] = v[1];
    data_[3 * n + 2] = v[2];
  }

  // Component c as a scalar volume on unit spacing.
  Volume component_volume(int c) const;
  double max_abs() const;
  double max_norm() const;

 private:
  Shape3 shape_{};
  Direction direction_ = Direction::Composed;
  std::vector<double> data_;
};

enum class LandmarkKind { Tumor, Urethra, Gland, Zonal };

std::string_view landmark_kind_name(LandmarkKind k);
LandmarkKind parse_landmark_kind(std::string_view name);

struct LandmarkMask {
  Volume mask;  // soft membership in [0,1]
  LandmarkKind kind = LandmarkKind::Tumor;
  int pair_id = 0;
};

struct StudyTrio {
  std::string study_id;
  Volume moving;      // high-b DWI analogue
  Volume fixed;       // T2w analogue
  Volume privileged;  // b0 DWI analogue, training only
  std::vector<LandmarkMask> landmarks_fixed;
  std::vector<LandmarkMask> landmarks_moving;
  std::optional<DenseDisplacementField> gt_ddf;

  // Throws grid-mismatch when shapes or landmark pairings disagree.
  void validate() const;
};

void require_same_shape(const Shape3& a, const Shape3& b, std::string_view what);

}  // namespace privreg
