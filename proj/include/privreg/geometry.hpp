#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "privreg/volume.hpp"

namespace privreg {

// How samples outside the grid are read.
enum class Boundary { Zero, Clamp };

double sample_trilinear(const Volume& v, double i, double j, double k, Boundary b = Boundary::Zero);

// out(x) = v(x + u(x)), trilinear, zero outside v.
Volume warp(const Volume& v, const DenseDisplacementField& ddf);

struct WarpGradients {
  Volume volume;                // d loss / d v
  DenseDisplacementField ddf;  // d loss / d u
};

// Adjoint of warp for an upstream gradient on the warped output. The volume
// gradient is left empty unless want_volume is set.
WarpGradients warp_backward(const Volume& v, const DenseDisplacementField& ddf, const Volume& grad_out,
                            bool want_volume = true);

enum class AffineProvenance { Identity, RandomCorner, McCandidate };

// x -> linear * x + translation, in voxel coordinates (i, j, k).
class AffineTransform {
 public:
  using Matrix = Eigen::Matrix<double, 3, 4>;

  AffineTransform();  // identity
  AffineTransform(const Matrix& m, AffineProvenance provenance);

  static AffineTransform identity() { return {}; }
  static AffineTransform translation(const Vec3& t);
  // Isotropic scaling by s about a centre point.
  static AffineTransform scaling(double s, const Vec3& centre);

  const Matrix& matrix() const { return m_; }
  AffineProvenance provenance() const { return provenance_; }
  AffineTransform with_provenance(AffineProvenance p) const { return AffineTransform(m_, p); }
  Vec3 apply(const Vec3& x) const;
  double linear_determinant() const;

 private:
  Matrix m_;
  AffineProvenance provenance_;
};

DenseDisplacementField affine_to_ddf(const AffineTransform& a, const Shape3& grid);

// result(x) = inner(x) + outer(x + inner(x)). Tags must chain:
// (M<-P) o (P<-F) gives M<-F; a composed-tagged operand chains with anything.
DenseDisplacementField compose(const DenseDisplacementField& outer, const DenseDisplacementField& inner,
                               Boundary boundary = Boundary::Zero);

struct ComposeGradients {
  DenseDisplacementField outer;
  DenseDisplacementField inner;
};

ComposeGradients compose_backward(const DenseDisplacementField& outer, const DenseDisplacementField& inner,
                                  const DenseDisplacementField& grad_result);

// Fixed-point inverse v with compose(ddf, v) ~ 0.
DenseDisplacementField invert_ddf(const DenseDisplacementField& ddf, int iterations = 30,
                                  Boundary boundary = Boundary::Clamp);

// Perturbs the grid corners (0,0,0), (D-1,0,0), (0,H-1,0), (0,0,W-1) by
// U(-m*extent, m*extent) per axis and returns the affine that maps the
// original corners onto the perturbed ones. Redraws non-invertible maps.
AffineTransform random_affine(std::mt19937_64& rng, double magnitude, const Shape3& grid);
AffineTransform random_affine(std::uint64_t seed, double magnitude, const Shape3& grid);

struct JacobianMap {
  Shape3 shape;
  std::vector<double> det;
};

// det(I + grad u); central differences inside, one-sided on the faces.
JacobianMap jacobian_det(const DenseDisplacementField& ddf);

// Separable Gaussian blur; weights renormalized where the kernel leaves the grid.
Volume gaussian_smooth(const Volume& v, double sigma);
DenseDisplacementField gaussian_smooth(const DenseDisplacementField& f, double sigma);

// Resample a field onto another grid by scaling coordinates and displacements
// with the per-axis extent ratio (pyramid hand-off).
DenseDisplacementField resize_ddf(const DenseDisplacementField& f, const Shape3& target);
// Gaussian-prefiltered downsampling to the given grid.
Volume resize_volume(const Volume& v, const Shape3& target);

DenseDisplacementField operator+(const DenseDisplacementField& a, const DenseDisplacementField& b);
DenseDisplacementField operator*(double s, const DenseDisplacementField& a);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace privreg
