#pragma once

#include "privreg/volume.hpp"

namespace privreg {

// Parzen-window joint histogram settings. Bin centres sit at k/(bins-1) on
// [0,1]; kernel_sigma is measured in bin widths. Inputs are clamped to [0,1].
struct MIConfig {
  int bins = 32;
  double kernel_sigma = 0.5;

  void validate() const;
};

// Differentiable Parzen MI in nats.
double mutual_information(const Volume& a, const Volume& b, const MIConfig& cfg = {});

struct SimilarityGradient {
  double value = 0.0;
  Volume grad_a;  // empty unless requested
  Volume grad_b;
};

SimilarityGradient mutual_information_grad(const Volume& a, const Volume& b, const MIConfig& cfg = {},
                                           bool want_a = false, bool want_b = true);

// (H(a) + H(b)) / H(a,b) on the same Parzen histogram.
double normalized_mutual_information(const Volume& a, const Volume& b, const MIConfig& cfg = {});
SimilarityGradient normalized_mutual_information_grad(const Volume& a, const Volume& b, const MIConfig& cfg = {},
                                                      bool want_a = false, bool want_b = true);

// Hard-binned histogram MI (no smoothing, not differentiable). Used for
// Monte-Carlo candidate selection and for reporting.
double plugin_mutual_information(const Volume& a, const Volume& b, int bins = 32);

double msd(const Volume& a, const Volume& b);
// d msd / d a (the gradient with respect to b is its negation).
Volume msd_grad(const Volume& a, const Volume& b);

// Mean over voxels, vector components and derivative directions of the
// squared spatial gradient of the field. Central differences inside,
// one-sided on the faces. component_scale multiplies each vector component
// before differentiation (unit conversion).
double ddf_gradient_l2(const DenseDisplacementField& ddf, const Vec3& component_scale = {1.0, 1.0, 1.0});
DenseDisplacementField ddf_gradient_l2_grad(const DenseDisplacementField& ddf,
                                            const Vec3& component_scale = {1.0, 1.0, 1.0});

// -alpha * MI(fixed, warped) + beta * C(ddf)
double unsupervised_loss(const Volume& fixed, const Volume& warped, const DenseDisplacementField& ddf, double alpha,
                         double beta, const MIConfig& cfg = {}, const Vec3& component_scale = {1.0, 1.0, 1.0});

}  // namespace privreg
