#include "privreg/similarity.hpp"

#include <algorithm>
#include <cmath>

#include "privreg/error.hpp"

namespace privreg {

namespace {

constexpr int kWindowRadius = 4;

// Per-voxel normalized Gaussian bin weights over a fixed-width window.
struct Parzen {
  int bins = 0;
  int width = 0;
  std::vector<int> first;
  std::vector<double> w;
  std::vector<double> dw;  // d w / d value; filled when requested
};

Parzen parzen_weights(const Volume& v, const MIConfig& cfg, bool with_derivative) {
  Parzen p;
  p.bins = cfg.bins;
  p.width = std::min(cfg.bins, 2 * kWindowRadius + 1);
  const std::size_t n = v.size();
  p.first.resize(n);
  p.w.resize(n * p.width);
  if (with_derivative) p.dw.assign(n * p.width, 0.0);
  const double bin_w = 1.0 / (cfg.bins - 1);
  const double sigma = cfg.kernel_sigma * bin_w;
  const double inv_var = 1.0 / (sigma * sigma);
  std::vector<double> s(p.width);
  for (std::size_t x = 0; x < n; ++x) {
    const double raw = v[x];
    const double val = std::clamp(raw, 0.0, 1.0);
    const bool inside = raw > 0.0 && raw < 1.0;
    const int nearest = int(std::lround(val / bin_w));
    const int first = std::clamp(nearest - kWindowRadius, 0, cfg.bins - p.width);
    p.first[x] = first;
    double* wx = &p.w[x * p.width];
    double total = 0.0;
    // consecutive Gaussian weights differ by a ratio that itself shrinks by q
    const double d0 = val - first * bin_w;
    double wt = std::exp(-0.5 * d0 * d0 * inv_var);
    double ratio = std::exp((d0 * bin_w - 0.5 * bin_w * bin_w) * inv_var);
    const double q = std::exp(-bin_w * bin_w * inv_var);
    for (int t = 0; t < p.width; ++t) {
      const double d = val - (first + t) * bin_w;
      wx[t] = wt;
      wt *= ratio;
      ratio *= q;
      s[t] = -d * inv_var;
      total += wx[t];
    }
    double mean_s = 0.0;
    for (int t = 0; t < p.width; ++t) {
      wx[t] /= total;
      mean_s += wx[t] * s[t];
    }
    if (with_derivative && inside) {
      double* dx = &p.dw[x * p.width];
      for (int t = 0; t < p.width; ++t) dx[t] = wx[t] * (s[t] - mean_s);
    }
  }
  return p;
}

struct JointHistogram {
  int bins = 0;
  std::vector<double> joint;  // bins x bins, row = a
  std::vector<double> pa, pb;
};

JointHistogram joint_histogram(const Parzen& A, const Parzen& B) {
  JointHistogram h;
  h.bins = A.bins;
  h.joint.assign(std::size_t(h.bins) * h.bins, 0.0);
  const std::size_t n = A.first.size();
  const int wa = A.width, wb = B.width;
  for (std::size_t x = 0; x < n; ++x) {
    const double* ax = &A.w[x * wa];
    const double* bx = &B.w[x * wb];
    double* row = &h.joint[std::size_t(A.first[x]) * h.bins + B.first[x]];
    for (int t = 0; t < wa; ++t) {
      double* r = row + std::size_t(t) * h.bins;
      const double at = ax[t];
      for (int u = 0; u < wb; ++u) r[u] += at * bx[u];
    }
  }
  const double inv_n = 1.0 / double(n);
  for (double& v : h.joint) v *= inv_n;
  h.pa.assign(h.bins, 0.0);
  h.pb.assign(h.bins, 0.0);
  for (int k = 0; k < h.bins; ++k) {
    for (int l = 0; l < h.bins; ++l) {
      const double p = h.joint[std::size_t(k) * h.bins + l];
      h.pa[k] += p;
      h.pb[l] += p;
    }
  }
  return h;
}

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double mi_from(const JointHistogram& h) {
  double mi = 0.0;
  for (int k = 0; k < h.bins; ++k) {
    for (int l = 0; l < h.bins; ++l) {
      const double p = h.joint[std::size_t(k) * h.bins + l];
      if (p > 0.0) mi += p * std::log(p / (h.pa[k] * h.pb[l]));
    }
  }
  return mi;
}

// Chain rule from d objective / d p_kl to the voxel values of a and b.
void backprop_histogram(const Parzen& A, const Parzen& B, const std::vector<double>& G, bool want_a, bool want_b,
                        std::vector<double>& ga, std::vector<double>& gb) {
  const std::size_t n = A.first.size();
  const int bins = A.bins;
  const int wa = A.width, wb = B.width;
  const double inv_n = 1.0 / double(n);
  if (want_a) ga.assign(n, 0.0);
  if (want_b) gb.assign(n, 0.0);
  for (std::size_t x = 0; x < n; ++x) {
    const double* ax = &A.w[x * wa];
    const double* bx = &B.w[x * wb];
    const double* g0 = &G[std::size_t(A.first[x]) * bins + B.first[x]];
    double acc_a = 0.0, acc_b = 0.0;
    for (int t = 0; t < wa; ++t) {
      const double* gr = g0 + std::size_t(t) * bins;
      if (want_b) {
        double s = 0.0;
        const double* dbx = &B.dw[x * wb];
        for (int u = 0; u < wb; ++u) s += dbx[u] * gr[u];
        acc_b += ax[t] * s;
      }
      if (want_a) {
        double s = 0.0;
        for (int u = 0; u < wb; ++u) s += bx[u] * gr[u];
        acc_a += A.dw[x * wa + t] * s;
      }
    }
    if (want_a) ga[x] = acc_a * inv_n;
    if (want_b) gb[x] = acc_b * inv_n;
  }
}

void check_pair(const Volume& a, const Volume& b, const MIConfig& cfg) {
  require_same_shape(a.shape(), b.shape(), "similarity inputs");
  cfg.validate();
}

}  // namespace

void MIConfig::validate() const {
  if (bins < 4) fail(ErrorKind::InvalidArgument, "MI needs at least 4 bins");
  if (!(kernel_sigma > 0.0)) fail(ErrorKind::InvalidArgument, "MI kernel_sigma must be positive");
}

double mutual_information(const Volume& a, const Volume& b, const MIConfig& cfg) {
  check_pair(a, b, cfg);
  const auto h = joint_histogram(parzen_weights(a, cfg, false), parzen_weights(b, cfg, false));
  return mi_from(h);
}

SimilarityGradient mutual_information_grad(const Volume& a, const Volume& b, const MIConfig& cfg, bool want_a,
                                           bool want_b) {
  check_pair(a, b, cfg);
  const Parzen A = parzen_weights(a, cfg, want_a);
  const Parzen B = parzen_weights(b, cfg, want_b);
  const auto h = joint_histogram(A, B);
  std::vector<double> G(h.joint.size(), 0.0);
  for (int k = 0; k < h.bins; ++k) {
    for (int l = 0; l < h.bins; ++l) {
      const double p = h.joint[std::size_t(k) * h.bins + l];
      if (p > 0.0) G[std::size_t(k) * h.bins + l] = std::log(p / (h.pa[k] * h.pb[l]));
    }
  }
  std::vector<double> ga, gb;
  backprop_histogram(A, B, G, want_a, want_b, ga, gb);
  SimilarityGradient out;
  out.value = mi_from(h);
  if (want_a) out.grad_a = a.with_values(std::move(ga));
  if (want_b) out.grad_b = b.with_values(std::move(gb));
  return out;
}

double normalized_mutual_information(const Volume& a, const Volume& b, const MIConfig& cfg) {
  check_pair(a, b, cfg);
  const auto h = joint_histogram(parzen_weights(a, cfg, false), parzen_weights(b, cfg, false));
  return (entropy(h.pa) + entropy(h.pb)) / entropy(h.joint);
}

SimilarityGradient normalized_mutual_information_grad(const Volume& a, const Volume& b, const MIConfig& cfg,
                                                      bool want_a, bool want_b) {
  check_pair(a, b, cfg);
  const Parzen A = parzen_weights(a, cfg, want_a);
  const Parzen B = parzen_weights(b, cfg, want_b);
  const auto h = joint_histogram(A, B);
  const double ha = entropy(h.pa), hb = entropy(h.pb), hab = entropy(h.joint);
  std::vector<double> G(h.joint.size(), 0.0);
  // constant terms drop out because the per-voxel weights sum to one
  for (int k = 0; k < h.bins; ++k) {
    for (int l = 0; l < h.bins; ++l) {
      const double p = h.joint[std::size_t(k) * h.bins + l];
      if (p <= 0.0) continue;
      const double dmarg = -std::log(h.pa[k]) - std::log(h.pb[l]);
      const double djoint = -std::log(p);
      G[std::size_t(k) * h.bins + l] = (dmarg * hab - (ha + hb) * djoint) / (hab * hab);
    }
  }
  std::vector<double> ga, gb;
  backprop_histogram(A, B, G, want_a, want_b, ga, gb);
  SimilarityGradient out;
  out.value = (ha + hb) / hab;
  if (want_a) out.grad_a = a.with_values(std::move(ga));
  if (want_b) out.grad_b = b.with_values(std::move(gb));
  return out;
}

double plugin_mutual_information(const Volume& a, const Volume& b, int bins) {
  require_same_shape(a.shape(), b.shape(), "similarity inputs");
  if (bins < 2) fail(ErrorKind::InvalidArgument, "plugin MI needs at least 2 bins");
  std::vector<double> joint(std::size_t(bins) * bins, 0.0), pa(bins, 0.0), pb(bins, 0.0);
  auto bin_of = [bins](double v) { return std::clamp(int(std::floor(std::clamp(v, 0.0, 1.0) * bins)), 0, bins - 1); };
  const std::size_t n = a.size();
  for (std::size_t x = 0; x < n; ++x) joint[std::size_t(bin_of(a[x])) * bins + bin_of(b[x])] += 1.0;
  for (int k = 0; k < bins; ++k) {
    for (int l = 0; l < bins; ++l) {
      double& p = joint[std::size_t(k) * bins + l];
      p /= double(n);
      pa[k] += p;
      pb[l] += p;
    }
  }
  double mi = 0.0;
  for (int k = 0; k < bins; ++k) {
    for (int l = 0; l < bins; ++l) {
      const double p = joint[std::size_t(k) * bins + l];
      if (p > 0.0) mi += p * std::log(p / (pa[k] * pb[l]));
    }
  }
  return mi;
}

double msd(const Volume& a, const Volume& b) {
  require_same_shape(a.shape(), b.shape(), "msd inputs");
  double acc = 0.0;
  for (std::size_t n = 0; n < a.size(); ++n) {
    const double d = a[n] - b[n];
    acc += d * d;
  }
  return acc / double(a.size());
}

Volume msd_grad(const Volume& a, const Volume& b) {
  require_same_shape(a.shape(), b.shape(), "msd inputs");
  std::vector<double> g(a.size());
  const double scale = 2.0 / double(a.size());
  for (std::size_t n = 0; n < a.size(); ++n) g[n] = scale * (a[n] - b[n]);
  return a.with_values(std::move(g));
}

namespace {

// Visits every (voxel, component, axis) finite difference as
// (value, lo index, hi index, 1/h).
template <typename F>
void for_each_difference(const DenseDisplacementField& f, F&& fn) {
  const Shape3& s = f.shape();
  if (s.d < 3 || s.h < 3 || s.w < 3) fail(ErrorKind::InvalidArgument, "regularizer needs at least 3 voxels per axis");
  std::size_t n = 0;
  for (int i = 0; i < s.d; ++i) {
    for (int j = 0; j < s.h; ++j) {
      for (int k = 0; k < s.w; ++k, ++n) {
        const int pos[3] = {i, j, k};
        for (int axis = 0; axis < 3; ++axis) {
          int lo[3] = {i, j, k}, hi[3] = {i, j, k};
          double inv_h = 0.5;
          if (pos[axis] == 0) {
            hi[axis] = 1;
            inv_h = 1.0;
          } else if (pos[axis] == s[axis] - 1) {
            lo[axis] = s[axis] - 2;
            inv_h = 1.0;
          } else {
            lo[axis] -= 1;
            hi[axis] += 1;
          }
          fn(s.index(lo[0], lo[1], lo[2]), s.index(hi[0], hi[1], hi[2]), inv_h);
        }
      }
    }
  }
}

}  // namespace

double ddf_gradient_l2(const DenseDisplacementField& ddf, const Vec3& scale) {
  const auto v = ddf.values();
  double acc = 0.0;
  for_each_difference(ddf, [&](std::size_t lo, std::size_t hi, double inv_h) {
    for (int c = 0; c < 3; ++c) {
      const double g = scale[c] * (v[3 * hi + c] - v[3 * lo + c]) * inv_h;
      acc += g * g;
    }
  });
  return acc / (9.0 * double(ddf.voxels()));
}

DenseDisplacementField ddf_gradient_l2_grad(const DenseDisplacementField& ddf, const Vec3& scale) {
  const auto v = ddf.values();
  DenseDisplacementField out(ddf.shape(), ddf.direction());
  auto g = out.values();
  const double norm = 2.0 / (9.0 * double(ddf.voxels()));
  for_each_difference(ddf, [&](std::size_t lo, std::size_t hi, double inv_h) {
    for (int c = 0; c < 3; ++c) {
      const double d = scale[c] * scale[c] * (v[3 * hi + c] - v[3 * lo + c]) * inv_h * inv_h * norm;
      g[3 * hi + c] += d;
      g[3 * lo + c] -= d;
    }
  });
  return out;
}

double unsupervised_loss(const Volume& fixed, const Volume& warped, const DenseDisplacementField& ddf, double alpha,
                         double beta, const MIConfig& cfg, const Vec3& component_scale) {
  if (alpha < 0.0 || beta < 0.0) fail(ErrorKind::InvalidArgument, "loss weights must be non-negative");
  require_same_shape(fixed.shape(), warped.shape(), "loss fixed vs warped");
  require_same_shape(fixed.shape(), ddf.shape(), "loss fixed vs ddf");
  const double sim = alpha > 0.0 ? mutual_information(fixed, warped, cfg) : 0.0;
  const double reg = beta > 0.0 ? ddf_gradient_l2(ddf, component_scale) : 0.0;
  return -alpha * sim + beta * reg;
}

}  // namespace privreg
