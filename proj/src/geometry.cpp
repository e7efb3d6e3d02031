#include "privreg/geometry.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "privreg/error.hpp"

namespace privreg {

namespace {

// Eight-corner trilinear stencil at a continuous position, with the
// derivative of every weight with respect to the three coordinates.
struct Stencil {
  std::size_t idx[8];
  double w[8];
  double dw[3][8];
  bool valid[8];
};

template <bool Deriv = true>
inline void make_stencil(const Shape3& s, double pi, double pj, double pk, Boundary b, Stencil& st) {
  if (b == Boundary::Clamp) {
    pi = std::clamp(pi, 0.0, double(s.d - 1));
    pj = std::clamp(pj, 0.0, double(s.h - 1));
    pk = std::clamp(pk, 0.0, double(s.w - 1));
  }
  const double fi0 = std::floor(pi), fj0 = std::floor(pj), fk0 = std::floor(pk);
  const int i0 = int(fi0), j0 = int(fj0), k0 = int(fk0);
  const double fi = pi - fi0, fj = pj - fj0, fk = pk - fk0;
  const double wi[2] = {1.0 - fi, fi}, wj[2] = {1.0 - fj, fj}, wk[2] = {1.0 - fk, fk};
  const double di[2] = {-1.0, 1.0};
  int c = 0;
  for (int a = 0; a < 2; ++a) {
    for (int bb = 0; bb < 2; ++bb) {
      for (int e = 0; e < 2; ++e, ++c) {
        const int i = i0 + a, j = j0 + bb, k = k0 + e;
        st.valid[c] = s.contains(i, j, k);
        st.idx[c] = st.valid[c] ? s.index(i, j, k) : 0;
        st.w[c] = wi[a] * wj[bb] * wk[e];
        if constexpr (Deriv) {
          st.dw[0][c] = di[a] * wj[bb] * wk[e];
          st.dw[1][c] = wi[a] * di[bb] * wk[e];
          st.dw[2][c] = wi[a] * wj[bb] * di[e];
        }
      }
    }
  }
}

// Warps C interleaved channels of src by the displacement field.
void warp_channels(std::span<const double> src, int C, const Shape3& s, std::span<const double> ddf,
                   std::span<double> out, Boundary b) {
  Stencil st;
  std::size_t n = 0;
  for (int i = 0; i < s.d; ++i) {
    for (int j = 0; j < s.h; ++j) {
      for (int k = 0; k < s.w; ++k, ++n) {
        make_stencil<false>(s, i + ddf[3 * n], j + ddf[3 * n + 1], k + ddf[3 * n + 2], b, st);
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int q = 0; q < 8; ++q) {
            if (st.valid[q]) acc += st.w[q] * src[st.idx[q] * C + c];
          }
          out[n * C + c] = acc;
        }
      }
    }
  }
}

void warp_channels_backward(std::span<const double> src, int C, const Shape3& s, std::span<const double> ddf,
                            std::span<const double> grad_out, std::span<double> grad_src,
                            std::span<double> grad_ddf) {
  Stencil st;
  std::size_t n = 0;
  for (int i = 0; i < s.d; ++i) {
    for (int j = 0; j < s.h; ++j) {
      for (int k = 0; k < s.w; ++k, ++n) {
        make_stencil(s, i + ddf[3 * n], j + ddf[3 * n + 1], k + ddf[3 * n + 2], Boundary::Zero, st);
        double gp[3] = {0.0, 0.0, 0.0};
        for (int c = 0; c < C; ++c) {
          const double g = grad_out[n * C + c];
          if (g == 0.0) continue;
          for (int q = 0; q < 8; ++q) {
            if (!st.valid[q]) continue;
            const double val = src[st.idx[q] * C + c];
            if (!grad_src.empty()) grad_src[st.idx[q] * C + c] += st.w[q] * g;
            gp[0] += st.dw[0][q] * val * g;
            gp[1] += st.dw[1][q] * val * g;
            gp[2] += st.dw[2][q] * val * g;
          }
        }
        grad_ddf[3 * n] += gp[0];
        grad_ddf[3 * n + 1] += gp[1];
        grad_ddf[3 * n + 2] += gp[2];
      }
    }
  }
}

Direction chain(Direction outer, Direction inner) {
  if (outer == Direction::Composed || inner == Direction::Composed) return Direction::Composed;
  if (outer == Direction::MovingFromPrivileged && inner == Direction::PrivilegedFromFixed) {
    return Direction::MovingFromFixed;
  }
  fail(ErrorKind::DirectionMismatch, std::string("cannot compose ") + std::string(direction_name(outer)) +
                                         " after " + std::string(direction_name(inner)));
}

std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  for (int t = -r; t <= r; ++t) k[t + r] = std::exp(-0.5 * t * t / (sigma * sigma));
  return k;
}

// In-place blur of C interleaved channels along one axis.
void blur_axis(std::vector<double>& data, int C, const Shape3& s, int axis, const std::vector<double>& kern) {
  const int r = int(kern.size() / 2);
  const int len = s[axis];
  const std::size_t stride = axis == 0 ? std::size_t(s.h) * s.w : (axis == 1 ? std::size_t(s.w) : 1);
  std::vector<double> line(std::size_t(len) * C), res(std::size_t(len) * C);
  const int n0 = axis == 0 ? s.h : s.d;
  const int n1 = axis == 2 ? s.h : s.w;
  for (int a = 0; a < n0; ++a) {
    for (int b = 0; b < n1; ++b) {
      std::size_t base;
      if (axis == 0) base = s.index(0, a, b);
      else if (axis == 1) base = s.index(a, 0, b);
      else base = s.index(a, b, 0);
      for (int t = 0; t < len; ++t) {
        for (int c = 0; c < C; ++c) line[std::size_t(t) * C + c] = data[(base + t * stride) * C + c];
      }
      for (int t = 0; t < len; ++t) {
        double norm = 0.0;
        for (int c = 0; c < C; ++c) res[std::size_t(t) * C + c] = 0.0;
        for (int q = -r; q <= r; ++q) {
          const int u = t + q;
          if (u < 0 || u >= len) continue;
          const double wgt = kern[q + r];
          norm += wgt;
          for (int c = 0; c < C; ++c) res[std::size_t(t) * C + c] += wgt * line[std::size_t(u) * C + c];
        }
        for (int c = 0; c < C; ++c) res[std::size_t(t) * C + c] /= norm;
      }
      for (int t = 0; t < len; ++t) {
        for (int c = 0; c < C; ++c) data[(base + t * stride) * C + c] = res[std::size_t(t) * C + c];
      }
    }
  }
}

}  // namespace

double sample_trilinear(const Volume& v, double i, double j, double k, Boundary b) {
  Stencil st;
  make_stencil<false>(v.shape(), i, j, k, b, st);
  double acc = 0.0;
  for (int q = 0; q < 8; ++q) {
    if (st.valid[q]) acc += st.w[q] * v[st.idx[q]];
  }
  return acc;
}

Volume warp(const Volume& v, const DenseDisplacementField& ddf) {
  require_same_shape(v.shape(), ddf.shape(), "warp volume vs ddf");
  std::vector<double> out(v.size());
  warp_channels(v.values(), 1, v.shape(), ddf.values(), out, Boundary::Zero);
  return v.with_values(std::move(out));
}

WarpGradients warp_backward(const Volume& v, const DenseDisplacementField& ddf, const Volume& grad_out,
                            bool want_volume) {
  require_same_shape(v.shape(), ddf.shape(), "warp volume vs ddf");
  require_same_shape(grad_out.shape(), ddf.shape(), "warp gradient vs ddf");
  std::vector<double> gv(want_volume ? v.size() : 0, 0.0);
  DenseDisplacementField gu(ddf.shape(), ddf.direction());
  warp_channels_backward(v.values(), 1, v.shape(), ddf.values(), grad_out.values(), gv, gu.values());
  if (!want_volume) return {Volume(), std::move(gu)};
  return {v.with_values(std::move(gv)), std::move(gu)};
}

AffineTransform::AffineTransform() : m_(Matrix::Zero()), provenance_(AffineProvenance::Identity) {
  m_.leftCols<3>().setIdentity();
}

AffineTransform::AffineTransform(const Matrix& m, AffineProvenance provenance) : m_(m), provenance_(provenance) {
  if (provenance == AffineProvenance::Identity) {
    Matrix id = Matrix::Zero();
    id.leftCols<3>().setIdentity();
    if (m != id) fail(ErrorKind::InvalidArgument, "identity provenance on a non-identity map");
  }
  if (!(linear_determinant() > 0.0)) {
    fail(ErrorKind::DegenerateAffine, "affine must preserve orientation");
  }
}

AffineTransform AffineTransform::translation(const Vec3& t) {
  Matrix m = Matrix::Zero();
  m.leftCols<3>().setIdentity();
  m.col(3) << t[0], t[1], t[2];
  return AffineTransform(m, AffineProvenance::RandomCorner);
}

AffineTransform AffineTransform::scaling(double s, const Vec3& c) {
  Matrix m = Matrix::Zero();
  m.leftCols<3>() = s * Eigen::Matrix3d::Identity();
  for (int a = 0; a < 3; ++a) m(a, 3) = c[a] * (1.0 - s);
  return AffineTransform(m, AffineProvenance::RandomCorner);
}

Vec3 AffineTransform::apply(const Vec3& x) const {
  Vec3 y;
  for (int a = 0; a < 3; ++a) y[a] = m_(a, 0) * x[0] + m_(a, 1) * x[1] + m_(a, 2) * x[2] + m_(a, 3);
  return y;
}

double AffineTransform::linear_determinant() const { return m_.leftCols<3>().determinant(); }

DenseDisplacementField affine_to_ddf(const AffineTransform& a, const Shape3& grid) {
  DenseDisplacementField f(grid, Direction::Composed);
  std::size_t n = 0;
  for (int i = 0; i < grid.d; ++i) {
    for (int j = 0; j < grid.h; ++j) {
      for (int k = 0; k < grid.w; ++k, ++n) {
        const Vec3 y = a.apply({double(i), double(j), double(k)});
        f.set(n, {y[0] - i, y[1] - j, y[2] - k});
      }
    }
  }
  return f;
}

DenseDisplacementField compose(const DenseDisplacementField& outer, const DenseDisplacementField& inner,
                               Boundary boundary) {
  require_same_shape(outer.shape(), inner.shape(), "compose outer vs inner");
  const Direction dir = chain(outer.direction(), inner.direction());
  std::vector<double> out(outer.values().size());
  warp_channels(outer.values(), 3, outer.shape(), inner.values(), out, boundary);
  const auto in = inner.values();
  for (std::size_t n = 0; n < out.size(); ++n) out[n] += in[n];
  return DenseDisplacementField(outer.shape(), dir, std::move(out));
}

ComposeGradients compose_backward(const DenseDisplacementField& outer, const DenseDisplacementField& inner,
                                  const DenseDisplacementField& grad_result) {
  require_same_shape(outer.shape(), inner.shape(), "compose outer vs inner");
  require_same_shape(grad_result.shape(), inner.shape(), "compose gradient vs inner");
  DenseDisplacementField g_outer(outer.shape(), outer.direction());
  DenseDisplacementField g_inner(inner.shape(), inner.direction(),
                                 std::vector<double>(grad_result.values().begin(), grad_result.values().end()));
  warp_channels_backward(outer.values(), 3, outer.shape(), inner.values(), grad_result.values(), g_outer.values(),
                         g_inner.values());
  return {std::move(g_outer), std::move(g_inner)};
}

DenseDisplacementField invert_ddf(const DenseDisplacementField& ddf, int iterations, Boundary boundary) {
  const Shape3& s = ddf.shape();
  DenseDisplacementField inv(s, Direction::Composed);
  std::vector<double> sampled(ddf.values().size());
  for (int it = 0; it < iterations; ++it) {
    // v(x) <- -u(x + v(x))
    warp_channels(ddf.values(), 3, s, inv.values(), sampled, boundary);
    auto out = inv.values();
    for (std::size_t n = 0; n < sampled.size(); ++n) out[n] = -sampled[n];
  }
  return inv;
}

AffineTransform random_affine(std::mt19937_64& rng, double magnitude, const Shape3& grid) {
  if (!(magnitude > 0.0) || magnitude > 0.5) {
    fail(ErrorKind::InvalidArgument, "affine magnitude must lie in (0, 0.5]");
  }
  const Vec3 ext{double(grid.d - 1), double(grid.h - 1), double(grid.w - 1)};
  Eigen::Matrix4d src;
  src << 0, 0, 0, 1,
         ext[0], 0, 0, 1,
         0, ext[1], 0, 1,
         0, 0, ext[2], 1;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int attempt = 0; attempt < 100; ++attempt) {
    Eigen::Matrix<double, 4, 3> dst;
    for (int c = 0; c < 4; ++c) {
      for (int a = 0; a < 3; ++a) dst(c, a) = src(c, a) + magnitude * ext[a] * unit(rng);
    }
    // src * M^T = dst, solved exactly (four non-coplanar corners)
    const Eigen::Matrix<double, 4, 3> mt = src.partialPivLu().solve(dst);
    AffineTransform::Matrix m = mt.transpose();
    const double det = m.leftCols<3>().determinant();
    if (std::isfinite(det) && det > 0.1) return AffineTransform(m, AffineProvenance::RandomCorner);
  }
  fail(ErrorKind::DegenerateAffine, "no invertible affine after 100 draws");
}

AffineTransform random_affine(std::uint64_t seed, double magnitude, const Shape3& grid) {
  std::mt19937_64 rng(seed);
  return random_affine(rng, magnitude, grid);
}

JacobianMap jacobian_det(const DenseDisplacementField& ddf) {
  const Shape3& s = ddf.shape();
  if (s.d < 3 || s.h < 3 || s.w < 3) fail(ErrorKind::InvalidArgument, "jacobian needs at least 3 voxels per axis");
  JacobianMap out{s, std::vector<double>(s.voxels())};
  auto deriv = [&](int i, int j, int k, int axis, int comp) {
    int lo[3] = {i, j, k}, hi[3] = {i, j, k};
    const int n = s[axis];
    int pos = axis == 0 ? i : (axis == 1 ? j : k);
    double h = 2.0;
    if (pos == 0) {
      hi[axis] = 1;
      h = 1.0;
    } else if (pos == n - 1) {
      lo[axis] = n - 2;
      h = 1.0;
    } else {
      lo[axis] = pos - 1;
      hi[axis] = pos + 1;
    }
    return (ddf.component(s.index(hi[0], hi[1], hi[2]), comp) - ddf.component(s.index(lo[0], lo[1], lo[2]), comp)) / h;
  };
  std::size_t n = 0;
  for (int i = 0; i < s.d; ++i) {
    for (int j = 0; j < s.h; ++j) {
      for (int k = 0; k < s.w; ++k, ++n) {
        Eigen::Matrix3d J = Eigen::Matrix3d::Identity();
        for (int c = 0; c < 3; ++c) {
          for (int a = 0; a < 3; ++a) J(c, a) += deriv(i, j, k, a, c);
        }
        out.det[n] = J.determinant();
      }
    }
  }
  return out;
}

Volume gaussian_smooth(const Volume& v, double sigma) {
  if (!(sigma > 0.0)) return v;
  const auto kern = gaussian_kernel(sigma);
  std::vector<double> data(v.values().begin(), v.values().end());
  for (int axis = 0; axis < 3; ++axis) blur_axis(data, 1, v.shape(), axis, kern);
  return v.with_values(std::move(data));
}

DenseDisplacementField gaussian_smooth(const DenseDisplacementField& f, double sigma) {
  if (!(sigma > 0.0)) return f;
  const auto kern = gaussian_kernel(sigma);
  std::vector<double> data(f.values().begin(), f.values().end());
  for (int axis = 0; axis < 3; ++axis) blur_axis(data, 3, f.shape(), axis, kern);
  return DenseDisplacementField(f.shape(), f.direction(), std::move(data));
}

DenseDisplacementField resize_ddf(const DenseDisplacementField& f, const Shape3& target) {
  const Shape3& s = f.shape();
  Vec3 ratio;
  for (int a = 0; a < 3; ++a) ratio[a] = target[a] > 1 ? double(s[a] - 1) / double(target[a] - 1) : 1.0;
  DenseDisplacementField out(target, f.direction());
  Stencil st;
  std::size_t n = 0;
  const auto src = f.values();
  for (int i = 0; i < target.d; ++i) {
    for (int j = 0; j < target.h; ++j) {
      for (int k = 0; k < target.w; ++k, ++n) {
        make_stencil<false>(s, i * ratio[0], j * ratio[1], k * ratio[2], Boundary::Clamp, st);
        for (int c = 0; c < 3; ++c) {
          double acc = 0.0;
          for (int q = 0; q < 8; ++q) {
            if (st.valid[q]) acc += st.w[q] * src[st.idx[q] * 3 + c];
          }
          out.component(n, c) = acc / ratio[c];
        }
      }
    }
  }
  return out;
}

Volume resize_volume(const Volume& v, const Shape3& target) {
  const Shape3& s = v.shape();
  Vec3 ratio;
  double max_ratio = 1.0;
  for (int a = 0; a < 3; ++a) {
    ratio[a] = target[a] > 1 ? double(s[a] - 1) / double(target[a] - 1) : 1.0;
    max_ratio = std::max(max_ratio, ratio[a]);
  }
  const Volume src = max_ratio > 1.0 ? gaussian_smooth(v, 0.5 * max_ratio) : v;
  Volume out(target, {v.spacing()[0] * ratio[0], v.spacing()[1] * ratio[1], v.spacing()[2] * ratio[2]},
             v.modality());
  for (int i = 0; i < target.d; ++i) {
    for (int j = 0; j < target.h; ++j) {
      for (int k = 0; k < target.w; ++k) {
        out.at(i, j, k) = sample_trilinear(src, i * ratio[0], j * ratio[1], k * ratio[2], Boundary::Clamp);
      }
    }
  }
  return out;
}

DenseDisplacementField operator+(const DenseDisplacementField& a, const DenseDisplacementField& b) {
  require_same_shape(a.shape(), b.shape(), "ddf sum");
  std::vector<double> out(a.values().size());
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = a.values()[n] + b.values()[n];
  return DenseDisplacementField(a.shape(), Direction::Composed, std::move(out));
}

DenseDisplacementField operator*(double s, const DenseDisplacementField& a) {
  std::vector<double> out(a.values().size());
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = s * a.values()[n];
  return DenseDisplacementField(a.shape(), a.direction(), std::move(out));
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined word
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace privreg
