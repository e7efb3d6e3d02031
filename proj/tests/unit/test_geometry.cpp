#include <doctest.h>

#include <cmath>

#include "helpers.hpp"

using namespace privreg;
using namespace testing;

namespace {

const Shape3 kGrid{10, 9, 8};

// Random fractional field so finite differences never straddle a trilinear kink.
DenseDisplacementField fractional_field(const Shape3& s, std::uint64_t seed) {
  DenseDisplacementField f = smooth_field(s, seed, 1.6, 2.0);
  std::mt19937_64 rng(seed + 99);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (double& x : f.values()) x += u(rng);
  return f;
}

double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale < 1e-10 ? 0.0 : std::abs(a - b) / scale;
}

}  // namespace

TEST_SUITE("geometry") {
  TEST_CASE("zero field warp is the identity") {
    const Volume v = random_volume(kGrid, 1);
    CHECK(max_abs_diff(warp(v, DenseDisplacementField(kGrid, Direction::Composed)), v) == 0.0);
  }

  TEST_CASE("unit shift reads the next slab and zero beyond the edge") {
    const Volume v = random_volume(kGrid, 2);
    const Volume w = warp(v, DenseDisplacementField::constant(kGrid, {1.0, 0.0, 0.0}));
    for (int i = 0; i < kGrid.d; ++i)
      for (int j = 0; j < kGrid.h; ++j)
        for (int k = 0; k < kGrid.w; ++k)
          CHECK(w.at(i, j, k) == (i + 1 < kGrid.d ? v.at(i + 1, j, k) : 0.0));
  }

  TEST_CASE("half-voxel shift of a ramp is exact") {
    const Volume r = ramp(kGrid, 0, 1.0 / kGrid.d);
    const Volume w = warp(r, DenseDisplacementField::constant(kGrid, {0.5, 0.0, 0.0}));
    for (int i = 0; i + 1 < kGrid.d; ++i) CHECK(w.at(i, 3, 3) == doctest::Approx((i + 0.5) / kGrid.d).epsilon(1e-14));
  }

  TEST_CASE("warp is linear in the volume") {
    const Volume a = random_volume(kGrid, 3), b = random_volume(kGrid, 4);
    const auto mu = fractional_field(kGrid, 5);
    std::vector<double> mix(a.size());
    for (std::size_t n = 0; n < mix.size(); ++n) mix[n] = 0.7 * a[n] - 1.3 * b[n];
    const Volume lhs = warp(a.with_values(mix), mu);
    const Volume wa = warp(a, mu), wb = warp(b, mu);
    double err = 0.0;
    for (std::size_t n = 0; n < mix.size(); ++n) err = std::max(err, std::abs(lhs[n] - (0.7 * wa[n] - 1.3 * wb[n])));
    CHECK(err < 1e-14);
  }

  TEST_CASE("warp rejects a field on another grid") {
    const Volume v = random_volume(kGrid, 6);
    CHECK(error_kind_of([&] { warp(v, DenseDisplacementField({10, 9, 7}, Direction::Composed)); }) ==
          ErrorKind::GridMismatch);
  }

  TEST_CASE("warp gradients match central differences") {
    const Volume v = smooth_volume(kGrid, 7);
    const auto mu = fractional_field(kGrid, 8);
    const Volume weights = random_volume(kGrid, 9);
    auto loss = [&](const Volume& vol, const DenseDisplacementField& f) {
      const Volume w = warp(vol, f);
      double s = 0.0;
      for (std::size_t n = 0; n < w.size(); ++n) s += weights[n] * w[n];
      return s;
    };
    const WarpGradients g = warp_backward(v, mu, weights);
    std::mt19937_64 rng(10);
    std::uniform_int_distribution<std::size_t> pick(0, kGrid.voxels() - 1);
    const double h = 1e-6;
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
      const std::size_t n = pick(rng);
      const int c = t % 3;
      auto plus = mu, minus = mu;
      plus.component(n, c) += h;
      minus.component(n, c) -= h;
      const double fd = (loss(v, plus) - loss(v, minus)) / (2 * h);
      worst = std::max(worst, relative_error(g.ddf.component(n, c), fd));
      Volume vp = v, vm = v;
      vp[n] += h;
      vm[n] -= h;
      const double fdv = (loss(vp, mu) - loss(vm, mu)) / (2 * h);
      worst = std::max(worst, relative_error(g.volume[n], fdv));
    }
    CHECK(worst < 1e-3);
  }

  TEST_CASE("warp_backward can skip the volume gradient") {
    const Volume v = smooth_volume(kGrid, 11);
    const auto mu = fractional_field(kGrid, 12);
    const Volume up = random_volume(kGrid, 13);
    const auto full = warp_backward(v, mu, up);
    const auto lean = warp_backward(v, mu, up, false);
    CHECK(lean.volume.size() == 0);
    CHECK(max_abs_diff(full.ddf, lean.ddf) == 0.0);
  }

  TEST_CASE("affine fields") {
    CHECK(affine_to_ddf(AffineTransform::identity(), kGrid).max_abs() == 0.0);
    const auto t = affine_to_ddf(AffineTransform::translation({1.5, -2.0, 0.25}), kGrid);
    for (std::size_t n = 0; n < kGrid.voxels(); ++n) {
      CHECK(t.at(n)[0] == 1.5);
      CHECK(t.at(n)[1] == -2.0);
      CHECK(t.at(n)[2] == 0.25);
    }
    const Shape3 g{9, 9, 9};
    const Vec3 c{4.0, 4.0, 4.0};
    const auto s = affine_to_ddf(AffineTransform::scaling(1.1, c), g);
    CHECK(s.at(4, 4, 4)[0] == doctest::Approx(0.0).scale(1.0));
    const Vec3 corner = s.at(8, 0, 8);
    CHECK(corner[0] == doctest::Approx(0.4));
    CHECK(corner[1] == doctest::Approx(-0.4));
    CHECK(corner[2] == doctest::Approx(0.4));
  }

  TEST_CASE("composition identities") {
    const auto mu = smooth_field(kGrid, 14, 1.5);
    const DenseDisplacementField zero(kGrid, Direction::Composed);
    CHECK(max_abs_diff(compose(zero, mu), mu) == 0.0);
    CHECK(max_abs_diff(compose(mu, zero), mu) < 1e-15);
    const auto t1 = DenseDisplacementField::constant(kGrid, {1.0, 0.5, -0.25});
    const auto t2 = DenseDisplacementField::constant(kGrid, {-0.5, 0.25, 0.75});
    const auto t12 = compose(t1, t2, Boundary::Clamp);
    for (std::size_t n = 0; n < kGrid.voxels(); ++n) {
      CHECK(t12.at(n)[0] == doctest::Approx(0.5));
      CHECK(t12.at(n)[1] == doctest::Approx(0.75));
      CHECK(t12.at(n)[2] == doctest::Approx(0.5));
    }
  }

  TEST_CASE("composition follows direction tags") {
    const auto mp = smooth_field(kGrid, 15, 1.0, 3.0, Direction::MovingFromPrivileged);
    const auto pf = smooth_field(kGrid, 16, 1.0, 3.0, Direction::PrivilegedFromFixed);
    CHECK(compose(mp, pf).direction() == Direction::MovingFromFixed);
    CHECK(error_kind_of([&] { compose(pf, mp); }) == ErrorKind::DirectionMismatch);
  }

  TEST_CASE("warping by a composition matches two warps on smooth inputs") {
    const Shape3 g{16, 16, 16};
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const Volume v = smooth_volume(g, 20 + seed, 2.5);
      const auto a = smooth_field(g, 30 + seed, 1.5, 3.0);
      const auto b = smooth_field(g, 40 + seed, 1.5, 3.0);
      const Volume once = warp(v, compose(a, b));
      const Volume twice = warp(warp(v, a), b);
      double err = 0.0;
      // stay clear of the zero-padded margin
      for (int i = 3; i < g.d - 3; ++i)
        for (int j = 3; j < g.h - 3; ++j)
          for (int k = 3; k < g.w - 3; ++k) err = std::max(err, std::abs(once.at(i, j, k) - twice.at(i, j, k)));
      CHECK(err < 2 * 0.05);
    }
  }

  TEST_CASE("compose gradients match central differences") {
    const Shape3 g{8, 7, 6};
    const auto outer = fractional_field(g, 50);
    const auto inner = fractional_field(g, 51);
    DenseDisplacementField w(g, Direction::Composed);
    {
      std::mt19937_64 rng(52);
      std::normal_distribution<double> n(0.0, 1.0);
      for (double& x : w.values()) x = n(rng);
    }
    auto loss = [&](const DenseDisplacementField& o, const DenseDisplacementField& i) {
      const auto r = compose(o, i);
      double s = 0.0;
      for (std::size_t n = 0; n < r.values().size(); ++n) s += w.values()[n] * r.values()[n];
      return s;
    };
    const auto grads = compose_backward(outer, inner, w);
    std::mt19937_64 rng(53);
    std::uniform_int_distribution<std::size_t> pick(0, g.voxels() - 1);
    const double h = 1e-6;
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
      const std::size_t n = pick(rng);
      const int c = t % 3;
      auto op = outer, om = outer, ip = inner, im = inner;
      op.component(n, c) += h;
      om.component(n, c) -= h;
      ip.component(n, c) += h;
      im.component(n, c) -= h;
      worst = std::max(worst, relative_error(grads.outer.component(n, c), (loss(op, inner) - loss(om, inner)) / (2 * h)));
      worst = std::max(worst, relative_error(grads.inner.component(n, c), (loss(outer, ip) - loss(outer, im)) / (2 * h)));
    }
    CHECK(worst < 1e-3);
  }

  TEST_CASE("composing with the numerical inverse nearly cancels") {
    const Shape3 g{16, 16, 14};
    const auto mu = smooth_field(g, 60, 1.0, 4.0);
    const auto inv = invert_ddf(mu, 40, Boundary::Clamp);
    const auto id = compose(mu, inv, Boundary::Clamp);
    CHECK(id.max_norm() < 0.1);
  }

  TEST_CASE("random affine corners stay within the magnitude") {
    const Shape3 g{32, 32, 28};
    const double m = 0.1;
    const Vec3 ext{31.0, 31.0, 27.0};
    const Vec3 corners[4] = {{0, 0, 0}, {31, 0, 0}, {0, 31, 0}, {0, 0, 27}};
    std::mt19937_64 rng(70);
    const int draws = 10000;
    double mean[4][3] = {};
    bool inside = true;
    for (int d = 0; d < draws; ++d) {
      const AffineTransform a = random_affine(rng, m, g);
      CHECK_FALSE(a.linear_determinant() <= 0.0);
      for (int c = 0; c < 4; ++c) {
        const Vec3 y = a.apply(corners[c]);
        for (int ax = 0; ax < 3; ++ax) {
          const double disp = y[ax] - corners[c][ax];
          inside = inside && std::abs(disp) <= m * ext[ax] + 1e-9;
          mean[c][ax] += disp / draws;
        }
      }
    }
    CHECK(inside);
    for (int c = 0; c < 4; ++c)
      for (int ax = 0; ax < 3; ++ax) {
        const double sd = m * ext[ax] / std::sqrt(3.0) / std::sqrt(double(draws));
        CHECK(std::abs(mean[c][ax]) < 3 * sd);
      }
  }

  TEST_CASE("random affine is deterministic and tends to the identity") {
    const auto a = random_affine(std::uint64_t{5}, 0.1, kGrid);
    const auto b = random_affine(std::uint64_t{5}, 0.1, kGrid);
    CHECK(a.matrix() == b.matrix());
    CHECK(a.provenance() == AffineProvenance::RandomCorner);
    const auto tiny = random_affine(std::uint64_t{5}, 1e-12, kGrid);
    CHECK((tiny.matrix() - AffineTransform::identity().matrix()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(error_kind_of([&] { random_affine(std::uint64_t{1}, 0.6, kGrid); }) == ErrorKind::InvalidArgument);
  }

  TEST_CASE("a flat grid cannot define a corner affine") {
    CHECK(error_kind_of([&] { random_affine(std::uint64_t{1}, 0.1, Shape3{1, 5, 5}); }) == ErrorKind::DegenerateAffine);
  }

  TEST_CASE("jacobian determinants") {
    const auto z = jacobian_det(DenseDisplacementField(kGrid, Direction::Composed));
    for (double d : z.det) CHECK(d == 1.0);

    DenseDisplacementField scale(kGrid, Direction::Composed), fold(kGrid, Direction::Composed);
    for (int i = 0; i < kGrid.d; ++i)
      for (int j = 0; j < kGrid.h; ++j)
        for (int k = 0; k < kGrid.w; ++k) {
          const std::size_t n = kGrid.index(i, j, k);
          scale.set(n, {0.1 * i, 0.1 * j, 0.1 * k});
          fold.set(n, {-2.0 * i, 0.0, 0.0});
        }
    const auto js = jacobian_det(scale);
    const auto jf = jacobian_det(fold);
    for (int i = 1; i < kGrid.d - 1; ++i)
      for (int j = 1; j < kGrid.h - 1; ++j)
        for (int k = 1; k < kGrid.w - 1; ++k) {
          CHECK(js.det[kGrid.index(i, j, k)] == doctest::Approx(1.331).epsilon(1e-12));
          CHECK(jf.det[kGrid.index(i, j, k)] == doctest::Approx(-1.0).epsilon(1e-12));
        }
  }

  TEST_CASE("jacobian of an affine field equals its linear determinant") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto a = random_affine(seed, 0.2, kGrid);
      const auto j = jacobian_det(affine_to_ddf(a, kGrid));
      double err = 0.0;
      for (int i = 1; i < kGrid.d - 1; ++i)
        for (int jj = 1; jj < kGrid.h - 1; ++jj)
          for (int k = 1; k < kGrid.w - 1; ++k)
            err = std::max(err, std::abs(j.det[kGrid.index(i, jj, k)] - a.linear_determinant()));
      CHECK(err < 1e-6);
    }
  }

  TEST_CASE("pyramid resize keeps a translation in voxel units of each grid") {
    const Shape3 fine{17, 17, 13}, coarse{9, 9, 7};
    const auto t = DenseDisplacementField::constant(coarse, {1.0, -0.5, 0.5});
    const auto up = resize_ddf(t, fine);
    CHECK(up.at(8, 8, 6)[0] == doctest::Approx(2.0));
    CHECK(up.at(8, 8, 6)[1] == doctest::Approx(-1.0));
    CHECK(up.at(8, 8, 6)[2] == doctest::Approx(1.0));
  }
}
