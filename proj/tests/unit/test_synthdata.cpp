#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "privreg/evaluation.hpp"
#include "privreg/similarity.hpp"
#include "privreg/synthdata.hpp"
#include "privreg/vol_io.hpp"

using namespace privreg;
using namespace testing;

namespace {

PhantomConfig small_config(std::uint64_t seed) {
  PhantomConfig c;
  c.grid_shape = {24, 24, 20};
  c.seed = seed;
  return c;
}

}  // namespace

TEST_SUITE("synthdata") {
  TEST_CASE("phantoms are deterministic in the seed") {
    const StudyTrio a = make_phantom(small_config(3));
    const StudyTrio b = make_phantom(small_config(3));
    const StudyTrio c = make_phantom(small_config(4));
    CHECK(max_abs_diff(a.moving, b.moving) == 0.0);
    CHECK(max_abs_diff(a.privileged, b.privileged) == 0.0);
    CHECK(max_abs_diff(*a.gt_ddf, *b.gt_ddf) == 0.0);
    CHECK(max_abs_diff(a.fixed, c.fixed) > 0.0);
  }

  TEST_CASE("a phantom is a complete, normalized trio") {
    const StudyTrio t = make_phantom(small_config(5));
    CHECK(t.moving.modality() == Modality::DwiHighB);
    CHECK(t.fixed.modality() == Modality::T2W);
    CHECK(t.privileged.modality() == Modality::DwiB0);
    for (const Volume* v : {&t.moving, &t.fixed, &t.privileged}) {
      const auto [lo, hi] = v->intensity_range();
      CHECK(lo == 0.0);
      CHECK(hi == 1.0);
    }
    REQUIRE(t.gt_ddf.has_value());
    CHECK(t.gt_ddf->direction() == Direction::MovingFromFixed);
    CHECK(t.landmarks_fixed.size() == t.landmarks_moving.size());
    CHECK(t.landmarks_fixed.size() >= 1);
    CHECK(t.landmarks_fixed.size() <= 3);
  }

  TEST_CASE("ground-truth fields do not fold") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const StudyTrio t = make_phantom(small_config(10 + s));
      const auto j = jacobian_det(*t.gt_ddf);
      CHECK(*std::min_element(j.det.begin(), j.det.end()) > 0.0);
    }
  }

  TEST_CASE("warping by the ground truth aligns the images and the landmarks") {
    for (std::uint64_t s = 0; s < 4; ++s) {
      const StudyTrio t = make_phantom(small_config(20 + s));
      const Volume aligned = warp(t.moving, *t.gt_ddf);
      CHECK(mutual_information(t.fixed, aligned) > mutual_information(t.fixed, t.moving));
      for (std::size_t p = 0; p < t.landmarks_fixed.size(); ++p) {
        const Vec3 cf = landmark_centroid(t.landmarks_fixed[p].mask, {1, 1, 1});
        const Vec3 cm = landmark_centroid(warp(t.landmarks_moving[p].mask, *t.gt_ddf), {1, 1, 1});
        const double err = std::hypot(cf[0] - cm[0], cf[1] - cm[1], cf[2] - cm[2]);
        CHECK(err < 0.3);
      }
    }
  }

  TEST_CASE("zero amplitudes give identical geometry") {
    PhantomConfig c = small_config(30);
    c.motion_amplitude = 0.0;
    c.residual_amplitude = 0.0;
    c.distortion_amplitude = 0.0;
    const StudyTrio t = make_phantom(c);
    CHECK(t.gt_ddf->max_abs() == 0.0);
    for (std::size_t p = 0; p < t.landmarks_fixed.size(); ++p)
      CHECK(max_abs_diff(t.landmarks_fixed[p].mask, t.landmarks_moving[p].mask) == 0.0);
  }

  TEST_CASE("invalid phantom configurations are rejected") {
    auto kind = [](auto mutate) {
      PhantomConfig c = small_config(1);
      mutate(c);
      return error_kind_of([&] { make_phantom(c); });
    };
    CHECK(kind([](PhantomConfig& c) { c.grid_shape = {4, 24, 24}; }) == ErrorKind::InvalidArgument);
    CHECK(kind([](PhantomConfig& c) { c.n_structures = 0; }) == ErrorKind::InvalidArgument);
    CHECK(kind([](PhantomConfig& c) { c.max_tumors = 4; }) == ErrorKind::InvalidArgument);
    CHECK(kind([](PhantomConfig& c) { c.residual_amplitude = c.motion_amplitude; }) == ErrorKind::InvalidArgument);
    CHECK(kind([](PhantomConfig& c) { c.noise.high_b = c.noise.b0; }) == ErrorKind::InvalidArgument);
    CHECK(kind([](PhantomConfig& c) { c.smoothness = 0.0; }) == ErrorKind::InvalidArgument);
  }

  TEST_CASE("phantom config json round trip") {
    PhantomConfig c = small_config(77);
    c.noise.high_b = 0.2;
    c.max_tumors = 2;
    const PhantomConfig r = phantom_config_from_json(to_json(c));
    CHECK(to_json(r) == to_json(c));
  }

  TEST_CASE("datasets are written per split and reload") {
    TempDir dir("synth");
    PhantomConfig c;
    c.grid_shape = {16, 16, 16};
    const DatasetManifest m = make_dataset(dir.path, 2, 1, 1, c, 9);
    CHECK(m.splits.at("train").size() == 2);
    CHECK(m.study_seeds.size() == 4);
    const DatasetManifest back = read_dataset_manifest(dir.path);
    CHECK(back.to_json() == m.to_json());
    const auto train = load_split(dir.path, "train");
    REQUIRE(train.size() == 2);
    CHECK(train[0].study_id == "train_0000");
    PhantomConfig c0 = c;
    c0.seed = m.study_seeds.at("train_0000");
    CHECK(max_abs_diff(train[0].moving, make_phantom(c0).moving) == 0.0);
    const auto bare = load_split(dir.path, "holdout", LoadOptions{false, false, false});
    CHECK(bare[0].privileged.size() == 0);
    CHECK(bare[0].landmarks_fixed.empty());
    CHECK(error_kind_of([&] { load_split(dir.path, "test"); }) == ErrorKind::InvalidArgument);
  }
}
