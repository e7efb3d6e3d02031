#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "privreg/error.hpp"
#include "privreg/geometry.hpp"
#include "privreg/preprocess.hpp"
#include "privreg/volume.hpp"

namespace testing {

using namespace privreg;

inline Volume random_volume(const Shape3& s, std::uint64_t seed, Modality m = Modality::Synth) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Volume v(s, {1.0, 1.0, 1.0}, m);
  for (double& x : v.values()) x = u(rng);
  return v;
}

// Blurred noise rescaled to [0,1].
inline Volume smooth_volume(const Shape3& s, std::uint64_t seed, double sigma = 2.0) {
  return normalize(gaussian_smooth(random_volume(s, seed), sigma));
}

inline DenseDisplacementField smooth_field(const Shape3& s, std::uint64_t seed, double amplitude,
                                           double sigma = 3.0, Direction d = Direction::Composed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  DenseDisplacementField f(s, d);
  for (double& x : f.values()) x = n(rng);
  f = gaussian_smooth(f, sigma);
  const double m = f.max_abs();
  DenseDisplacementField out = (amplitude / m) * f;
  out.set_direction(d);
  return out;
}

inline Volume ramp(const Shape3& s, int axis, double scale = 1.0) {
  Volume v(s, {1.0, 1.0, 1.0}, Modality::Synth);
  for (int i = 0; i < s.d; ++i)
    for (int j = 0; j < s.h; ++j)
      for (int k = 0; k < s.w; ++k) {
        const int p[3] = {i, j, k};
        v.at(i, j, k) = scale * p[axis];
      }
  return v;
}

inline double max_abs_diff(const Volume& a, const Volume& b) {
  double m = 0.0;
  for (std::size_t n = 0; n < a.size(); ++n) m = std::max(m, std::abs(a[n] - b[n]));
  return m;
}

inline double max_abs_diff(const DenseDisplacementField& a, const DenseDisplacementField& b) {
  double m = 0.0;
  for (std::size_t n = 0; n < a.values().size(); ++n) m = std::max(m, std::abs(a.values()[n] - b.values()[n]));
  return m;
}

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path = std::filesystem::temp_directory_path() / ("privreg_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

template <typename F>
ErrorKind error_kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  throw std::runtime_error("expected a privreg::Error");
}

}  // namespace testing
