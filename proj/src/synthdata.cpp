#include "privreg/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>

#include "privreg/error.hpp"
#include "privreg/geometry.hpp"
#include "privreg/preprocess.hpp"

namespace privreg {

namespace fs = std::filesystem;
using nlohmann::json;

void PhantomConfig::validate() const {
  if (!grid_shape.positive()) fail(ErrorKind::InvalidArgument, "phantom grid must be positive");
  if (std::min({grid_shape.d, grid_shape.h, grid_shape.w}) < 8)
    fail(ErrorKind::InvalidArgument, "phantom grid must be at least 8 voxels per axis");
  if (n_structures < 1 || n_structures > 5) fail(ErrorKind::InvalidArgument, "n_structures must be in [1,5]");
  if (min_tumors < 1 || max_tumors > 3 || min_tumors > max_tumors)
    fail(ErrorKind::InvalidArgument, "tumor count range must lie in [1,3]");
  for (double a : {distortion_amplitude, motion_amplitude, residual_amplitude, noise.t2w, noise.b0, noise.high_b}) {
    if (!(a >= 0.0) || !std::isfinite(a)) fail(ErrorKind::InvalidArgument, "amplitudes and noise must be >= 0");
  }
  // both zero is the degenerate identical-geometry config
  if (residual_amplitude >= motion_amplitude && !(residual_amplitude == 0.0 && motion_amplitude == 0.0))
    fail(ErrorKind::InvalidArgument, "residual_amplitude must be smaller than motion_amplitude");
  const bool silent = noise.t2w == 0.0 && noise.b0 == 0.0 && noise.high_b == 0.0;
  if (noise.high_b <= noise.b0 && !silent)
    fail(ErrorKind::InvalidArgument, "high_b noise must exceed b0 noise");
  if (!(smoothness > 0.0)) fail(ErrorKind::InvalidArgument, "smoothness must be positive");
}

json to_json(const PhantomConfig& c) {
  return {{"grid_shape", {c.grid_shape.d, c.grid_shape.h, c.grid_shape.w}},
          {"n_structures", c.n_structures},
          {"min_tumors", c.min_tumors},
          {"max_tumors", c.max_tumors},
          {"noise_sigma", {{"t2w", c.noise.t2w}, {"b0", c.noise.b0}, {"high_b", c.noise.high_b}}},
          {"distortion_amplitude", c.distortion_amplitude},
          {"motion_amplitude", c.motion_amplitude},
          {"residual_amplitude", c.residual_amplitude},
          {"smoothness", c.smoothness},
          {"seed", c.seed}};
}

PhantomConfig phantom_config_from_json(const json& j) {
  PhantomConfig c;
  if (j.contains("grid_shape")) {
    const auto g = j.at("grid_shape").get<std::vector<int>>();
    if (g.size() != 3) fail(ErrorKind::InvalidArgument, "grid_shape needs three entries");
    c.grid_shape = {g[0], g[1], g[2]};
  }
  c.n_structures = j.value("n_structures", c.n_structures);
  c.min_tumors = j.value("min_tumors", c.min_tumors);
  c.max_tumors = j.value("max_tumors", c.max_tumors);
  if (j.contains("noise_sigma")) {
    const auto& n = j.at("noise_sigma");
    c.noise.t2w = n.value("t2w", c.noise.t2w);
    c.noise.b0 = n.value("b0", c.noise.b0);
    c.noise.high_b = n.value("high_b", c.noise.high_b);
  }
  c.distortion_amplitude = j.value("distortion_amplitude", c.distortion_amplitude);
  c.motion_amplitude = j.value("motion_amplitude", c.motion_amplitude);
  c.residual_amplitude = j.value("residual_amplitude", c.residual_amplitude);
  c.smoothness = j.value("smoothness", c.smoothness);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

// Structure order for contrast tables: background, body, bladder, rectum,
// peripheral gland, central gland, tumor.
constexpr int kTissues = 7;
using Contrast = std::array<double, kTissues>;
constexpr Contrast kT2w{0.00, 0.35, 0.95, 0.20, 0.75, 0.45, 0.15};
constexpr Contrast kB0{0.00, 0.40, 0.85, 0.25, 0.70, 0.50, 0.55};
constexpr Contrast kHighB{0.00, 0.30, 0.06, 0.15, 0.45, 0.35, 1.00};

constexpr double kEdge = 0.5;  // soft edge width, voxels
constexpr double kLandmarkRadius = 2.0;

struct Ellipsoid {
  Vec3 centre;
  Vec3 radii;
  int tissue;
};

double membership(const Ellipsoid& e, const Vec3& p) {
  double q = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double t = (p[a] - e.centre[a]) / e.radii[a];
    q += t * t;
  }
  const double rmin = std::min({e.radii[0], e.radii[1], e.radii[2]});
  const double sd = (std::sqrt(q) - 1.0) * rmin;
  return 1.0 / (1.0 + std::exp(sd / kEdge));
}

struct Anatomy {
  std::vector<Ellipsoid> parts;  // painted in order
  std::vector<std::pair<Vec3, LandmarkKind>> landmark_candidates;
};

Anatomy draw_anatomy(const PhantomConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Shape3& g = cfg.grid_shape;
  const Vec3 c{(g.d - 1) / 2.0, (g.h - 1) / 2.0, (g.w - 1) / 2.0};
  const Vec3 half{g.d / 2.0, g.h / 2.0, g.w / 2.0};
  auto make = [&](Vec3 off, Vec3 rad, int tissue) {
    Ellipsoid e;
    for (int a = 0; a < 3; ++a) {
      e.centre[a] = c[a] + off[a] * half[a] + 1.0 * u(rng);
      e.radii[a] = std::max(1.0, rad[a] * half[a] * (1.0 + 0.1 * u(rng)));
    }
    e.tissue = tissue;
    return e;
  };
  // axis 0 runs superior->inferior, axis 1 anterior->posterior
  const std::array<Ellipsoid, 5> organs{
      make({0.0, 0.0, 0.0}, {0.85, 0.85, 0.80}, 1), make({-0.45, -0.15, 0.0}, {0.28, 0.35, 0.40}, 2),
      make({0.10, 0.50, 0.0}, {0.45, 0.15, 0.15}, 3), make({0.15, 0.0, 0.0}, {0.30, 0.28, 0.35}, 4),
      make({0.15, -0.05, 0.0}, {0.17, 0.16, 0.20}, 5)};
  Anatomy a;
  for (int s = 0; s < cfg.n_structures; ++s) a.parts.push_back(organs[s]);

  const Ellipsoid& pz = organs[3];
  const Ellipsoid& cz = organs[4];
  const int n_tumors = std::uniform_int_distribution<int>(cfg.min_tumors, cfg.max_tumors)(rng);
  for (int t = 0; t < n_tumors; ++t) {
    Vec3 d;
    do {
      d = {u(rng), u(rng), u(rng)};
    } while (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] > 1.0);
    Ellipsoid e;
    const double r = 1.5 + 0.5 * (u(rng) + 1.0);
    for (int k = 0; k < 3; ++k) {
      e.centre[k] = pz.centre[k] + 0.55 * d[k] * pz.radii[k];
      e.radii[k] = r;
    }
    e.tissue = 6;
    a.parts.push_back(e);
    a.landmark_candidates.push_back({e.centre, LandmarkKind::Tumor});
  }
  a.landmark_candidates.push_back({cz.centre, LandmarkKind::Urethra});
  a.landmark_candidates.push_back({{cz.centre[0], cz.centre[1], cz.centre[2] + cz.radii[2]}, LandmarkKind::Zonal});
  return a;
}

double render_point(const Anatomy& a, const Contrast& lut, const Vec3& p) {
  double v = lut[0];
  for (const auto& e : a.parts) {
    const double m = membership(e, p);
    v = v * (1.0 - m) + lut[e.tissue] * m;
  }
  return v;
}

// position sampled for output voxel n: x + field(x), or x when field is empty
Vec3 source_point(const Shape3& g, std::size_t n, const DenseDisplacementField* field) {
  const int k = int(n % std::size_t(g.w));
  const int j = int((n / std::size_t(g.w)) % std::size_t(g.h));
  const int i = int(n / (std::size_t(g.w) * std::size_t(g.h)));
  Vec3 p{double(i), double(j), double(k)};
  if (field) {
    const Vec3 d = field->at(n);
    for (int c = 0; c < 3; ++c) p[c] += d[c];
  }
  return p;
}

Volume render(const Anatomy& a, const Contrast& lut, const Shape3& g, const DenseDisplacementField* inverse,
              double noise_sigma, Modality modality, std::mt19937_64& rng) {
  std::vector<double> out(g.voxels());
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t n = 0; n < out.size(); ++n) {
    out[n] = render_point(a, lut, source_point(g, n, inverse));
    // always draw so the noise stream does not depend on sigma
    const double z = noise(rng);
    out[n] += noise_sigma * z;
  }
  return round_to_storage(normalize(Volume(g, {1.0, 1.0, 1.0}, modality, std::move(out))));
}

Volume render_sphere(const Vec3& centre, const Shape3& g, const DenseDisplacementField* inverse) {
  const Ellipsoid e{centre, {kLandmarkRadius, kLandmarkRadius, kLandmarkRadius}, 0};
  std::vector<double> out(g.voxels());
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = membership(e, source_point(g, n, inverse));
  return round_to_storage(Volume(g, {1.0, 1.0, 1.0}, Modality::Mask, std::move(out)));
}

// Gaussian-filtered white noise on a padded grid, cropped and scaled so the
// largest absolute component equals the amplitude.
DenseDisplacementField random_field(const Shape3& g, double amplitude, double sigma, Direction dir,
                                    std::mt19937_64& rng) {
  const int margin = int(std::ceil(2.0 * sigma));
  const Shape3 big{g.d + 2 * margin, g.h + 2 * margin, g.w + 2 * margin};
  std::normal_distribution<double> noise(0.0, 1.0);
  DenseDisplacementField f(g, dir);
  for (int c = 0; c < 3; ++c) {
    Volume white(big, {1.0, 1.0, 1.0}, Modality::Synth);
    for (double& x : white.values()) x = noise(rng);
    const Volume smooth = gaussian_smooth(white, sigma);
    for (int i = 0; i < g.d; ++i)
      for (int j = 0; j < g.h; ++j)
        for (int k = 0; k < g.w; ++k) f.component(g.index(i, j, k), c) = smooth.at(i + margin, j + margin, k + margin);
  }
  const double m = f.max_abs();
  const double s = (amplitude > 0.0 && m > 0.0) ? amplitude / m : 0.0;
  for (double& x : f.values()) x *= s;
  return f;
}

bool folds(const DenseDisplacementField& f) {
  const JacobianMap jac = jacobian_det(f);
  return std::any_of(jac.det.begin(), jac.det.end(), [](double d) { return d <= 0.0; });
}

}  // namespace

StudyTrio make_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const Shape3& g = cfg.grid_shape;
  const Anatomy anatomy = draw_anatomy(cfg, rng);

  DenseDisplacementField pf, mf;
  double scale = 1.0;
  bool ok = false;
  for (int attempt = 0; attempt < 20 && !ok; ++attempt, scale *= 0.85) {
    const auto motion = random_field(g, scale * cfg.motion_amplitude, cfg.smoothness, Direction::Composed, rng);
    const auto distort = random_field(g, scale * cfg.distortion_amplitude, cfg.smoothness, Direction::Composed, rng);
    const auto residual = random_field(g, scale * cfg.residual_amplitude, cfg.smoothness, Direction::MovingFromPrivileged, rng);
    pf = compose(distort, motion, Boundary::Clamp);
    pf.set_direction(Direction::PrivilegedFromFixed);
    mf = compose(residual, pf, Boundary::Clamp);
    mf = round_to_storage(mf);
    ok = !folds(pf) && !folds(mf);
  }
  if (!ok) fail(ErrorKind::UnrealizableConfig, "deformation folds after 20 reduced-amplitude attempts");

  const auto inv_p = invert_ddf(pf, 40, Boundary::Clamp);
  const auto inv_m = invert_ddf(mf, 40, Boundary::Clamp);

  StudyTrio trio;
  trio.study_id = "phantom_" + std::to_string(cfg.seed);
  trio.fixed = render(anatomy, kT2w, g, nullptr, cfg.noise.t2w, Modality::T2W, rng);
  trio.privileged = render(anatomy, kB0, g, &inv_p, cfg.noise.b0, Modality::DwiB0, rng);
  trio.moving = render(anatomy, kHighB, g, &inv_m, cfg.noise.high_b, Modality::DwiHighB, rng);
  trio.gt_ddf = mf;

  auto candidates = anatomy.landmark_candidates;
  std::shuffle(candidates.begin(), candidates.end(), rng);
  const int n_pairs = std::uniform_int_distribution<int>(1, std::min<int>(3, int(candidates.size())))(rng);
  for (int p = 0; p < n_pairs; ++p) {
    const auto& [centre, kind] = candidates[p];
    trio.landmarks_fixed.push_back({render_sphere(centre, g, nullptr), kind, p});
    trio.landmarks_moving.push_back({render_sphere(centre, g, &inv_m), kind, p});
  }
  trio.validate();
  return trio;
}

json DatasetManifest::to_json() const {
  json studies = json::object();
  for (const auto& [id, s] : study_seeds) studies[id] = s;
  return {{"seed", seed}, {"phantom", privreg::to_json(phantom)}, {"splits", splits}, {"study_seeds", studies}};
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  DatasetManifest m;
  m.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("phantom")) m.phantom = phantom_config_from_json(j.at("phantom"));
  if (j.contains("splits")) m.splits = j.at("splits").get<std::map<std::string, std::vector<std::string>>>();
  if (j.contains("study_seeds")) m.study_seeds = j.at("study_seeds").get<std::map<std::string, std::uint64_t>>();
  return m;
}

DatasetManifest make_dataset(const fs::path& root, int n_train, int n_val, int n_holdout, const PhantomConfig& cfg,
                             std::uint64_t seed) {
  if (n_train < 0 || n_val < 0 || n_holdout < 0) fail(ErrorKind::InvalidArgument, "split counts must be >= 0");
  cfg.validate();
  DatasetManifest m;
  m.seed = seed;
  m.phantom = cfg;
  std::uint64_t stream = 0;
  for (const auto& [split, count] : {std::pair<std::string, int>{"train", n_train}, {"val", n_val},
                                     {"holdout", n_holdout}}) {
    auto& ids = m.splits[split];
    for (int s = 0; s < count; ++s) {
      char id[32];
      std::snprintf(id, sizeof id, "%s_%04d", split.c_str(), s);
      PhantomConfig c = cfg;
      c.seed = mix_seed(seed, stream++);
      StudyTrio trio = make_phantom(c);
      trio.study_id = id;
      save_study(root / id, trio);
      ids.push_back(id);
      m.study_seeds[id] = c.seed;
    }
  }
  fs::create_directories(root);
  std::ofstream out(root / "manifest.json");
  out << m.to_json().dump(2) << "\n";
  if (!out) fail(ErrorKind::Io, "cannot write " + (root / "manifest.json").string());
  return m;
}

DatasetManifest read_dataset_manifest(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) fail(ErrorKind::Io, "no manifest.json under " + root.string());
  try {
    return DatasetManifest::from_json(json::parse(in));
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, std::string("bad dataset manifest: ") + e.what());
  }
}

std::vector<StudyTrio> load_split(const fs::path& root, const std::string& split, const LoadOptions& options) {
  const DatasetManifest m = read_dataset_manifest(root);
  const auto it = m.splits.find(split);
  if (it == m.splits.end()) fail(ErrorKind::InvalidArgument, "unknown split '" + split + "'");
  std::vector<StudyTrio> out;
  out.reserve(it->second.size());
  for (const auto& id : it->second) out.push_back(load_study(root / id, options));
  return out;
}

}  // namespace privreg
