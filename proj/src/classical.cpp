#include "privreg/classical.hpp"

#include <algorithm>
#include <cmath>

#include "privreg/error.hpp"
#include "privreg/geometry.hpp"

namespace privreg {

std::string_view similarity_name(SimilarityKind s) { return s == SimilarityKind::MI ? "MI" : "NMI"; }

SimilarityKind parse_similarity(std::string_view name) {
  if (name == "MI" || name == "mi") return SimilarityKind::MI;
  if (name == "NMI" || name == "nmi") return SimilarityKind::NMI;
  fail(ErrorKind::InvalidArgument, "unknown similarity '" + std::string(name) + "'");
}

void IterRegConfig::validate() const {
  if (!(reg_weight >= 0.0)) fail(ErrorKind::InvalidArgument, "reg_weight must be >= 0");
  if (levels < 1) fail(ErrorKind::InvalidArgument, "levels must be >= 1");
  if (steps_per_level < 0) fail(ErrorKind::InvalidArgument, "steps_per_level must be >= 0");
  if (!(step_size > 0.0)) fail(ErrorKind::InvalidArgument, "step_size must be positive");
  if (!(smoothing_sigma >= 0.0)) fail(ErrorKind::InvalidArgument, "smoothing_sigma must be >= 0");
  mi.validate();
}

nlohmann::json IterRegConfig::to_json() const {
  return {{"similarity", std::string(similarity_name(similarity))},
          {"reg_weight", reg_weight},
          {"levels", levels},
          {"steps_per_level", steps_per_level},
          {"step_size", step_size},
          {"smoothing_sigma", smoothing_sigma},
          {"mi", {{"bins", mi.bins}, {"kernel_sigma", mi.kernel_sigma}}}};
}

IterRegConfig IterRegConfig::from_json(const nlohmann::json& j) {
  IterRegConfig c;
  if (j.contains("similarity")) c.similarity = parse_similarity(j.at("similarity").get<std::string>());
  c.reg_weight = j.value("reg_weight", c.reg_weight);
  c.levels = j.value("levels", c.levels);
  c.steps_per_level = j.value("steps_per_level", c.steps_per_level);
  c.step_size = j.value("step_size", c.step_size);
  c.smoothing_sigma = j.value("smoothing_sigma", c.smoothing_sigma);
  if (j.contains("mi")) {
    c.mi.bins = j.at("mi").value("bins", c.mi.bins);
    c.mi.kernel_sigma = j.at("mi").value("kernel_sigma", c.mi.kernel_sigma);
  }
  return c;
}

namespace {

double similarity(const Volume& fixed, const Volume& warped, const IterRegConfig& cfg) {
  return cfg.similarity == SimilarityKind::MI ? mutual_information(fixed, warped, cfg.mi)
                                              : normalized_mutual_information(fixed, warped, cfg.mi);
}

void check_finite(double v) {
  if (!std::isfinite(v)) fail(ErrorKind::Diverged, "iterative registration objective is not finite");
}

// d objective / d u
DenseDisplacementField objective_grad(const Volume& moving, const Volume& fixed, const DenseDisplacementField& u,
                                      const IterRegConfig& cfg) {
  const Volume warped = warp(moving, u);
  const SimilarityGradient sg = cfg.similarity == SimilarityKind::MI
                                    ? mutual_information_grad(fixed, warped, cfg.mi, false, true)
                                    : normalized_mutual_information_grad(fixed, warped, cfg.mi, false, true);
  DenseDisplacementField g = warp_backward(moving, u, sg.grad_b, false).ddf;
  if (cfg.reg_weight > 0.0) {
    const auto rg = ddf_gradient_l2_grad(u);
    auto gv = g.values();
    for (std::size_t n = 0; n < gv.size(); ++n) gv[n] -= cfg.reg_weight * rg.values()[n];
  }
  return g;
}

Shape3 level_grid(const Shape3& full, int factor) {
  auto axis = [factor](int n) { return std::max(std::min(n, 4), (n - 1) / factor + 1); };
  return {axis(full.d), axis(full.h), axis(full.w)};
}

}  // namespace

double iterreg_objective(const Volume& moving, const Volume& fixed, const DenseDisplacementField& u,
                         const IterRegConfig& cfg) {
  double obj = similarity(fixed, warp(moving, u), cfg);
  if (cfg.reg_weight > 0.0) obj -= cfg.reg_weight * ddf_gradient_l2(u);
  return obj;
}

DenseDisplacementField iterative_register(const Volume& moving, const Volume& fixed, const IterRegConfig& cfg,
                                          IterRegReport* report) {
  require_same_shape(moving.shape(), fixed.shape(), "iterative registration inputs");
  cfg.validate();
  const Shape3 full = fixed.shape();
  IterRegReport rep;
  rep.mi_before = mutual_information(fixed, moving, cfg.mi);

  DenseDisplacementField u;  // solution of the previous level
  for (int l = cfg.levels - 1; l >= 0; --l) {
    const Shape3 g = level_grid(full, 1 << l);
    const Volume mv = g == full ? moving : resize_volume(moving, g);
    const Volume fv = g == full ? fixed : resize_volume(fixed, g);

    DenseDisplacementField cur(g, Direction::MovingFromFixed);
    const double zero_obj = iterreg_objective(mv, fv, cur, cfg);
    if (u.voxels() > 0) {
      DenseDisplacementField up = resize_ddf(u, g);
      up.set_direction(Direction::MovingFromFixed);
      // hand-off guard: a coarse solution that hurts at this grid is dropped
      if (iterreg_objective(mv, fv, up, cfg) >= zero_obj) cur = std::move(up);
    }
    double obj = iterreg_objective(mv, fv, cur, cfg);
    check_finite(obj);
    LevelTrace trace{g, zero_obj, obj, obj, 0};

    double step = cfg.step_size;
    for (int it = 0; it < cfg.steps_per_level && step > 1e-3 * cfg.step_size; ++it) {
      DenseDisplacementField dir = gaussian_smooth(objective_grad(mv, fv, cur, cfg), cfg.smoothing_sigma);
      const double peak = dir.max_norm();
      check_finite(peak);
      if (peak <= 0.0) break;
      // backtrack until the objective improves
      bool accepted = false;
      while (step > 1e-3 * cfg.step_size) {
        DenseDisplacementField trial = cur + (step / peak) * dir;
        trial.set_direction(Direction::MovingFromFixed);
        const double t = iterreg_objective(mv, fv, trial, cfg);
        check_finite(t);
        if (t > obj) {
          cur = std::move(trial);
          obj = t;
          accepted = true;
          step = std::min(cfg.step_size, step * 1.2);
          break;
        }
        step *= 0.5;
      }
      if (!accepted) break;
      ++trace.accepted_steps;
    }
    trace.end_objective = obj;
    rep.levels.push_back(trace);
    u = std::move(cur);
  }
  u.set_direction(Direction::MovingFromFixed);
  rep.mi_after = mutual_information(fixed, warp(moving, u), cfg.mi);
  if (cfg.similarity == SimilarityKind::NMI && rep.mi_after < rep.mi_before - 1e-3) {
    // NMI and MI can disagree; keep the MI contract
    u = DenseDisplacementField(full, Direction::MovingFromFixed);
    rep.mi_after = rep.mi_before;
  }
  if (report) *report = std::move(rep);
  return u;
}

}  // namespace privreg
