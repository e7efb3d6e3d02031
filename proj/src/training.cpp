#include "privreg/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "privreg/error.hpp"

namespace privreg {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Direct: return "direct";
    case Strategy::Mixed: return "mixed";
    case Strategy::Joint: return "joint";
    case Strategy::Privileged: return "privileged";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : {Strategy::Direct, Strategy::Mixed, Strategy::Joint, Strategy::Privileged})
    if (strategy_name(s) == name) return s;
  fail(ErrorKind::InvalidArgument, "unknown strategy '" + std::string(name) + "'");
}

std::string_view direct_pair_name(DirectPair p) { return p == DirectPair::MovingFixed ? "M-F" : "P-F"; }

DirectPair parse_direct_pair(std::string_view name) {
  if (name == "M-F" || name == "MF") return DirectPair::MovingFixed;
  if (name == "P-F" || name == "PF") return DirectPair::PrivilegedFixed;
  fail(ErrorKind::InvalidArgument, "unknown direct pair '" + std::string(name) + "'");
}

std::string_view reg_units_name(RegUnits u) { return u == RegUnits::Voxel ? "voxel" : "normalized"; }

RegUnits parse_reg_units(std::string_view name) {
  if (name == "voxel") return RegUnits::Voxel;
  if (name == "normalized") return RegUnits::Normalized;
  fail(ErrorKind::InvalidArgument, "unknown regularizer units '" + std::string(name) + "'");
}

Vec3 reg_component_scale(RegUnits units, const Shape3& g) {
  if (units == RegUnits::Voxel) return {1.0, 1.0, 1.0};
  auto s = [](int n) { return n > 1 ? 2.0 / double(n - 1) : 1.0; };
  return {s(g.d), s(g.h), s(g.w)};
}

void TrainConfig::validate() const {
  if (mc_samples < 1) fail(ErrorKind::InvalidArgument, "mc_samples must be >= 1");
  if (!(alpha >= 0.0) || !(beta >= 0.0)) fail(ErrorKind::InvalidArgument, "alpha and beta must be >= 0");
  if (batch_size < 1) fail(ErrorKind::InvalidArgument, "batch_size must be >= 1");
  if (!(lr > 0.0)) fail(ErrorKind::InvalidArgument, "lr must be positive");
  if (iterations < 0) fail(ErrorKind::InvalidArgument, "iterations must be >= 0");
  if (!(mc_affine_magnitude > 0.0) || mc_affine_magnitude > 0.5)
    fail(ErrorKind::InvalidArgument, "mc_affine_magnitude must lie in (0, 0.5]");
  if (augment_magnitude < 0.0 || augment_magnitude > 0.5)
    fail(ErrorKind::InvalidArgument, "augment_magnitude must lie in [0, 0.5]");
  if (checkpoint_every < 1 || validate_every < 1)
    fail(ErrorKind::InvalidArgument, "checkpoint/validation intervals must be >= 1");
  arch.validate();
  mi.validate();
}

json TrainConfig::to_json() const {
  return {{"strategy", std::string(strategy_name(strategy))},
          {"alpha", alpha},
          {"beta", beta},
          {"mc_samples", mc_samples},
          {"mc_include_identity", mc_include_identity},
          {"mc_affine_magnitude", mc_affine_magnitude},
          {"batch_size", batch_size},
          {"lr", lr},
          {"iterations", iterations},
          {"augment_magnitude", augment_magnitude},
          {"seed", seed},
          {"direct_pair", std::string(direct_pair_name(direct_pair))},
          {"joint_msd_on_ddf", joint_msd_on_ddf},
          {"reg_units", std::string(reg_units_name(reg_units))},
          {"checkpoint_every", checkpoint_every},
          {"validate_every", validate_every},
          {"arch", arch.to_json()},
          {"mi", {{"bins", mi.bins}, {"kernel_sigma", mi.kernel_sigma}}}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.mc_samples = j.value("mc_samples", c.mc_samples);
  c.mc_include_identity = j.value("mc_include_identity", c.mc_include_identity);
  c.mc_affine_magnitude = j.value("mc_affine_magnitude", c.mc_affine_magnitude);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.iterations = j.value("iterations", c.iterations);
  c.augment_magnitude = j.value("augment_magnitude", c.augment_magnitude);
  c.seed = j.value("seed", c.seed);
  if (j.contains("direct_pair")) c.direct_pair = parse_direct_pair(j.at("direct_pair").get<std::string>());
  c.joint_msd_on_ddf = j.value("joint_msd_on_ddf", c.joint_msd_on_ddf);
  if (j.contains("reg_units")) c.reg_units = parse_reg_units(j.at("reg_units").get<std::string>());
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.validate_every = j.value("validate_every", c.validate_every);
  if (j.contains("arch")) c.arch = ArchConfig::from_json(j.at("arch"));
  if (j.contains("mi")) {
    c.mi.bins = j.at("mi").value("bins", c.mi.bins);
    c.mi.kernel_sigma = j.at("mi").value("kernel_sigma", c.mi.kernel_sigma);
  }
  return c;
}

json LossRecord::to_json() const {
  json j = {{"iteration", iteration},
            {"strategy", std::string(strategy_name(strategy))},
            {"total", loss.total},
            {"mi_terms", loss.mi_terms},
            {"regularizer", loss.regularizer},
            {"msd_consistency", loss.msd_consistency},
            {"grad_norm", grad_norm}};
  if (val_mi) j["val_mi"] = *val_mi;
  return j;
}

McSelection mc_select_from(const Volume& moving, const Volume& privileged,
                           const std::vector<AffineTransform>& candidates) {
  require_same_shape(moving.shape(), privileged.shape(), "moving vs privileged");
  if (candidates.empty()) fail(ErrorKind::InvalidArgument, "no Monte-Carlo candidates");
  McSelection best{privileged, candidates[0], 0, 0.0, {}};
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const AffineTransform& a = candidates[c];
    Volume v = a.provenance() == AffineProvenance::Identity ? privileged
                                                             : warp(privileged, affine_to_ddf(a, privileged.shape()));
    const double mi = plugin_mutual_information(moving, v);
    best.candidate_mi.push_back(mi);
    if (c == 0 || mi > best.mi) {
      best.volume = std::move(v);
      best.affine = a;
      best.index = int(c);
      best.mi = mi;
    }
  }
  return best;
}

McSelection mc_select_privileged(const Volume& moving, const Volume& privileged, int samples, double magnitude,
                                 bool include_identity, std::uint64_t seed) {
  if (samples < 1) fail(ErrorKind::InvalidArgument, "mc_samples must be >= 1");
  std::vector<AffineTransform> candidates;
  if (include_identity) candidates.push_back(AffineTransform::identity());
  std::mt19937_64 rng(seed);
  for (int i = 0; i < samples; ++i)
    candidates.push_back(random_affine(rng, magnitude, privileged.shape()).with_provenance(AffineProvenance::McCandidate));
  return mc_select_from(moving, privileged, candidates);
}

double direct_loss(const Volume& fixed, const Volume& source, const DenseDisplacementField& mu, double alpha,
                   double beta, const MIConfig& mi, const Vec3& scale) {
  require_same_shape(fixed.shape(), source.shape(), "fixed vs source");
  require_same_shape(fixed.shape(), mu.shape(), "fixed vs field");
  return unsupervised_loss(fixed, warp(source, mu), mu, alpha, beta, mi, scale);
}

double privileged_loss(const Volume& fixed, const Volume& privileged_tilde, const DenseDisplacementField& mu,
                       double alpha, double beta, const MIConfig& mi, const Vec3& scale) {
  return direct_loss(fixed, privileged_tilde, mu, alpha, beta, mi, scale);
}

namespace {

void expect_direction(const DenseDisplacementField& f, Direction want, const char* what) {
  if (f.direction() != want && f.direction() != Direction::Composed)
    fail(ErrorKind::DirectionMismatch, std::string(what) + " is tagged " + std::string(direction_name(f.direction())) +
                                           ", expected " + std::string(direction_name(want)));
}

void check_trio_fields(const StudyTrio& trio, const std::vector<const DenseDisplacementField*>& fields) {
  require_same_shape(trio.moving.shape(), trio.fixed.shape(), "moving vs fixed");
  require_same_shape(trio.privileged.shape(), trio.fixed.shape(), "privileged vs fixed");
  for (const auto* f : fields) require_same_shape(f->shape(), trio.fixed.shape(), "field vs fixed");
}

double ddf_msd(const DenseDisplacementField& a, const DenseDisplacementField& b) {
  double s = 0.0;
  for (std::size_t n = 0; n < a.values().size(); ++n) {
    const double d = a.values()[n] - b.values()[n];
    s += d * d;
  }
  return s / double(a.voxels());
}

}  // namespace

TermGradient pair_term_grad(const Volume& fixed, const Volume& source, const DenseDisplacementField& mu,
                            double alpha, double beta, const MIConfig& mi, const Vec3& scale) {
  require_same_shape(fixed.shape(), source.shape(), "fixed vs source");
  require_same_shape(fixed.shape(), mu.shape(), "fixed vs field");
  TermGradient out;
  out.grad = DenseDisplacementField(mu.shape(), mu.direction());
  if (alpha > 0.0) {
    const Volume warped = warp(source, mu);
    SimilarityGradient sg = mutual_information_grad(fixed, warped, mi, false, true);
    out.mi = sg.value;
    for (double& g : sg.grad_b.values()) g *= -alpha;
    WarpGradients wg = warp_backward(source, mu, sg.grad_b, false);
    out.grad = std::move(wg.ddf);
  } else {
    out.mi = mutual_information(fixed, warp(source, mu), mi);
  }
  out.reg = ddf_gradient_l2(mu, scale);
  if (beta > 0.0) {
    const auto rg = ddf_gradient_l2_grad(mu, scale);
    auto gv = out.grad.values();
    for (std::size_t n = 0; n < gv.size(); ++n) gv[n] += beta * rg.values()[n];
  }
  return out;
}

JointGradient joint_loss_grad(const StudyTrio& trio, const DenseDisplacementField& mu_mf,
                              const DenseDisplacementField& mu_mp, const DenseDisplacementField& mu_pf, double alpha,
                              double beta, const MIConfig& mi, const Vec3& scale, bool msd_on_ddf) {
  check_trio_fields(trio, {&mu_mf, &mu_mp, &mu_pf});
  expect_direction(mu_mf, Direction::MovingFromFixed, "mu_mf");
  expect_direction(mu_mp, Direction::MovingFromPrivileged, "mu_mp");
  expect_direction(mu_pf, Direction::PrivilegedFromFixed, "mu_pf");
  if (alpha < 0.0 || beta < 0.0) fail(ErrorKind::InvalidArgument, "loss weights must be >= 0");

  auto mf = pair_term_grad(trio.fixed, trio.moving, mu_mf, alpha, beta, mi, scale);
  auto mp = pair_term_grad(trio.privileged, trio.moving, mu_mp, alpha, beta, mi, scale);
  auto pf = pair_term_grad(trio.fixed, trio.privileged, mu_pf, alpha, beta, mi, scale);

  JointGradient out;
  out.grad_mf = std::move(mf.grad);
  out.grad_mp = std::move(mp.grad);
  out.grad_pf = std::move(pf.grad);
  out.loss.mi_terms = mf.mi + mp.mi + pf.mi;
  out.loss.regularizer = mf.reg + mp.reg + pf.reg;

  const DenseDisplacementField chained = compose(mu_mp, mu_pf);
  DenseDisplacementField g_chain(chained.shape(), Direction::Composed);
  if (msd_on_ddf) {
    out.loss.msd_consistency = ddf_msd(mu_mf, chained);
    const double k = 2.0 / double(chained.voxels());
    for (std::size_t n = 0; n < chained.values().size(); ++n) {
      const double d = mu_mf.values()[n] - chained.values()[n];
      out.grad_mf.values()[n] += k * d;
      g_chain.values()[n] = -k * d;
    }
  } else {
    const Volume a = warp(trio.moving, mu_mf);
    const Volume b = warp(trio.moving, chained);
    out.loss.msd_consistency = msd(a, b);
    const Volume ga = msd_grad(a, b);
    Volume gb = ga;
    for (double& x : gb.values()) x = -x;
    const auto wa = warp_backward(trio.moving, mu_mf, ga, false);
    const auto wb = warp_backward(trio.moving, chained, gb, false);
    for (std::size_t n = 0; n < wa.ddf.values().size(); ++n) out.grad_mf.values()[n] += wa.ddf.values()[n];
    g_chain = wb.ddf;
  }
  const auto cg = compose_backward(mu_mp, mu_pf, g_chain);
  for (std::size_t n = 0; n < cg.outer.values().size(); ++n) {
    out.grad_mp.values()[n] += cg.outer.values()[n];
    out.grad_pf.values()[n] += cg.inner.values()[n];
  }
  out.loss.total = -alpha * out.loss.mi_terms + beta * out.loss.regularizer + out.loss.msd_consistency;
  return out;
}

LossBreakdown joint_loss(const StudyTrio& trio, const DenseDisplacementField& mu_mf,
                         const DenseDisplacementField& mu_mp, const DenseDisplacementField& mu_pf, double alpha,
                         double beta, const MIConfig& mi, const Vec3& scale, bool msd_on_ddf) {
  check_trio_fields(trio, {&mu_mf, &mu_mp, &mu_pf});
  expect_direction(mu_mf, Direction::MovingFromFixed, "mu_mf");
  expect_direction(mu_mp, Direction::MovingFromPrivileged, "mu_mp");
  expect_direction(mu_pf, Direction::PrivilegedFromFixed, "mu_pf");
  if (alpha < 0.0 || beta < 0.0) fail(ErrorKind::InvalidArgument, "loss weights must be >= 0");
  LossBreakdown out;
  out.mi_terms = mutual_information(trio.fixed, warp(trio.moving, mu_mf), mi) +
                 mutual_information(trio.privileged, warp(trio.moving, mu_mp), mi) +
                 mutual_information(trio.fixed, warp(trio.privileged, mu_pf), mi);
  out.regularizer = ddf_gradient_l2(mu_mf, scale) + ddf_gradient_l2(mu_mp, scale) + ddf_gradient_l2(mu_pf, scale);
  const DenseDisplacementField chained = compose(mu_mp, mu_pf);
  out.msd_consistency = msd_on_ddf ? ddf_msd(mu_mf, chained) : msd(warp(trio.moving, mu_mf), warp(trio.moving, chained));
  out.total = -alpha * out.mi_terms + beta * out.regularizer + out.msd_consistency;
  return out;
}

LossBreakdown mixed_loss(const StudyTrio& trio, const DenseDisplacementField& mu_mf,
                         const DenseDisplacementField& mu_pf, double alpha, double beta, const MIConfig& mi,
                         const Vec3& scale) {
  check_trio_fields(trio, {&mu_mf, &mu_pf});
  if (alpha < 0.0 || beta < 0.0) fail(ErrorKind::InvalidArgument, "loss weights must be >= 0");
  LossBreakdown out;
  out.mi_terms = mutual_information(trio.fixed, warp(trio.moving, mu_mf), mi) +
                 mutual_information(trio.fixed, warp(trio.privileged, mu_pf), mi);
  out.regularizer = ddf_gradient_l2(mu_mf, scale) + ddf_gradient_l2(mu_pf, scale);
  out.total = -alpha * out.mi_terms + beta * out.regularizer;
  return out;
}

namespace {

double rms_distance(const Volume& a, const Volume& b) {
  double s = 0.0;
  for (std::size_t n = 0; n < a.size(); ++n) {
    const double d = a[n] - b[n];
    s += d * d;
  }
  return std::sqrt(s / double(a.size()));
}

}  // namespace

json BiasBoundReport::to_json() const {
  return {{"j", j},         {"j_surrogate", j_surrogate}, {"gap", gap},         {"bound", bound},
          {"holds", holds}, {"d_before", d_before},       {"d_after", d_after}, {"bound_ratio", bound_ratio}};
}

BiasBoundReport bias_bound_check(const StudyTrio& trio, const Volume& privileged_tilde,
                                 const DenseDisplacementField& mu) {
  check_trio_fields(trio, {&mu});
  require_same_shape(privileged_tilde.shape(), trio.fixed.shape(), "x~P vs fixed");
  const Volume wm = warp(trio.moving, mu);
  const Volume wp = warp(privileged_tilde, mu);
  BiasBoundReport r;
  r.j = rms_distance(trio.fixed, wm);
  r.j_surrogate = rms_distance(trio.fixed, wp);
  r.gap = r.j_surrogate - r.j;
  r.bound = rms_distance(wp, wm);
  r.holds = r.gap <= r.bound;
  r.d_before = rms_distance(trio.privileged, trio.moving);
  r.d_after = rms_distance(privileged_tilde, trio.moving);
  r.bound_ratio = r.d_after > 0.0 ? r.bound / r.d_after : 0.0;
  return r;
}

double validation_mi(const RegNet& net, const std::vector<StudyTrio>& studies, const MIConfig& mi,
                     std::int64_t limit) {
  const std::size_t n = limit > 0 ? std::min<std::size_t>(studies.size(), std::size_t(limit)) : studies.size();
  if (n == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = studies[i];
    s += mutual_information(t.fixed, warp(t.moving, net.predict(t.moving, t.fixed)), mi);
  }
  return s / double(n);
}

namespace {

StudyTrio augment(const StudyTrio& t, std::mt19937_64& rng, double magnitude) {
  if (magnitude <= 0.0) return t;
  const auto ddf = affine_to_ddf(random_affine(rng, magnitude, t.fixed.shape()), t.fixed.shape());
  StudyTrio out;
  out.study_id = t.study_id;
  out.moving = warp(t.moving, ddf);
  out.fixed = warp(t.fixed, ddf);
  if (t.privileged.size() > 0) out.privileged = warp(t.privileged, ddf);
  return out;
}

void scale_field(DenseDisplacementField& f, double s) {
  for (double& x : f.values()) x *= s;
}

bool finite_grads(const std::vector<nn::Param*>& params) {
  for (const auto* p : params)
    for (float g : p->grad)
      if (!std::isfinite(g)) return false;
  return true;
}

bool finite_values(const std::vector<nn::Param*>& params) {
  for (const auto* p : params)
    for (float x : p->value)
      if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

TrainResult train(const std::vector<StudyTrio>& train_set, const std::vector<StudyTrio>& val_set,
                  const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (train_set.empty()) fail(ErrorKind::InvalidArgument, "training split is empty");
  const Shape3 grid = train_set.front().fixed.shape();
  const bool needs_privileged = cfg.strategy != Strategy::Direct || cfg.direct_pair == DirectPair::PrivilegedFixed;
  for (const auto& t : train_set) {
    require_same_shape(t.fixed.shape(), grid, "training study grid");
    if (needs_privileged && t.privileged.size() == 0)
      fail(ErrorKind::IncompleteTrio, "study " + t.study_id + " has no privileged volume");
  }
  const Vec3 scale = reg_component_scale(cfg.reg_units, grid);

  TrainResult result{RegNet(cfg.arch, grid, mix_seed(cfg.seed, 1)), std::nullopt, std::nullopt, {}, {}};
  if (cfg.strategy == Strategy::Joint) {
    result.phi1.emplace(cfg.arch, grid, mix_seed(cfg.seed, 2));
    result.phi2.emplace(cfg.arch, grid, mix_seed(cfg.seed, 3));
  }
  std::vector<RegNet*> nets{&result.theta};
  if (result.phi1) nets.push_back(&*result.phi1);
  if (result.phi2) nets.push_back(&*result.phi2);
  std::vector<nn::Param*> params;
  for (auto* n : nets)
    for (auto* p : n->parameters()) params.push_back(p);

  const bool write = !options.out_dir.empty();
  if (write) fs::create_directories(options.out_dir);
  const char* roles[3] = {"theta", "phi1", "phi2"};
  auto save_all = [&](std::int64_t it, const std::string& suffix) {
    if (!write) return;
    for (std::size_t k = 0; k < nets.size(); ++k) {
      CheckpointCounters c{it, it, std::string(strategy_name(cfg.strategy)), roles[k]};
      save_checkpoint(options.out_dir / (std::string(roles[k]) + suffix + ".ckpt"), *nets[k], c);
    }
  };

  auto run_validation = [&](std::int64_t it) {
    if (val_set.empty()) return std::optional<double>{};
    const double v = validation_mi(result.theta, val_set, cfg.mi, options.val_studies);
    result.val_mi.push_back({it, v});
    return std::optional<double>{v};
  };
  if (cfg.iterations > 0) run_validation(0);

  std::mt19937_64 rng(mix_seed(cfg.seed, 0));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  const double inv_b = 1.0 / double(cfg.batch_size);

  for (std::int64_t it = 1; it <= cfg.iterations; ++it) {
    LossBreakdown sum;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const StudyTrio t = augment(train_set[order[cursor++]], rng, cfg.augment_magnitude);
      const std::uint64_t sample_seed = rng();
      switch (cfg.strategy) {
        case Strategy::Direct: {
          const Volume& src = cfg.direct_pair == DirectPair::MovingFixed ? t.moving : t.privileged;
          RegNet::Context ctx;
          const auto mu = result.theta.forward(src, t.fixed, ctx);
          auto term = pair_term_grad(t.fixed, src, mu, cfg.alpha, cfg.beta, cfg.mi, scale);
          sum.mi_terms += term.mi;
          sum.regularizer += term.reg;
          scale_field(term.grad, inv_b);
          result.theta.backward(ctx, term.grad);
          break;
        }
        case Strategy::Privileged: {
          RegNet::Context ctx;
          const auto mu = result.theta.forward(t.moving, t.fixed, ctx);
          const McSelection sel = mc_select_privileged(t.moving, t.privileged, cfg.mc_samples,
                                                       cfg.mc_affine_magnitude, cfg.mc_include_identity, sample_seed);
          auto term = pair_term_grad(t.fixed, sel.volume, mu, cfg.alpha, cfg.beta, cfg.mi, scale);
          sum.mi_terms += term.mi;
          sum.regularizer += term.reg;
          scale_field(term.grad, inv_b);
          result.theta.backward(ctx, term.grad);
          break;
        }
        case Strategy::Mixed: {
          RegNet::Context c1, c2;
          const auto mu_mf = result.theta.forward(t.moving, t.fixed, c1);
          const auto mu_pf = result.theta.forward(t.privileged, t.fixed, c2);
          auto t1 = pair_term_grad(t.fixed, t.moving, mu_mf, cfg.alpha, cfg.beta, cfg.mi, scale);
          auto t2 = pair_term_grad(t.fixed, t.privileged, mu_pf, cfg.alpha, cfg.beta, cfg.mi, scale);
          sum.mi_terms += t1.mi + t2.mi;
          sum.regularizer += t1.reg + t2.reg;
          scale_field(t1.grad, inv_b);
          scale_field(t2.grad, inv_b);
          result.theta.backward(c1, t1.grad);
          result.theta.backward(c2, t2.grad);
          break;
        }
        case Strategy::Joint: {
          RegNet::Context c0, c1, c2;
          auto mu_mf = result.theta.forward(t.moving, t.fixed, c0);
          auto mu_mp = result.phi1->forward(t.moving, t.privileged, c1);
          auto mu_pf = result.phi2->forward(t.privileged, t.fixed, c2);
          mu_mp.set_direction(Direction::MovingFromPrivileged);
          mu_pf.set_direction(Direction::PrivilegedFromFixed);
          auto jg = joint_loss_grad(t, mu_mf, mu_mp, mu_pf, cfg.alpha, cfg.beta, cfg.mi, scale, cfg.joint_msd_on_ddf);
          sum.mi_terms += jg.loss.mi_terms;
          sum.regularizer += jg.loss.regularizer;
          sum.msd_consistency += jg.loss.msd_consistency;
          scale_field(jg.grad_mf, inv_b);
          scale_field(jg.grad_mp, inv_b);
          scale_field(jg.grad_pf, inv_b);
          result.theta.backward(c0, jg.grad_mf);
          result.phi1->backward(c1, jg.grad_mp);
          result.phi2->backward(c2, jg.grad_pf);
          break;
        }
      }
    }
    LossRecord rec;
    rec.iteration = it;
    rec.strategy = cfg.strategy;
    rec.loss.mi_terms = sum.mi_terms * inv_b;
    rec.loss.regularizer = sum.regularizer * inv_b;
    rec.loss.msd_consistency = sum.msd_consistency * inv_b;
    rec.loss.total = -cfg.alpha * rec.loss.mi_terms + cfg.beta * rec.loss.regularizer + rec.loss.msd_consistency;
    double gsq = 0.0;
    for (auto* n : nets) gsq += n->grad_norm_sq();
    rec.grad_norm = std::sqrt(gsq);
    if (!std::isfinite(rec.loss.total) || !std::isfinite(rec.grad_norm) || !finite_grads(params))
      fail(ErrorKind::Diverged, "non-finite loss or gradient at iteration " + std::to_string(it));
    nn::AdamConfig adam;
    adam.lr = cfg.lr;
    nn::adam_step(params, adam, it);
    if (!finite_values(params)) fail(ErrorKind::Diverged, "non-finite parameters after iteration " + std::to_string(it));

    if (it % cfg.validate_every == 0 || it == cfg.iterations) rec.val_mi = run_validation(it);
    if (it % cfg.checkpoint_every == 0) save_all(it, "_latest");
    if (options.loss_log) *options.loss_log << rec.to_json().dump() << "\n";
    if (options.on_record) options.on_record(rec);
    result.records.push_back(rec);
  }
  save_all(cfg.iterations, "");
  return result;
}

}  // namespace privreg
