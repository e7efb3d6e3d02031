#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "privreg/synthdata.hpp"
#include "privreg/training.hpp"

using namespace privreg;
using namespace testing;

namespace {

StudyTrio phantom(std::uint64_t seed, Shape3 g = {16, 16, 16}) {
  PhantomConfig c;
  c.grid_shape = g;
  c.seed = seed;
  return make_phantom(c);
}

std::vector<StudyTrio> phantoms(int n, std::uint64_t base) {
  std::vector<StudyTrio> out;
  for (int i = 0; i < n; ++i) out.push_back(phantom(base + i));
  return out;
}

TrainConfig tiny_config(Strategy s) {
  TrainConfig c;
  c.strategy = s;
  c.iterations = 3;
  c.batch_size = 2;
  c.checkpoint_every = 2;
  c.validate_every = 2;
  c.arch.levels = 2;
  c.arch.base_channels = 4;
  c.seed = 5;
  return c;
}

double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale < 1e-12 ? 0.0 : std::abs(a - b) / scale;
}

DenseDisplacementField tagged(DenseDisplacementField f, Direction d) {
  f.set_direction(d);
  return f;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("names parse back") {
    for (Strategy s : {Strategy::Direct, Strategy::Mixed, Strategy::Joint, Strategy::Privileged})
      CHECK(parse_strategy(strategy_name(s)) == s);
    CHECK(parse_direct_pair(direct_pair_name(DirectPair::PrivilegedFixed)) == DirectPair::PrivilegedFixed);
    CHECK(parse_reg_units(reg_units_name(RegUnits::Voxel)) == RegUnits::Voxel);
    CHECK(error_kind_of([] { parse_strategy("bogus"); }) == ErrorKind::InvalidArgument);
  }

  TEST_CASE("regularizer unit scale") {
    const Vec3 s = reg_component_scale(RegUnits::Normalized, {11, 21, 5});
    CHECK(s[0] == doctest::Approx(0.2));
    CHECK(s[1] == doctest::Approx(0.1));
    CHECK(s[2] == doctest::Approx(0.5));
    CHECK(reg_component_scale(RegUnits::Voxel, {11, 21, 5}) == Vec3{1, 1, 1});
  }

  TEST_CASE("config validation and json round trip") {
    auto kind = [](auto mutate) {
      TrainConfig c;
      mutate(c);
      return error_kind_of([&] { c.validate(); });
    };
    CHECK(kind([](TrainConfig& c) { c.mc_samples = 0; }) == ErrorKind::InvalidArgument);
    CHECK(kind([](TrainConfig& c) { c.alpha = -1; }) == ErrorKind::InvalidArgument);
    CHECK(kind([](TrainConfig& c) { c.lr = 0; }) == ErrorKind::InvalidArgument);
    CHECK(kind([](TrainConfig& c) { c.batch_size = 0; }) == ErrorKind::InvalidArgument);
    CHECK(kind([](TrainConfig& c) { c.mc_affine_magnitude = 0.7; }) == ErrorKind::InvalidArgument);
    CHECK(kind([](TrainConfig& c) { c.arch.levels = 0; }) == ErrorKind::ArchMismatch);
    TrainConfig c = tiny_config(Strategy::Joint);
    c.mc_include_identity = false;
    c.reg_units = RegUnits::Voxel;
    CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  }

  TEST_CASE("Monte-Carlo selection picks the best candidate by plugin MI") {
    const StudyTrio t = phantom(1);
    std::vector<AffineTransform> cands{AffineTransform::identity()};
    for (std::uint64_t s = 0; s < 6; ++s)
      cands.push_back(random_affine(s, 0.1, t.fixed.shape()).with_provenance(AffineProvenance::McCandidate));
    const McSelection sel = mc_select_from(t.moving, t.privileged, cands);
    REQUIRE(sel.candidate_mi.size() == cands.size());
    int best = 0;
    for (std::size_t c = 0; c < cands.size(); ++c) {
      const Volume v = c == 0 ? t.privileged : warp(t.privileged, affine_to_ddf(cands[c], t.fixed.shape()));
      const double mi = plugin_mutual_information(t.moving, v);
      CHECK(sel.candidate_mi[c] == mi);
      if (mi > sel.candidate_mi[best]) best = int(c);
    }
    CHECK(sel.index == best);
    CHECK(sel.mi == sel.candidate_mi[best]);
  }

  TEST_CASE("ties keep the earliest candidate") {
    const StudyTrio t = phantom(2);
    const auto a = random_affine(std::uint64_t{3}, 0.1, t.fixed.shape());
    const McSelection sel = mc_select_from(t.moving, t.privileged, {a, a, a});
    CHECK(sel.index == 0);
  }

  TEST_CASE("selection with the identity never loses to the unperturbed image") {
    const StudyTrio t = phantom(3);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const McSelection sel = mc_select_privileged(t.moving, t.privileged, 5, 0.1, true, seed);
      CHECK(sel.candidate_mi.size() == 6);
      CHECK(sel.candidate_mi[0] == plugin_mutual_information(t.moving, t.privileged));
      CHECK(sel.mi >= sel.candidate_mi[0]);
      const McSelection again = mc_select_privileged(t.moving, t.privileged, 5, 0.1, true, seed);
      CHECK(again.index == sel.index);
      CHECK(max_abs_diff(again.volume, sel.volume) == 0.0);
    }
    CHECK(mc_select_privileged(t.moving, t.privileged, 4, 0.1, false, 0).candidate_mi.size() == 4);
    CHECK(error_kind_of([&] { mc_select_privileged(t.moving, t.privileged, 0, 0.1, true, 0); }) ==
          ErrorKind::InvalidArgument);
  }

  TEST_CASE("loss functions agree with their definitions") {
    const StudyTrio t = phantom(4);
    const auto mu = tagged(smooth_field(t.fixed.shape(), 1, 1.0), Direction::MovingFromFixed);
    const auto pf = tagged(smooth_field(t.fixed.shape(), 2, 1.0), Direction::PrivilegedFromFixed);
    const auto mp = tagged(smooth_field(t.fixed.shape(), 3, 0.5), Direction::MovingFromPrivileged);
    const MIConfig mi;
    const double mi_mf = mutual_information(t.fixed, warp(t.moving, mu));
    const double mi_pf = mutual_information(t.fixed, warp(t.privileged, pf));
    const double mi_mp = mutual_information(t.privileged, warp(t.moving, mp));
    CHECK(direct_loss(t.fixed, t.moving, mu, 0.5, 10.0) ==
          doctest::Approx(-0.5 * mi_mf + 10.0 * ddf_gradient_l2(mu)).epsilon(1e-12));
    CHECK(privileged_loss(t.fixed, t.privileged, pf, 0.5, 10.0) ==
          doctest::Approx(-0.5 * mi_pf + 10.0 * ddf_gradient_l2(pf)).epsilon(1e-12));
    const auto mx = mixed_loss(t, mu, pf, 0.5, 10.0);
    CHECK(mx.mi_terms == doctest::Approx(mi_mf + mi_pf).epsilon(1e-12));
    CHECK(mx.msd_consistency == 0.0);
    const auto jl = joint_loss(t, mu, mp, pf, 0.5, 10.0);
    CHECK(jl.mi_terms == doctest::Approx(mi_mf + mi_mp + mi_pf).epsilon(1e-12));
    CHECK(jl.msd_consistency == doctest::Approx(msd(warp(t.moving, mu), warp(t.moving, compose(mp, pf)))).epsilon(1e-12));
    CHECK(jl.total == doctest::Approx(-0.5 * jl.mi_terms + 10.0 * jl.regularizer + jl.msd_consistency).epsilon(1e-12));
    CHECK(error_kind_of([&] { joint_loss(t, mu, pf, mp, 0.5, 10.0); }) == ErrorKind::DirectionMismatch);
  }

  TEST_CASE("pair term gradient matches central differences") {
    const StudyTrio t = phantom(5);
    const auto mu = smooth_field(t.fixed.shape(), 4, 1.3, 2.0);
    const Vec3 scale = reg_component_scale(RegUnits::Normalized, t.fixed.shape());
    const auto g = pair_term_grad(t.fixed, t.moving, mu, 0.5, 200.0, {}, scale);
    auto loss = [&](const DenseDisplacementField& f) { return direct_loss(t.fixed, t.moving, f, 0.5, 200.0, {}, scale); };
    std::mt19937_64 rng(6);
    std::uniform_int_distribution<std::size_t> pick(0, mu.voxels() - 1);
    double worst = 0.0;
    int used = 0;
    for (int k = 0; k < 40 && used < 20; ++k) {
      const std::size_t n = pick(rng);
      const int c = k % 3;
      if (std::abs(g.grad.component(n, c)) < 1e-9) continue;
      ++used;
      auto p = mu, m = mu;
      p.component(n, c) += 1e-6;
      m.component(n, c) -= 1e-6;
      worst = std::max(worst, relative_error(g.grad.component(n, c), (loss(p) - loss(m)) / 2e-6));
    }
    CHECK(used >= 10);
    CHECK(worst < 1e-2);
  }

  TEST_CASE("joint gradients match central differences") {
    const StudyTrio t = phantom(6);
    const Shape3 g = t.fixed.shape();
    const auto mf = tagged(smooth_field(g, 7, 1.1, 2.0), Direction::MovingFromFixed);
    const auto mp = tagged(smooth_field(g, 8, 0.7, 2.0), Direction::MovingFromPrivileged);
    const auto pf = tagged(smooth_field(g, 9, 0.9, 2.0), Direction::PrivilegedFromFixed);
    const Vec3 scale{0.2, 0.2, 0.2};
    for (bool on_ddf : {false, true}) {
      const auto jg = joint_loss_grad(t, mf, mp, pf, 0.5, 20.0, {}, scale, on_ddf);
      CHECK(jg.loss.total == doctest::Approx(joint_loss(t, mf, mp, pf, 0.5, 20.0, {}, scale, on_ddf).total).epsilon(1e-12));
      std::mt19937_64 rng(10);
      std::uniform_int_distribution<std::size_t> pick(0, g.voxels() - 1);
      double worst = 0.0;
      for (int k = 0; k < 30; ++k) {
        const std::size_t n = pick(rng);
        const int c = k % 3;
        const int which = (k / 3) % 3;
        auto f0 = mf, f1 = mp, f2 = pf;
        auto& target = which == 0 ? f0 : (which == 1 ? f1 : f2);
        const double analytic =
            (which == 0 ? jg.grad_mf : (which == 1 ? jg.grad_mp : jg.grad_pf)).component(n, c);
        target.component(n, c) += 1e-6;
        const double up = joint_loss(t, f0, f1, f2, 0.5, 20.0, {}, scale, on_ddf).total;
        target.component(n, c) -= 2e-6;
        const double down = joint_loss(t, f0, f1, f2, 0.5, 20.0, {}, scale, on_ddf).total;
        const double fd = (up - down) / 2e-6;
        if (std::max(std::abs(fd), std::abs(analytic)) < 1e-9) continue;
        worst = std::max(worst, relative_error(analytic, fd));
      }
      CHECK(worst < 1e-2);
    }
  }

  TEST_CASE("bias bound report") {
    const StudyTrio t = phantom(7);
    const auto mu = tagged(smooth_field(t.fixed.shape(), 11, 1.0), Direction::MovingFromFixed);
    const auto same = bias_bound_check(t, t.privileged, mu);
    CHECK(same.holds);
    CHECK(same.d_after == same.d_before);
    CHECK(same.gap <= same.bound);
    const McSelection sel = mc_select_privileged(t.moving, t.privileged, 5, 0.1, true, 1);
    const auto r = bias_bound_check(t, sel.volume, mu);
    CHECK(r.holds);
    CHECK(std::abs(r.j_surrogate - r.j) <= r.bound + 1e-15);
    CHECK(r.to_json().contains("bound_ratio"));
  }

  TEST_CASE("every strategy trains deterministically") {
    const auto train_set = phantoms(3, 100);
    const auto val_set = phantoms(1, 200);
    for (Strategy s : {Strategy::Direct, Strategy::Mixed, Strategy::Joint, Strategy::Privileged}) {
      CAPTURE(strategy_name(s));
      const TrainConfig cfg = tiny_config(s);
      const TrainResult a = train(train_set, val_set, cfg);
      const TrainResult b = train(train_set, val_set, cfg);
      CHECK(a.records.size() == 3);
      CHECK(a.theta.checksum() == b.theta.checksum());
      CHECK(a.theta.checksum() != RegNet(cfg.arch, train_set[0].fixed.shape(), mix_seed(cfg.seed, 1)).checksum());
      CHECK(a.phi1.has_value() == (s == Strategy::Joint));
      for (std::size_t k = 0; k < a.records.size(); ++k) CHECK(a.records[k].loss.total == b.records[k].loss.total);
      // validation at 0, at the interval and at the end
      REQUIRE(a.val_mi.size() == 3);
      CHECK(a.val_mi[1].first == 2);
    }
  }

  TEST_CASE("training writes logs and checkpoints") {
    TempDir dir("train");
    const auto train_set = phantoms(2, 300);
    std::ostringstream log;
    int seen = 0;
    TrainOptions opt{dir.path, &log, [&](const LossRecord&) { ++seen; }, 0};
    const TrainResult r = train(train_set, {}, tiny_config(Strategy::Joint), opt);
    CHECK(seen == 3);
    std::istringstream lines(log.str());
    std::string line;
    int count = 0;
    while (std::getline(lines, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.contains("iteration"));
      ++count;
    }
    CHECK(count == 3);
    for (const char* f : {"theta.ckpt", "phi1.ckpt", "phi2.ckpt", "theta_latest.ckpt"})
      CHECK(std::filesystem::exists(dir.path / f));
    CHECK(load_checkpoint(dir.path / "theta.ckpt").checksum() == r.theta.checksum());
  }

  TEST_CASE("strategies that read the privileged image require it") {
    auto train_set = phantoms(2, 400);
    for (auto& t : train_set) t.privileged = Volume();
    CHECK(train(train_set, {}, tiny_config(Strategy::Direct)).records.size() == 3);
    CHECK(error_kind_of([&] { train(train_set, {}, tiny_config(Strategy::Privileged)); }) == ErrorKind::IncompleteTrio);
    TrainConfig pf = tiny_config(Strategy::Direct);
    pf.direct_pair = DirectPair::PrivilegedFixed;
    CHECK(error_kind_of([&] { train(train_set, {}, pf); }) == ErrorKind::IncompleteTrio);
  }

  TEST_CASE("an absurd learning rate is reported as divergence") {
    TrainConfig cfg = tiny_config(Strategy::Direct);
    cfg.lr = 1e300;
    cfg.iterations = 4;
    CHECK(error_kind_of([&] { train(phantoms(2, 500), {}, cfg); }) == ErrorKind::Diverged);
  }
}
