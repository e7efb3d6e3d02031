#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "privreg/classical.hpp"
#include "privreg/config.hpp"
#include "privreg/error.hpp"
#include "privreg/evaluation.hpp"
#include "privreg/geometry.hpp"
#include "privreg/manifest.hpp"
#include "privreg/plot.hpp"
#include "privreg/regnet.hpp"
#include "privreg/synthdata.hpp"
#include "privreg/training.hpp"
#include "privreg/vol_io.hpp"

namespace fs = std::filesystem;
using namespace privreg;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shortest round-tripping spelling for numeric defaults in the help text.
std::string pretty(const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0') return v;
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

// Config layers shared by every subcommand: --preset, --config and one
// --<key> option per recognised config key.
struct ConfigOptions {
  std::string preset;
  std::string config;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> opts;

  void attach(CLI::App* app) {
    app->add_option("--preset", preset, "Named preset: desk, paper or tiny");
    app->add_option("--config", config, "Flat key=value config file");
    for (const auto& [key, def] : default_config()) {
      opts[key] = app->add_option("--" + key, values[key], "config override (default " + pretty(def) + ")");
      opts[key]->group("Config keys");
    }
  }

  ConfigMap resolve() const {
    ConfigMap cli;
    for (const auto& [key, opt] : opts) {
      if (opt->count() > 0) cli[key] = values.at(key);
    }
    if (!config.empty() && !fs::exists(config)) throw UsageError("config file not found: " + config);
    try {
      return resolve_config(preset, config, cli);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
};

// Invalid values inside a resolved config are usage errors too.
template <typename F>
auto usage_guard(F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidArgument || e.kind() == ErrorKind::UnrealizableConfig) throw UsageError(e.what());
    throw;
  }
}

fs::path data_root_or(const std::string& given) {
  if (!given.empty()) return given;
  if (const char* env = std::getenv("PRIVREG_DATA_ROOT"); env && *env) return env;
  throw UsageError("no dataset given: pass --data or set PRIVREG_DATA_ROOT");
}

RunManifest start_manifest(const std::string& command, const ConfigMap& cfg) {
  RunManifest m;
  m.command = command;
  m.config = config_to_json(cfg);
  m.seed = seed_from(cfg);
  m.version = build_version();
  m.started = utc_timestamp();
  return m;
}

void finish_manifest(const fs::path& dir, RunManifest& m) {
  m.finished = utc_timestamp();
  write_run_manifest(dir, m);
}

void require_fresh_dir(const fs::path& dir) {
  if (fs::exists(dir / kRunManifestName))
    throw UsageError(dir.string() + " already holds a run; choose a new output directory");
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  ConfigOptions cfg;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  const ConfigMap cfg = a.cfg.resolve();
  const fs::path out = data_root_or(a.out);
  require_fresh_dir(out);
  if (fs::exists(out / "manifest.json")) throw UsageError(out.string() + " already holds a dataset");
  const auto sizes = usage_guard([&] { return dataset_sizes_from(cfg); });
  const PhantomConfig phantom = usage_guard([&] { return phantom_from(cfg); });
  RunManifest m = start_manifest("synth", cfg);
  const DatasetManifest dm = make_dataset(out, sizes.n_train, sizes.n_val, sizes.n_holdout, phantom, seed_from(cfg));
  m.outputs["dataset"] = out.string();
  m.outputs["dataset_manifest"] = (out / "manifest.json").string();
  const std::string checksum = hex64(tree_checksum(out));
  m.results["dataset_checksum"] = checksum;
  for (const auto& [split, ids] : dm.splits) m.results["split_sizes"][split] = ids.size();
  finish_manifest(out, m);
  std::printf("synthesized %d/%d/%d studies at %s into %s (checksum %s)\n", sizes.n_train, sizes.n_val,
              sizes.n_holdout, format_shape(phantom.grid_shape).c_str(), out.string().c_str(), checksum.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  ConfigOptions cfg;
  std::string data;
  std::string out;
};

int cmd_train(const TrainArgs& a) {
  const ConfigMap cfg = a.cfg.resolve();
  const TrainConfig tc = usage_guard([&] { return train_config_from(cfg); });
  const fs::path data = data_root_or(a.data);
  const fs::path out = a.out;
  require_fresh_dir(out);
  const bool needs_p = tc.strategy != Strategy::Direct || tc.direct_pair == DirectPair::PrivilegedFixed;
  LoadOptions lo;
  lo.landmarks = false;
  lo.gt_ddf = false;
  lo.privileged = needs_p;
  const auto train_set = load_split(data, "train", lo);
  LoadOptions vo = lo;
  vo.privileged = false;
  const auto val_set = load_split(data, "val", vo);

  RunManifest m = start_manifest("train", cfg);
  fs::create_directories(out);
  std::ofstream log(out / "loss.jsonl");
  if (!log) fail(ErrorKind::Io, "cannot write " + (out / "loss.jsonl").string());
  TrainOptions opt;
  opt.out_dir = out;
  opt.loss_log = &log;
  opt.val_studies = std::stoll(cfg.at("val_studies"));
  opt.on_record = [&](const LossRecord& r) {
    if (r.iteration % tc.checkpoint_every == 0 || r.val_mi) {
      std::fprintf(stderr, "[%s] iteration %lld loss %.5f%s\n", std::string(strategy_name(tc.strategy)).c_str(),
                   static_cast<long long>(r.iteration), r.loss.total,
                   r.val_mi ? (" val_mi " + std::to_string(*r.val_mi)).c_str() : "");
    }
  };
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult res = train(train_set, val_set, tc, opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  m.outputs["theta"] = (out / "theta.ckpt").string();
  m.results["theta_checksum"] = hex64(res.theta.checksum());
  if (res.phi1) {
    m.outputs["phi1"] = (out / "phi1.ckpt").string();
    m.outputs["phi2"] = (out / "phi2.ckpt").string();
    m.results["phi1_checksum"] = hex64(res.phi1->checksum());
    m.results["phi2_checksum"] = hex64(res.phi2->checksum());
  }
  m.outputs["loss_log"] = (out / "loss.jsonl").string();
  if (!res.val_mi.empty()) {
    m.results["val_mi_initial"] = res.val_mi.front().second;
    m.results["val_mi_final"] = res.val_mi.back().second;
  }
  finish_manifest(out, m);
  std::printf("trained %s for %lld iterations in %.1f s; checkpoints in %s\n",
              std::string(strategy_name(tc.strategy)).c_str(), static_cast<long long>(tc.iterations), secs,
              out.string().c_str());
  return kExitOk;
}

// ---------------------------------------------------------------- register

struct RegisterArgs {
  ConfigOptions cfg;
  std::string model, moving, fixed, out, privileged;
  std::string engine = "network";
};

int cmd_register(const RegisterArgs& a) {
  if (!a.privileged.empty())
    fail(ErrorKind::PrivilegedNotAllowed, "inference takes only the high-b and T2w volumes");
  const ConfigMap cfg = a.cfg.resolve();
  if (a.engine != "network" && a.engine != "classical") throw UsageError("--engine must be network or classical");
  if (a.engine == "network" && a.model.empty()) throw UsageError("--model is required for the network engine");
  const fs::path out = a.out;
  require_fresh_dir(out);
  for (const fs::path p : {fs::path(a.moving), fs::path(a.fixed)}) {
    if (p.filename() == "privileged.vol" || read_volume_modality(p) == Modality::DwiB0)
      fail(ErrorKind::PrivilegedNotAllowed, "a b0 volume was passed as an inference input: " + p.string());
  }
  const Volume moving = read_volume(a.moving);
  const Volume fixed = read_volume(a.fixed);
  require_same_shape(moving.shape(), fixed.shape(), "moving vs fixed");

  RunManifest m = start_manifest("register", cfg);
  DenseDisplacementField mu;
  const auto t0 = std::chrono::steady_clock::now();
  if (a.engine == "network") {
    const RegNet net = load_checkpoint(a.model);
    mu = net.predict(moving, fixed);
    m.outputs["model"] = a.model;
  } else {
    const IterRegConfig rc = usage_guard([&] { return classical_config_from(cfg); });
    mu = iterative_register(moving, fixed, rc);
  }
  const double ms = 1e3 * std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const Volume warped = warp(moving, mu);
  fs::create_directories(out);
  write_ddf(out / "ddf.vol", mu);
  write_volume(out / "warped.vol", warped);
  const double mi0 = plugin_mutual_information(fixed, moving);
  const double mi1 = plugin_mutual_information(fixed, warped);
  const JacobianStats js = jacobian_stats(mu);
  m.outputs["ddf"] = (out / "ddf.vol").string();
  m.outputs["warped"] = (out / "warped.vol").string();
  m.results["engine"] = a.engine;
  m.results["mi_before"] = mi0;
  m.results["mi_after"] = mi1;
  m.results["jacobian_neg_fraction"] = js.neg_fraction;
  m.results["ddf_checksum"] = hex64(file_checksum(out / "ddf.vol"));
  finish_manifest(out, m);
  std::printf("inference time: %.1f ms (%s)\n", ms, a.engine.c_str());
  std::printf("MI %.4f -> %.4f, negative Jacobian fraction %.5f\n", mi0, mi1, js.neg_fraction);
  return kExitOk;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  ConfigOptions cfg;
  std::string data, out, models_root, split = "holdout", stratify, plot;
  std::vector<std::string> models;
  bool no_classical = false;
};

const char* training_input(const std::string& method) {
  if (method == "none") return "-";
  if (method == "classical") return "high-b, T2w (per pair)";
  if (method == "direct") return "high-b, T2w";
  return "high-b, b0, T2w";
}

std::vector<double> parse_fractions(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("--stratify expects comma-separated fractions, got '" + text + "'");
    }
  }
  if (out.empty()) throw UsageError("--stratify expects at least one fraction");
  return out;
}

std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

int cmd_evaluate(const EvaluateArgs& a) {
  const ConfigMap cfg = a.cfg.resolve();
  const fs::path data = data_root_or(a.data);
  const fs::path out = a.out;
  require_fresh_dir(out);
  std::vector<double> fractions;
  if (!a.stratify.empty()) fractions = parse_fractions(a.stratify);
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw UsageError("stratification fractions must lie in (0,1]");
  }
  if (!a.plot.empty() && a.plot != "bland-altman") throw UsageError("--plot supports only bland-altman");

  // method -> checkpoint
  std::vector<std::pair<std::string, fs::path>> models;
  if (!a.models_root.empty()) {
    for (const char* s : {"direct", "mixed", "joint", "privileged"}) {
      const fs::path p = fs::path(a.models_root) / s / "theta.ckpt";
      if (fs::exists(p)) models.emplace_back(s, p);
    }
  }
  for (const auto& spec : a.models) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--model expects NAME=PATH, got '" + spec + "'");
    models.emplace_back(spec.substr(0, eq), spec.substr(eq + 1));
  }
  const IterRegConfig rc = usage_guard([&] { return classical_config_from(cfg); });
  const TrainConfig tc = usage_guard([&] { return train_config_from(cfg); });

  LoadOptions lo;
  lo.privileged = false;
  const auto studies = load_split(data, a.split, lo);
  RunManifest m = start_manifest("evaluate", cfg);
  fs::create_directories(out);

  std::vector<MethodEvaluation> evals;
  auto zero = [](const StudyTrio& s) { return DenseDisplacementField(s.fixed.shape(), Direction::MovingFromFixed); };
  evals.push_back(evaluate_method(studies, zero, "none", tc.mi));
  if (!a.no_classical) {
    evals.push_back(evaluate_method(
        studies, [&](const StudyTrio& s) { return iterative_register(s.moving, s.fixed, rc); }, "classical", tc.mi));
  }
  for (const auto& [name, path] : models) {
    const RegNet net = load_checkpoint(path);
    evals.push_back(evaluate_method(
        studies, [&](const StudyTrio& s) { return net.predict(s.moving, s.fixed); }, name, tc.mi));
    m.outputs["model_" + name] = path.string();
  }

  std::vector<EvaluationRecord> all;
  for (const auto& e : evals) all.insert(all.end(), e.records.begin(), e.records.end());
  write_records_csv(out / "records.csv", all);
  m.outputs["records"] = (out / "records.csv").string();

  json summary = json::object();
  summary["split"] = a.split;
  summary["studies"] = studies.size();
  auto tre_cols = [](const std::vector<EvaluationRecord>& r, bool after) {
    std::vector<double> v;
    for (const auto& x : r) v.push_back(after ? x.tre_after_mm : x.tre_before_mm);
    return v;
  };
  for (const auto& e : evals) {
    json s = e.summary_json();
    if (e.method != "none" && e.records.size() >= 2) {
      try {
        const auto t = paired_ttest_full(tre_cols(e.records, false), tre_cols(e.records, true));
        s["tre_vs_before"] = {{"t", t.t}, {"p", t.p}, {"mean_difference_mm", t.mean_difference}};
      } catch (const Error& err) {
        s["tre_vs_before"] = {{"error", std::string(err.name())}};
      }
    }
    summary["methods"][e.method] = s;
  }
  // privileged against direct, paired on (study, pair)
  const MethodEvaluation* ed = nullptr;
  const MethodEvaluation* ep = nullptr;
  for (const auto& e : evals) {
    if (e.method == "direct") ed = &e;
    if (e.method == "privileged") ep = &e;
  }
  if (ed && ep) {
    std::map<std::pair<std::string, int>, double> dmap;
    for (const auto& r : ed->records) dmap[{r.study_id, r.pair_id}] = r.tre_after_mm;
    std::vector<double> d, p;
    for (const auto& r : ep->records) {
      auto it = dmap.find({r.study_id, r.pair_id});
      if (it == dmap.end()) continue;
      d.push_back(it->second);
      p.push_back(r.tre_after_mm);
    }
    try {
      const auto t = paired_ttest_full(d, p);
      summary["privileged_vs_direct"] = {{"t", t.t}, {"p", t.p}, {"mean_difference_mm", t.mean_difference}};
    } catch (const Error& err) {
      summary["privileged_vs_direct"] = {{"error", std::string(err.name())}};
    }
  }
  {
    std::ofstream os(out / "summary.json");
    os << summary.dump(2) << '\n';
  }
  m.outputs["summary"] = (out / "summary.json").string();

  // comparative table
  {
    std::ofstream os(out / "table.md");
    os << "| Method | Training input | MI mean | MI median | MI p90 | TRE mean (mm) | TRE median | TRE p90 |\n"
       << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& e : evals) {
      const Summary& mi = e.method == "none" ? e.mi_before : e.mi_after;
      const Summary& tr = e.method == "none" ? e.tre_before : e.tre_after;
      os << "| " << (e.method == "none" ? "w/o registration" : e.method) << " | " << training_input(e.method)
         << " | " << fmt3(mi.mean) << "±" << fmt3(mi.std) << " | " << fmt3(mi.median) << " | " << fmt3(mi.p90)
         << " | " << fmt3(tr.mean) << "±" << fmt3(tr.std) << " | " << fmt3(tr.median) << " | " << fmt3(tr.p90)
         << " |\n";
    }
  }
  m.outputs["table"] = (out / "table.md").string();

  if (!fractions.empty()) {
    json strata = json::array();
    std::ofstream csv(out / "strata.csv");
    csv << "method,key,fraction,selective,n,tre_before_mean,tre_after_mean,tre_after_median,tre_after_p90\n";
    for (const auto& e : evals) {
      if (e.method == "none") continue;
      for (double f : fractions) {
        for (StratifyKey k : {StratifyKey::InitialMisalignment, StratifyKey::Improvement}) {
          const Stratum s = stratify(e.records, f, k);
          json j = s.to_json();
          j["method"] = e.method;
          strata.push_back(j);
          csv << e.method << ',' << stratify_key_name(k) << ',' << f << ',' << (s.selective ? "true" : "false")
              << ',' << s.records.size() << ',' << s.tre_before.mean << ',' << s.tre_after.mean << ','
              << s.tre_after.median << ',' << s.tre_after.p90 << '\n';
        }
      }
    }
    std::ofstream js(out / "strata.json");
    js << strata.dump(2) << '\n';
    m.outputs["strata"] = (out / "strata.csv").string();
  }

  if (!a.plot.empty()) {
    for (const auto& e : evals) {
      if (e.method == "none" || e.records.empty()) continue;
      for (Metric metric : {Metric::TRE, Metric::MI}) {
        const std::string tag = metric == Metric::TRE ? "tre" : "mi";
        const fs::path table = out / ("bland_altman_" + e.method + "_" + tag + ".csv");
        bland_altman_export(table, e.records, metric);
        const fs::path svg = out / ("bland_altman_" + e.method + "_" + tag + ".svg");
        const std::string unit = metric == Metric::TRE ? "TRE (mm)" : "MI";
        write_bland_altman_svg(svg, read_bland_altman(table), e.method + ": " + unit, unit + " before",
                               unit + " after - before");
        m.outputs["plot_" + e.method + "_" + tag] = svg.string();
      }
    }
  }
  m.results["records_checksum"] = hex64(file_checksum(out / "records.csv"));
  finish_manifest(out, m);

  std::ifstream tbl(out / "table.md");
  std::cout << tbl.rdbuf();
  for (const auto& e : evals) {
    for (const auto& f : e.failures) std::fprintf(stderr, "warning: %s: %s\n", e.method.c_str(), f.c_str());
    if (!e.excluded.empty())
      std::fprintf(stderr, "note: %s: %zu landmark pairs excluded after warping\n", e.method.c_str(),
                   e.excluded.size());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deformable high-b DWI to T2w registration with training-only b0 guidance"};
  app.require_subcommand(1);
  app.set_version_flag("--version", build_version());

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic phantom dataset");
  sa.cfg.attach(synth);
  synth->add_option("--out", sa.out, "Dataset directory (default $PRIVREG_DATA_ROOT)");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train a registration network");
  ta.cfg.attach(trn);
  trn->add_option("--data", ta.data, "Dataset directory (default $PRIVREG_DATA_ROOT)");
  trn->add_option("--out", ta.out, "Checkpoint directory")->required();

  RegisterArgs ra;
  auto* reg = app.add_subcommand("register", "Register one high-b volume to its T2w volume");
  ra.cfg.attach(reg);
  reg->add_option("--model", ra.model, "Checkpoint (network engine)");
  reg->add_option("--moving", ra.moving, "High-b volume (.vol)")->required();
  reg->add_option("--fixed", ra.fixed, "T2w volume (.vol)")->required();
  reg->add_option("--out", ra.out, "Output directory")->required();
  reg->add_option("--engine", ra.engine, "network or classical");
  reg->add_option("--privileged", ra.privileged, "Rejected: b0 is a training-only input");

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Evaluate methods on a dataset split");
  ea.cfg.attach(ev);
  ev->add_option("--data", ea.data, "Dataset directory (default $PRIVREG_DATA_ROOT)");
  ev->add_option("--split", ea.split, "Split to evaluate");
  ev->add_option("--out", ea.out, "Report directory")->required();
  ev->add_option("--model", ea.models, "NAME=CHECKPOINT, repeatable");
  ev->add_option("--models-root", ea.models_root, "Directory with <strategy>/theta.ckpt subdirectories");
  ev->add_flag("--no-classical", ea.no_classical, "Skip the iterative baseline");
  ev->add_option("--stratify", ea.stratify, "Comma-separated subgroup fractions, e.g. 0.1,0.2");
  ev->add_option("--plot", ea.plot, "bland-altman");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(sa);
    if (trn->parsed()) return cmd_train(ta);
    if (reg->parsed()) return cmd_register(ra);
    if (ev->parsed()) return cmd_evaluate(ea);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.kind() == ErrorKind::PrivilegedNotAllowed ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
