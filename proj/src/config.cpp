#include "privreg/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "privreg/error.hpp"

namespace privreg {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const ConfigMap& c, const std::string& key) {
  const std::string& v = c.at(key);
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    fail(ErrorKind::InvalidArgument, "config key '" + key + "' expects a number, got '" + v + "'");
  return out;
}

long long to_int(const ConfigMap& c, const std::string& key) {
  const std::string& v = c.at(key);
  long long out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    fail(ErrorKind::InvalidArgument, "config key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

bool to_bool(const ConfigMap& c, const std::string& key) {
  const std::string& v = c.at(key);
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  fail(ErrorKind::InvalidArgument, "config key '" + key + "' expects a boolean, got '" + v + "'");
}

}  // namespace

const ConfigMap& default_config() {
  static const ConfigMap defaults = [] {
    const PhantomConfig p;
    const TrainConfig t;
    const IterRegConfig r;
    auto num = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    auto boolean = [](bool b) { return std::string(b ? "true" : "false"); };
    return ConfigMap{
        {"seed", "0"},
        {"n_train", "200"},
        {"n_val", "20"},
        {"n_holdout", "35"},
        {"grid", format_shape(p.grid_shape)},
        {"n_structures", std::to_string(p.n_structures)},
        {"min_tumors", std::to_string(p.min_tumors)},
        {"max_tumors", std::to_string(p.max_tumors)},
        {"noise_t2w", num(p.noise.t2w)},
        {"noise_b0", num(p.noise.b0)},
        {"noise_high_b", num(p.noise.high_b)},
        {"distortion_amplitude", num(p.distortion_amplitude)},
        {"motion_amplitude", num(p.motion_amplitude)},
        {"residual_amplitude", num(p.residual_amplitude)},
        {"smoothness", num(p.smoothness)},
        {"strategy", std::string(strategy_name(t.strategy))},
        {"alpha", num(t.alpha)},
        {"beta", num(t.beta)},
        {"mc_samples", std::to_string(t.mc_samples)},
        {"mc_include_identity", boolean(t.mc_include_identity)},
        {"mc_affine_magnitude", num(t.mc_affine_magnitude)},
        {"batch_size", std::to_string(t.batch_size)},
        {"lr", num(t.lr)},
        {"iterations", std::to_string(t.iterations)},
        {"augment_magnitude", num(t.augment_magnitude)},
        {"direct_pair", std::string(direct_pair_name(t.direct_pair))},
        {"joint_msd_on_ddf", boolean(t.joint_msd_on_ddf)},
        {"reg_units", std::string(reg_units_name(t.reg_units))},
        {"checkpoint_every", std::to_string(t.checkpoint_every)},
        {"validate_every", std::to_string(t.validate_every)},
        {"val_studies", "0"},
        {"levels", std::to_string(t.arch.levels)},
        {"base_channels", std::to_string(t.arch.base_channels)},
        {"max_disp", num(t.arch.max_disp)},
        {"smooth_output", boolean(t.arch.smooth_output)},
        {"smooth_sigma", num(t.arch.smooth_sigma)},
        {"output_level", std::to_string(t.arch.output_level)},
        {"normalized_output", boolean(t.arch.normalized_output)},
        {"mi_bins", std::to_string(t.mi.bins)},
        {"mi_kernel_sigma", num(t.mi.kernel_sigma)},
        {"classical_similarity", std::string(similarity_name(r.similarity))},
        {"classical_reg_weight", num(r.reg_weight)},
        {"classical_levels", std::to_string(r.levels)},
        {"classical_steps_per_level", std::to_string(r.steps_per_level)},
        {"classical_step_size", num(r.step_size)},
        {"classical_smoothing_sigma", num(r.smoothing_sigma)},
    };
  }();
  return defaults;
}

bool is_known_key(std::string_view key) { return default_config().contains(std::string(key)); }

ConfigMap parse_config_text(std::string_view text, const std::string& origin) {
  ConfigMap out;
  std::istringstream is{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) fail(ErrorKind::InvalidArgument, where + ": expected key=value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) fail(ErrorKind::InvalidArgument, where + ": empty key");
    if (!is_known_key(key)) fail(ErrorKind::InvalidArgument, where + ": unknown key '" + key + "'");
    out[key] = value;
  }
  return out;
}

ConfigMap read_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::InvalidArgument, "cannot read config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

std::vector<std::string> preset_names() { return {"desk", "paper", "tiny"}; }

ConfigMap preset(std::string_view name) {
  if (name == "desk") {
    return {{"n_train", "200"}, {"n_val", "20"}, {"n_holdout", "35"}, {"grid", "32x32x28"},
            {"iterations", "5000"}, {"lr", "1e-4"}, {"batch_size", "4"}, {"output_level", "2"}};
  }
  if (name == "paper") {
    return {{"grid", "104x104x92"}, {"iterations", "600000"}, {"lr", "1e-5"}, {"batch_size", "4"}};
  }
  if (name == "tiny") {
    // smoke-test scale
    return {{"n_train", "6"},        {"n_val", "2"},       {"n_holdout", "3"},     {"grid", "16x16x16"},
            {"iterations", "4"},     {"batch_size", "2"},  {"checkpoint_every", "2"}, {"validate_every", "2"},
            {"levels", "2"},         {"smoothness", "5"},  {"classical_steps_per_level", "5"},
            {"classical_levels", "2"}};
  }
  fail(ErrorKind::InvalidArgument, "unknown preset '" + std::string(name) + "'");
}

ConfigMap resolve_config(const std::string& preset_name, const std::filesystem::path& file,
                         const ConfigMap& overrides) {
  ConfigMap out = default_config();
  if (!preset_name.empty()) {
    for (auto& [k, v] : preset(preset_name)) out[k] = v;
  }
  if (!file.empty()) {
    for (auto& [k, v] : read_config_file(file)) out[k] = v;
  }
  for (auto& [k, v] : overrides) {
    if (!is_known_key(k)) fail(ErrorKind::InvalidArgument, "unknown key '" + k + "'");
    out[k] = v;
  }
  return out;
}

Shape3 parse_shape(std::string_view text) {
  Shape3 s;
  int* dst[3] = {&s.d, &s.h, &s.w};
  std::size_t pos = 0;
  for (int a = 0; a < 3; ++a) {
    const auto x = a < 2 ? text.find('x', pos) : text.size();
    if (x == std::string_view::npos) fail(ErrorKind::InvalidArgument, "grid must look like DxHxW");
    const auto part = text.substr(pos, x - pos);
    const auto r = std::from_chars(part.data(), part.data() + part.size(), *dst[a]);
    if (r.ec != std::errc() || r.ptr != part.data() + part.size() || *dst[a] <= 0)
      fail(ErrorKind::InvalidArgument, "grid must look like DxHxW");
    pos = x + 1;
  }
  return s;
}

std::string format_shape(const Shape3& s) {
  return std::to_string(s.d) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

std::uint64_t seed_from(const ConfigMap& c) { return std::uint64_t(to_int(c, "seed")); }

DatasetSizes dataset_sizes_from(const ConfigMap& c) {
  DatasetSizes d{int(to_int(c, "n_train")), int(to_int(c, "n_val")), int(to_int(c, "n_holdout"))};
  if (d.n_train < 0 || d.n_val < 0 || d.n_holdout < 0) fail(ErrorKind::InvalidArgument, "split sizes must be >= 0");
  return d;
}

PhantomConfig phantom_from(const ConfigMap& c) {
  PhantomConfig p;
  p.grid_shape = parse_shape(c.at("grid"));
  p.n_structures = int(to_int(c, "n_structures"));
  p.min_tumors = int(to_int(c, "min_tumors"));
  p.max_tumors = int(to_int(c, "max_tumors"));
  p.noise.t2w = to_double(c, "noise_t2w");
  p.noise.b0 = to_double(c, "noise_b0");
  p.noise.high_b = to_double(c, "noise_high_b");
  p.distortion_amplitude = to_double(c, "distortion_amplitude");
  p.motion_amplitude = to_double(c, "motion_amplitude");
  p.residual_amplitude = to_double(c, "residual_amplitude");
  p.smoothness = to_double(c, "smoothness");
  p.seed = seed_from(c);
  p.validate();
  return p;
}

TrainConfig train_config_from(const ConfigMap& c) {
  TrainConfig t;
  t.strategy = parse_strategy(c.at("strategy"));
  t.alpha = to_double(c, "alpha");
  t.beta = to_double(c, "beta");
  t.mc_samples = int(to_int(c, "mc_samples"));
  t.mc_include_identity = to_bool(c, "mc_include_identity");
  t.mc_affine_magnitude = to_double(c, "mc_affine_magnitude");
  t.batch_size = int(to_int(c, "batch_size"));
  t.lr = to_double(c, "lr");
  t.iterations = to_int(c, "iterations");
  t.augment_magnitude = to_double(c, "augment_magnitude");
  t.seed = seed_from(c);
  t.direct_pair = parse_direct_pair(c.at("direct_pair"));
  t.joint_msd_on_ddf = to_bool(c, "joint_msd_on_ddf");
  t.reg_units = parse_reg_units(c.at("reg_units"));
  t.checkpoint_every = to_int(c, "checkpoint_every");
  t.validate_every = to_int(c, "validate_every");
  t.arch.levels = int(to_int(c, "levels"));
  t.arch.base_channels = int(to_int(c, "base_channels"));
  t.arch.max_disp = to_double(c, "max_disp");
  t.arch.smooth_output = to_bool(c, "smooth_output");
  t.arch.smooth_sigma = to_double(c, "smooth_sigma");
  t.arch.output_level = int(to_int(c, "output_level"));
  t.arch.normalized_output = to_bool(c, "normalized_output");
  t.mi.bins = int(to_int(c, "mi_bins"));
  t.mi.kernel_sigma = to_double(c, "mi_kernel_sigma");
  t.validate();
  return t;
}

IterRegConfig classical_config_from(const ConfigMap& c) {
  IterRegConfig r;
  r.similarity = parse_similarity(c.at("classical_similarity"));
  r.reg_weight = to_double(c, "classical_reg_weight");
  r.levels = int(to_int(c, "classical_levels"));
  r.steps_per_level = int(to_int(c, "classical_steps_per_level"));
  r.step_size = to_double(c, "classical_step_size");
  r.smoothing_sigma = to_double(c, "classical_smoothing_sigma");
  r.mi.bins = int(to_int(c, "mi_bins"));
  r.mi.kernel_sigma = to_double(c, "mi_kernel_sigma");
  r.validate();
  return r;
}

nlohmann::json config_to_json(const ConfigMap& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : c) j[k] = v;
  return j;
}

}  // namespace privreg
