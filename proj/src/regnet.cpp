#include "privreg/regnet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "privreg/error.hpp"

namespace privreg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {
constexpr float kSlope = 0.2f;
constexpr int kCheckpointVersion = 1;

int enc_channels(const ArchConfig& a, int level) { return a.base_channels * std::min(1 << level, 4); }
int dec_channels(const ArchConfig& a, int level) { return level >= 2 ? 2 * a.base_channels : a.base_channels; }
}  // namespace

void ArchConfig::validate() const {
  if (levels < 1 || levels > 6) fail(ErrorKind::ArchMismatch, "levels must be in [1,6]");
  if (base_channels < 1) fail(ErrorKind::ArchMismatch, "base_channels must be positive");
  if (!(max_disp > 0.0)) fail(ErrorKind::ArchMismatch, "max_disp must be positive");
  if (output_level < 0 || output_level >= levels) fail(ErrorKind::ArchMismatch, "output_level must be in [0, levels)");
  if (smooth_output && !(smooth_sigma > 0.0)) fail(ErrorKind::ArchMismatch, "smooth_sigma must be positive");
}

json ArchConfig::to_json() const {
  return {{"levels", levels},           {"base_channels", base_channels}, {"max_disp", max_disp},
          {"smooth_output", smooth_output}, {"smooth_sigma", smooth_sigma},   {"output_level", output_level},
          {"normalized_output", normalized_output}};
}

ArchConfig ArchConfig::from_json(const json& j) {
  ArchConfig a;
  a.levels = j.value("levels", a.levels);
  a.base_channels = j.value("base_channels", a.base_channels);
  a.max_disp = j.value("max_disp", a.max_disp);
  a.smooth_output = j.value("smooth_output", a.smooth_output);
  a.smooth_sigma = j.value("smooth_sigma", a.smooth_sigma);
  a.output_level = j.value("output_level", a.output_level);
  a.normalized_output = j.value("normalized_output", a.normalized_output);
  return a;
}

Shape3 padded_grid(const Shape3& g, int levels) {
  const int m = 1 << levels;
  auto up = [m](int n) { return (n + m - 1) / m * m; };
  return {up(g.d), up(g.h), up(g.w)};
}

RegNet::RegNet(const ArchConfig& arch, const Shape3& grid, std::uint64_t seed)
    : arch_(arch), grid_(grid), padded_(padded_grid(grid, arch.levels)), seed_(seed) {
  arch_.validate();
  if (!grid.positive()) fail(ErrorKind::ArchMismatch, "model grid must be positive");
  const int m = 1 << arch.levels;
  if (grid.d < m || grid.h < m || grid.w < m)
    fail(ErrorKind::ArchMismatch, "grid " + to_string(grid) + " cannot be halved " + std::to_string(arch.levels) + " times");
  build();
}

RegNet::RegNet(const RegNet& o)
    : arch_(o.arch_), grid_(o.grid_), padded_(o.padded_), seed_(o.seed_), params_(o.params_), enc_(o.enc_),
      dec_(o.dec_), head_(o.head_) {
  wire();
}

RegNet& RegNet::operator=(const RegNet& o) {
  if (this != &o) {
    arch_ = o.arch_;
    grid_ = o.grid_;
    padded_ = o.padded_;
    seed_ = o.seed_;
    params_ = o.params_;
    enc_ = o.enc_;
    dec_ = o.dec_;
    head_ = o.head_;
    wire();
  }
  return *this;
}

nn::Param& RegNet::add_conv(const std::string& name, int cin, int cout, int stride, std::vector<nn::Conv3d>& into,
                            int ksize) {
  nn::Conv3d c;
  c.cin = cin;
  c.cout = cout;
  c.stride = stride;
  c.ksize = ksize;
  params_.emplace_back(name + ".weight", std::vector<int>{cout, c.taps() * cin});
  params_.emplace_back(name + ".bias", std::vector<int>{cout});
  into.push_back(c);
  return params_[params_.size() - 2];
}

void RegNet::build() {
  const int L = arch_.levels, o = arch_.output_level;
  const int first = o == 0 ? 0 : 1;
  params_.reserve(2 * std::size_t(2 * L + 2));
  std::mt19937_64 rng(seed_);
  auto he = [&](nn::Param& w, int fan_in, double scale) {
    std::normal_distribution<double> nd(0.0, scale * std::sqrt(2.0 / ((1.0 + kSlope * kSlope) * fan_in)));
    for (float& x : w.value) x = float(nd(rng));
  };
  enc_.assign(std::size_t(first), nn::Conv3d{});
  for (int l = first; l <= L; ++l) {
    const int cin = l == first ? 2 : enc_channels(arch_, l - 1);
    const int stride = l == 0 ? 1 : 2;
    nn::Param& w = add_conv("enc" + std::to_string(l), cin, enc_channels(arch_, l), stride, enc_);
    he(w, 27 * cin, 1.0);
  }
  // dec_[l - o] is the decoder block at level l
  for (int l = o; l < L; ++l) {
    const int below = l == L - 1 ? enc_channels(arch_, L) : dec_channels(arch_, l + 1);
    const int cin = below + enc_channels(arch_, l);
    nn::Param& w = add_conv("dec" + std::to_string(l), cin, dec_channels(arch_, l), 1, dec_);
    he(w, 27 * cin, 1.0);
  }
  nn::Param& w = add_conv("head", dec_channels(arch_, o), 3, 1, head_, 1);
  // near-zero head so training starts from the identity transform
  std::normal_distribution<double> nd(0.0, 1e-5);
  for (float& x : w.value) x = float(nd(rng));
  wire();
}

void RegNet::wire() {
  std::size_t p = 0;
  for (auto* group : {&enc_, &dec_, &head_}) {
    for (auto& c : *group) {
      if (c.cin == 0) continue;
      c.weight = &params_[p++];
      c.bias = &params_[p++];
    }
  }
}

std::vector<nn::Param*> RegNet::parameters() {
  std::vector<nn::Param*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

void RegNet::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0f);
}

double RegNet::grad_norm_sq() const {
  double s = 0.0;
  for (const auto& p : params_)
    for (float g : p.grad) s += double(g) * double(g);
  return s;
}

std::uint64_t RegNet::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : params_)
    for (float x : p.value) {
      h ^= std::bit_cast<std::uint32_t>(x);
      h *= 1099511628211ull;
    }
  return h;
}

namespace {

std::vector<double> kernel(double sigma) {
  const int r = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(std::size_t(2 * r + 1));
  for (int t = -r; t <= r; ++t) k[std::size_t(t + r)] = std::exp(-0.5 * t * t / (sigma * sigma));
  return k;
}

// Edge-renormalized blur of a 3-vector field along one axis, or its adjoint.
void blur_axis(std::vector<double>& f, const Shape3& s, int axis, const std::vector<double>& k, bool adjoint) {
  const int r = int(k.size() / 2);
  const int n = s[axis];
  const std::size_t stride = axis == 0 ? std::size_t(s.h) * s.w : (axis == 1 ? std::size_t(s.w) : 1);
  std::vector<double> z(static_cast<std::size_t>(n));
  for (int x = 0; x < n; ++x) {
    double sum = 0.0;
    for (int t = -r; t <= r; ++t)
      if (x + t >= 0 && x + t < n) sum += k[std::size_t(t + r)];
    z[std::size_t(x)] = sum;
  }
  std::vector<double> line(std::size_t(n) * 3), out(std::size_t(n) * 3);
  const int outer_a = axis == 0 ? s.h : s.d;
  const int outer_b = axis == 2 ? s.h : s.w;
  for (int a = 0; a < outer_a; ++a)
    for (int b = 0; b < outer_b; ++b) {
      std::size_t base;
      if (axis == 0) base = s.index(0, a, b);
      else if (axis == 1) base = s.index(a, 0, b);
      else base = s.index(a, b, 0);
      for (int x = 0; x < n; ++x)
        for (int c = 0; c < 3; ++c) line[3 * x + c] = f[3 * (base + x * stride) + c];
      std::fill(out.begin(), out.end(), 0.0);
      for (int x = 0; x < n; ++x)
        for (int t = -r; t <= r; ++t) {
          const int y = x + t;
          if (y < 0 || y >= n) continue;
          const double w = k[std::size_t(t + r)];
          for (int c = 0; c < 3; ++c) {
            if (!adjoint) out[3 * x + c] += w * line[3 * y + c] / z[std::size_t(x)];
            else out[3 * y + c] += w * line[3 * x + c] / z[std::size_t(x)];
          }
        }
      for (int x = 0; x < n; ++x)
        for (int c = 0; c < 3; ++c) f[3 * (base + x * stride) + c] = out[3 * x + c];
    }
}

}  // namespace

void RegNet::smooth_head(nn::Tensor& t, bool adjoint) const {
  // sigma is given in full-resolution voxels
  const auto kern = kernel(arch_.smooth_sigma / double(1 << arch_.output_level));
  std::vector<double> f(t.data.begin(), t.data.end());
  if (!adjoint)
    for (int axis = 0; axis < 3; ++axis) blur_axis(f, t.shape, axis, kern, false);
  else
    for (int axis = 2; axis >= 0; --axis) blur_axis(f, t.shape, axis, kern, true);
  for (std::size_t n = 0; n < f.size(); ++n) t.data[n] = float(f[n]);
}

DenseDisplacementField RegNet::forward(const Volume& moving, const Volume& fixed, Context& ctx) const {
  require_same_shape(moving.shape(), grid_, "moving vs model grid");
  require_same_shape(fixed.shape(), grid_, "fixed vs model grid");
  const int L = arch_.levels, o = arch_.output_level;
  const int first = o == 0 ? 0 : 1;
  const int off[3] = {(padded_.d - grid_.d) / 2, (padded_.h - grid_.h) / 2, (padded_.w - grid_.w) / 2};

  ctx.input = nn::Tensor(padded_, 2);
  for (int i = 0; i < grid_.d; ++i)
    for (int j = 0; j < grid_.h; ++j)
      for (int k = 0; k < grid_.w; ++k) {
        const std::size_t p = padded_.index(i + off[0], j + off[1], k + off[2]);
        ctx.input.data[2 * p] = float(moving.at(i, j, k));
        ctx.input.data[2 * p + 1] = float(fixed.at(i, j, k));
      }

  ctx.enc.assign(std::size_t(L + 1), nn::Tensor{});
  for (int l = first; l <= L; ++l) {
    ctx.enc[l] = enc_[l].forward(l == first ? ctx.input : ctx.enc[l - 1]);
    nn::leaky_relu_inplace(ctx.enc[l], kSlope);
  }
  ctx.cat.assign(std::size_t(L), nn::Tensor{});
  ctx.dec.assign(std::size_t(L), nn::Tensor{});
  for (int l = L - 1; l >= o; --l) {
    const nn::Tensor& below = l == L - 1 ? ctx.enc[L] : ctx.dec[l + 1];
    ctx.cat[l] = nn::concat(nn::upsample(below, ctx.enc[l].shape), ctx.enc[l]);
    ctx.dec[l] = dec_[l - o].forward(ctx.cat[l]);
    nn::leaky_relu_inplace(ctx.dec[l], kSlope);
  }
  nn::Tensor z = head_[0].forward(ctx.dec[o]);
  ctx.head_shape = z.shape;
  if (arch_.smooth_output) smooth_head(z, false);
  if (o > 0) z = nn::upsample(z, padded_);

  std::vector<double> f(grid_.voxels() * 3);
  for (int i = 0; i < grid_.d; ++i)
    for (int j = 0; j < grid_.h; ++j)
      for (int k = 0; k < grid_.w; ++k) {
        const std::size_t p = padded_.index(i + off[0], j + off[1], k + off[2]);
        const std::size_t n = grid_.index(i, j, k);
        for (int c = 0; c < 3; ++c) f[3 * n + c] = double(z.data[3 * p + c]);
      }
  const double cap = arch_.max_disp;
  const Vec3 unit = output_unit();
  for (std::size_t n = 0; n < f.size(); ++n) f[n] = cap * std::tanh(f[n] * unit[n % 3] / cap);
  ctx.out = f;
  return DenseDisplacementField(grid_, Direction::MovingFromFixed, std::move(f));
}

Vec3 RegNet::output_unit() const {
  if (!arch_.normalized_output) return {1.0, 1.0, 1.0};
  auto half = [](int n) { return n > 1 ? 0.5 * double(n - 1) : 1.0; };
  return {half(grid_.d), half(grid_.h), half(grid_.w)};
}

DenseDisplacementField RegNet::predict(const Volume& moving, const Volume& fixed) const {
  Context ctx;
  return forward(moving, fixed, ctx);
}

void RegNet::backward(const Context& ctx, const DenseDisplacementField& grad) {
  require_same_shape(grad.shape(), grid_, "field gradient vs model grid");
  const int L = arch_.levels, o = arch_.output_level;
  const int first = o == 0 ? 0 : 1;
  const int off[3] = {(padded_.d - grid_.d) / 2, (padded_.h - grid_.h) / 2, (padded_.w - grid_.w) / 2};
  const double cap = arch_.max_disp;
  const Vec3 unit = output_unit();

  std::vector<double> g(grad.values().begin(), grad.values().end());
  for (std::size_t n = 0; n < g.size(); ++n) {
    const double t = ctx.out[n] / cap;
    g[n] *= (1.0 - t * t) * unit[n % 3];
  }
  nn::Tensor gz(padded_, 3);
  for (int i = 0; i < grid_.d; ++i)
    for (int j = 0; j < grid_.h; ++j)
      for (int k = 0; k < grid_.w; ++k) {
        const std::size_t p = padded_.index(i + off[0], j + off[1], k + off[2]);
        const std::size_t n = grid_.index(i, j, k);
        for (int c = 0; c < 3; ++c) gz.data[3 * p + c] = float(g[3 * n + c]);
      }
  if (o > 0) gz = nn::upsample_backward(gz, ctx.head_shape);
  if (arch_.smooth_output) smooth_head(gz, true);

  nn::Tensor gh;
  head_[0].backward(ctx.dec[o], gz, &gh);
  std::vector<nn::Tensor> genc(std::size_t(L + 1));
  for (int l = first; l <= L; ++l) genc[l] = nn::Tensor(ctx.enc[l].shape, ctx.enc[l].channels);
  for (int l = o; l < L; ++l) {
    nn::leaky_relu_backward(ctx.dec[l], gh, kSlope);
    nn::Tensor gcat;
    dec_[l - o].backward(ctx.cat[l], gh, &gcat);
    const nn::Tensor& below = l == L - 1 ? ctx.enc[L] : ctx.dec[l + 1];
    nn::Tensor gup(ctx.enc[l].shape, below.channels), gskip(ctx.enc[l].shape, ctx.enc[l].channels);
    nn::split(gcat, gup, gskip);
    for (std::size_t n = 0; n < gskip.data.size(); ++n) genc[l].data[n] += gskip.data[n];
    gh = nn::upsample_backward(gup, below.shape);
  }
  for (std::size_t n = 0; n < gh.data.size(); ++n) genc[L].data[n] += gh.data[n];

  for (int l = L; l >= first; --l) {
    nn::leaky_relu_backward(ctx.enc[l], genc[l], kSlope);
    if (l == first) {
      enc_[l].backward(ctx.input, genc[l], nullptr);
    } else {
      nn::Tensor gin;
      enc_[l].backward(ctx.enc[l - 1], genc[l], &gin);
      for (std::size_t n = 0; n < gin.data.size(); ++n) genc[l - 1].data[n] += gin.data[n];
    }
  }
}

RegNet init_model(const ArchConfig& arch, const Shape3& grid, std::uint64_t seed) { return RegNet(arch, grid, seed); }

namespace {

void put_floats(std::ofstream& out, const std::vector<float>& v) {
  std::vector<char> buf(v.size() * 4);
  for (std::size_t n = 0; n < v.size(); ++n) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v[n]);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(&buf[4 * n], &bits, 4);
  }
  out.write(buf.data(), std::streamsize(buf.size()));
}

void get_floats(std::ifstream& in, std::vector<float>& v, const fs::path& path) {
  std::vector<char> buf(v.size() * 4);
  in.read(buf.data(), std::streamsize(buf.size()));
  if (std::size_t(in.gcount()) != buf.size()) fail(ErrorKind::Io, "truncated checkpoint " + path.string());
  for (std::size_t n = 0; n < v.size(); ++n) {
    std::uint32_t bits;
    std::memcpy(&bits, &buf[4 * n], 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    v[n] = std::bit_cast<float>(bits);
  }
}

}  // namespace

void save_checkpoint(const fs::path& path, const RegNet& net, const CheckpointCounters& c) {
  json params = json::array();
  for (const auto& p : net.params()) params.push_back({{"name", p.name}, {"dims", p.dims}});
  const json header = {{"format", "privreg-model"},
                       {"version", kCheckpointVersion},
                       {"arch", net.arch().to_json()},
                       {"grid", {net.grid().d, net.grid().h, net.grid().w}},
                       {"init_seed", net.init_seed()},
                       {"counters",
                        {{"iteration", c.iteration}, {"adam_step", c.adam_step}, {"strategy", c.strategy}, {"role", c.role}}},
                       {"params", params}};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + tmp.string());
    const std::string line = header.dump() + "\n";
    out.write(line.data(), std::streamsize(line.size()));
    for (const auto& p : net.params()) {
      put_floats(out, p.value);
      put_floats(out, p.m);
      put_floats(out, p.v);
    }
    if (!out) fail(ErrorKind::Io, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

RegNet load_checkpoint(const fs::path& path, CheckpointCounters* counters) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, "bad checkpoint header in " + path.string());
  }
  if (h.value("format", "") != "privreg-model") fail(ErrorKind::Io, path.string() + " is not a model checkpoint");
  if (!h.contains("version")) fail(ErrorKind::Io, "checkpoint has no version field");
  if (h.at("version").get<int>() != kCheckpointVersion)
    fail(ErrorKind::ArchMismatch, "unsupported checkpoint version " + h.at("version").dump());
  const auto g = h.at("grid").get<std::vector<int>>();
  RegNet net(ArchConfig::from_json(h.at("arch")), {g.at(0), g.at(1), g.at(2)}, h.value("init_seed", std::uint64_t{0}));
  const auto& names = h.at("params");
  auto& params = net.params_mut();
  if (names.size() != params.size()) fail(ErrorKind::ArchMismatch, "checkpoint parameter count differs from arch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (names[i].at("name").get<std::string>() != params[i].name ||
        names[i].at("dims").get<std::vector<int>>() != params[i].dims)
      fail(ErrorKind::ArchMismatch, "checkpoint parameter " + names[i].at("name").get<std::string>() + " does not match arch");
    get_floats(in, params[i].value, path);
    get_floats(in, params[i].m, path);
    get_floats(in, params[i].v, path);
  }
  if (counters) {
    const auto& c = h.at("counters");
    counters->iteration = c.value("iteration", std::int64_t{0});
    counters->adam_step = c.value("adam_step", std::int64_t{0});
    counters->strategy = c.value("strategy", "");
    counters->role = c.value("role", "");
  }
  return net;
}

}  // namespace privreg
