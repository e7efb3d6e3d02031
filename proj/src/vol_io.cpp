#include "privreg/vol_io.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <regex>

#include <json.hpp>

#include "privreg/error.hpp"

namespace privreg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_floats(std::ofstream& out, std::span<const double> values) {
  std::vector<char> buf(values.size() * 4);
  for (std::size_t n = 0; n < values.size(); ++n) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[n]));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(&buf[4 * n], &bits, 4);
  }
  out.write(buf.data(), std::streamsize(buf.size()));
}

std::vector<double> read_floats(std::ifstream& in, std::size_t count, const fs::path& path) {
  std::vector<char> buf(count * 4);
  in.read(buf.data(), std::streamsize(buf.size()));
  if (std::size_t(in.gcount()) != buf.size()) fail(ErrorKind::Io, "truncated payload in " + path.string());
  std::vector<double> out(count);
  for (std::size_t n = 0; n < count; ++n) {
    std::uint32_t bits;
    std::memcpy(&bits, &buf[4 * n], 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    out[n] = double(std::bit_cast<float>(bits));
  }
  return out;
}

void write_container(const fs::path& path, const json& header, std::span<const double> values) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  const std::string line = header.dump() + "\n";
  out.write(line.data(), std::streamsize(line.size()));
  write_floats(out, values);
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

struct Container {
  json header;
  std::vector<double> values;
  Shape3 shape;
};

json read_header(std::ifstream& in, const fs::path& path) {
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, "bad header in " + path.string() + ": " + e.what());
  }
}

Container read_container(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  Container c;
  c.header = read_header(in, path);
  const auto shape = c.header.at("shape").get<std::vector<int>>();
  if (shape.size() != 3 && shape.size() != 4) fail(ErrorKind::Io, "bad shape rank in " + path.string());
  c.shape = {shape[0], shape[1], shape[2]};
  const std::size_t comps = shape.size() == 4 ? std::size_t(shape[3]) : 1;
  c.values = read_floats(in, c.shape.voxels() * comps, path);
  return c;
}

Spacing spacing_of(const json& h) {
  const auto s = h.value("spacing", std::vector<double>{1.0, 1.0, 1.0});
  if (s.size() != 3) fail(ErrorKind::Io, "spacing must have three entries");
  return {s[0], s[1], s[2]};
}

}  // namespace

void write_volume(const fs::path& path, const Volume& v) {
  const json header = {{"format", "vol"},
                       {"version", 1},
                       {"shape", {v.shape().d, v.shape().h, v.shape().w}},
                       {"spacing", {v.spacing()[0], v.spacing()[1], v.spacing()[2]}},
                       {"modality", std::string(modality_name(v.modality()))}};
  write_container(path, header, v.values());
}

Modality read_volume_modality(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  const json h = read_header(in, path);
  return parse_modality(h.value("modality", "SYNTH"));
}

Volume read_volume(const fs::path& path) {
  Container c = read_container(path);
  if (c.header.at("shape").size() != 3) fail(ErrorKind::Io, path.string() + " is not a scalar volume");
  return Volume(c.shape, spacing_of(c.header), parse_modality(c.header.value("modality", "SYNTH")),
                std::move(c.values));
}

void write_ddf(const fs::path& path, const DenseDisplacementField& f) {
  const json header = {{"format", "vol"},
                       {"version", 1},
                       {"shape", {f.shape().d, f.shape().h, f.shape().w, 3}},
                       {"spacing", {1.0, 1.0, 1.0}},
                       {"modality", "SYNTH"},
                       {"direction", std::string(direction_name(f.direction()))}};
  write_container(path, header, f.values());
}

DenseDisplacementField read_ddf(const fs::path& path) {
  Container c = read_container(path);
  const auto& shape = c.header.at("shape");
  if (shape.size() != 4 || shape[3].get<int>() != 3) fail(ErrorKind::Io, path.string() + " is not a DDF");
  return DenseDisplacementField(c.shape, parse_direction(c.header.value("direction", "composed")),
                                std::move(c.values));
}

Volume round_to_storage(const Volume& v) {
  std::vector<double> out(v.values().begin(), v.values().end());
  for (double& x : out) x = double(float(x));
  return v.with_values(std::move(out));
}

DenseDisplacementField round_to_storage(const DenseDisplacementField& f) {
  std::vector<double> out(f.values().begin(), f.values().end());
  for (double& x : out) x = double(float(x));
  return DenseDisplacementField(f.shape(), f.direction(), std::move(out));
}

void save_study(const fs::path& dir, const StudyTrio& trio) {
  trio.validate();
  fs::create_directories(dir);
  write_volume(dir / "moving.vol", trio.moving);
  write_volume(dir / "fixed.vol", trio.fixed);
  write_volume(dir / "privileged.vol", trio.privileged);
  if (trio.gt_ddf) write_ddf(dir / "gt_ddf.vol", *trio.gt_ddf);
  if (fs::exists(dir / "landmarks")) fs::remove_all(dir / "landmarks");
  if (!trio.landmarks_fixed.empty()) fs::create_directories(dir / "landmarks");
  auto name = [](const LandmarkMask& m, const char* side) {
    return std::to_string(m.pair_id) + "_" + side + "_" + std::string(landmark_kind_name(m.kind)) + ".vol";
  };
  for (const auto& m : trio.landmarks_fixed) write_volume(dir / "landmarks" / name(m, "fixed"), m.mask);
  for (const auto& m : trio.landmarks_moving) write_volume(dir / "landmarks" / name(m, "moving"), m.mask);
}

StudyTrio load_study(const fs::path& dir, const LoadOptions& options) {
  for (const char* f : {"moving.vol", "fixed.vol", "privileged.vol"}) {
    if (!options.privileged && std::string_view(f) == "privileged.vol") continue;
    if (!fs::exists(dir / f)) fail(ErrorKind::IncompleteTrio, (dir / f).string() + " is missing");
  }
  StudyTrio trio;
  trio.study_id = dir.filename().string();
  trio.moving = read_volume(dir / "moving.vol");
  trio.fixed = read_volume(dir / "fixed.vol");
  if (options.privileged) trio.privileged = read_volume(dir / "privileged.vol");
  if (options.gt_ddf && fs::exists(dir / "gt_ddf.vol")) trio.gt_ddf = read_ddf(dir / "gt_ddf.vol");
  if (options.landmarks && fs::exists(dir / "landmarks")) {
    static const std::regex pattern(R"((\d+)_(fixed|moving)_([a-z]+)\.vol)");
    std::map<int, LandmarkMask> fixed, moving;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir / "landmarks")) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
      std::smatch m;
      const std::string fname = p.filename().string();
      if (!std::regex_match(fname, m, pattern)) continue;
      LandmarkMask lm{read_volume(p), parse_landmark_kind(m[3].str()), std::stoi(m[1].str())};
      (m[2].str() == "fixed" ? fixed : moving)[lm.pair_id] = std::move(lm);
    }
    for (auto& [id, lm] : fixed) trio.landmarks_fixed.push_back(std::move(lm));
    for (auto& [id, lm] : moving) trio.landmarks_moving.push_back(std::move(lm));
  }
  trio.validate();
  return trio;
}

}  // namespace privreg
