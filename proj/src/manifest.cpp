#include "privreg/manifest.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <vector>

#include "privreg/error.hpp"

#ifndef PRIVREG_VERSION
#define PRIVREG_VERSION "unknown"
#endif

namespace privreg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void fnv(std::uint64_t& h, const char* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= kFnvPrime;
  }
}

void fnv_file(std::uint64_t& h, const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot read " + path.string());
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), std::streamsize(buf.size()));
    fnv(h, buf.data(), std::size_t(is.gcount()));
  }
}

}  // namespace

std::string build_version() { return PRIVREG_VERSION; }

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::uint64_t file_checksum(const fs::path& path) {
  std::uint64_t h = kFnvOffset;
  fnv_file(h, path);
  return h;
}

std::uint64_t tree_checksum(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != kRunManifestName) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = kFnvOffset;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, dir).generic_string();
    fnv(h, rel.data(), rel.size() + 1);
    fnv_file(h, f);
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json RunManifest::to_json() const {
  return {{"command", command}, {"config", config},     {"seed", seed},     {"version", version},
          {"started", started}, {"finished", finished}, {"outputs", outputs}, {"results", results}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config = j.value("config", json::object());
  m.seed = j.value("seed", std::uint64_t{0});
  m.version = j.value("version", std::string());
  m.started = j.value("started", std::string());
  m.finished = j.value("finished", std::string());
  m.outputs = j.value("outputs", std::map<std::string, std::string>{});
  m.results = j.value("results", json::object());
  return m;
}

void write_run_manifest(const fs::path& dir, const RunManifest& m) {
  fs::create_directories(dir);
  std::ofstream os(dir / kRunManifestName);
  if (!os) fail(ErrorKind::Io, "cannot write manifest in " + dir.string());
  os << m.to_json().dump(2) << '\n';
}

RunManifest read_run_manifest(const fs::path& dir) {
  std::ifstream is(dir / kRunManifestName);
  if (!is) fail(ErrorKind::Io, "no run manifest in " + dir.string());
  return RunManifest::from_json(json::parse(is));
}

}  // namespace privreg
