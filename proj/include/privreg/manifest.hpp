#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

namespace privreg {

std::string build_version();
std::string utc_timestamp();

// FNV-1a over file bytes; for a directory, over sorted relative paths and
// contents, skipping run_manifest.json.
std::uint64_t file_checksum(const std::filesystem::path& path);
std::uint64_t tree_checksum(const std::filesystem::path& dir);
std::string hex64(std::uint64_t v);

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::string version;
  std::string started;
  std::string finished;
  std::map<std::string, std::string> outputs;  // label -> path
  nlohmann::json results = nlohmann::json::object();  // numeric outputs and checksums

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

inline constexpr const char* kRunManifestName = "run_manifest.json";
void write_run_manifest(const std::filesystem::path& dir, const RunManifest& m);
RunManifest read_run_manifest(const std::filesystem::path& dir);

}  // namespace privreg
