#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "privreg/classical.hpp"
#include "privreg/synthdata.hpp"
#include "privreg/training.hpp"

namespace privreg {

// Flat key=value settings. Later layers win: defaults < preset < file < CLI.
using ConfigMap = std::map<std::string, std::string>;

// '#' starts a comment; blank lines are skipped; whitespace around keys and
// values is trimmed. Malformed lines and unknown keys raise invalid-argument.
ConfigMap parse_config_text(std::string_view text, const std::string& origin = "<text>");
ConfigMap read_config_file(const std::filesystem::path& path);

std::vector<std::string> preset_names();
ConfigMap preset(std::string_view name);

// Every recognised key with its built-in default.
const ConfigMap& default_config();
bool is_known_key(std::string_view key);

// Defaults, then the preset (if named), then the file (if given), then overrides.
ConfigMap resolve_config(const std::string& preset_name, const std::filesystem::path& file,
                         const ConfigMap& overrides);

struct DatasetSizes {
  int n_train = 0;
  int n_val = 0;
  int n_holdout = 0;
};

DatasetSizes dataset_sizes_from(const ConfigMap& c);
PhantomConfig phantom_from(const ConfigMap& c);
TrainConfig train_config_from(const ConfigMap& c);
IterRegConfig classical_config_from(const ConfigMap& c);
std::uint64_t seed_from(const ConfigMap& c);

Shape3 parse_shape(std::string_view text);  // "32x32x28"
std::string format_shape(const Shape3& s);

nlohmann::json config_to_json(const ConfigMap& c);

}  // namespace privreg
