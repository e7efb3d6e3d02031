#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "privreg/evaluation.hpp"

namespace privreg {

// Standalone SVG scatter of (before, after - before) with mean and
// +-1.96 SD lines. Points are coloured by landmark kind: tumor blue,
// urethra yellow, zonal red, gland green.
std::string bland_altman_svg(const std::vector<BlandAltmanRow>& rows, const std::string& title,
                             const std::string& x_label, const std::string& y_label);
void write_bland_altman_svg(const std::filesystem::path& path, const std::vector<BlandAltmanRow>& rows,
                            const std::string& title, const std::string& x_label, const std::string& y_label);

}  // namespace privreg
