#include "privreg/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "privreg/error.hpp"

namespace privreg {

namespace {

std::string colour_of(const std::string& kind) {
  if (kind == "tumor") return "#1f4fd1";
  if (kind == "urethra") return "#e3b505";
  if (kind == "zonal") return "#d12a1f";
  if (kind == "gland") return "#2a9d3a";
  return "#555555";
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string bland_altman_svg(const std::vector<BlandAltmanRow>& rows, const std::string& title,
                             const std::string& x_label, const std::string& y_label) {
  if (rows.empty()) fail(ErrorKind::InvalidArgument, "nothing to plot");
  constexpr double W = 640, H = 480, L = 70, R = 20, T = 40, B = 60;
  double x0 = rows[0].x, x1 = rows[0].x, y0 = rows[0].y, y1 = rows[0].y, mean = 0.0;
  for (const auto& r : rows) {
    x0 = std::min(x0, r.x);
    x1 = std::max(x1, r.x);
    y0 = std::min(y0, r.y);
    y1 = std::max(y1, r.y);
    mean += r.y;
  }
  mean /= double(rows.size());
  double var = 0.0;
  for (const auto& r : rows) var += (r.y - mean) * (r.y - mean);
  const double sd = rows.size() > 1 ? std::sqrt(var / double(rows.size() - 1)) : 0.0;
  y0 = std::min({y0, mean - 1.96 * sd, 0.0});
  y1 = std::max({y1, mean + 1.96 * sd, 0.0});
  auto pad = [](double& lo, double& hi) {
    const double span = hi - lo > 0.0 ? hi - lo : 1.0;
    lo -= 0.05 * span;
    hi += 0.05 * span;
  };
  pad(x0, x1);
  pad(y0, y1);
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << escape(title)
    << "</text>\n";
  s << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
    s << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\" font-size=\"11\">"
      << std::setprecision(3) << xv << std::setprecision(2) << "</text>\n";
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
      << std::setprecision(3) << yv << std::setprecision(2) << "</text>\n";
  }
  auto hline = [&](double y, const char* dash, const char* colour) {
    s << "<line x1=\"" << L << "\" x2=\"" << W - R << "\" y1=\"" << py(y) << "\" y2=\"" << py(y) << "\" stroke=\""
      << colour << "\" stroke-dasharray=\"" << dash << "\"/>\n";
  };
  hline(0.0, "2,2", "#999999");
  hline(mean, "none", "black");
  hline(mean + 1.96 * sd, "6,4", "black");
  hline(mean - 1.96 * sd, "6,4", "black");
  for (const auto& r : rows) {
    s << "<circle cx=\"" << px(r.x) << "\" cy=\"" << py(r.y) << "\" r=\"3.5\" fill=\"" << colour_of(r.kind)
      << "\" fill-opacity=\"0.8\"/>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 18 << "\" text-anchor=\"middle\" font-size=\"13\">"
    << escape(x_label) << "</text>\n";
  s << "<text transform=\"translate(18," << (T + H - B) / 2
    << ") rotate(-90)\" text-anchor=\"middle\" font-size=\"13\">" << escape(y_label) << "</text>\n";
  double ly = T + 14;
  for (const char* k : {"tumor", "urethra", "zonal", "gland"}) {
    s << "<circle cx=\"" << W - R - 80 << "\" cy=\"" << ly - 4 << "\" r=\"4\" fill=\"" << colour_of(k) << "\"/>"
      << "<text x=\"" << W - R - 70 << "\" y=\"" << ly << "\" font-size=\"11\">" << k << "</text>\n";
    ly += 16;
  }
  s << "</svg>\n";
  return s.str();
}

void write_bland_altman_svg(const std::filesystem::path& path, const std::vector<BlandAltmanRow>& rows,
                            const std::string& title, const std::string& x_label, const std::string& y_label) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) fail(ErrorKind::Io, "cannot write " + path.string());
  os << bland_altman_svg(rows, title, x_label, y_label);
}

}  // namespace privreg
