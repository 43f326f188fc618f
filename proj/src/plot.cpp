#include "kinediff/plot.h"

#include "kinediff/errors.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace kinediff {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

void open_svg(std::ostringstream& os, int w, int h) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

} // namespace

std::string bar_chart_svg(const std::string& title, const std::string& unit, const std::vector<Bar>& bars) {
  const int w = 120 + 70 * static_cast<int>(std::max<std::size_t>(bars.size(), 1));
  const int h = 360;
  const double top = 40, bottom = 300, left = 70;
  double vmax = 0.0;
  for (const auto& b : bars) {
    vmax = std::max(vmax, b.value);
  }
  vmax = vmax > 0.0 ? vmax * 1.1 : 1.0;
  std::ostringstream os;
  open_svg(os, w, h);
  os << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << w - 20 << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  os << "<text x=\"16\" y=\"" << (top + bottom) / 2 << "\" transform=\"rotate(-90 16 " << (top + bottom) / 2
     << ")\" text-anchor=\"middle\">" << escape(unit) << "</text>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double x = left + 20 + 70.0 * static_cast<double>(i);
    const double bh = (bottom - top) * bars[i].value / vmax;
    os << "<rect class=\"bar\" x=\"" << num(x) << "\" y=\"" << num(bottom - bh) << "\" width=\"45\" height=\"" << num(bh)
       << "\" fill=\"" << kPalette[i % 6] << "\"/>\n";
    os << "<text x=\"" << num(x + 22.5) << "\" y=\"" << num(bottom - bh - 4) << "\" text-anchor=\"middle\">" << num(bars[i].value)
       << "</text>\n";
    os << "<text x=\"" << num(x + 22.5) << "\" y=\"" << bottom + 18 << "\" text-anchor=\"middle\">" << escape(bars[i].label)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::vector<Series>& series) {
  const int w = 640, h = 400;
  const double left = 70, right = 620, top = 40, bottom = 340;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) {
      throw ContractError("series '" + s.name + "' has mismatched x and y");
    }
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!std::isfinite(xmin)) {
    xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  }
  if (xmax == xmin) {
    xmax = xmin + 1;
  }
  if (ymax == ymin) {
    ymax = ymin + 1;
  }
  ymin = std::min(ymin, 0.0);
  auto px = [&](double x) { return left + (right - left) * (x - xmin) / (xmax - xmin); };
  auto py = [&](double y) { return bottom - (bottom - top) * (y - ymin) / (ymax - ymin); };
  std::ostringstream os;
  open_svg(os, w, h);
  os << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << right << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (left + right) / 2 << "\" y=\"" << bottom + 32 << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n";
  os << "<text x=\"" << left - 6 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\">" << num(ymax) << "</text>\n";
  os << "<text x=\"" << left - 6 << "\" y=\"" << bottom << "\" text-anchor=\"end\">" << num(ymin) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    os << "<polyline class=\"series\" fill=\"none\" stroke-width=\"1.5\" stroke=\"" << kPalette[k % 6] << "\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      os << (i ? " " : "") << num(px(s.x[i])) << "," << num(py(s.y[i]));
    }
    os << "\"/>\n";
    os << "<text x=\"" << right - 100 << "\" y=\"" << top + 16 * static_cast<double>(k + 1) << "\" fill=\"" << kPalette[k % 6] << "\">"
       << escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string skeleton_overlay_svg(
    const Skeleton& skeleton,
    const PoseSeq3D& pred,
    const PoseSeq3D& gt,
    const std::vector<std::size_t>& frames) {
  if (pred.frames != gt.frames || pred.joints != gt.joints || pred.joints != skeleton.joint_count()) {
    throw DimensionError("overlay needs prediction and ground truth of the same shape as the skeleton");
  }
  const int cell = 260;
  const int w = cell * static_cast<int>(std::max<std::size_t>(frames.size(), 1));
  const int h = cell + 30;
  std::ostringstream os;
  open_svg(os, w, h);
  for (std::size_t c = 0; c < frames.size(); ++c) {
    const std::size_t f = frames[c];
    if (f >= pred.frames) {
      throw ContractError("overlay frame " + std::to_string(f) + " is out of range");
    }
    // Both poses are drawn relative to the gt root with a shared scale.
    const double* root = gt.joint(f, skeleton.root());
    double extent = 1e-6;
    for (const PoseSeq3D* p : {&pred, &gt}) {
      for (std::size_t q = 0; q < p->joints; ++q) {
        extent = std::max({extent, std::abs(p->joint(f, q)[0] - root[0]), std::abs(p->joint(f, q)[1] - root[1])});
      }
    }
    const double scale = 0.42 * cell / extent;
    const double ox = cell * (static_cast<double>(c) + 0.5);
    const double oy = cell * 0.5 + 20;
    auto sx = [&](const double* p) { return ox + scale * (p[0] - root[0]); };
    auto sy = [&](const double* p) { return oy + scale * (p[1] - root[1]); };
    os << "<text x=\"" << num(ox) << "\" y=\"16\" text-anchor=\"middle\">frame " << f << "</text>\n";
    for (int pass = 0; pass < 2; ++pass) {
      const PoseSeq3D& p = pass == 0 ? gt : pred;
      const char* style = pass == 0 ? "stroke=\"gray\" stroke-dasharray=\"5,3\" class=\"gt\"" : "stroke=\"#d62728\" class=\"pred\"";
      for (std::size_t b = 0; b < skeleton.bone_count(); ++b) {
        const double* a = p.joint(f, skeleton.bone_parent(b));
        const double* e = p.joint(f, skeleton.bone_child()[b]);
        os << "<line x1=\"" << num(sx(a)) << "\" y1=\"" << num(sy(a)) << "\" x2=\"" << num(sx(e)) << "\" y2=\"" << num(sy(e)) << "\" "
           << style << " stroke-width=\"2\"/>\n";
      }
    }
  }
  os << "</svg>\n";
  return os.str();
}

} // namespace kinediff
