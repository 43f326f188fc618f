#pragma once

#include "kinediff/pose.h"
#include "kinediff/skeleton.h"

#include <string>
#include <vector>

namespace kinediff {

// Static SVG renderings of results. Each function returns a complete document.

struct Bar {
  std::string label;
  double value = 0.0;
};

std::string bar_chart_svg(const std::string& title, const std::string& unit, const std::vector<Bar>& bars);

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::vector<Series>& series);

/// Front view (x right, y down) of selected frames; prediction solid,
/// ground truth gray dashed.
std::string skeleton_overlay_svg(
    const Skeleton& skeleton,
    const PoseSeq3D& pred,
    const PoseSeq3D& gt,
    const std::vector<std::size_t>& frames);

} // namespace kinediff
