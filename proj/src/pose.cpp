#include "kinediff/pose.h"

#include "kinediff/errors.h"

#include <cmath>
#include <string>

namespace kinediff {

namespace {

void check_values(const std::vector<double>& v, std::size_t expected, const char* what) {
  if (v.size() != expected) {
    throw DataError(std::string(what) + ": coordinate count does not match frames x joints");
  }
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw DataError(std::string(what) + ": non-finite coordinate at index " + std::to_string(i));
    }
  }
}

} // namespace

void PoseSeq3D::validate() const {
  if (frames == 0 || joints == 0) {
    throw DataError("3D pose sequence must have at least one frame and joint");
  }
  check_values(coords, frames * joints * 3, "3D pose");
}

void PoseSeq2D::validate() const {
  if (frames == 0 || joints == 0) {
    throw DataError("2D pose sequence must have at least one frame and joint");
  }
  check_values(coords, frames * joints * 2, "2D pose");
  if (!confidence.empty()) {
    if (confidence.size() != frames * joints) {
      throw DataError("2D pose confidence must have one value per joint and frame");
    }
    for (double c : confidence) {
      if (!(c >= 0.0 && c <= 1.0)) {
        throw DataError("2D pose confidence outside [0, 1]");
      }
    }
  }
}

void Camera::validate() const {
  if (!(fx > 0.0 && fy > 0.0)) {
    throw DataError("camera focal lengths must be positive");
  }
  if (!(width > 0.0 && height > 0.0)) {
    throw DataError("camera image size must be positive");
  }
}

std::array<double, 2> Camera::project_pixels(const double* p) const {
  if (!(p[2] > 0.0)) {
    throw NumericError("cannot project a point at or behind the camera plane");
  }
  return {fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy};
}

std::array<double, 2> Camera::project_normalized(const double* p) const {
  const auto px = project_pixels(p);
  return normalize_screen(px[0], px[1], width, height);
}

std::array<double, 2> normalize_screen(double u, double v, double width, double height) {
  return {u / width * 2.0 - 1.0, v / height * 2.0 - 1.0};
}

std::array<double, 2> unnormalize_screen(double x, double y, double width, double height) {
  return {(x + 1.0) * 0.5 * width, (y + 1.0) * 0.5 * height};
}

PoseSeq3D root_relative(const PoseSeq3D& pose, std::size_t root) {
  PoseSeq3D out = pose;
  out.frame_ref = FrameOfReference::RootRelative;
  for (std::size_t n = 0; n < pose.frames; ++n) {
    const double* r = pose.joint(n, root);
    for (std::size_t j = 0; j < pose.joints; ++j) {
      double* q = out.joint(n, j);
      const double* src = pose.joint(n, j);
      for (int k = 0; k < 3; ++k) {
        q[k] = src[k] - r[k];
      }
    }
  }
  return out;
}

} // namespace kinediff
