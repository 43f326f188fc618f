#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace kinediff {

using Vec3 = std::array<double, 3>;

enum class FrameOfReference { RootRelative, Camera };

/// Frame-major 3D joint positions, N x J x 3, meters.
struct PoseSeq3D {
  std::size_t frames = 0;
  std::size_t joints = 0;
  std::vector<double> coords;
  FrameOfReference frame_ref = FrameOfReference::RootRelative;

  PoseSeq3D() = default;
  PoseSeq3D(std::size_t n, std::size_t j, FrameOfReference ref = FrameOfReference::RootRelative)
      : frames(n), joints(j), coords(n * j * 3, 0.0), frame_ref(ref) {}

  double* joint(std::size_t n, std::size_t j) {
    return coords.data() + (n * joints + j) * 3;
  }
  const double* joint(std::size_t n, std::size_t j) const {
    return coords.data() + (n * joints + j) * 3;
  }

  /// Throws DataError on N == 0, size mismatch or non-finite values.
  void validate() const;
};

/// Frame-major 2D keypoints, N x J x 2, normalized to [-1, 1].
struct PoseSeq2D {
  std::size_t frames = 0;
  std::size_t joints = 0;
  std::vector<double> coords;
  std::vector<double> confidence; // empty, or N x J in [0, 1]

  PoseSeq2D() = default;
  PoseSeq2D(std::size_t n, std::size_t j) : frames(n), joints(j), coords(n * j * 2, 0.0) {}

  double* joint(std::size_t n, std::size_t j) {
    return coords.data() + (n * joints + j) * 2;
  }
  const double* joint(std::size_t n, std::size_t j) const {
    return coords.data() + (n * joints + j) * 2;
  }

  void validate() const;
};

/// Per-frame bone lengths (N x B) and unit directions (N x B x 3), B = J - 1.
/// Bones shorter than the degeneracy threshold carry a zero direction and a
/// set flag.
struct BoneDecomp {
  std::size_t frames = 0;
  std::size_t bones = 0;
  std::vector<double> lengths;
  std::vector<double> dirs;
  std::vector<unsigned char> degenerate;

  BoneDecomp() = default;
  BoneDecomp(std::size_t n, std::size_t b)
      : frames(n), bones(b), lengths(n * b, 0.0), dirs(n * b * 3, 0.0), degenerate(n * b, 0) {}

  double& length(std::size_t n, std::size_t b) {
    return lengths[n * bones + b];
  }
  double length(std::size_t n, std::size_t b) const {
    return lengths[n * bones + b];
  }
  double* dir(std::size_t n, std::size_t b) {
    return dirs.data() + (n * bones + b) * 3;
  }
  const double* dir(std::size_t n, std::size_t b) const {
    return dirs.data() + (n * bones + b) * 3;
  }
  bool is_degenerate(std::size_t n, std::size_t b) const {
    return degenerate[n * bones + b] != 0;
  }
};

/// Pinhole intrinsics plus the image size used for 2D normalization.
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  double width = 1.0;
  double height = 1.0;

  void validate() const;
  /// Pixel coordinates of a camera-space point (z must be positive).
  std::array<double, 2> project_pixels(const double* point) const;
  /// Normalized [-1, 1] coordinates of a camera-space point.
  std::array<double, 2> project_normalized(const double* point) const;
};

/// Maps pixel coordinates onto [-1, 1] by image width and height.
std::array<double, 2> normalize_screen(double u, double v, double width, double height);
std::array<double, 2> unnormalize_screen(double x, double y, double width, double height);

/// Subtracts the root joint from every joint of every frame.
PoseSeq3D root_relative(const PoseSeq3D& pose, std::size_t root = 0);

} // namespace kinediff
