#pragma once

#include "kinediff/pose.h"
#include "kinediff/skeleton.h"
#include "kinediff/tensor.h"

#include <vector>

namespace kinediff {

/// Bones shorter than this get a zero direction and the degenerate flag.
inline constexpr double kDegenerateBoneLength = 1e-9;

/// Per-frame bone lengths and unit directions of `pose`.
BoneDecomp decompose(const Skeleton& skeleton, const PoseSeq3D& pose);

/// Inverse of decompose: forward kinematics from per-frame root positions.
PoseSeq3D reconstruct(const Skeleton& skeleton, std::span<const Vec3> root, const BoneDecomp& bones);

/// Root joint position of every frame.
std::vector<Vec3> root_trajectory(const Skeleton& skeleton, const PoseSeq3D& pose);

/// Differentiable decomposition of poses shaped [..., J, 3].
struct BoneTensors {
  Tensor lengths; // [..., B]
  Tensor dirs;    // [..., B, 3], zero where degenerate
  Tensor valid;   // [..., B], 1 for usable bones, 0 for degenerate ones (constant)
};
BoneTensors decompose_tensor(const Skeleton& skeleton, const Tensor& pose);

} // namespace kinediff
