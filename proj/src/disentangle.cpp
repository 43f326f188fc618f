#include "kinediff/disentangle.h"

#include "kinediff/errors.h"

#include <cmath>

namespace kinediff {

BoneDecomp decompose(const Skeleton& skeleton, const PoseSeq3D& pose) {
  if (pose.joints != skeleton.joint_count()) {
    throw ContractError(
        "pose has " + std::to_string(pose.joints) + " joints, skeleton has " + std::to_string(skeleton.joint_count()));
  }
  BoneDecomp out(pose.frames, skeleton.bone_count());
  for (std::size_t n = 0; n < pose.frames; ++n) {
    for (std::size_t b = 0; b < skeleton.bone_count(); ++b) {
      const double* c = pose.joint(n, skeleton.bone_child()[b]);
      const double* p = pose.joint(n, skeleton.bone_parent(b));
      const double v[3] = {c[0] - p[0], c[1] - p[1], c[2] - p[2]};
      const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      out.length(n, b) = len;
      double* d = out.dir(n, b);
      if (len < kDegenerateBoneLength) {
        out.degenerate[n * out.bones + b] = 1;
        d[0] = d[1] = d[2] = 0.0;
      } else {
        for (int k = 0; k < 3; ++k) {
          d[k] = v[k] / len;
        }
      }
    }
  }
  return out;
}

PoseSeq3D reconstruct(const Skeleton& skeleton, std::span<const Vec3> root, const BoneDecomp& bones) {
  return forward_kinematics(skeleton, root, bones);
}

std::vector<Vec3> root_trajectory(const Skeleton& skeleton, const PoseSeq3D& pose) {
  std::vector<Vec3> out(pose.frames);
  for (std::size_t n = 0; n < pose.frames; ++n) {
    const double* r = pose.joint(n, skeleton.root());
    out[n] = {r[0], r[1], r[2]};
  }
  return out;
}

BoneTensors decompose_tensor(const Skeleton& skeleton, const Tensor& pose) {
  const std::size_t rank = pose.rank();
  if (rank < 2 || pose.shape()[rank - 1] != 3 || pose.shape()[rank - 2] != skeleton.joint_count()) {
    throw ContractError("decompose_tensor expects [..., J, 3] with J = " + std::to_string(skeleton.joint_count()));
  }
  std::vector<std::size_t> parent_idx;
  for (std::size_t b = 0; b < skeleton.bone_count(); ++b) {
    parent_idx.push_back(skeleton.bone_parent(b));
  }
  const Tensor diff = gather(pose, rank - 2, skeleton.bone_child()) - gather(pose, rank - 2, parent_idx);
  Tensor lengths = norm_last(diff);

  // Degenerate bones divide by 1 instead of ~0 and are zeroed by the mask.
  std::vector<double> valid(lengths.numel());
  std::vector<double> safe_offset(lengths.numel());
  for (std::size_t i = 0; i < valid.size(); ++i) {
    const bool ok = lengths.values()[i] >= kDegenerateBoneLength;
    valid[i] = ok ? 1.0 : 0.0;
    safe_offset[i] = ok ? 0.0 : 1.0;
  }
  Shape col_shape = lengths.shape();
  col_shape.push_back(1);
  const Tensor valid_t(lengths.shape(), valid);
  const Tensor denom = reshape(lengths + Tensor(lengths.shape(), safe_offset), col_shape);
  const Tensor dirs = diff / denom * reshape(valid_t, col_shape);
  return {lengths, dirs, valid_t};
}

} // namespace kinediff
