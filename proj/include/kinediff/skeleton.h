#pragma once

#include "kinediff/pose.h"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kinediff {

/// Number of hierarchy levels joints are grouped into (tree depth clamped).
inline constexpr int kHierarchyLevels = 6;

/// Kinematic tree over J joints. Bone i connects parent(bone_child(i)) to
/// bone_child(i); bones are the non-root joints in increasing index order.
class Skeleton {
 public:
  /// Validates that `parents` encodes a tree with exactly one root.
  /// `hierarchy_override`, when given, replaces the clamped-depth levels.
  static Skeleton from_parents(
      std::vector<int> parents,
      std::vector<std::string> names = {},
      std::optional<std::vector<int>> hierarchy_override = std::nullopt);

  std::size_t joint_count() const {
    return parents_.size();
  }
  std::size_t bone_count() const {
    return bone_child_.size();
  }
  std::size_t root() const {
    return root_;
  }
  const std::vector<int>& parents() const {
    return parents_;
  }
  const std::vector<std::string>& joint_names() const {
    return names_;
  }
  const std::vector<int>& hierarchy() const {
    return hierarchy_;
  }
  const std::vector<int>& depth() const {
    return depth_;
  }
  const std::vector<std::size_t>& bone_child() const {
    return bone_child_;
  }
  std::size_t bone_parent(std::size_t bone) const {
    return static_cast<std::size_t>(parents_[bone_child_[bone]]);
  }
  /// Bone index whose child is `joint`, or -1 for the root.
  int bone_of_joint(std::size_t joint) const {
    return joint_bone_[joint];
  }
  /// Joints ordered so every parent precedes its children.
  const std::vector<std::size_t>& topological_order() const {
    return topo_;
  }
  std::size_t joint_index(const std::string& name) const;

 private:
  std::vector<int> parents_;
  std::vector<std::string> names_;
  std::vector<int> depth_;
  std::vector<int> hierarchy_;
  std::vector<std::size_t> bone_child_;
  std::vector<int> joint_bone_;
  std::vector<std::size_t> topo_;
  std::size_t root_ = 0;
};

/// The 17-joint Human3.6M tree rooted at the pelvis.
Skeleton build_h36m_skeleton();

/// Joint-pair masks bucketed by undirected tree distance: {1}, {2}, {3}, {>=4}.
struct AdjacencyBank {
  std::size_t joints = 0;
  std::array<std::vector<double>, 4> masks; // each J x J, row-major

  double at(std::size_t order, std::size_t u, std::size_t v) const {
    return masks[order][u * joints + v];
  }
};

/// All-pairs hop counts on the undirected tree, J x J row-major.
std::vector<int> tree_distances(const Skeleton& skeleton);

AdjacencyBank graph_distance_banks(const Skeleton& skeleton);

/// Places joints in topological order: child = parent + length * dir, with
/// the root of frame n at root_pos[n]. Directions must be unit length within
/// 1e-6 unless the bone is flagged degenerate.
PoseSeq3D forward_kinematics(const Skeleton& skeleton, std::span<const Vec3> root_pos, const BoneDecomp& bones);

} // namespace kinediff
