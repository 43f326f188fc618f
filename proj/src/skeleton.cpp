#include "kinediff/skeleton.h"

#include "kinediff/errors.h"

#include <algorithm>
#include <cmath>
#include <deque>

namespace kinediff {

Skeleton Skeleton::from_parents(
    std::vector<int> parents,
    std::vector<std::string> names,
    std::optional<std::vector<int>> hierarchy_override) {
  const std::size_t j = parents.size();
  if (j < 2) {
    throw ConfigError("skeleton needs at least two joints");
  }
  if (names.empty()) {
    for (std::size_t i = 0; i < j; ++i) {
      names.push_back("joint_" + std::to_string(i));
    }
  }
  if (names.size() != j) {
    throw ConfigError("skeleton has " + std::to_string(j) + " parents but " + std::to_string(names.size()) + " names");
  }

  Skeleton s;
  int roots = 0;
  for (std::size_t i = 0; i < j; ++i) {
    if (parents[i] == -1) {
      ++roots;
      s.root_ = i;
    } else if (parents[i] < 0 || static_cast<std::size_t>(parents[i]) >= j || static_cast<std::size_t>(parents[i]) == i) {
      throw ConfigError("joint " + std::to_string(i) + " has invalid parent " + std::to_string(parents[i]));
    }
  }
  if (roots != 1) {
    throw ConfigError("skeleton must have exactly one root, found " + std::to_string(roots));
  }

  std::vector<std::vector<std::size_t>> children(j);
  for (std::size_t i = 0; i < j; ++i) {
    if (parents[i] >= 0) {
      children[static_cast<std::size_t>(parents[i])].push_back(i);
    }
  }
  s.depth_.assign(j, -1);
  s.depth_[s.root_] = 0;
  std::deque<std::size_t> queue = {s.root_};
  while (!queue.empty()) {
    const std::size_t u = queue.front();
    queue.pop_front();
    s.topo_.push_back(u);
    for (std::size_t c : children[u]) {
      s.depth_[c] = s.depth_[u] + 1;
      queue.push_back(c);
    }
  }
  if (s.topo_.size() != j) {
    throw ConfigError("skeleton parent array contains a cycle or unreachable joints");
  }

  if (hierarchy_override) {
    if (hierarchy_override->size() != j) {
      throw ConfigError("hierarchy override must list one level per joint");
    }
    for (int level : *hierarchy_override) {
      if (level < 0 || level >= kHierarchyLevels) {
        throw ConfigError("hierarchy level " + std::to_string(level) + " outside [0, 5]");
      }
    }
    s.hierarchy_ = *hierarchy_override;
  } else {
    s.hierarchy_.resize(j);
    for (std::size_t i = 0; i < j; ++i) {
      s.hierarchy_[i] = std::min(s.depth_[i], kHierarchyLevels - 1);
    }
  }

  s.joint_bone_.assign(j, -1);
  for (std::size_t i = 0; i < j; ++i) {
    if (i != s.root_) {
      s.joint_bone_[i] = static_cast<int>(s.bone_child_.size());
      s.bone_child_.push_back(i);
    }
  }
  s.parents_ = std::move(parents);
  s.names_ = std::move(names);
  return s;
}

std::size_t Skeleton::joint_index(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) {
    throw ConfigError("unknown joint name '" + name + "'");
  }
  return static_cast<std::size_t>(it - names_.begin());
}

Skeleton build_h36m_skeleton() {
  return Skeleton::from_parents(
      {-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15},
      {"pelvis",
       "right_hip",
       "right_knee",
       "right_ankle",
       "left_hip",
       "left_knee",
       "left_ankle",
       "spine",
       "thorax",
       "neck",
       "head",
       "left_shoulder",
       "left_elbow",
       "left_wrist",
       "right_shoulder",
       "right_elbow",
       "right_wrist"});
}

std::vector<int> tree_distances(const Skeleton& skeleton) {
  const std::size_t j = skeleton.joint_count();
  std::vector<std::vector<std::size_t>> adj(j);
  for (std::size_t i = 0; i < j; ++i) {
    const int p = skeleton.parents()[i];
    if (p >= 0) {
      adj[i].push_back(static_cast<std::size_t>(p));
      adj[static_cast<std::size_t>(p)].push_back(i);
    }
  }
  std::vector<int> dist(j * j, -1);
  for (std::size_t src = 0; src < j; ++src) {
    std::deque<std::size_t> queue = {src};
    dist[src * j + src] = 0;
    while (!queue.empty()) {
      const std::size_t u = queue.front();
      queue.pop_front();
      for (std::size_t v : adj[u]) {
        if (dist[src * j + v] < 0) {
          dist[src * j + v] = dist[src * j + u] + 1;
          queue.push_back(v);
        }
      }
    }
  }
  return dist;
}

AdjacencyBank graph_distance_banks(const Skeleton& skeleton) {
  const std::size_t j = skeleton.joint_count();
  const auto dist = tree_distances(skeleton);
  AdjacencyBank bank;
  bank.joints = j;
  for (auto& m : bank.masks) {
    m.assign(j * j, 0.0);
  }
  for (std::size_t i = 0; i < j * j; ++i) {
    const int d = dist[i];
    if (d >= 1) {
      bank.masks[static_cast<std::size_t>(std::min(d, 4) - 1)][i] = 1.0;
    }
  }
  return bank;
}

PoseSeq3D forward_kinematics(const Skeleton& skeleton, std::span<const Vec3> root_pos, const BoneDecomp& bones) {
  const std::size_t n = bones.frames;
  const std::size_t j = skeleton.joint_count();
  if (bones.bones != skeleton.bone_count() || root_pos.size() != n) {
    throw ContractError(
        "forward_kinematics: expected " + std::to_string(skeleton.bone_count()) + " bones and " + std::to_string(n) +
        " root positions");
  }
  for (std::size_t f = 0; f < n; ++f) {
    for (std::size_t b = 0; b < bones.bones; ++b) {
      if (!(bones.length(f, b) >= 0.0)) {
        throw ValidationError("negative bone length at frame " + std::to_string(f) + ", bone " + std::to_string(b));
      }
      if (bones.is_degenerate(f, b)) {
        continue;
      }
      const double* d = bones.dir(f, b);
      const double norm = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
      if (std::abs(norm - 1.0) > 1e-6) {
        throw ValidationError(
            "bone direction not unit length at frame " + std::to_string(f) + ", bone " + std::to_string(b) +
            " (norm " + std::to_string(norm) + ")");
      }
    }
  }
  const bool at_origin = std::all_of(root_pos.begin(), root_pos.end(), [](const Vec3& r) {
    return r[0] == 0.0 && r[1] == 0.0 && r[2] == 0.0;
  });
  PoseSeq3D pose(n, j, at_origin ? FrameOfReference::RootRelative : FrameOfReference::Camera);
  for (std::size_t f = 0; f < n; ++f) {
    double* root = pose.joint(f, skeleton.root());
    for (int k = 0; k < 3; ++k) {
      root[k] = root_pos[f][static_cast<std::size_t>(k)];
    }
    for (std::size_t joint : skeleton.topological_order()) {
      const int b = skeleton.bone_of_joint(joint);
      if (b < 0) {
        continue;
      }
      const auto bone = static_cast<std::size_t>(b);
      const double* parent = pose.joint(f, skeleton.bone_parent(bone));
      const double* d = bones.dir(f, bone);
      const double l = bones.length(f, bone);
      double* child = pose.joint(f, joint);
      for (int k = 0; k < 3; ++k) {
        child[k] = parent[k] + l * d[k];
      }
    }
  }
  return pose;
}

} // namespace kinediff
