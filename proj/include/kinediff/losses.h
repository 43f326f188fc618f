#pragma once

#include "kinediff/skeleton.h"
#include "kinediff/tensor.h"

#include <vector>

namespace kinediff {

struct LossWeights {
  double w_pos = 1.0;
  double w_dis = 1.0;
  double w_temp = 0.0;
  double w_vel = 0.0;
  std::vector<double> joint_weights; // empty means all ones

  void validate(std::size_t joints) const;
};

// All losses take poses shaped [..., N, J, 3] and reduce by the mean.

/// Mean per-joint Euclidean distance.
Tensor pose_loss(const Tensor& pred, const Tensor& gt);

/// Bone-length term plus bone-direction term, both mean L2 over the bones
/// that are non-degenerate in prediction and ground truth.
struct DisentangleTerms {
  Tensor length;
  Tensor direction;
  Tensor total;
};
DisentangleTerms disentangle_terms(const Tensor& pred, const Tensor& gt, const Skeleton& skeleton);
Tensor disentangle_loss(const Tensor& pred, const Tensor& gt, const Skeleton& skeleton);

/// Mean over consecutive-frame pairs of sum_j w_j |y[t+1, j] - y[t, j]|^2.
/// Single-frame input yields 0 and sets *single_frame when given.
Tensor temporal_loss(const Tensor& pred, const std::vector<double>& joint_weights, bool* single_frame = nullptr);

/// Mean norm of velocity differences between prediction and ground truth.
Tensor velocity_loss(const Tensor& pred, const Tensor& gt, bool* single_frame = nullptr);

struct LossBreakdown {
  Tensor total;
  double pos = 0.0;
  double dis = 0.0;
  double temp = 0.0;
  double vel = 0.0;
};

/// Weighted sum; terms with zero weight are reported but not differentiated.
LossBreakdown total_loss(const Tensor& pred, const Tensor& gt, const Skeleton& skeleton, const LossWeights& weights);

} // namespace kinediff
