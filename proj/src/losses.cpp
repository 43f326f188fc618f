#include "kinediff/losses.h"

#include "kinediff/disentangle.h"
#include "kinediff/errors.h"

namespace kinediff {

namespace {

void check_pair(const Tensor& pred, const Tensor& gt, const char* what) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError(
        std::string(what) + ": prediction " + shape_to_string(pred.shape()) + " vs ground truth " +
        shape_to_string(gt.shape()));
  }
  if (pred.rank() < 3 || pred.shape().back() != 3) {
    throw DimensionError(std::string(what) + ": poses must be [..., N, J, 3]");
  }
}

// Consecutive-frame differences along the frame axis of [..., N, J, 3].
Tensor frame_delta(const Tensor& y) {
  const std::size_t axis = y.rank() - 3;
  const std::size_t n = y.dim(axis);
  std::vector<std::size_t> next(n - 1);
  std::vector<std::size_t> prev(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    next[i] = i + 1;
    prev[i] = i;
  }
  return gather(y, axis, next) - gather(y, axis, prev);
}

Tensor masked_mean(const Tensor& values, const Tensor& mask) {
  double count = 0.0;
  for (double m : mask.values()) {
    count += m;
  }
  if (count == 0.0) {
    return sum(values * mask);
  }
  return sum(values * mask) * (1.0 / count);
}

} // namespace

void LossWeights::validate(std::size_t joints) const {
  for (double w : {w_pos, w_dis, w_temp, w_vel}) {
    if (!(w >= 0.0)) {
      throw ConfigError("loss weights must be nonnegative");
    }
  }
  if (!joint_weights.empty()) {
    if (joint_weights.size() != joints) {
      throw ConfigError("loss.joint_weights must list one weight per joint");
    }
    for (double w : joint_weights) {
      if (!(w >= 0.0)) {
        throw ConfigError("loss.joint_weights must be nonnegative");
      }
    }
  }
}

Tensor pose_loss(const Tensor& pred, const Tensor& gt) {
  check_pair(pred, gt, "pose_loss");
  return mean(norm_last(pred - gt));
}

DisentangleTerms disentangle_terms(const Tensor& pred, const Tensor& gt, const Skeleton& skeleton) {
  check_pair(pred, gt, "disentangle_loss");
  const BoneTensors p = decompose_tensor(skeleton, pred);
  BoneTensors g;
  {
    NoGradGuard no_grad;
    g = decompose_tensor(skeleton, gt.detach());
  }
  const Tensor mask = p.valid * g.valid;
  Shape col = p.lengths.shape();
  col.push_back(1);
  const Tensor length_err = norm_last(reshape(p.lengths - g.lengths, col));
  const Tensor dir_err = norm_last(p.dirs - g.dirs);
  DisentangleTerms t;
  t.length = masked_mean(length_err, mask);
  t.direction = masked_mean(dir_err, mask);
  t.total = t.length + t.direction;
  return t;
}

Tensor disentangle_loss(const Tensor& pred, const Tensor& gt, const Skeleton& skeleton) {
  return disentangle_terms(pred, gt, skeleton).total;
}

Tensor temporal_loss(const Tensor& pred, const std::vector<double>& joint_weights, bool* single_frame) {
  if (pred.rank() < 3 || pred.shape().back() != 3) {
    throw DimensionError("temporal_loss: poses must be [..., N, J, 3]");
  }
  const std::size_t n = pred.dim(pred.rank() - 3);
  const std::size_t j = pred.dim(pred.rank() - 2);
  if (single_frame) {
    *single_frame = n < 2;
  }
  if (n < 2) {
    return pred.requires_grad() ? sum(pred) * 0.0 : Tensor::scalar(0.0);
  }
  std::vector<double> w = joint_weights.empty() ? std::vector<double>(j, 1.0) : joint_weights;
  if (w.size() != j) {
    throw DimensionError("temporal_loss: joint weight count differs from joint count");
  }
  const Tensor sq = sum(square(frame_delta(pred)), pred.rank() - 1); // [..., N-1, J]
  const Tensor weighted = sum(sq * Tensor(Shape{j}, w), sq.rank() - 1); // [..., N-1]
  return mean(weighted);
}

Tensor velocity_loss(const Tensor& pred, const Tensor& gt, bool* single_frame) {
  check_pair(pred, gt, "velocity_loss");
  const std::size_t n = pred.dim(pred.rank() - 3);
  if (single_frame) {
    *single_frame = n < 2;
  }
  if (n < 2) {
    return pred.requires_grad() ? sum(pred) * 0.0 : Tensor::scalar(0.0);
  }
  return mean(norm_last(frame_delta(pred) - frame_delta(gt.detach())));
}

LossBreakdown total_loss(const Tensor& pred, const Tensor& gt, const Skeleton& skeleton, const LossWeights& weights) {
  LossBreakdown out;
  Tensor total = sum(pred) * 0.0;
  auto add = [&](double w, const Tensor& term, double& slot) {
    slot = term.item();
    if (w != 0.0) {
      total = total + term * w;
    }
  };
  add(weights.w_pos, pose_loss(pred, gt), out.pos);
  add(weights.w_dis, disentangle_loss(pred, gt, skeleton), out.dis);
  add(weights.w_temp, temporal_loss(pred, weights.joint_weights), out.temp);
  add(weights.w_vel, velocity_loss(pred, gt), out.vel);
  out.total = total;
  return out;
}

} // namespace kinediff
