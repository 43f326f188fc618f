#pragma once

#include "kinediff/pose.h"
#include "kinediff/skeleton.h"

#include <array>
#include <cstdint>
#include <vector>

namespace kinediff {

/// H candidate sequences produced by reverse sampling, plus how they were made.
struct HypothesisSet {
  std::vector<PoseSeq3D> hypotheses;
  std::vector<std::uint64_t> seeds; // one per hypothesis
  std::size_t steps = 0;            // W
  std::vector<int> timesteps;

  std::size_t size() const {
    return hypotheses.size();
  }
  /// Throws ContractError when empty or when hypotheses disagree on N or J.
  void validate() const;
};

inline constexpr double kPckThresholdMm = 150.0;

// Position metrics are in millimeters for inputs in meters. Unless stated
// otherwise both poses are root-aligned (joint `root` subtracted per frame).

/// Root-aligned joint errors in mm, N x J row-major.
std::vector<double> joint_errors_mm(const PoseSeq3D& pred, const PoseSeq3D& gt, std::size_t root = 0);

double mpjpe(const PoseSeq3D& pred, const PoseSeq3D& gt, std::size_t root = 0);

/// MPJPE after the per-frame similarity transform (rotation, translation,
/// scale) that best maps pred onto gt in the least-squares sense. Frames where
/// either pose collapses to a point fall back to root-aligned errors and set
/// *degenerate.
double p_mpjpe(const PoseSeq3D& pred, const PoseSeq3D& gt, bool* degenerate = nullptr, std::size_t root = 0);

/// Similarity-aligned copy of pred (per frame).
PoseSeq3D procrustes_align(const PoseSeq3D& pred, const PoseSeq3D& gt, bool* degenerate = nullptr);

/// MPJPE after scaling each root-aligned predicted frame by
/// s* = <pred, gt> / <pred, pred>.
double n_mpjpe(const PoseSeq3D& pred, const PoseSeq3D& gt, std::size_t root = 0);

/// Mean norm of the difference of consecutive-frame velocities, mm/frame.
/// Single-frame sequences give 0.
double mpjve(const PoseSeq3D& pred, const PoseSeq3D& gt, std::size_t root = 0);

struct PckAuc {
  double pck = 0.0;
  double auc = 0.0;
};

/// Fraction of joints whose error is at most `threshold_mm`, and the mean of
/// that fraction over thresholds 0, 5, ..., 150 mm. Distances are taken on
/// the coordinates as given (no alignment).
PckAuc pck_auc(const PoseSeq3D& pred, const PoseSeq3D& gt, double threshold_mm = kPckThresholdMm);

/// Root-aligned MPJPE restricted to each hierarchy level (NaN for levels
/// without joints).
std::array<double, 6> mpjpe_per_hierarchy(const PoseSeq3D& pred, const PoseSeq3D& gt, const Skeleton& skeleton);

struct BestScores {
  double p_best = 0.0; // per frame, the hypothesis with least MPJPE
  double j_best = 0.0; // per joint, the hypothesis with least error
};
BestScores select_best(const HypothesisSet& hs, const PoseSeq3D& gt, std::size_t root = 0);

struct Aggregation {
  PoseSeq3D p_agg;
  PoseSeq3D j_agg;
  bool mean_fallback = false; // true when no camera was available
};

/// Reprojection-based aggregation. With a camera, hypotheses must be in
/// camera space; P-Agg keeps per frame the hypothesis with least total 2D
/// reprojection error against x2d and J-Agg (JPMA) keeps per joint the
/// hypothesis with least error for that joint. Without a camera both are the
/// element-wise mean over hypotheses.
Aggregation aggregate(const HypothesisSet& hs, const PoseSeq2D& x2d, const Camera* camera);

} // namespace kinediff
