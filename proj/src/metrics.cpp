#include "kinediff/metrics.h"

#include "kinediff/errors.h"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace kinediff {

namespace {

void check_pair(const PoseSeq3D& pred, const PoseSeq3D& gt) {
  if (pred.frames != gt.frames || pred.joints != gt.joints) {
    throw DimensionError(
        "metric inputs differ in shape: " + std::to_string(pred.frames) + "x" + std::to_string(pred.joints) + " vs " +
        std::to_string(gt.frames) + "x" + std::to_string(gt.joints));
  }
  if (pred.frames == 0 || pred.joints == 0) {
    throw ContractError("metrics need at least one frame and one joint");
  }
}

double dist3(const double* a, const double* b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) {
    s += x;
  }
  return s / static_cast<double>(v.size());
}

constexpr double kMm = 1000.0;

} // namespace

void HypothesisSet::validate() const {
  if (hypotheses.empty()) {
    throw ContractError("hypothesis set is empty");
  }
  for (const auto& h : hypotheses) {
    if (h.frames != hypotheses.front().frames || h.joints != hypotheses.front().joints) {
      throw ContractError("hypotheses disagree on frame or joint count");
    }
  }
}

std::vector<double> joint_errors_mm(const PoseSeq3D& pred, const PoseSeq3D& gt, std::size_t root) {
  check_pair(pred, gt);
  std::vector<double> err(pred.frames * pred.joints);
  for (std::size_t n = 0; n < pred.frames; ++n) {
    const double* pr = pred.joint(n, root);
    const double* gr = gt.joint(n, root);
    for (std::size_t j = 0; j < pred.joints; ++j) {
      const double* p = pred.joint(n, j);
      const double* g = gt.joint(n, j);
      const double d[3] = {(p[0] - pr[0]) - (g[0] - gr[0]), (p[1] - pr[1]) - (g[1] - gr[1]), (p[2] - pr[2]) - (g[2] - gr[2])};
      err[n * pred.joints + j] = kMm * std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    }
  }
  return err;
}

double mpjpe(const PoseSeq3D& pred, const PoseSeq3D& gt, std::size_t root) {
  return mean_of(joint_errors_mm(pred, gt, root));
}

PoseSeq3D procrustes_align(const PoseSeq3D& pred, const PoseSeq3D& gt, bool* degenerate) {
  check_pair(pred, gt);
  const auto j = static_cast<Eigen::Index>(pred.joints);
  PoseSeq3D out = pred;
  bool any_degenerate = false;
  for (std::size_t n = 0; n < pred.frames; ++n) {
    Eigen::MatrixXd x(j, 3);
    Eigen::MatrixXd y(j, 3);
    for (Eigen::Index r = 0; r < j; ++r) {
      for (int k = 0; k < 3; ++k) {
        x(r, k) = gt.joint(n, static_cast<std::size_t>(r))[k];
        y(r, k) = pred.joint(n, static_cast<std::size_t>(r))[k];
      }
    }
    const Eigen::RowVector3d mu_x = x.colwise().mean();
    const Eigen::RowVector3d mu_y = y.colwise().mean();
    x.rowwise() -= mu_x;
    y.rowwise() -= mu_y;
    const double norm_x = x.norm();
    const double norm_y = y.norm();
    if (norm_x < 1e-12 || norm_y < 1e-12) {
      any_degenerate = true;
      continue; // left unaligned; caller falls back to root alignment
    }
    x /= norm_x;
    y /= norm_y;
    const Eigen::Matrix3d h = x.transpose() * y;
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d v = svd.matrixV();
    Eigen::Vector3d s = svd.singularValues();
    const Eigen::Matrix3d u = svd.matrixU();
    // Rotation mapping rows of y onto rows of x: y * R with R = V U^T.
    if ((v * u.transpose()).determinant() < 0.0) {
      v.col(2) *= -1.0;
      s(2) *= -1.0;
    }
    const Eigen::Matrix3d rot = v * u.transpose();
    const double scale = s.sum() * norm_x / norm_y;
    const Eigen::MatrixXd aligned = (scale * (y * norm_y) * rot).rowwise() + mu_x;
    for (Eigen::Index r = 0; r < j; ++r) {
      for (int k = 0; k < 3; ++k) {
        out.joint(n, static_cast<std::size_t>(r))[k] = aligned(r, k);
      }
    }
  }
  if (degenerate) {
    *degenerate = any_degenerate;
  }
  return out;
}

double p_mpjpe(const PoseSeq3D& pred, const PoseSeq3D& gt, bool* degenerate, std::size_t root) {
  check_pair(pred, gt);
  bool deg = false;
  const PoseSeq3D aligned = procrustes_align(pred, gt, &deg);
  if (degenerate) {
    *degenerate = deg;
  }
  if (deg) {
    // Per-frame: aligned frames use absolute errors, collapsed frames the
    // root-aligned ones.
    double total = 0.0;
    const auto root_err = joint_errors_mm(pred, gt, root);
    for (std::size_t n = 0; n < pred.frames; ++n) {
      bool collapsed = true;
      for (std::size_t q = 0; q < pred.joints && collapsed; ++q) {
        collapsed = aligned.joint(n, q)[0] == pred.joint(n, q)[0] && aligned.joint(n, q)[1] == pred.joint(n, q)[1] &&
            aligned.joint(n, q)[2] == pred.joint(n, q)[2];
      }
      for (std::size_t q = 0; q < pred.joints; ++q) {
        total += collapsed ? root_err[n * pred.joints + q] : kMm * dist3(aligned.joint(n, q), gt.joint(n, q));
      }
    }
    return total / static_cast<double>(pred.frames * pred.joints);
  }
  double total = 0.0;
  for (std::size_t n = 0; n < pred.frames; ++n) {
    for (std::size_t q = 0; q < pred.joints; ++q) {
      total += kMm * dist3(aligned.joint(n, q), gt.joint(n, q));
    }
  }
  return total / static_cast<double>(pred.frames * pred.joints);
}

double n_mpjpe(const PoseSeq3D& pred, const PoseSeq3D& gt, std::size_t root) {
  check_pair(pred, gt);
  const PoseSeq3D p = root_relative(pred, root);
  const PoseSeq3D g = root_relative(gt, root);
  PoseSeq3D scaled = p;
  for (std::size_t n = 0; n < p.frames; ++n) {
    double pg = 0.0;
    double pp = 0.0;
    for (std::size_t i = 0; i < p.joints * 3; ++i) {
      pg += p.joint(n, 0)[i] * g.joint(n, 0)[i];
      pp += p.joint(n, 0)[i] * p.joint(n, 0)[i];
    }
    const double s = pp > 0.0 ? pg / pp : 1.0;
    for (std::size_t i = 0; i < p.joints * 3; ++i) {
      scaled.joint(n, 0)[i] = s * p.joint(n, 0)[i];
    }
  }
  return mpjpe(scaled, g, root);
}

double mpjve(const PoseSeq3D& pred, const PoseSeq3D& gt, std::size_t root) {
  check_pair(pred, gt);
  if (pred.frames < 2) {
    return 0.0;
  }
  const PoseSeq3D p = root_relative(pred, root);
  const PoseSeq3D g = root_relative(gt, root);
  double total = 0.0;
  for (std::size_t n = 0; n + 1 < p.frames; ++n) {
    for (std::size_t q = 0; q < p.joints; ++q) {
      double d2 = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double vp = p.joint(n + 1, q)[k] - p.joint(n, q)[k];
        const double vg = g.joint(n + 1, q)[k] - g.joint(n, q)[k];
        d2 += (vp - vg) * (vp - vg);
      }
      total += std::sqrt(d2);
    }
  }
  return kMm * total / static_cast<double>((p.frames - 1) * p.joints);
}

PckAuc pck_auc(const PoseSeq3D& pred, const PoseSeq3D& gt, double threshold_mm) {
  check_pair(pred, gt);
  std::vector<double> err;
  err.reserve(pred.frames * pred.joints);
  for (std::size_t n = 0; n < pred.frames; ++n) {
    for (std::size_t q = 0; q < pred.joints; ++q) {
      err.push_back(kMm * dist3(pred.joint(n, q), gt.joint(n, q)));
    }
  }
  auto fraction_within = [&](double t) {
    const auto hits = std::count_if(err.begin(), err.end(), [t](double e) { return e <= t; });
    return static_cast<double>(hits) / static_cast<double>(err.size());
  };
  PckAuc out;
  out.pck = fraction_within(threshold_mm);
  double auc = 0.0;
  int steps = 0;
  for (int t = 0; t <= 150; t += 5) {
    auc += fraction_within(static_cast<double>(t));
    ++steps;
  }
  out.auc = auc / steps;
  return out;
}

std::array<double, 6> mpjpe_per_hierarchy(const PoseSeq3D& pred, const PoseSeq3D& gt, const Skeleton& skeleton) {
  const auto err = joint_errors_mm(pred, gt, skeleton.root());
  std::array<double, 6> sum{};
  std::array<std::size_t, 6> count{};
  for (std::size_t n = 0; n < pred.frames; ++n) {
    for (std::size_t q = 0; q < pred.joints; ++q) {
      const auto level = static_cast<std::size_t>(skeleton.hierarchy()[q]);
      sum[level] += err[n * pred.joints + q];
      ++count[level];
    }
  }
  std::array<double, 6> out{};
  for (std::size_t k = 0; k < 6; ++k) {
    out[k] = count[k] ? sum[k] / static_cast<double>(count[k]) : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

BestScores select_best(const HypothesisSet& hs, const PoseSeq3D& gt, std::size_t root) {
  hs.validate();
  std::vector<std::vector<double>> errs;
  for (const auto& h : hs.hypotheses) {
    errs.push_back(joint_errors_mm(h, gt, root));
  }
  const std::size_t n = gt.frames;
  const std::size_t j = gt.joints;
  double p_total = 0.0;
  double j_total = 0.0;
  for (std::size_t f = 0; f < n; ++f) {
    double best_frame = std::numeric_limits<double>::infinity();
    for (const auto& e : errs) {
      double frame = 0.0;
      for (std::size_t q = 0; q < j; ++q) {
        frame += e[f * j + q];
      }
      best_frame = std::min(best_frame, frame / static_cast<double>(j));
    }
    p_total += best_frame;
    for (std::size_t q = 0; q < j; ++q) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& e : errs) {
        best = std::min(best, e[f * j + q]);
      }
      j_total += best;
    }
  }
  return {p_total / static_cast<double>(n), j_total / static_cast<double>(n * j)};
}

Aggregation aggregate(const HypothesisSet& hs, const PoseSeq2D& x2d, const Camera* camera) {
  hs.validate();
  const PoseSeq3D& first = hs.hypotheses.front();
  const std::size_t n = first.frames;
  const std::size_t j = first.joints;
  Aggregation out;
  if (!camera) {
    PoseSeq3D avg(n, j, first.frame_ref);
    for (const auto& h : hs.hypotheses) {
      for (std::size_t i = 0; i < avg.coords.size(); ++i) {
        avg.coords[i] += h.coords[i];
      }
    }
    for (double& v : avg.coords) {
      v /= static_cast<double>(hs.size());
    }
    out.p_agg = avg;
    out.j_agg = avg;
    out.mean_fallback = true;
    return out;
  }
  camera->validate();
  if (x2d.frames != n || x2d.joints != j) {
    throw ContractError("2D input does not match hypothesis shape");
  }
  for (const auto& h : hs.hypotheses) {
    if (h.frame_ref != FrameOfReference::Camera) {
      throw ContractError("reprojection aggregation needs camera-space hypotheses");
    }
  }
  // err[h][f*j+q]: 2D reprojection distance in normalized image units.
  std::vector<std::vector<double>> err(hs.size(), std::vector<double>(n * j));
  for (std::size_t h = 0; h < hs.size(); ++h) {
    for (std::size_t f = 0; f < n; ++f) {
      for (std::size_t q = 0; q < j; ++q) {
        const auto p = camera->project_normalized(hs.hypotheses[h].joint(f, q));
        const double* x = x2d.joint(f, q);
        err[h][f * j + q] = std::hypot(p[0] - x[0], p[1] - x[1]);
      }
    }
  }
  // Ties are broken by coordinates so the result does not depend on the
  // order hypotheses are listed in.
  auto better = [](double e, const double* c, double best_e, const double* best_c, std::size_t len) {
    if (e != best_e) {
      return e < best_e;
    }
    return std::lexicographical_compare(c, c + len, best_c, best_c + len);
  };
  out.p_agg = PoseSeq3D(n, j, FrameOfReference::Camera);
  out.j_agg = PoseSeq3D(n, j, FrameOfReference::Camera);
  for (std::size_t f = 0; f < n; ++f) {
    std::size_t best_h = 0;
    double best_e = std::numeric_limits<double>::infinity();
    for (std::size_t h = 0; h < hs.size(); ++h) {
      double e = 0.0;
      for (std::size_t q = 0; q < j; ++q) {
        e += err[h][f * j + q];
      }
      if (h == 0 || better(e, hs.hypotheses[h].joint(f, 0), best_e, hs.hypotheses[best_h].joint(f, 0), j * 3)) {
        best_e = e;
        best_h = h;
      }
    }
    std::copy_n(hs.hypotheses[best_h].joint(f, 0), j * 3, out.p_agg.joint(f, 0));
    for (std::size_t q = 0; q < j; ++q) {
      std::size_t bh = 0;
      for (std::size_t h = 1; h < hs.size(); ++h) {
        if (better(err[h][f * j + q], hs.hypotheses[h].joint(f, q), err[bh][f * j + q], hs.hypotheses[bh].joint(f, q), 3)) {
          bh = h;
        }
      }
      std::copy_n(hs.hypotheses[bh].joint(f, q), 3, out.j_agg.joint(f, q));
    }
  }
  return out;
}

} // namespace kinediff
