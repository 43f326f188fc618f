// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.

#include "kinediff/checkpoint.h"
#include "kinediff/config.h"
#include "kinediff/data.h"
#include "kinediff/denoiser.h"
#include "kinediff/diffusion.h"
#include "kinediff/disentangle.h"
#include "kinediff/errors.h"
#include "kinediff/losses.h"
#include "kinediff/metrics.h"
#include "kinediff/pipeline.h"
#include "kinediff/skeleton.h"
#include "test_support.h"

#include <Eigen/Dense>
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace kinediff;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

PoseSeq3D random_pose(std::size_t frames, std::size_t joints, Rng& rng) {
  PoseSeq3D p(frames, joints);
  for (double& v : p.coords) {
    v = 0.3 * rng.normal();
  }
  return p;
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized().toRotationMatrix();
}

PoseSeq3D similarity(const PoseSeq3D& x, const Eigen::Matrix3d& r, double s, const Eigen::Vector3d& c) {
  PoseSeq3D out = x;
  for (std::size_t f = 0; f < x.frames; ++f) {
    for (std::size_t q = 0; q < x.joints; ++q) {
      const Eigen::Vector3d w = s * r * Eigen::Vector3d(x.joint(f, q)) + c;
      for (int k = 0; k < 3; ++k) {
        out.joint(f, q)[k] = w(k);
      }
    }
  }
  return out;
}

// A plausible wrong prediction: off in scale and orientation, plus jitter.
PoseSeq3D structured_guess(const PoseSeq3D& gt, Rng& rng) {
  const double s = 1.0 + (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.05 + 0.1 * rng.uniform());
  const Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  const Eigen::Matrix3d r = Eigen::AngleAxisd(0.1 * axis.norm(), axis.normalized()).toRotationMatrix();
  PoseSeq3D p = similarity(gt, r, s, Eigen::Vector3d::Zero());
  for (double& v : p.coords) {
    v += 0.01 * rng.normal();
  }
  return p;
}

// ---------------------------------------------------------------------------

Outcome disentangle_roundtrip() {
  const Skeleton sk = build_h36m_skeleton();
  Rng rng(101);
  const PoseSeq3D pose = random_pose(1000, sk.joint_count(), rng);
  const Stopwatch watch;
  const BoneDecomp bones = decompose(sk, pose);
  const PoseSeq3D back = reconstruct(sk, root_trajectory(sk, pose), bones);
  const double secs = watch.seconds();
  const double err = testing::max_abs_diff(back.coords, pose.coords);
  return {err < 1e-9 && secs < 5.0, fmt("max error %.3g over 1000 poses in %.3f s", err, secs)};
}

Outcome schedule_closed_form() {
  const DiffusionSchedule sch = cosine_schedule(1000, 0.008);
  // Independent evaluation in extended precision, applying the same per-step
  // cap on beta.
  const long double pi = std::numbers::pi_v<long double>;
  auto f = [&](int t) {
    const long double c = std::cos(((t / 1000.0L + 0.008L) / 1.008L) * pi / 2.0L);
    return c * c;
  };
  long double prev = 1.0L;
  double worst = std::abs(sch.at(0) - 1.0);
  bool decreasing = true;
  for (int t = 1; t <= 1000; ++t) {
    const long double beta = std::min(1.0L - f(t) / f(t - 1), 0.999L);
    const long double ab = prev * (1.0L - beta);
    worst = std::max(worst, static_cast<double>(std::abs(static_cast<long double>(sch.at(t)) - ab)));
    decreasing = decreasing && sch.at(t) < sch.at(t - 1);
    prev = ab;
  }
  // Anchors computed with 50-digit arithmetic.
  const std::pair<int, double> anchors[] = {
      {1, 0.9999587157751782221976465},
      {250, 0.8470121613269047344602667},
      {500, 0.4938435904406377133165527},
      {750, 0.1442721023857357108845866},
      {999, 0.000002428766907034468355989156},
      {1000, 2.428766907034468355989156e-9},
  };
  double anchor_err = 0.0;
  for (const auto& [t, v] : anchors) {
    anchor_err = std::max(anchor_err, std::abs(sch.at(t) - v));
  }
  const bool ok = worst < 1e-12 && anchor_err < 1e-12 && decreasing && sch.at(0) == 1.0;
  return {ok, fmt("max |error| %.3g, anchors %.3g, alpha_bar(0) = %.17g, strictly decreasing: ", worst, anchor_err, sch.at(0)) +
                  (decreasing ? "yes" : "no")};
}

Outcome forward_noise_statistics() {
  const DiffusionSchedule sch = cosine_schedule(1000);
  const std::size_t n = 100000;
  const double x0 = 0.7;
  const Tensor clean(Shape{n}, std::vector<double>(n, x0));
  bool ok = true;
  std::string detail;
  for (int t : {250, 500, 1000}) {
    Rng rng(200 + static_cast<std::uint64_t>(t));
    const NoisedSample s = forward_noise(sch, clean, t, rng);
    double mean = 0.0;
    for (double v : s.xt.values()) {
      mean += v;
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : s.xt.values()) {
      var += (v - mean) * (v - mean);
    }
    var /= static_cast<double>(n - 1);
    const double ab = sch.at(t);
    const double mean_sigma = std::sqrt((1.0 - ab) / static_cast<double>(n));
    const double var_sigma = std::sqrt(2.0 / static_cast<double>(n)) * (1.0 - ab);
    const double zm = std::abs(mean - std::sqrt(ab) * x0) / mean_sigma;
    const double zv = std::abs(var - (1.0 - ab)) / var_sigma;
    ok = ok && zm < 3.0 && zv < 3.0;
    detail += fmt("t=%.0f: mean %.2f sigma, var %.2f sigma; ", t, zm, zv);
  }
  detail.resize(detail.size() - 2);
  return {ok, detail};
}

DenoiseFn oracle(const PoseSeq3D& gt) {
  return [gt](const Tensor& fused, std::span<const int>) {
    const std::size_t h = fused.dim(0);
    std::vector<double> v;
    for (std::size_t k = 0; k < h; ++k) {
      v.insert(v.end(), gt.coords.begin(), gt.coords.end());
    }
    return Tensor(Shape{h, gt.frames, gt.joints, 3}, std::move(v));
  };
}

Outcome ddim_fixed_point() {
  const Skeleton sk = build_h36m_skeleton();
  const DiffusionSchedule sch = cosine_schedule(1000);
  const SynthClip clip = synth_motion(sk, 9, 3, MotionKind::Walk);
  const PoseSeq3D gt = root_relative(clip.pose3d);
  const InferSetup setup{&sk, &sch, DiffusionSettings{}, InputMode::Disentangled};
  double worst = 0.0;
  for (std::size_t h : {1u, 5u}) {
    const InferResult r = infer_with(oracle(gt), setup, clip.pose2d, InferOptions{h, 10, 5});
    for (const auto& hyp : r.set.hypotheses) {
      worst = std::max(worst, testing::max_abs_diff(hyp.coords, gt.coords));
    }
  }
  return {worst < 1e-9, fmt("W=10, H in {1, 5}: max error %.3g", worst)};
}

Outcome khst_reduction() {
  const Skeleton sk = build_h36m_skeleton();
  const DenoiserConfig cfg{};
  const Denoiser d(cfg, sk, 7);
  Rng rng(8);
  const std::size_t c = cfg.channels;
  auto w = [&](std::size_t in, std::size_t out) { return testing::random_tensor({in, out}, rng, 0.3); };
  auto b = [&](std::size_t n) { return testing::random_tensor({n}, rng, 0.1); };
  const AttentionWeights aw{w(c, c), b(c), w(c, c), b(c), w(c, c), b(c), w(c, c), b(c)};
  const Tensor h = testing::random_tensor({2, 3, 17, c}, rng);
  const Tensor khst = khst_attention(h, adjacency_stack(d.adjacency()), Tensor(Shape{4}, 0.0), aw, cfg.heads);
  const Tensor plain = multi_head_attention(h, aw, cfg.heads);
  const double err = testing::max_abs_diff(khst.values(), plain.values());

  const AdjacencyBank& bank = d.adjacency();
  bool partition = true;
  for (std::size_t u = 0; u < 17; ++u) {
    for (std::size_t v = 0; v < 17; ++v) {
      double total = 0.0;
      for (std::size_t k = 0; k < 4; ++k) {
        const double m = bank.at(k, u, v);
        partition = partition && (m == 0.0 || m == 1.0);
        total += m;
      }
      partition = partition && total == (u == v ? 0.0 : 1.0);
    }
  }
  return {err < 1e-12 && partition,
          fmt("alpha = 0 vs plain attention: %.3g; banks partition off-diagonal pairs: ", err) + (partition ? "yes" : "no")};
}

Outcome gradient_checks() {
  const Stopwatch watch;
  const Skeleton sk = build_h36m_skeleton();
  Rng rng(61);
  double worst = 0.0;
  std::string worst_name;
  bool all_live = true;
  std::size_t checked = 0;
  auto record = [&](const std::vector<testing::GradCheck>& checks, const std::string& prefix) {
    for (const auto& c : checks) {
      ++checked;
      if (c.rel_err > worst || worst_name.empty()) {
        worst = std::max(worst, c.rel_err);
        worst_name = prefix + c.name;
      }
      all_live = all_live && c.analytic_norm > 0.0;
    }
  };

  // Losses, on a 2-frame batch of plausible poses.
  const SynthClip clip = synth_motion(sk, 2, 62, MotionKind::Wave);
  const PoseSeq3D rel = root_relative(clip.pose3d);
  const Tensor gt(Shape{1, 2, 17, 3}, rel.coords);
  std::vector<double> noisy = rel.coords;
  for (double& v : noisy) {
    v += 0.05 * rng.normal();
  }
  const Tensor pred = Tensor::parameter(Shape{1, 2, 17, 3}, noisy);
  std::vector<double> jw(17);
  for (double& x : jw) {
    x = 0.5 + rng.uniform();
  }
  LossWeights weights;
  weights.w_pos = 0.7;
  weights.w_dis = 1.3;
  weights.w_temp = 0.4;
  weights.w_vel = 0.9;
  weights.joint_weights = jw;
  const std::vector<std::pair<std::string, std::function<Tensor()>>> losses = {
      {"pose", [&] { return pose_loss(pred, gt); }},
      {"disentangle", [&] { return disentangle_loss(pred, gt, sk); }},
      {"temporal", [&] { return temporal_loss(pred, jw); }},
      {"velocity", [&] { return velocity_loss(pred, gt); }},
      {"total", [&] { return total_loss(pred, gt, sk, weights).total; }},
  };
  for (const auto& [name, fn] : losses) {
    record(testing::check_gradients(fn, {{"pred", pred}}), "loss." + name + ".");
  }

  // Every denoiser parameter, with nonzero mixing coefficients.
  DenoiserConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.depth = 1;
  cfg.frames = 2;
  Denoiser d(cfg, sk, 63);
  for (double& a : d.parameter("loop0.khst.alpha").mutable_values()) {
    a = 0.2 * rng.normal();
  }
  const Tensor in = testing::random_tensor({1, 2, 17, 6}, rng);
  const Tensor target = testing::random_tensor({1, 2, 17, 3}, rng);
  const std::vector<int> ts = {417};
  std::vector<std::pair<std::string, Tensor>> params;
  bool has_alpha = false;
  bool has_hie = false;
  for (const auto& nt : d.parameters()) {
    params.emplace_back(nt.name, nt.tensor);
    has_alpha = has_alpha || nt.name.find("alpha") != std::string::npos;
    has_hie = has_hie || nt.name == "hie";
  }
  record(testing::check_gradients([&] { return mean(square(d.forward(in, ts) - target)); }, params), "denoiser.");

  const double secs = watch.seconds();
  const bool ok = worst < 1e-4 && all_live && has_alpha && has_hie && secs < 120.0;
  return {ok, fmt("%.0f tensors, worst rel-err %.3g (", static_cast<double>(checked), worst) + worst_name +
                  fmt("), %.1f s", secs) + (all_live ? "" : ", some gradient is identically zero")};
}

Outcome metric_invariants() {
  const Skeleton sk = build_h36m_skeleton();
  Rng rng(71);
  double worst_p = 0.0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const SynthClip clip = synth_motion(sk, 8, 700 + i, motion_for_clip(MotionKind::Mixed, i));
    const Eigen::Vector3d c(rng.normal(), rng.normal(), rng.normal());
    const double s = 0.5 + rng.uniform();
    worst_p = std::max(worst_p, p_mpjpe(similarity(clip.pose3d, random_rotation(rng), s, c), clip.pose3d));
  }
  std::size_t chain_violations = 0;
  std::size_t best_violations = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const SynthClip clip = synth_motion(sk, 4, 900 + i, motion_for_clip(MotionKind::Mixed, i));
    const PoseSeq3D gt = root_relative(clip.pose3d);
    HypothesisSet hs;
    for (std::uint64_t k = 0; k < 5; ++k) {
      hs.hypotheses.push_back(structured_guess(gt, rng));
      hs.seeds.push_back(k);
      const PoseSeq3D& p = hs.hypotheses.back();
      const double pm = p_mpjpe(p, gt);
      const double nm = n_mpjpe(p, gt);
      const double m = mpjpe(p, gt);
      chain_violations += (pm <= nm + 1e-9 && nm <= m + 1e-9) ? 0 : 1;
    }
    const BestScores best = select_best(hs, gt);
    best_violations += best.j_best <= best.p_best + 1e-9 ? 0 : 1;
  }
  const bool ok = worst_p < 1e-9 && chain_violations == 0 && best_violations == 0;
  return {ok, fmt("P-MPJPE under similarity %.3g; P <= N <= MPJPE violations %.0f/500; J-Best <= P-Best violations %.0f/100",
                  worst_p, static_cast<double>(chain_violations), static_cast<double>(best_violations))};
}

// Settings shared by the learning criteria.
ExperimentConfig learning_config(std::uint64_t seed, InputMode mode) {
  ExperimentConfig cfg = parse_config(R"({
    "window": {"receptive_field": 27},
    "denoiser": {"channels": 64, "depth": 2},
    "optimizer": {"steps": 2000, "lr": 0.01}
  })");
  cfg.denoiser.input_mode = mode;
  cfg.seeds = {seed, seed + 1, seed + 2};
  return cfg;
}

Dataset learning_data() {
  SynthOptions o;
  o.frames = 27;
  o.train_clips = 16;
  o.test_clips = 8;
  o.seed = 11;
  return synth_dataset(build_h36m_skeleton(), o);
}

struct Trained {
  std::unique_ptr<TrainState> state;
  Dataset data;
};

Outcome learning_signal(Trained& trained) {
  const Stopwatch watch;
  trained.data = learning_data();
  const ExperimentConfig cfg = learning_config(0, InputMode::Disentangled);
  trained.state = std::make_unique<TrainState>(cfg);
  const auto windows = training_windows(trained.data, cfg);
  train(*trained.state, windows);
  const double train_mm = evaluate(trained.state->model, trained.data, EvalOptions{1, 1, 0, "train"}).value("ALL", "mpjpe");
  const double test_mm = evaluate(trained.state->model, trained.data, EvalOptions{1, 1, 0, "test"}).value("ALL", "mpjpe");

  // Epoch-1 pose loss, disentangled versus joint-coordinate input.
  const std::size_t per_epoch = (windows.size() + cfg.optimizer.batch_size - 1) / cfg.optimizer.batch_size;
  std::string ablation;
  std::size_t wins = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    double epoch_loss[2] = {0.0, 0.0};
    for (int m = 0; m < 2; ++m) {
      ExperimentConfig c = learning_config(seed, m == 0 ? InputMode::Disentangled : InputMode::Joint);
      c.optimizer.steps = per_epoch;
      TrainState s(c);
      for (const StepLosses& l : train(s, windows)) {
        epoch_loss[m] += l.pos / static_cast<double>(per_epoch);
      }
    }
    wins += epoch_loss[0] <= epoch_loss[1] ? 1 : 0;
    ablation += fmt(" %.4f/%.4f", epoch_loss[0], epoch_loss[1]);
  }
  const double secs = watch.seconds();
  const bool ok = train_mm < 5.0 && test_mm < 25.0 && wins == 3 && secs < 1200.0;
  return {ok, fmt("train MPJPE %.2f mm, held-out %.2f mm; epoch-1 pose loss disentangled/joint:", train_mm, test_mm) + ablation +
                  fmt("; %.0f s", secs)};
}

Outcome hypothesis_monotonicity(const Trained& trained) {
  if (!trained.state) {
    return {false, "no trained model"};
  }
  const Model& model = trained.state->model;
  const double one = evaluate(model, trained.data, EvalOptions{1, 1, 0, "test"}).value("ALL", "mpjpe");
  const double twenty = evaluate(model, trained.data, EvalOptions{20, 1, 0, "test"}).value("ALL", "p_best");
  return {twenty <= one, fmt("P-Best H=20 %.2f mm vs H=1 %.2f mm", twenty, one)};
}

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "kinediff_acceptance_cli.txt";
  const std::string cmd = "\"" KINEDIFF_CLI_PATH "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

Outcome reproducibility() {
  const fs::path root = fs::temp_directory_path() / "kinediff_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "config.json") << R"({
    "window": {"receptive_field": 6},
    "denoiser": {"channels": 16, "depth": 1, "heads": 2},
    "optimizer": {"steps": 5, "batch_size": 2, "log_every": 0}
  })";
  const std::string cfg = (root / "config.json").string();
  const std::string data = (root / "data").string();
  bool ok = cli("synth --out " + data + " --frames 12 --clips 3 --test-clips 2 --seed 3").code == 0;
  std::vector<unsigned char> ckpt[2];
  std::vector<unsigned char> report[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path run = root / ("run" + std::to_string(i));
    ok = ok && cli("train --config " + cfg + " --data " + data + " --out " + run.string()).code == 0;
    ok = ok && cli("eval --config " + cfg + " --ckpt " + (run / "checkpoint.kdck").string() + " --data " + data +
                   " --hypotheses 3 --steps 2 --report " + (run / "report.json").string())
                       .code == 0;
    if (ok) {
      ckpt[i] = read_file_bytes(run / "checkpoint.kdck");
      report[i] = read_file_bytes(run / "report.json");
    }
  }
  const bool identical = ok && ckpt[0] == ckpt[1] && report[0] == report[1] && !ckpt[0].empty();

  // F3DP: decode then encode reproduces the file byte for byte.
  bool roundtrip = false;
  std::size_t truncated_code = 0;
  bool typed = false;
  for (const auto& e : fs::directory_iterator(data)) {
    if (e.path().extension() != ".f3dp") {
      continue;
    }
    const auto bytes = read_file_bytes(e.path());
    roundtrip = encode_pose(decode_pose(bytes)) == bytes;
    auto cut = bytes;
    cut.resize(cut.size() - 7);
    write_file_bytes(e.path(), cut);
    try {
      decode_pose(cut);
    } catch (const ParseError&) {
      typed = true;
    }
    break;
  }
  const CliResult trunc = cli("train --config " + cfg + " --data " + data + " --out " + (root / "bad").string());
  truncated_code = static_cast<std::size_t>(trunc.code);
  const bool parse_message = trunc.output.find("parse error") != std::string::npos;
  const bool pass = identical && roundtrip && typed && truncated_code == 3 && parse_message;
  return {pass, std::string("checkpoints and reports identical: ") + (identical ? "yes" : "no") + "; F3DP roundtrip: " +
                    (roundtrip ? "yes" : "no") + fmt("; truncated file exit code %.0f", static_cast<double>(truncated_code)) +
                    (typed && parse_message ? " with parse error" : " without parse error")};
}

} // namespace

int main() {
  Trained trained;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"disentangle roundtrip", disentangle_roundtrip},
      {"noise schedule closed form", schedule_closed_form},
      {"forward noise statistics", forward_noise_statistics},
      {"DDIM oracle fixed point", ddim_fixed_point},
      {"KHST reduction", khst_reduction},
      {"finite-difference gradients", gradient_checks},
      {"metric invariants", metric_invariants},
      {"desk-scale learning signal", [&] { return learning_signal(trained); }},
      {"hypothesis-count monotonicity", [&] { return hypothesis_monotonicity(trained); }},
      {"reproducibility and typed errors", reproducibility},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
