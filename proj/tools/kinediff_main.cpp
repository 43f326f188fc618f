// Command-line front end: synth, train, eval, sample, plot.
#include "kinediff/config.h"
#include "kinediff/data.h"
#include "kinediff/errors.h"
#include "kinediff/pipeline.h"
#include "kinediff/plot.h"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using namespace kinediff;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Internal parallelism is single-threaded; the variable is still validated so
// typos surface as config errors.
void check_thread_env() {
  const char* env = std::getenv("KINEDIFF_THREADS");
  if (!env) {
    return;
  }
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || n < 1) {
    throw ConfigError(std::string("KINEDIFF_THREADS must be a positive integer, got '") + env + "'");
  }
}

struct SynthArgs {
  std::string out;
  std::size_t joints = 17;
  std::size_t frames = 108;
  std::size_t clips = 16;
  std::size_t test_clips = 4;
  std::uint64_t seed = 0;
  std::string motion = "mixed";
};

int run_synth(const SynthArgs& a) {
  SynthOptions o;
  o.joints = a.joints;
  o.frames = a.frames;
  o.train_clips = a.clips;
  o.test_clips = a.test_clips;
  o.seed = a.seed;
  o.kind = parse_motion_kind(a.motion);
  if (a.joints != 17) {
    throw ConfigError("synth supports the 17-joint skeleton only (--joints 17)");
  }
  const Dataset data = synth_dataset(build_h36m_skeleton(), o);
  save_dataset(a.out, data);
  std::cout << "wrote " << data.clips.size() << " clips to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
};

int run_train(const TrainArgs& a) {
  const ExperimentConfig cfg = load_config(a.config);
  const Dataset data = load_dataset(a.data);
  const auto windows = training_windows(data, cfg, "train");
  TrainState state = a.resume.empty() ? TrainState(cfg) : load_train_state(cfg, a.resume);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "config.json", dump_config(cfg));
  const fs::path log_path = fs::path(a.out) / "loss_log.csv";
  const bool append = !a.resume.empty() && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!append) {
    log << "step,total,l_pos,l_dis,l_temp,l_vel,lr\n";
  }
  TrainOptions opts;
  opts.checkpoint_dir = a.out;
  opts.on_step = [&](const StepLosses& s) {
    char line[256];
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", s.step, s.total, s.pos, s.dis, s.temp, s.vel, s.lr);
    log << line;
    const std::size_t every = cfg.optimizer.log_every;
    if (every > 0 && (s.step % every == 0 || s.step + 1 == cfg.optimizer.steps)) {
      std::fprintf(stderr, "step %zu loss %.6f pos %.6f dis %.6f\n", s.step, s.total, s.pos, s.dis);
    }
  };
  train(state, windows, opts);
  save_train_state(fs::path(a.out) / "checkpoint.kdck", state);
  std::cout << "trained " << state.step << " steps on " << windows.size() << " windows; checkpoint "
            << (fs::path(a.out) / "checkpoint.kdck").string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string config;
  std::string ckpt;
  std::string data;
  std::string report;
  std::string split = "test";
  std::optional<std::size_t> hypotheses;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
};

int run_eval(const EvalArgs& a) {
  const ExperimentConfig cfg = load_config(a.config);
  const Model model = load_model(cfg, a.ckpt);
  const Dataset data = load_dataset(a.data);
  EvalOptions o;
  o.hypotheses = a.hypotheses.value_or(cfg.diffusion.hypotheses);
  o.steps = a.steps.value_or(cfg.diffusion.steps);
  o.seed = a.seed.value_or(cfg.seeds.sample);
  o.split = a.split;
  if (o.hypotheses < 1) {
    throw ConfigError("--hypotheses must be >= 1");
  }
  if (o.steps < 1 || o.steps > static_cast<std::size_t>(cfg.diffusion.T)) {
    throw ConfigError("--steps must be in [1, T]");
  }
  const Report report = evaluate(model, data, o);
  write_text(a.report, report.to_json());
  fs::path text_path = a.report;
  text_path.replace_extension(".txt");
  write_text(text_path, report.to_text());
  std::cout << report.to_text();
  return 0;
}

struct SampleArgs {
  std::string config;
  std::string ckpt;
  std::string input;
  std::string out;
  std::optional<std::size_t> hypotheses;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
};

int run_sample(const SampleArgs& a) {
  const ExperimentConfig cfg = load_config(a.config);
  const Model model = load_model(cfg, a.ckpt);
  const PoseSeq2D x2d = to_pose2d(read_pose_file(a.input));
  const std::size_t j = model.skeleton.joint_count();
  if (x2d.joints != j) {
    throw DataError(a.input + ": has " + std::to_string(x2d.joints) + " joints, model expects " + std::to_string(j));
  }
  InferOptions io;
  io.hypotheses = a.hypotheses.value_or(cfg.diffusion.hypotheses);
  io.steps = a.steps.value_or(cfg.diffusion.steps);
  const std::uint64_t seed = a.seed.value_or(cfg.seeds.sample);
  std::vector<PoseSeq3D> hyps(io.hypotheses, PoseSeq3D(x2d.frames, j));
  PoseSeq3D agg(x2d.frames, j);
  std::size_t counter = 0;
  for (const Window& w : make_windows(x2d.frames, cfg.window)) {
    PoseSeq2D win(w.frames.size(), j);
    for (std::size_t i = 0; i < w.frames.size(); ++i) {
      std::copy_n(x2d.joint(w.frames[i], 0), j * 2, win.joint(i, 0));
    }
    io.seed = seed + (static_cast<std::uint64_t>(counter++) << 20);
    const InferResult r = infer(model, win, io);
    auto place = [&](std::size_t m, std::size_t raw) {
      for (std::size_t k = 0; k < hyps.size(); ++k) {
        const PoseSeq3D rel = root_relative(r.set.hypotheses[k], model.skeleton.root());
        std::copy_n(rel.joint(m, 0), j * 3, hyps[k].joint(raw, 0));
      }
      std::copy_n(r.j_agg.joint(m, 0), j * 3, agg.joint(raw, 0));
    };
    if (cfg.window.sample_type == SampleType::Seq2Seq) {
      for (std::size_t i = 0; i < w.frames.size(); ++i) {
        if (!w.padded[i]) {
          place(i, w.frames[i]);
        }
      }
    } else {
      place(w.center, w.target);
    }
  }
  fs::create_directories(a.out);
  for (std::size_t k = 0; k < hyps.size(); ++k) {
    char name[64];
    std::snprintf(name, sizeof name, "hypothesis_%03zu.f3dp", k);
    write_pose_file(fs::path(a.out) / name, to_array(hyps[k]));
  }
  write_pose_file(fs::path(a.out) / "aggregated.f3dp", to_array(agg));
  std::cout << "wrote " << hyps.size() << " hypotheses and the mean aggregate to " << a.out << "\n";
  return 0;
}

struct PlotArgs {
  std::string report;
  std::string pred;
  std::string gt;
  std::string loss_log;
  std::string out;
  std::size_t frames = 4;
};

int run_plot(const PlotArgs& a) {
  const bool overlay = !a.pred.empty() || !a.gt.empty();
  if (overlay && (a.pred.empty() || a.gt.empty())) {
    throw ConfigError("--pred and --gt must be given together");
  }
  if (a.report.empty() && !overlay && a.loss_log.empty()) {
    throw ConfigError("plot needs --report, --loss-log, or --pred with --gt");
  }
  fs::create_directories(a.out);
  int written = 0;
  if (!a.report.empty()) {
    const Report report = parse_report(read_text(a.report));
    std::vector<Bar> bars;
    for (int k = 0; k < kHierarchyLevels; ++k) {
      const std::string metric = "mpjpe_level_" + std::to_string(k);
      if (report.has("ALL", metric)) {
        bars.push_back({"level " + std::to_string(k), report.value("ALL", metric)});
      }
    }
    if (bars.empty()) {
      throw DataError(a.report + ": no mpjpe_level_* records for sequence ALL");
    }
    write_text(fs::path(a.out) / "hierarchy_mpjpe.svg", bar_chart_svg("MPJPE per hierarchy level", "mm", bars));
    ++written;
  }
  if (!a.loss_log.empty()) {
    std::istringstream in(read_text(a.loss_log));
    std::string line;
    std::getline(in, line);
    if (line.rfind("step,", 0) != 0) {
      throw DataError(a.loss_log + ": missing header line");
    }
    std::vector<Series> series = {{"l_pos", {}, {}}, {"l_dis", {}, {}}, {"l_temp", {}, {}}, {"l_vel", {}, {}}};
    std::size_t row = 1;
    while (std::getline(in, line)) {
      ++row;
      double v[7];
      if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf,%lf,%lf", &v[0], &v[1], &v[2], &v[3], &v[4], &v[5], &v[6]) != 7) {
        throw DataError(a.loss_log + ": malformed row " + std::to_string(row));
      }
      for (std::size_t k = 0; k < 4; ++k) {
        series[k].x.push_back(v[0]);
        series[k].y.push_back(v[2 + k]);
      }
    }
    write_text(fs::path(a.out) / "loss_curves.svg", line_chart_svg("training losses", "step", series));
    ++written;
  }
  if (overlay) {
    const PoseSeq3D pred = to_pose3d(read_pose_file(a.pred));
    const PoseSeq3D gt = to_pose3d(read_pose_file(a.gt));
    const Skeleton sk = build_h36m_skeleton();
    if (pred.joints != sk.joint_count() || gt.joints != sk.joint_count()) {
      throw DataError("overlay inputs must have 17 joints");
    }
    if (pred.frames != gt.frames) {
      throw DataError(a.pred + " and " + a.gt + " differ in frame count");
    }
    std::vector<std::size_t> frames;
    const std::size_t count = std::min(a.frames, pred.frames);
    for (std::size_t i = 0; i < count; ++i) {
      frames.push_back(count == 1 ? 0 : i * (pred.frames - 1) / (count - 1));
    }
    write_text(fs::path(a.out) / "skeleton_overlay.svg", skeleton_overlay_svg(sk, pred, gt, frames));
    ++written;
  }
  std::cout << "wrote " << written << " plot(s) to " << a.out << "\n";
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"kinediff: diffusion-based 2D-to-3D pose lifting with bone disentanglement"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset (F3DP files, manifest, cameras)");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--joints", synth.joints, "Joint count (17)")->capture_default_str();
  s->add_option("--frames", synth.frames, "Frames per clip")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--clips", synth.clips, "Training clips")->capture_default_str();
  s->add_option("--test-clips", synth.test_clips, "Held-out clips")->capture_default_str();
  s->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  s->add_option("--motion", synth.motion, "walk, wave, squat, sway, or mixed")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the denoiser");
  t->add_option("--config", tr.config, "Experiment config (JSON)")->required();
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Output directory for checkpoints and the loss log")->required();
  t->add_option("--resume", tr.resume, "Checkpoint to resume from");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint and write a metrics report");
  e->add_option("--config", ev.config, "Experiment config (JSON)")->required();
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--report", ev.report, "Report path (JSON); a .txt text block is written alongside")->required();
  e->add_option("--split", ev.split, "Dataset split")->capture_default_str();
  e->add_option("--hypotheses", ev.hypotheses, "Hypothesis count H (default: config)");
  e->add_option("--steps", ev.steps, "DDIM iterations W (default: config)");
  e->add_option("--seed", ev.seed, "Sampling seed (default: config)");

  SampleArgs sa;
  auto* m = app.add_subcommand("sample", "Lift a 2D sequence to 3D hypotheses");
  m->add_option("--config", sa.config, "Experiment config (JSON)")->required();
  m->add_option("--ckpt", sa.ckpt, "Checkpoint")->required();
  m->add_option("--input", sa.input, "2D pose file (F3DP, C=2)")->required();
  m->add_option("--out", sa.out, "Output directory")->required();
  m->add_option("--hypotheses", sa.hypotheses, "Hypothesis count H (default: config)");
  m->add_option("--steps", sa.steps, "DDIM iterations W (default: config)");
  m->add_option("--seed", sa.seed, "Sampling seed (default: config)");

  PlotArgs pl;
  auto* p = app.add_subcommand("plot", "Render SVG figures from a report, a loss log, or predictions");
  p->add_option("--report", pl.report, "Metrics report (JSON)");
  p->add_option("--loss-log", pl.loss_log, "Loss log CSV from train");
  p->add_option("--pred", pl.pred, "Predicted 3D poses (F3DP)");
  p->add_option("--gt", pl.gt, "Ground-truth 3D poses (F3DP)");
  p->add_option("--frames", pl.frames, "Frames in the overlay")->capture_default_str();
  p->add_option("--out", pl.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    check_thread_env();
    if (*s) {
      return run_synth(synth);
    }
    if (*t) {
      return run_train(tr);
    }
    if (*e) {
      return run_eval(ev);
    }
    if (*m) {
      return run_sample(sa);
    }
    if (*p) {
      return run_plot(pl);
    }
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return 2;
  } catch (const ParseError& err) {
    std::cerr << "parse error: " << err.what() << "\n";
    return 3;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return 3;
  } catch (const NumericError& err) {
    std::cerr << "numeric error: " << err.what() << "\n";
    return 4;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 1;
}
