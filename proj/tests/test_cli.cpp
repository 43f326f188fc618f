#include "kinediff/checkpoint.h"
#include "kinediff/data.h"
#include "kinediff/pipeline.h"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

namespace kinediff {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string output;
};

CliRun run(const std::string& args, const std::string& env = "") {
  const fs::path log = fs::temp_directory_path() / "kinediff_cli_test_output.txt";
  const std::string cmd = env + " \"" KINEDIFF_CLI_PATH "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root() {
    return fs::temp_directory_path() / "kinediff_cli_test";
  }
  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    std::ofstream(root() / "config.json") << R"({
      "window": {"receptive_field": 4},
      "denoiser": {"channels": 8, "depth": 1, "heads": 2},
      "optimizer": {"steps": 3, "batch_size": 2, "log_every": 0}
    })";
  }
  fs::path dir(const std::string& name) const {
    return root() / name;
  }
};

TEST_F(Cli, HelpDocumentsEveryFlag) {
  const CliRun top = run("--help");
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"synth", "train", "eval", "sample", "plot"}) {
    EXPECT_NE(top.output.find(sub), std::string::npos) << sub;
  }
  const CliRun ev = run("eval --help");
  EXPECT_EQ(ev.code, 0);
  for (const char* flag : {"--config", "--ckpt", "--data", "--hypotheses", "--steps", "--report"}) {
    EXPECT_NE(ev.output.find(flag), std::string::npos) << flag;
  }
}

TEST_F(Cli, UnknownFlagAndMissingSubcommandAreRejected) {
  EXPECT_EQ(run("synth --out x --bogus 1").code, 2);
  EXPECT_EQ(run("").code, 2);
}

TEST_F(Cli, SynthIsIdempotent) {
  ASSERT_EQ(run("synth --out " + dir("a").string() + " --frames 9 --clips 2 --test-clips 1 --seed 4").code, 0);
  ASSERT_EQ(run("synth --out " + dir("b").string() + " --frames 9 --clips 2 --test-clips 1 --seed 4").code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir("a"))) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(dir("b") / e.path().filename())) << e.path();
  }
  EXPECT_GE(files, 8u);
}

TEST_F(Cli, TrainEvalSamplePlot) {
  const std::string data = dir("data").string();
  ASSERT_EQ(run("synth --out " + data + " --frames 8 --clips 2 --test-clips 1").code, 0);
  const std::string cfg = (root() / "config.json").string();
  const CliRun tr = run("train --config " + cfg + " --data " + data + " --out " + dir("run").string());
  ASSERT_EQ(tr.code, 0) << tr.output;
  const std::string log = slurp(dir("run") / "loss_log.csv");
  EXPECT_EQ(log.rfind("step,total,l_pos,l_dis,l_temp,l_vel,lr\n", 0), 0u);
  const std::string ckpt = (dir("run") / "checkpoint.kdck").string();

  const CliRun ev1 = run("eval --config " + cfg + " --ckpt " + ckpt + " --data " + data + " --hypotheses 1 --steps 1 --report " +
                      (root() / "r1.json").string());
  ASSERT_EQ(ev1.code, 0) << ev1.output;
  const Report r1 = parse_report(slurp(root() / "r1.json"));
  EXPECT_TRUE(r1.has("ALL", "mpjpe"));
  EXPECT_FALSE(r1.has("ALL", "p_best"));
  EXPECT_TRUE(fs::exists(root() / "r1.txt"));
  const CliRun ev3 = run("eval --config " + cfg + " --ckpt " + ckpt + " --data " + data + " --hypotheses 3 --steps 2 --report " +
                      (root() / "r3.json").string());
  ASSERT_EQ(ev3.code, 0) << ev3.output;
  EXPECT_TRUE(parse_report(slurp(root() / "r3.json")).has("ALL", "j_agg"));

  const Dataset ds = load_dataset(data);
  const fs::path input = root() / "input.f3dp";
  write_pose_file(input, to_array(ds.clips[0].pose2d));
  const CliRun sa = run("sample --config " + cfg + " --ckpt " + ckpt + " --input " + input.string() + " --hypotheses 2 --out " +
                     dir("samples").string());
  ASSERT_EQ(sa.code, 0) << sa.output;
  EXPECT_TRUE(fs::exists(dir("samples") / "hypothesis_001.f3dp"));
  EXPECT_EQ(read_pose_file(dir("samples") / "aggregated.f3dp").frames, 8u);

  const fs::path gt = root() / "gt.f3dp";
  write_pose_file(gt, to_array(root_relative(ds.clips[0].pose3d)));
  const CliRun pl = run("plot --report " + (root() / "r3.json").string() + " --loss-log " + (dir("run") / "loss_log.csv").string() +
                     " --pred " + (dir("samples") / "aggregated.f3dp").string() + " --gt " + gt.string() + " --out " +
                     dir("plots").string());
  ASSERT_EQ(pl.code, 0) << pl.output;
  const std::string bars = slurp(dir("plots") / "hierarchy_mpjpe.svg");
  const std::regex bar_re("class=\"bar\"");
  EXPECT_EQ(std::distance(std::sregex_iterator(bars.begin(), bars.end(), bar_re), std::sregex_iterator()), 6);
  const std::string overlay = slurp(dir("plots") / "skeleton_overlay.svg");
  EXPECT_NE(overlay.find("class=\"gt\""), std::string::npos);
  EXPECT_NE(overlay.find("stroke-dasharray"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir("plots") / "loss_curves.svg"));
}

TEST_F(Cli, ExitCodes) {
  const std::string data = dir("codes").string();
  ASSERT_EQ(run("synth --out " + data + " --frames 6 --clips 1 --test-clips 1").code, 0);
  const std::string cfg = (root() / "config.json").string();

  std::ofstream(root() / "bad.json") << R"({"denoiser": {"chanels": 8}})";
  const CliRun bad = run("train --config " + (root() / "bad.json").string() + " --data " + data + " --out " + dir("x").string());
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.output.find("denoiser.chanels"), std::string::npos) << bad.output;

  // Truncate one sequence file: a typed parse error and exit code 3.
  for (const auto& e : fs::directory_iterator(data)) {
    if (e.path().extension() == ".f3dp") {
      auto bytes = read_file_bytes(e.path());
      bytes.resize(bytes.size() - 5);
      write_file_bytes(e.path(), bytes);
      break;
    }
  }
  const CliRun trunc = run("train --config " + cfg + " --data " + data + " --out " + dir("y").string());
  EXPECT_EQ(trunc.code, 3);
  EXPECT_NE(trunc.output.find("parse error"), std::string::npos) << trunc.output;

  const CliRun missing = run("eval --config " + cfg + " --ckpt /nonexistent.kdck --data " + data + " --report r.json");
  EXPECT_EQ(missing.code, 3);
  EXPECT_EQ(run("synth --out " + dir("z").string(), "KINEDIFF_THREADS=zero").code, 2);
}

} // namespace
} // namespace kinediff
