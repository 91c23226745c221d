#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "cmod_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Result {
  int code = -1;
  std::string err;
};

Result run(const std::string& args) {
  const auto err_path = workdir() / "stderr.txt";
  const std::string cmd = std::string(CMOD_BINARY) + " " + args + " > /dev/null 2> " + err_path.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err_path);
  std::stringstream ss;
  ss << in.rdbuf();
  r.err = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string path(const std::string& name) { return (workdir() / name).string(); }

// Three-day stream on six nodes, one day per split.
const std::string kSmallData = "--train-days 1 --val-days 1 --test-days 1 --t0 0";

void ensure_small_model() {
  static bool done = false;
  if (done) return;
  ASSERT_EQ(run("synth --seed 3 --days 3 --nodes 6 --base-rate 0.002 --out " + path("small")).code, 0);
  ASSERT_EQ(run("train --events " + path("small/events.csv") + " --catalog " + path("small/catalog.csv") +
                " --d 8 --heads 2 --d-msg 8 --epochs 1 --lr 1e-3 --seed 1 " + kSmallData + " --out " + path("model"))
                .code,
            0);
  done = true;
}

std::string data_flags() {
  return "--events " + path("small/events.csv") + " --catalog " + path("small/catalog.csv") + " " + kSmallData;
}

}  // namespace

TEST(Cli, SynthIsDeterministic) {
  ASSERT_EQ(run("synth --seed 7 --days 2 --nodes 6 --out " + path("s1")).code, 0);
  ASSERT_EQ(run("synth --seed 7 --days 2 --nodes 6 --out " + path("s2")).code, 0);
  for (const char* f : {"events.csv", "catalog.csv", "synth.json"}) {
    EXPECT_EQ(slurp(workdir() / "s1" / f), slurp(workdir() / "s2" / f)) << f;
  }
  EXPECT_FALSE(slurp(workdir() / "s1" / "events.csv").empty());
}

TEST(Cli, ToyGradCheckPasses) {
  auto r = run("grad-check --toy --out " + path("grad.csv"));
  EXPECT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(workdir() / "grad.csv");
  EXPECT_EQ(csv.rfind("array,coordinate,analytic,numeric,rel_error\n", 0), 0u);
  EXPECT_NE(r.err.find("(pass)"), std::string::npos);
}

TEST(Cli, OracleCheckPasses) {
  auto r = run("oracle-check --events 2000 --nodes 8 --out " + path("oracle.json"));
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(slurp(workdir() / "oracle.json").find("\"pass\": true"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  auto r = run("evaluate --events " + path("nothing.csv"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("UsageError"), std::string::npos) << r.err;
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --ablation no-such-thing").code, 2);
  EXPECT_EQ(run("grad-check").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, DomainErrorsExitOneWithClassName) {
  std::ofstream(workdir() / "bad.ckpt") << "not a checkpoint";
  std::ofstream(workdir() / "bad_events.csv") << "origin,destination,timestamp\n0,1,5\n0,1,2\n";
  auto r = run("evaluate --checkpoint " + path("bad.ckpt") + " --events " + path("bad_events.csv"));
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("VersionMismatch", 0), 0u) << r.err;
  ensure_small_model();
  r = run("evaluate --checkpoint " + path("model/model.ckpt") + " --events " + path("bad_events.csv"));
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("NonMonotonicTimestamp", 0), 0u) << r.err;
}

TEST(Cli, TrainEvaluatePredictExport) {
  ensure_small_model();
  for (const char* f : {"model.ckpt", "history.csv", "report.json"}) EXPECT_TRUE(fs::exists(workdir() / "model" / f)) << f;
  const std::string ck = " --checkpoint " + path("model/model.ckpt") + " " + data_flags();
  ASSERT_EQ(run("evaluate" + ck + " --out " + path("eval1.json")).code, 0);
  ASSERT_EQ(run("evaluate" + ck + " --out " + path("eval2.json")).code, 0);
  const auto report = slurp(workdir() / "eval1.json");
  EXPECT_EQ(report, slurp(workdir() / "eval2.json"));
  EXPECT_NE(report.find("config_hash"), std::string::npos);
  EXPECT_NE(report.find("historical_average"), std::string::npos);

  ASSERT_EQ(run("predict" + ck + " --out " + path("pred.csv")).code, 0);
  EXPECT_EQ(slurp(workdir() / "pred.csv").rfind("origin,destination,window_start,window_end,predicted,actual\n", 0), 0u);

  ASSERT_EQ(run("export-reps" + ck + " --node 0 --node 3 --out " + path("reps.csv")).code, 0);
  EXPECT_EQ(slurp(workdir() / "reps.csv").rfind("timestamp,node,dim,value\n", 0), 0u);
  EXPECT_EQ(run("export-reps" + ck + " --node nowhere --out " + path("reps_bad.csv")).code, 1);

  ASSERT_EQ(run("export-relations" + ck + " --out " + path("rel")).code, 0);
  EXPECT_TRUE(fs::exists(workdir() / "rel" / "relations_acm.csv"));
  EXPECT_TRUE(fs::exists(workdir() / "rel" / "relations_ace.csv"));
}

TEST(Cli, RelationsRejectedForNoMultilevelModel) {
  ensure_small_model();
  ASSERT_EQ(run("train " + data_flags() + " --d 8 --heads 2 --d-msg 8 --epochs 1 --ablation no-ml --out " +
                path("model_noml"))
                .code,
            0);
  auto r = run("export-relations --checkpoint " + path("model_noml/model.ckpt") + " " + data_flags() + " --out " +
               path("rel_noml"));
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("InvalidArgument", 0), 0u) << r.err;
}

TEST(Cli, ConfigFileIsAppliedAndFlagsOverride) {
  std::ofstream(workdir() / "cfg.json") << R"({"synth": {"n_nodes": 4, "days": 1, "seed": 11}})";
  ASSERT_EQ(run("synth --config " + path("cfg.json") + " --out " + path("cfg_a")).code, 0);
  EXPECT_NE(slurp(workdir() / "cfg_a" / "catalog.csv").find("3,3\n"), std::string::npos);
  EXPECT_EQ(slurp(workdir() / "cfg_a" / "catalog.csv").find("4,4\n"), std::string::npos);
  ASSERT_EQ(run("synth --config " + path("cfg.json") + " --nodes 5 --out " + path("cfg_b")).code, 0);
  EXPECT_NE(slurp(workdir() / "cfg_b" / "catalog.csv").find("4,4\n"), std::string::npos);
  std::ofstream(workdir() / "cfg_bad.json") << R"({"wrong": {}})";
  EXPECT_EQ(run("synth --config " + path("cfg_bad.json") + " --out " + path("cfg_c")).code, 2);
}
