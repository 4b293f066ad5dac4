#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "didi/cli.hpp"

namespace didi::cli {
namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class Cli : public ::testing::Test {
 protected:
  fs::path root;
  fs::path config;

  void SetUp() override {
    root = fs::temp_directory_path() /
           ("didi_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root);
    fs::create_directories(root);
    config = fs::path(DIDI_SOURCE_DIR) / "configs" / "tiny.cfg";
  }
  void TearDown() override { fs::remove_all(root); }

  int run(std::vector<std::string> args) {
    std::vector<char*> argv;
    static char prog[] = "didi";
    argv.push_back(prog);
    for (auto& a : args) argv.push_back(a.data());
    ::testing::internal::CaptureStdout();
    ::testing::internal::CaptureStderr();
    const int rc = run_cli(static_cast<int>(argv.size()), argv.data());
    ::testing::internal::GetCapturedStdout();
    last_stderr = ::testing::internal::GetCapturedStderr();
    return rc;
  }

  int stage(const std::string& sub, const fs::path& dir, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{sub, "--config", config.string(), "--run-dir", dir.string()};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  }

  std::string last_stderr;
};

TEST_F(Cli, EverySubcommandRunsOnTinyConfig) {
  const fs::path r = root / "run";
  for (const char* s : {"gen-data", "train-prior", "train-didi", "eval", "rollout", "stitch", "interp",
                        "diffuser-rollout", "report", "train-vae"}) {
    ASSERT_EQ(stage(s, r), 0) << s << ": " << last_stderr;
  }
  for (const char* b : {"vaedi", "vaedi-fixed", "kmeans"}) {
    ASSERT_EQ(run({"train-baseline", b, "--config", config.string(), "--run-dir", r.string()}), 0)
        << b << ": " << last_stderr;
  }
  ASSERT_EQ(stage("finetune-z", r), 0) << last_stderr;
  for (const char* d : {"data", "prior", "didi", "eval", "rollout", "stitch", "interp", "diffuser-rollout", "report",
                        "vae", "baseline-vaedi", "baseline-vaedi-fixed", "baseline-kmeans", "finetune"}) {
    EXPECT_TRUE(fs::exists(r / d / "manifest.json")) << d;
    EXPECT_TRUE(fs::exists(r / d / "run.log")) << d;
  }
  for (const char* f : {"metrics.csv", "skills.svg", "stitch.svg", "interp.svg", "cost.csv"})
    EXPECT_TRUE(fs::exists(r / "report" / f)) << f;
}

TEST_F(Cli, ManifestRecordsDigestSeedAndArtifacts) {
  const fs::path r = root / "run";
  ASSERT_EQ(stage("gen-data", r), 0) << last_stderr;
  ASSERT_EQ(stage("train-prior", r), 0) << last_stderr;
  const auto m = nlohmann::json::parse(slurp(r / "prior" / "manifest.json"));
  const RunConfig c = RunConfig::load(config.string());
  EXPECT_EQ(m["manifest_version"], kManifestVersion);
  EXPECT_EQ(m["subcommand"], "train-prior");
  EXPECT_EQ(m["config_digest"], c.digest());
  EXPECT_EQ(m["seed"], 5);
  EXPECT_EQ(m["inputs"]["dataset"], file_sha256((r / "data" / "dataset.didiset").string()));
  EXPECT_EQ(m["artifacts"]["prior.didickpt"], file_sha256((r / "prior" / "prior.didickpt").string()));
  EXPECT_FALSE(m["artifacts"].contains("run.log"));
  EXPECT_NE(slurp(r / "prior" / "run.log").find("wall_seconds="), std::string::npos);
}

TEST_F(Cli, RerunsProduceIdenticalManifests) {
  for (const char* name : {"a", "b"}) {
    for (const char* s : {"gen-data", "train-prior", "train-didi"}) ASSERT_EQ(stage(s, root / name), 0) << last_stderr;
  }
  for (const char* d : {"data", "prior", "didi"}) {
    EXPECT_EQ(slurp(root / "a" / d / "manifest.json"), slurp(root / "b" / d / "manifest.json")) << d;
  }
  EXPECT_EQ(slurp(root / "a" / "didi" / "policy.didickpt"), slurp(root / "b" / "didi" / "policy.didickpt"));
}

TEST_F(Cli, SeedFlagChangesTheRun) {
  ASSERT_EQ(stage("gen-data", root / "a"), 0);
  ASSERT_EQ(stage("gen-data", root / "b", {"--seed", "6"}), 0);
  EXPECT_NE(slurp(root / "a" / "data" / "dataset.didiset"), slurp(root / "b" / "data" / "dataset.didiset"));
  EXPECT_EQ(nlohmann::json::parse(slurp(root / "b" / "data" / "manifest.json"))["seed"], 6);
}

TEST_F(Cli, StageDirectoriesAreNeverRewritten) {
  const fs::path r = root / "run";
  ASSERT_EQ(stage("gen-data", r), 0);
  const std::string before = slurp(r / "data" / "dataset.didiset");
  EXPECT_EQ(stage("gen-data", r), 6);
  EXPECT_NE(last_stderr.find("already exists"), std::string::npos);
  EXPECT_EQ(slurp(r / "data" / "dataset.didiset"), before);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  EXPECT_EQ(stage("gen-data", root / "r1", {"--override", "nonsense.key=1"}), 2);
  EXPECT_NE(last_stderr.find("nonsense.key"), std::string::npos);
  EXPECT_EQ(stage("gen-data", root / "r2", {"--override", "data.horizon=abc"}), 2);
  EXPECT_EQ(stage("gen-data", root / "r3", {"--override", "env.half_extent=-1"}), 2);
  EXPECT_EQ(run({"gen-data", "--bogus-flag"}), 2);
  EXPECT_EQ(run({"no-such-subcommand"}), 2);
  EXPECT_EQ(run({"train-baseline", "nope", "--run-dir", (root / "r4").string()}), 2);
  std::ofstream(root / "bad.cfg") << "seed = 1\nwhat.is.this = 2\n";
  EXPECT_EQ(run({"gen-data", "--config", (root / "bad.cfg").string(), "--run-dir", (root / "r5").string()}), 2);
  // Validation happens before any stage directory is created.
  EXPECT_FALSE(fs::exists(root / "r1"));
}

TEST_F(Cli, MissingArtifactsExitThree) {
  EXPECT_EQ(stage("train-prior", root / "empty"), 3);
  EXPECT_NE(last_stderr.find("input.dataset"), std::string::npos);
  EXPECT_EQ(stage("report", root / "empty2"), 3);
  EXPECT_EQ(run({"gen-data", "--config", (root / "absent.cfg").string(), "--run-dir", (root / "r").string()}), 3);
}

TEST_F(Cli, PriorFromDifferentlyNormalizedDataExitsFour) {
  const fs::path a = root / "a", b = root / "b";
  ASSERT_EQ(stage("gen-data", a), 0);
  ASSERT_EQ(stage("train-prior", a), 0);
  ASSERT_EQ(stage("gen-data", b, {"--override", "data.norm_mode=per_step"}), 0);
  const std::string prior = "input.prior=" + (a / "prior" / "prior.didickpt").string();
  EXPECT_EQ(stage("train-didi", b, {"--override", prior}), 4) << last_stderr;
  EXPECT_NE(last_stderr.find("normalization"), std::string::npos);
  // The same prior against its own dataset is accepted.
  EXPECT_EQ(stage("train-didi", a, {"--override", prior}), 0) << last_stderr;
}

TEST_F(Cli, RunsRootEnvironmentVariable) {
  const fs::path runs = root / "runs";
  ASSERT_EQ(setenv("DIDI_RUNS_ROOT", runs.string().c_str(), 1), 0);
  const int rc = run({"gen-data", "--config", config.string()});
  unsetenv("DIDI_RUNS_ROOT");
  ASSERT_EQ(rc, 0) << last_stderr;
  std::vector<fs::path> made;
  for (const auto& e : fs::directory_iterator(runs)) made.push_back(e.path());
  ASSERT_EQ(made.size(), 1u);
  const std::string name = made[0].filename().string();
  const std::string digest8 = RunConfig::load(config.string()).digest().substr(0, 8);
  EXPECT_EQ(name.size(), std::string("20260101-000000-").size() + 8);
  EXPECT_EQ(name.substr(name.size() - 8), digest8);
  EXPECT_TRUE(fs::exists(made[0] / "data" / "dataset.didiset"));
}

TEST(ExitCodes, DistinctPerCategory) {
  EXPECT_EQ(exit_code(ErrorKind::config), 2);
  EXPECT_EQ(exit_code(ErrorKind::missing_artifact), 3);
  EXPECT_EQ(exit_code(ErrorKind::digest_mismatch), 4);
  EXPECT_EQ(exit_code(ErrorKind::divergence), 5);
  EXPECT_EQ(exit_code(ErrorKind::checksum_failure), 6);
  EXPECT_EQ(exit_code(ErrorKind::undefined_score), 1);
}

// ---------------------------------------------------------------------------
// Config

TEST(RunConfig, DigestStableUnderReorderingAndSpelling) {
  const RunConfig a = RunConfig::parse("seed = 3\nprior.lr = 0.001\nprior.hidden = 32, 32\n");
  const RunConfig b = RunConfig::parse("# comment\nprior.hidden=32,32\n\nprior.lr = 1e-3\nseed=3\n");
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_EQ(a.canonical(), b.canonical());
  EXPECT_NE(a.digest(), RunConfig::parse("seed = 4\nprior.lr = 0.001\nprior.hidden = 32, 32\n").digest());
}

TEST(RunConfig, DefaultsCoverEverySchemaKey) {
  const RunConfig c;
  EXPECT_EQ(c.values().size(), config_schema().size());
  EXPECT_EQ(c.get_int("diffusion.steps"), 64);
  EXPECT_EQ(c.get_real("diffusion.beta_max"), 0.1);
  EXPECT_EQ(c.get_text("skills.kind"), "categorical");
  EXPECT_FALSE(c.get_bool("disc.noised"));
}

TEST(RunConfig, OverrideAndRejection) {
  RunConfig c;
  c.apply_override("skills.dim=7");
  EXPECT_EQ(c.get_int("skills.dim"), 7);
  auto kind = [](auto f) {
    try {
      f();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::contract;
  };
  EXPECT_EQ(kind([&] { c.apply_override("skills.dim"); }), ErrorKind::config);
  EXPECT_EQ(kind([&] { c.apply_override("skill.dim=3"); }), ErrorKind::config);
  EXPECT_EQ(kind([] { RunConfig::parse("seed 3\n"); }), ErrorKind::config);
  EXPECT_EQ(kind([&] { c.get_real("skills.dim"); }), ErrorKind::contract);
}

TEST(RunConfig, ShippedConfigsLoad) {
  for (const auto& e : fs::directory_iterator(fs::path(DIDI_SOURCE_DIR) / "configs")) {
    const RunConfig c = RunConfig::load(e.path().string());
    EXPECT_NO_THROW(env_from_config(c).validate(c.get_int32("data.horizon"))) << e.path();
    EXPECT_NO_THROW(didi_config(c)) << e.path();
  }
}

TEST(StageSeeds, IndependentAndReproducible) {
  RunConfig c;
  c.set("seed", "9");
  EXPECT_EQ(stage_seed(c, Stage::data), stage_seed(c, Stage::data));
  EXPECT_NE(stage_seed(c, Stage::data), stage_seed(c, Stage::prior));
  RunConfig d;
  d.set("seed", "10");
  EXPECT_NE(stage_seed(c, Stage::data), stage_seed(d, Stage::data));
}

}  // namespace
}  // namespace didi::cli
