#include <sys/wait.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "solar/io/checkpoint.hpp"
#include "solar/io/config.hpp"
#include "solar/io/experiment.hpp"
#include "solar/io/report.hpp"

using namespace solar;
using namespace solar::io;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("solar_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

ConfigMap tiny(const fs::path& out, const std::string& run_id) {
  return parse_config_text("run_id=" + run_id + "\noutput_dir=" + out.string() +
                           "\nnum_classes=4\nper_class=20\ntest_per_class=10\ninput_dim=8\n"
                           "num_tasks=2\nstream_batch_size=5\npasses=2\nbuffer_size=16\ntotal_batch_size=12\n"
                           "hidden_dim=16\nfeature_dim=8\nproj_hidden_dim=8\nproj_dim=6\npred_hidden_dim=3\n"
                           "top_k=4\nmetrics_every=8\nmetrics_views=4\ncheckpoint_every=8\nprobe_max_epochs=10\n");
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SOLAR_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, ParsesCommentsAndWhitespace) {
  const auto m = parse_config_text("# header\n  seed = 7  \n\npolicy=fifo # trailing\n");
  EXPECT_EQ(m.u64("seed"), 7u);
  EXPECT_EQ(m.str("policy"), "fifo");
}

TEST(Config, UnknownKeyNamed) {
  try {
    parse_config_text("sede=7\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "sede");
    EXPECT_NE(std::string(e.what()).find("sede"), std::string::npos);
  }
}

TEST(Config, BadValueNamesKey) {
  auto m = parse_config_text("lr=fast\n");
  try {
    resolve(m);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "lr");
  }
  EXPECT_THROW(resolve(parse_config_text("policy=lifo\n")), ConfigError);
  EXPECT_THROW(resolve(parse_config_text("total_batch_size=4\nstream_batch_size=10\n")), ConfigError);
}

TEST(Config, ResolvedEchoesEveryKey) {
  const auto text = ConfigMap().resolved();
  for (const auto& [k, v] : config_defaults()) EXPECT_NE(text.find(k + "=" + v + "\n"), std::string::npos) << k;
  const auto again = parse_config_text(text);
  EXPECT_EQ(again.resolved(), text);
}

TEST(Config, EnvOverridesOutputDir) {
  ::setenv(kOutputDirEnv, "/tmp/elsewhere", 1);
  const auto c = resolve(parse_config_text("output_dir=here\n"));
  ::unsetenv(kOutputDirEnv);
  EXPECT_EQ(c.output_dir, "/tmp/elsewhere");
  EXPECT_EQ(resolve(parse_config_text("output_dir=here\n")).output_dir, "here");
}

TEST(Config, ShippedConfigsResolve) {
  for (const auto& e : fs::directory_iterator(SOLAR_CONFIG_DIR)) {
    if (e.path().extension() != ".conf") continue;
    EXPECT_NO_THROW(resolve(load_config(e.path().string()))) << e.path();
  }
}

namespace {

Checkpoint sample_checkpoint() {
  const auto data = generate_synthetic(2, 10, 4, 3.0, 0);
  ModelConfig mc;
  mc.input_dim = 4;
  mc.hidden_dim = 8;
  mc.feature_dim = 4;
  mc.proj_hidden_dim = 4;
  mc.proj_dim = 3;
  mc.pred_hidden_dim = 2;
  TrainConfig tc;
  tc.total_batch_size = 8;
  Trainer t(data, mc, tc, {}, BufferPolicy::deviation_aware, 6, 1);
  const auto sched = build_schedule(data, 2, 4, 1, 0);
  run_stream(t, sched);
  return capture(t, {{0, 3, 0.5}, {1, 5, 0.25}});
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  const auto c = sample_checkpoint();
  const auto bytes = encode_checkpoint(c);
  const auto d = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(d), bytes);
  EXPECT_EQ(d.step, c.step);
  EXPECT_EQ(d.buffer, c.buffer);
  EXPECT_EQ(d.history, c.history);
  ASSERT_EQ(d.tensors.size(), c.tensors.size());
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    EXPECT_EQ(d.tensors[i].name, c.tensors[i].name);
    EXPECT_EQ(d.tensors[i].value, c.tensors[i].value);
  }
  const auto dir = scratch("ckpt");
  save_checkpoint((dir / "a.solr").string(), c);
  EXPECT_EQ(encode_checkpoint(load_checkpoint((dir / "a.solr").string())), bytes);
}

TEST(Checkpoint, EmptyBufferRoundTrips) {
  Checkpoint c;
  c.capacity = 4;
  c.tensors.push_back({"w", Tensor<float>::matrix(1, 2, {1.5f, -2.0f})});
  const auto d = decode_checkpoint(encode_checkpoint(c));
  EXPECT_TRUE(d.buffer.empty());
  EXPECT_EQ(d.tensors[0].value, c.tensors[0].value);
}

TEST(Checkpoint, CorruptInputsReported) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  {
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
  }
  {
    auto bad = bytes;
    bad[4] = 9;
    try {
      decode_checkpoint(bad);
      FAIL();
    } catch (const CheckpointError& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find('9'), std::string::npos);
      EXPECT_NE(msg.find('1'), std::string::npos);
    }
  }
  {
    // first tensor: header 4+4+8, n 4, name_len 4, name, rank 4, dims
    auto bad = bytes;
    std::uint32_t len = 0;
    std::memcpy(&len, bad.data() + 20, 4);
    const std::string name(bad.data() + 24, len);
    const std::size_t dim0 = 24 + len + 4;
    const std::uint64_t zero = 0;
    std::memcpy(bad.data() + dim0, &zero, 8);
    try {
      decode_checkpoint(bad);
      FAIL();
    } catch (const CheckpointError& e) {
      EXPECT_NE(std::string(e.what()).find(name), std::string::npos) << e.what();
    }
  }
  {
    auto bad = bytes;
    bad.resize(bad.size() / 2);
    EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
    bad = bytes;
    bad.push_back(0);
    EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
  }
}

TEST(Checkpoint, RestoreChecksShapes) {
  auto c = sample_checkpoint();
  const auto data = generate_synthetic(2, 10, 4, 3.0, 0);
  ModelConfig mc;
  mc.input_dim = 4;
  Trainer other(data, mc, {}, {}, BufferPolicy::deviation_aware, 6, 1);
  try {
    restore(c, other);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder"), std::string::npos) << e.what();
  }
}

TEST(Run, WritesConsistentArtifacts) {
  const auto out = scratch("run");
  const auto cfg = resolve(tiny(out, "a"));
  std::ostringstream log;
  ASSERT_EQ(run_experiment(cfg, log), 0) << log.str();
  const auto dir = out / "a";
  for (const char* f : {"config.resolved", "steps.csv", "metrics.csv", "accuracy.csv", "summary.csv",
                        "checkpoints/final.solr", "checkpoints/step_00000008.solr"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_FALSE(fs::exists(dir / "error.txt"));

  const auto steps = read_csv((dir / "steps.csv").string());
  const std::size_t total = 80 / 5 * 2;
  ASSERT_EQ(steps.rows.size(), total);
  for (std::size_t i = 0; i < total; ++i) EXPECT_EQ(steps.rows[i][0], std::to_string(i));
  const auto acc = read_csv((dir / "accuracy.csv").string());
  ASSERT_EQ(acc.rows.size(), 2u);
  EXPECT_EQ(acc.rows[1][1], std::to_string(total));
  const auto met = read_csv((dir / "metrics.csv").string());
  EXPECT_EQ(met.rows.size(), total / 8);
  EXPECT_EQ(lines_of(dir / "config.resolved").size(), config_defaults().size());
}

TEST(Run, ByteIdenticalRepeat) {
  const auto out = scratch("repeat");
  std::ostringstream log;
  ASSERT_EQ(run_experiment(resolve(tiny(out, "a")), log), 0);
  ASSERT_EQ(run_experiment(resolve(tiny(out, "b")), log), 0);
  for (const char* f : {"steps.csv", "metrics.csv", "accuracy.csv", "checkpoints/final.solr"})
    EXPECT_EQ(slurp(out / "a" / f), slurp(out / "b" / f)) << f;
}

TEST(Run, ResumeReproducesRemainingRows) {
  const auto out = scratch("resume");
  std::ostringstream log;
  ASSERT_EQ(run_experiment(resolve(tiny(out, "full")), log), 0);
  auto m = tiny(out, "resumed");
  m.set("resume_from", (out / "full" / "checkpoints" / "step_00000016.solr").string());
  ASSERT_EQ(run_experiment(resolve(m), log), 0) << log.str();
  const auto full = lines_of(out / "full" / "steps.csv");
  const auto tail = lines_of(out / "resumed" / "steps.csv");
  ASSERT_EQ(tail.size(), full.size() - 16);
  EXPECT_EQ(tail[0], full[0]);
  for (std::size_t i = 1; i < tail.size(); ++i) EXPECT_EQ(tail[i], full[i + 16]);
  EXPECT_EQ(slurp(out / "full" / "accuracy.csv"), slurp(out / "resumed" / "accuracy.csv"));
  EXPECT_EQ(slurp(out / "full" / "checkpoints/final.solr"), slurp(out / "resumed" / "checkpoints/final.solr"));
}

TEST(Run, FailureWritesErrorFile) {
  const auto out = scratch("fail");
  auto m = tiny(out, "broken");
  m.set("resume_from", (out / "missing.solr").string());
  std::ostringstream log;
  EXPECT_EQ(run_experiment(resolve(m), log), 1);
  EXPECT_TRUE(fs::exists(out / "broken" / "error.txt"));
}

namespace {

void fake_run(const fs::path& dir, const std::vector<double>& acc, bool with_metrics) {
  fs::create_directories(dir);
  std::ofstream a(dir / "accuracy.csv");
  a << "task,step,accuracy\n";
  for (std::size_t i = 0; i < acc.size(); ++i) a << i << "," << i * 10 << "," << acc[i] << "\n";
  if (with_metrics) {
    std::ofstream m(dir / "metrics.csv");
    m << "checkpoint_step,deviation_mean,avg_overlap_count,uniformity\n10,0.3,0.2,-1\n20,0.25,0.125,-1.5\n";
  }
}

}  // namespace

TEST(Report, SingleRun) {
  const auto root = scratch("report1");
  fake_run(root / "r", {0.2, 0.4}, true);
  std::ostringstream out, err;
  ASSERT_EQ(report(root / "r", out, err), 0);
  EXPECT_NE(out.str().find("r,0.4,0.3,0.25,0.125"), std::string::npos) << out.str();
}

TEST(Report, MissingMetricsAndMultipleRuns) {
  const auto root = scratch("report2");
  fake_run(root / "b", {0.5}, false);
  fake_run(root / "a", {0.2, 0.4}, true);
  std::ostringstream out, err;
  ASSERT_EQ(report(root, out, err), 0);
  const auto text = out.str();
  EXPECT_NE(text.find("b,0.5,0.5,n/a,n/a"), std::string::npos) << text;
  EXPECT_LT(text.find("\na,"), text.find("\nb,"));
}

TEST(Report, NothingFound) {
  const auto root = scratch("report3");
  std::ostringstream out, err;
  EXPECT_EQ(report(root, out, err), 1);
  EXPECT_EQ(report(root / "absent", out, err), 1);
}

TEST(Cli, ExitCodes) {
  const auto root = scratch("cli");
  EXPECT_NE(run_cli(""), 0);
  {
    std::ofstream bad(root / "bad.conf");
    bad << "bogus_key=1\n";
  }
  EXPECT_EQ(run_cli("run " + (root / "bad.conf").string()), 2);
  EXPECT_EQ(run_cli("run " + (root / "absent.conf").string()), 1);
  EXPECT_EQ(run_cli("report " + (root / "nothing").string()), 1);

  {
    std::ofstream good(root / "good.conf");
    good << tiny(root, "ok").resolved();
  }
  EXPECT_EQ(run_cli("run " + (root / "good.conf").string()), 0);
  EXPECT_EQ(run_cli("report " + (root / "ok").string()), 0);
  const auto ckpt = (root / "ok" / "checkpoints" / "final.solr").string();
  EXPECT_EQ(run_cli("probe " + ckpt + " " + (root / "good.conf").string()), 0);
  EXPECT_EQ(run_cli("metrics " + ckpt + " " + (root / "good.conf").string()), 0);
}
