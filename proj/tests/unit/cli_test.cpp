// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "letlab/data.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() / (std::string("letlab_cli_") + info->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  fs::path write_config(const json& j, const std::string& name = "config.json") {
    fs::path p = root_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  Result run(const std::string& args, const fs::path& out_dir) {
    const std::string cmd =
        "LET_LAB_OUT='" + out_dir.string() + "' '" + std::string(LET_LAB_BINARY) + "' " + args + " 2>&1";
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) return r;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, pipe) != nullptr) r.out += buf;
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }

  Result run(const std::string& args) { return run(args, root_ / "out"); }

  fs::path root_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json cycle_config(std::size_t length = 4000) {
  json table = json::array();
  for (int i = 0; i < 4; ++i) {
    json row = json::array({0.0, 0.0, 0.0, 0.0});
    row[(i + 1) % 4] = 1.0;
    table.push_back(row);
  }
  json tiny = {{"vocab_size", 4}, {"hidden_size", 8}, {"intermediate_size", 16}, {"num_layers", 3},
               {"num_heads", 2},  {"max_seq_len", 16}};
  json teacher = tiny;
  teacher["num_layers"] = 2;
  return {{"seed", 1},
          {"model_m", tiny},
          {"model_t", teacher},
          {"data", {{"source", "markov"}, {"length", length}, {"markov", {{"order", 1}, {"vocab_size", 4}, {"table", table}}}}},
          {"train", {{"total_steps", 10}, {"batch_size", 4}, {"seq_len", 8}, {"peak_lr", 0.01}, {"eval_interval", 5}}},
          {"teacher_train", {{"total_steps", 10}, {"batch_size", 4}, {"seq_len", 8}, {"peak_lr", 0.01}}},
          {"alignment", {{"lambda0", 0.5}, {"s_stop", 5}}}};
}

json two_state_config(std::size_t length) {
  json j = cycle_config(length);
  j["data"]["markov"] = {{"order", 1}, {"vocab_size", 2}, {"table", {{0.9, 0.1}, {0.1, 0.9}}}};
  j["model_m"]["vocab_size"] = 2;
  j["model_t"]["vocab_size"] = 2;
  return j;
}

TEST_F(CliTest, GenDataConservesAndSplits) {
  fs::path cfg = write_config(two_state_config(1000000));
  Result r = run("gen-data --config " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const fs::path data = root_ / "out" / "data";
  letlab::Corpus train = letlab::read_token_file(data / "train.tok");
  letlab::Corpus test = letlab::read_token_file(data / "test.tok");
  EXPECT_EQ(train.size() + test.size(), 1000000u);
  EXPECT_EQ(test.size(), 100000u);
  json manifest = json::parse(slurp(data / "manifest.json"));
  EXPECT_NEAR(manifest["entropy_rate"].get<double>(), 0.3251, 5e-5);
  EXPECT_TRUE(manifest.contains("seed"));

  Result again = run("gen-data --config " + cfg.string(), root_ / "again");
  ASSERT_EQ(again.code, 0) << again.out;
  for (const char* f : {"train.tok", "test.tok", "manifest.json"}) {
    EXPECT_EQ(slurp(data / f), slurp(root_ / "again" / "data" / f)) << f;
  }
}

TEST_F(CliTest, UnwritableOutputFails) {
  fs::path cfg = write_config(cycle_config());
  std::ofstream(root_ / "blocker") << "file";
  Result r = run("gen-data --config " + cfg.string(), root_ / "blocker" / "sub");
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(r.out.empty());
}

TEST_F(CliTest, PretrainWithZeroStepsWritesFreshTeacher) {
  json j = cycle_config();
  j["teacher_train"]["total_steps"] = 0;
  fs::path cfg = write_config(j);
  Result r = run("pretrain-teacher --config " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(root_ / "out" / "teacher" / "checkpoint.bin"));
}

TEST_F(CliTest, PretrainMemorizesCycleAndIsBitwiseRepeatable) {
  json j = cycle_config();
  j["teacher_train"]["total_steps"] = 200;
  fs::path cfg = write_config(j);
  const fs::path ckpt = root_ / "out" / "teacher" / "checkpoint.bin";
  Result a = run("pretrain-teacher --config " + cfg.string());
  ASSERT_EQ(a.code, 0) << a.out;
  const std::string first = slurp(ckpt);
  fs::remove_all(root_ / "out");
  Result b = run("pretrain-teacher --config " + cfg.string());
  ASSERT_EQ(b.code, 0) << b.out;
  const auto pos = a.out.find("test perplexity ");
  ASSERT_NE(pos, std::string::npos) << a.out;
  EXPECT_LT(std::stod(a.out.substr(pos + 16)), 1.1) << a.out;
  EXPECT_TRUE(first == slurp(ckpt));
}

TEST_F(CliTest, TrainModesAndTeacherRequirement) {
  json j = cycle_config();
  j["alignment"]["lambda0"] = 0.0;
  fs::path cfg = write_config(j);
  Result base = run("train --mode baseline --config " + cfg.string());
  ASSERT_EQ(base.code, 0) << base.out;
  Result missing = run("train --mode let --config " + cfg.string());
  EXPECT_EQ(missing.code, 2) << missing.out;

  ASSERT_EQ(run("pretrain-teacher --config " + cfg.string()).code, 0);
  Result let = run("train --mode let --config " + cfg.string());
  ASSERT_EQ(let.code, 0) << let.out;
  const fs::path runs = root_ / "out" / "runs";
  EXPECT_EQ(slurp(runs / "let-seed1" / "metrics.jsonl"), slurp(runs / "baseline-seed1" / "metrics.jsonl"));
  json echo = json::parse(slurp(runs / "let-seed1" / "config.json"));
  EXPECT_EQ(echo["train"]["mode"], "let");
  EXPECT_EQ(echo["train"]["adam_beta2"], 0.999);

  Result ev = run("eval --mode baseline --config " + cfg.string());
  ASSERT_EQ(ev.code, 0) << ev.out;
  EXPECT_EQ(json::parse(ev.out)["step"], 10);
}

TEST_F(CliTest, SeedOverrideChangesRunDirectory) {
  fs::path cfg = write_config(cycle_config());
  ASSERT_EQ(run("train --seed 7 --config " + cfg.string()).code, 0);
  EXPECT_TRUE(fs::exists(root_ / "out" / "runs" / "baseline-seed7" / "metrics.jsonl"));
}

TEST_F(CliTest, DivergenceExitsThree) {
  json j = cycle_config();
  j["train"]["peak_lr"] = 1e300;
  Result r = run("train --config " + write_config(j).string());
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("step"), std::string::npos) << r.out;
}

TEST_F(CliTest, UsageErrors) {
  json j = cycle_config();
  j["train"]["bogus"] = 1;
  EXPECT_EQ(run("train --config " + write_config(j).string()).code, 64);
  EXPECT_EQ(run("train").code, 64);
  EXPECT_EQ(run("frobnicate").code, 64);
  EXPECT_EQ(run("train --mode sideways --config " + write_config(cycle_config(), "ok.json").string()).code, 64);
  EXPECT_EQ(run("gradcheck --scope everything").code, 64);
  EXPECT_EQ(run("ablate --suite colours --config " + (root_ / "ok.json").string()).code, 64);
}

TEST_F(CliTest, AblateLayersGridAndResume) {
  fs::path cfg = write_config(cycle_config());
  ASSERT_EQ(run("pretrain-teacher --config " + cfg.string()).code, 0);
  Result r = run("ablate --suite layers --jobs 2 --config " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const fs::path dir = root_ / "out" / "ablate" / "layers";
  std::size_t runs = 0;
  for (const auto& e : fs::directory_iterator(dir)) runs += e.is_directory();
  EXPECT_EQ(runs, 6u);
  std::istringstream csv(slurp(dir / "perplexity.csv"));
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "step,L2E,L2L,L2M,M2E,M2L,M2M");
  EXPECT_TRUE(fs::exists(dir / "similarity.csv"));

  const std::string before = slurp(dir / "perplexity.csv");
  Result again = run("ablate --suite layers --resume --config " + cfg.string());
  ASSERT_EQ(again.code, 0) << again.out;
  std::size_t zero = 0;
  for (std::size_t p = again.out.find("(0 new steps)"); p != std::string::npos; p = again.out.find("(0 new steps)", p + 1)) {
    ++zero;
  }
  EXPECT_EQ(zero, 6u) << again.out;
  EXPECT_EQ(slurp(dir / "perplexity.csv"), before);
}

TEST_F(CliTest, AblateLambdaRunsFiveCells) {
  fs::path cfg = write_config(cycle_config());
  ASSERT_EQ(run("pretrain-teacher --config " + cfg.string()).code, 0);
  Result r = run("ablate --suite lambda --config " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const fs::path dir = root_ / "out" / "ablate" / "lambda";
  for (const char* id : {"lambda-0.01", "lambda-0.1", "lambda-0.3", "lambda-1", "lambda-3"}) {
    EXPECT_TRUE(fs::exists(dir / id / "metrics.jsonl")) << id;
  }
}

TEST_F(CliTest, AblateNeedsTeacher) {
  fs::path cfg = write_config(cycle_config());
  EXPECT_EQ(run("ablate --suite sstop --config " + cfg.string()).code, 2);
}

TEST_F(CliTest, VerifyTheory) {
  EXPECT_EQ(run("verify-theory --k-list 0,1").code, 64);
  EXPECT_EQ(run("verify-theory --L 5 --d 10").code, 2);
  Result a = run("verify-theory --trials 1 --seed 4", root_ / "a");
  Result b = run("verify-theory --trials 1 --seed 4", root_ / "b");
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  for (const char* f : {"sweep.csv", "blocks.csv", "summary.json"}) {
    EXPECT_EQ(slurp(root_ / "a" / "theory" / f), slurp(root_ / "b" / "theory" / f)) << f;
  }
}

TEST_F(CliTest, GradcheckReportIsRepeatable) {
  Result a = run("gradcheck --scope primitives --seeds 2");
  Result b = run("gradcheck --scope primitives --seeds 2");
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("matmul"), std::string::npos);
}

}  // namespace
