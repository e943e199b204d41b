// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "defmod_cli.hpp"

namespace defmod::cli {
namespace {

namespace fs = std::filesystem;

const std::string kSamples = DEFMOD_SAMPLES_DIR;

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "defmod_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> train_args(const fs::path& dir, const std::string& marking, const std::string& data,
                                    const std::string& steps = "20") {
  return {"train",         "--config", kSamples + "/tiny.conf", "--train", kSamples + "/" + data, "--marking", marking,
          "--out-dir",     dir.string(), "--seed", "5",          "--set",   "max_steps=" + steps,  "--set",
          "checkpoint_every=10"};
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, kUsageError);
  EXPECT_EQ(run({"frobnicate"}).code, kUsageError);
  EXPECT_EQ(run({"stats"}).code, kUsageError);
  EXPECT_EQ(run({"--version"}).code, kOk);
  EXPECT_EQ(run({"stats", "--help"}).code, kOk);
}

TEST(Cli, MissingSeedIsAUsageError) {
  const auto dir = scratch("noseed");
  auto r = run({"train", "--train", kSamples + "/memorize.jsonl", "--out-dir", dir.string()});
  EXPECT_EQ(r.code, kUsageError);
}

TEST(Cli, PrepareConcatMarksTheFirstToken) {
  const auto dir = scratch("concat");
  auto r = run({"prepare", "--input", kSamples + "/cues.tsv", "--format", "gad", "--mode", "concat", "--output",
                (dir / "out.jsonl").string()});
  ASSERT_EQ(r.code, kOk) << r.err;
  std::istringstream in(slurp(dir / "out.jsonl"));
  auto corpus = load_corpus(in);
  ASSERT_EQ(corpus.examples.size(), 5u);
  const auto& fool = corpus.examples[0];
  EXPECT_EQ(fool.word, "fool");
  EXPECT_EQ(*fool.mark_index, 0u);
  EXPECT_EQ((*fool.context)[0], "fool");
  EXPECT_EQ((*fool.context)[1], "enough");
}

TEST(Cli, PrepareCurateCountsNoMatch) {
  const auto dir = scratch("curate");
  auto r = run({"prepare", "--input", kSamples + "/cues.tsv", "--format", "gad", "--mode", "curate", "--output",
                (dir / "nested" / "out.jsonl").string(), "--report", (dir / "report.json").string()});
  ASSERT_EQ(r.code, kOk) << r.err;
  auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  EXPECT_EQ(report["read"].get<int>(), 5);
  EXPECT_EQ(report["dropped"]["no_match"].get<int>(), 2);
  EXPECT_EQ(report["written"].get<int>(), 3);
}

TEST(Cli, PrepareNorCurateIsRejected) {
  const auto dir = scratch("norcurate");
  auto r = run({"prepare", "--input", kSamples + "/words.tsv", "--format", "nor", "--mode", "curate", "--output",
                (dir / "out.jsonl").string()});
  EXPECT_EQ(r.code, kUsageError);
}

TEST(Cli, StatsOfThreeDefinitions) {
  const auto dir = scratch("stats");
  {
    std::ofstream f(dir / "c.jsonl");
    f << R"({"word":"a","definition":["x"]})" << '\n'
      << R"({"word":"b","definition":["x","y"]})" << '\n'
      << R"({"word":"c","definition":["x","y","z"]})" << '\n';
  }
  auto r = run({"stats", "--data", (dir / "c.jsonl").string()});
  ASSERT_EQ(r.code, kOk) << r.err;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_DOUBLE_EQ(j["definition_length_mean"].get<double>(), 2.0);
  EXPECT_NEAR(j["definition_length_std"].get<double>(), std::sqrt(2.0 / 3.0), 1e-12);
}

TEST(Cli, MalformedCorpusIsADataError) {
  const auto dir = scratch("malformed");
  {
    std::ofstream f(dir / "bad.jsonl");
    f << "{\"word\":\"a\"}\n";
  }
  auto r = run({"stats", "--data", (dir / "bad.jsonl").string()});
  EXPECT_EQ(r.code, kDataError);
  EXPECT_NE(r.err.find(":1:"), std::string::npos) << r.err;
}

TEST(Cli, GradcheckPasses) {
  auto r = run({"gradcheck", "--seed", "1"});
  EXPECT_EQ(r.code, kOk) << r.out;
  EXPECT_NE(r.out.find("end_to_end_d8"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, NonContextualTrainingUsesOneEncoderLayer) {
  const auto dir = scratch("train_none");
  auto r = run(train_args(dir, "none", "memorize.jsonl"));
  ASSERT_EQ(r.code, kOk) << r.err;
  for (const char* f : {"manifest.json", "encoder.vocab", "decoder.vocab", "train_log.jsonl", "best.dmck", "last.dmck",
                        "ckpt_10.dmck", "ckpt_20.dmck"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  auto ck = load_checkpoint((dir / "best.dmck").string());
  EXPECT_EQ(ck.metadata["model_config"]["enc_layers"].get<int>(), 1);
  EXPECT_FALSE(ck.has_tensor("marker.D"));
  auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["seed"].get<int>(), 5);
  EXPECT_EQ(manifest["inputs"]["train"]["fnv1a"].get<std::string>().size(), 16u);
}

TEST(Cli, AddTrainingStoresMarkers) {
  const auto dir = scratch("train_add");
  auto r = run(train_args(dir, "add", "homonyms.jsonl"));
  ASSERT_EQ(r.code, kOk) << r.err;
  auto ck = load_checkpoint((dir / "last.dmck").string());
  EXPECT_TRUE(ck.has_tensor("marker.D"));
  EXPECT_TRUE(ck.has_tensor("marker.C"));
  EXPECT_EQ(ck.metadata["model_config"]["marking"].get<std::string>(), "add");
}

TEST(Cli, ContextualTrainingNeedsContexts) {
  const auto dir = scratch("train_nocontext");
  EXPECT_EQ(run(train_args(dir, "select", "memorize.jsonl")).code, kDataError);
}

TEST(Cli, SameSeedSameStepLog) {
  const auto a = scratch("seed_a"), b = scratch("seed_b");
  ASSERT_EQ(run(train_args(a, "none", "memorize.jsonl")).code, kOk);
  ASSERT_EQ(run(train_args(b, "none", "memorize.jsonl")).code, kOk);
  EXPECT_EQ(slurp(a / "train_log.jsonl"), slurp(b / "train_log.jsonl"));
  EXPECT_EQ(slurp(a / "best.dmck"), slurp(b / "best.dmck"));
}

TEST(Cli, EvalAndGenerate) {
  const auto dir = scratch("evalgen");
  ASSERT_EQ(run(train_args(dir, "add", "homonyms.jsonl")).code, kOk);
  const std::string ck = (dir / "best.dmck").string();
  auto e1 = run({"eval", "--checkpoint", ck, "--data", kSamples + "/homonyms.jsonl"});
  auto e2 = run({"eval", "--checkpoint", ck, "--data", kSamples + "/homonyms.jsonl"});
  ASSERT_EQ(e1.code, kOk) << e1.err;
  EXPECT_EQ(e1.out, e2.out);
  auto j = nlohmann::json::parse(e1.out);
  EXPECT_GT(j["perplexity"].get<double>(), 1.0);
  EXPECT_TRUE(j["eos_counted"].get<bool>());

  auto g = run({"generate", "--checkpoint", ck, "--input", kSamples + "/homonyms.jsonl", "--strategy", "beam",
                "--beam-size", "3", "--mask-definiendum"});
  ASSERT_EQ(g.code, kOk) << g.err;
  std::istringstream lines(g.out);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, generations_tsv_header());
  std::size_t rows = 0;
  for (std::string line; std::getline(lines, line);) ++rows;
  EXPECT_EQ(rows, 64u);
  EXPECT_NE(g.err.find("self_reference_rate"), std::string::npos);
}

TEST(Cli, CheckpointVersionMismatch) {
  const auto dir = scratch("version");
  ASSERT_EQ(run(train_args(dir, "none", "memorize.jsonl", "10")).code, kOk);
  std::string bytes = slurp(dir / "last.dmck");
  bytes[4] = 7;
  {
    std::ofstream f(dir / "future.dmck", std::ios::binary);
    f << bytes;
  }
  auto r = run({"eval", "--checkpoint", (dir / "future.dmck").string(), "--data", kSamples + "/memorize.jsonl"});
  EXPECT_EQ(r.code, kRuntimeFailure);
  EXPECT_NE(r.err.find("checkpoint format error"), std::string::npos) << r.err;
}

}  // namespace
}  // namespace defmod::cli
