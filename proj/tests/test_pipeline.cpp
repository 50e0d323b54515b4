// Copyright 2026 The Linkstage Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "linkstage/pipeline.hpp"
#include "test_util.hpp"

namespace linkstage {
namespace {

using testing::KindOf;
using testing::TempDir;
using Json = nlohmann::json;

int Cli(std::vector<std::string> args) {
  args.insert(args.begin(), "linkstage");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return RunCli(static_cast<int>(argv.size()), argv.data());
}

Json ReadJson(const std::filesystem::path& path) {
  std::ifstream in(path);
  return Json::parse(in);
}

// Seconds-scale settings that still exercise every stage.
Json TinyConfig() {
  return {
      {"threads", 1},
      {"data", {{"n_entities", 24}, {"n_mentions", 2}, {"vocab_pool_size", 300}}},
      {"text", {{"mention_max_len", 32}, {"entity_max_len", 32}, {"cross_max_len", 48}}},
      {"biencoder",
       {{"embed_dim", 16}, {"n_heads", 2}, {"ff_dim", 32}, {"n_layers", 1},
        {"max_positions", 48}, {"epochs", 2}, {"batch_size", 8}}},
      {"crossencoder",
       {{"embed_dim", 16}, {"n_heads", 2}, {"ff_dim", 32}, {"n_layers", 1},
        {"max_positions", 48}, {"epochs", 1}, {"k", 4}}},
      {"mining", {{"top_n", 3}, {"epochs", 1}, {"hard_negatives", 2}}},
      {"distill", {{"epochs", 1}, {"k", 4}}},
      {"index", {{"m_neighbors", 4}, {"ef_construction", 16}, {"ef_search", 16}}},
      {"eval",
       {{"retrieve_k", 8}, {"rerank_k", 4}, {"recall_ks", {1, 8}}, {"sweep_ks", {1, 2, 4, 8}}}},
      {"bench", {{"n_vectors", 200}, {"dim", 8}, {"queries", 20}, {"k", 5}}},
  };
}

std::filesystem::path WriteTinyConfig(const TempDir& dir) {
  const auto path = dir.path() / "tiny.json";
  std::ofstream(path) << TinyConfig().dump(2);
  return path;
}

TEST(PipelineConfig, JsonRoundTrip) {
  const auto defaults = DefaultPipelineConfig();
  const Json j = ToJson(defaults);
  EXPECT_EQ(ToJson(ApplyJson(PipelineConfig{}, j)).dump(), j.dump());
  EXPECT_EQ(ConfigHash(ApplyJson(PipelineConfig{}, j)), ConfigHash(defaults));
  const auto tiny = ApplyJson(defaults, TinyConfig());
  EXPECT_EQ(tiny.data.n_entities, 24u);
  EXPECT_EQ(tiny.eval.sweep_ks, (std::vector<size_t>{1, 2, 4, 8}));
  EXPECT_NE(ConfigHash(tiny), ConfigHash(defaults));
  tiny.Validate();
  defaults.Validate();
}

TEST(PipelineConfig, RejectsUnknownKeysAndWrongTypes) {
  const auto base = DefaultPipelineConfig();
  EXPECT_EQ(KindOf([&] { ApplyJson(base, Json{{"biencoder", {{"epoch", 3}}}}); }),
            ErrorKind::kConfig);
  EXPECT_EQ(KindOf([&] { ApplyJson(base, Json{{"nosuch", {{"x", 1}}}}); }), ErrorKind::kConfig);
  EXPECT_EQ(KindOf([&] { ApplyJson(base, Json{{"seed", "one"}}); }), ErrorKind::kConfig);
  EXPECT_EQ(KindOf([&] { ApplyJson(base, Json{{"eval", {{"recall_ks", {1, -2}}}}}); }),
            ErrorKind::kConfig);
  EXPECT_EQ(KindOf([&] { ApplyJson(base, Json{{"data", {{"n_entities", -5}}}}); }),
            ErrorKind::kConfig);
}

TEST(PipelineConfig, Overrides) {
  auto c = ApplyOverride(DefaultPipelineConfig(), "biencoder.learning_rate=0.002");
  EXPECT_DOUBLE_EQ(c.biencoder.learning_rate, 0.002);
  c = ApplyOverride(c, "eval.retriever=distilled");
  EXPECT_EQ(c.eval.retriever, "distilled");
  c = ApplyOverride(c, "seed=9");
  EXPECT_EQ(c.seed, 9u);
  c = ApplyOverride(c, "eval.sweep_ks=[1,4]");
  EXPECT_EQ(c.eval.sweep_ks, (std::vector<size_t>{1, 4}));
  EXPECT_EQ(KindOf([&] { ApplyOverride(c, "biencoder.epochs"); }), ErrorKind::kConfig);
  EXPECT_EQ(KindOf([&] { ApplyOverride(c, "=3"); }), ErrorKind::kConfig);
}

TEST(PipelineConfig, ValidateCatchesInconsistencies) {
  auto c = DefaultPipelineConfig();
  c.eval.rerank_k = c.eval.retrieve_k + 1;
  EXPECT_EQ(KindOf([&] { c.Validate(); }), ErrorKind::kConfig);
  c = DefaultPipelineConfig();
  c.eval.retriever = "bm25";
  EXPECT_EQ(KindOf([&] { c.Validate(); }), ErrorKind::kConfig);
  c = DefaultPipelineConfig();
  c.crossencoder_encoder.embed_dim = 32;
  EXPECT_EQ(KindOf([&] { c.Validate(); }), ErrorKind::kConfig);
  c.cross_init_from_biencoder = false;
  c.Validate();
}

TEST(PipelineConfig, LoadFromFile) {
  TempDir dir("cfg_load");
  EXPECT_EQ(LoadPipelineConfig(WriteTinyConfig(dir)).data.n_entities, 24u);
  testing::WriteFile(dir.path() / "bad.json", "{ not json");
  EXPECT_EQ(KindOf([&] { LoadPipelineConfig(dir.path() / "bad.json"); }), ErrorKind::kConfig);
  EXPECT_EQ(KindOf([&] { LoadPipelineConfig(dir.path() / "absent.json"); }),
            ErrorKind::kConfig);
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli_codes");
  const auto cfg = WriteTinyConfig(dir).string();
  const auto out = (dir.path() / "run").string();
  EXPECT_EQ(Cli({"gen-data", "--config", cfg, "--out", out}), 0);
  EXPECT_EQ(Cli({"validate", "--config", cfg, "--out", out}), 0);
  EXPECT_EQ(Cli({"evaluate", "--config", cfg, "--out", out}), 3);
  EXPECT_EQ(Cli({"evaluate", "--config", cfg, "--out", (dir.path() / "empty").string()}), 3);
  EXPECT_EQ(Cli({"validate", "--config", (dir.path() / "missing.json").string()}), 2);
  EXPECT_EQ(Cli({"validate", "--config", cfg, "--set", "eval.rerank_k=0", "--out", out}), 2);
  EXPECT_EQ(Cli({"no-such-command"}), 2);
  EXPECT_EQ(Cli({}), 2);
  ASSERT_EQ(setenv("LINKSTAGE_LOG", "loud", 1), 0);
  EXPECT_EQ(Cli({"validate", "--config", cfg, "--out", out}), 2);
  unsetenv("LINKSTAGE_LOG");
}

TEST(Cli, ManifestRecordsRun) {
  TempDir dir("cli_manifest");
  const auto cfg = WriteTinyConfig(dir).string();
  const auto out = dir.path() / "run";
  ASSERT_EQ(Cli({"gen-data", "--config", cfg, "--out", out.string(), "--seed", "5"}), 0);
  const Json m = ReadJson(out / "manifest_gen-data.json");
  EXPECT_EQ(m["command"], "gen-data");
  EXPECT_EQ(m["seed"], 5);
  EXPECT_EQ(m["data_seed"], 7);
  EXPECT_EQ(m["threads"], 1);
  EXPECT_EQ(m["config"]["data"]["n_entities"], 24);
  EXPECT_EQ(m["config_hash"].get<std::string>().size(), 16u);
  EXPECT_TRUE(m["versions"].contains("eigen"));
  EXPECT_TRUE(std::filesystem::exists(out / "data" / "test_mentions.jsonl"));
}

TEST(Cli, EveryStageRunsOnTinyConfig) {
  TempDir dir("cli_stages");
  const auto cfg = WriteTinyConfig(dir).string();
  const auto out = dir.path() / "run";
  for (const char* stage :
       {"gen-data", "validate", "baseline-tfidf", "train-biencoder", "mine-negatives",
        "build-index", "train-crossencoder", "evaluate", "sweep-k", "distill", "bench-ann"}) {
    ASSERT_EQ(Cli({stage, "--config", cfg, "--out", out.string()}), 0) << stage;
  }
  ASSERT_EQ(Cli({"build-index", "--config", cfg, "--out", out.string(), "--set",
                 "eval.retriever=distilled"}),
            0);
  ASSERT_EQ(Cli({"evaluate", "--config", cfg, "--out", out.string(), "--set",
                 "eval.retriever=distilled"}),
            0);

  const Json metrics = ReadJson(out / "metrics_biencoder.json");
  EXPECT_TRUE(metrics["reranked"].get<bool>());
  EXPECT_FALSE(metrics.contains("retrieval_latency"));
  EXPECT_TRUE(std::filesystem::exists(out / "timing_biencoder.json"));
  EXPECT_TRUE(std::filesystem::exists(out / "metrics_distilled.json"));
  EXPECT_TRUE(std::filesystem::exists(out / "metrics_tfidf.json"));
  EXPECT_TRUE(std::filesystem::exists(out / "sweep_biencoder.csv"));
  EXPECT_TRUE(std::filesystem::exists(out / "bench_ann.json"));
  EXPECT_TRUE(std::filesystem::exists(out / "kd_log.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(out / "negatives.jsonl"));

  const Json sweep = ReadJson(out / "sweep_biencoder.json");
  ASSERT_FALSE(sweep["curve"].empty());
  EXPECT_DOUBLE_EQ(sweep["curve"][0]["norm_acc"].get<double>(), 1.0);

  // A retrained retriever invalidates the index built from the old one.
  ASSERT_EQ(Cli({"train-biencoder", "--config", cfg, "--out", out.string(), "--seed", "3"}), 0);
  EXPECT_EQ(Cli({"evaluate", "--config", cfg, "--out", out.string(), "--seed", "3"}), 3);
}

}  // namespace
}  // namespace linkstage
