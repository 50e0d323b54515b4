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

// Configuration and stage drivers behind the `linkstage` command line.
//
// Artifact layout under the output directory (defaults):
//
//   data/{train,test}_{entities,mentions}.jsonl
//   checkpoints/biencoder_*, crossencoder*, distilled_*
//   index/<retriever>_{train,test}_entities.emb, <retriever>_test_entities.hnsw
//   negatives.jsonl, *_log.jsonl, metrics_*.json, timing_*.json,
//   sweep_<retriever>.{json,csv}, bench_ann.json
//   manifest_<command>.json

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "linkstage/ann.hpp"
#include "linkstage/biencoder.hpp"
#include "linkstage/corpus.hpp"
#include "linkstage/crossencoder.hpp"
#include "linkstage/distill.hpp"
#include "linkstage/nn.hpp"

namespace linkstage {

struct EvalConfig {
  std::string retriever = "biencoder";  // "biencoder" or "distilled"
  bool use_hnsw = true;                 // otherwise exact search
  bool rerank = true;                   // needs a cross-encoder checkpoint
  size_t retrieve_k = 64;
  size_t rerank_k = 10;
  std::vector<size_t> recall_ks = {1, 10, 64};
  std::vector<size_t> sweep_ks = {1, 2, 4, 8, 16, 32, 64};
};

struct BenchConfig {
  size_t n_vectors = 10000;
  size_t dim = 64;
  size_t queries = 1000;
  size_t k = 10;
};

struct MiningConfig {
  size_t top_n = 10;   // negatives written per mention
  size_t epochs = 0;   // hard-negative fine-tuning epochs after mining
  size_t hard_negatives = 4;
};

struct PipelineConfig {
  // Relative paths resolve against the output directory.
  std::filesystem::path data_dir = "data";
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path index_dir = "index";

  uint64_t seed = 1;  // training seed; the generator has its own
  int threads = 0;    // 0 = hardware concurrency

  SynthConfig data;
  size_t vocab_size = 100000;

  nn::EncoderConfig biencoder_encoder;  // both towers start from this
  size_t mention_max_len = kDefaultBiMaxLen;
  size_t entity_max_len = kDefaultBiMaxLen;
  BiEncoderTrainConfig biencoder;
  MiningConfig mining;

  nn::EncoderConfig crossencoder_encoder;
  size_t cross_max_len = kDefaultCrossMaxLen;
  CrossEncoderTrainConfig crossencoder;
  // Start from the trained mention tower instead of random weights; needs
  // matching encoder shapes.
  bool cross_init_from_biencoder = true;
  bool cross_anonymize_domain_tokens = true;

  HnswParams hnsw;
  KdConfig distill;
  EvalConfig eval;
  BenchConfig bench;

  // Throws a config error on out-of-range values.
  void Validate() const;
  // Values outside the ranges the original large-scale models were tuned
  // in. Informational only.
  std::vector<std::string> Warnings() const;
};

// Desk-scale defaults for the synthetic split.
PipelineConfig DefaultPipelineConfig();

// Sections: paths, data, text, biencoder, mining, crossencoder, index,
// distill, eval, bench, plus top-level seed and threads.
nlohmann::json ToJson(const PipelineConfig& config);
// Starts from `base` and applies every key present in `j`; unknown sections
// or keys are config errors.
PipelineConfig ApplyJson(PipelineConfig base, const nlohmann::json& j);
// "section.key=value" (or "key=value" for top-level keys). The value is
// parsed as JSON, falling back to a plain string.
PipelineConfig ApplyOverride(PipelineConfig base, const std::string& assignment);
PipelineConfig LoadPipelineConfig(const std::filesystem::path& path);

// FNV-1a over the canonical JSON dump.
uint64_t ConfigHash(const PipelineConfig& config);

// Resolved artifact locations for one output directory.
struct Workspace {
  std::filesystem::path out;
  std::filesystem::path data;
  std::filesystem::path checkpoints;
  std::filesystem::path index;

  static Workspace Resolve(const PipelineConfig& config, const std::filesystem::path& out);
};

// Each stage reads its inputs from the workspace, writes its artifacts
// there and returns a JSON summary that goes into the manifest.
nlohmann::json RunGenData(const PipelineConfig& config, const Workspace& ws);
nlohmann::json RunValidate(const PipelineConfig& config, const Workspace& ws);
nlohmann::json RunTrainBiEncoder(const PipelineConfig& config, const Workspace& ws);
nlohmann::json RunMineNegatives(const PipelineConfig& config, const Workspace& ws);
nlohmann::json RunBuildIndex(const PipelineConfig& config, const Workspace& ws);
nlohmann::json RunTrainCrossEncoder(const PipelineConfig& config, const Workspace& ws);
nlohmann::json RunDistill(const PipelineConfig& config, const Workspace& ws);
nlohmann::json RunEvaluate(const PipelineConfig& config, const Workspace& ws);
nlohmann::json RunSweepK(const PipelineConfig& config, const Workspace& ws);
nlohmann::json RunBenchAnn(const PipelineConfig& config, const Workspace& ws);
nlohmann::json RunBaselineTfidf(const PipelineConfig& config, const Workspace& ws);

// Command-line entry point; returns the process exit code:
// 0 ok, 2 config, 3 missing or bad model/data/index, 4 internal.
int RunCli(int argc, const char* const* argv);

int ExitCodeFor(ErrorKind kind);

}  // namespace linkstage
