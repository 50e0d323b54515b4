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

#include <chrono>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "linkstage/log.hpp"
#include "linkstage/parallel.hpp"
#include "linkstage/pipeline.hpp"

#ifndef LINKSTAGE_VERSION
#define LINKSTAGE_VERSION "0.0.0"
#endif

namespace linkstage {

namespace {

using Stage = std::function<nlohmann::json(const PipelineConfig&, const Workspace&)>;

const std::vector<std::pair<std::string, std::string>>& Commands() {
  static const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "generate the synthetic zero-shot split"},
      {"validate", "check dataset integrity"},
      {"train-biencoder", "train the bi-encoder retriever"},
      {"mine-negatives", "mine hard negatives (optionally fine-tune on them)"},
      {"build-index", "embed both KBs and build the HNSW index"},
      {"train-crossencoder", "train the reranker on retrieved candidates"},
      {"distill", "distill the reranker into the bi-encoder"},
      {"evaluate", "retrieve, rerank and report metrics on the test split"},
      {"sweep-k", "reranking accuracy as a function of k"},
      {"bench-ann", "exact vs HNSW latency and recall on random vectors"},
      {"baseline-tfidf", "TF-IDF retrieval baseline"},
  };
  return commands;
}

Stage StageFor(const std::string& name) {
  static const std::map<std::string, Stage> stages = {
      {"gen-data", RunGenData},
      {"validate", RunValidate},
      {"train-biencoder", RunTrainBiEncoder},
      {"mine-negatives", RunMineNegatives},
      {"build-index", RunBuildIndex},
      {"train-crossencoder", RunTrainCrossEncoder},
      {"distill", RunDistill},
      {"evaluate", RunEvaluate},
      {"sweep-k", RunSweepK},
      {"bench-ann", RunBenchAnn},
      {"baseline-tfidf", RunBaselineTfidf},
  };
  return stages.at(name);
}

nlohmann::json Versions() {
  return {{"linkstage", LINKSTAGE_VERSION},
          {"eigen", fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION,
                                EIGEN_MINOR_VERSION)},
          {"fmt", FMT_VERSION},
          {"spdlog", fmt::format("{}.{}.{}", SPDLOG_VER_MAJOR, SPDLOG_VER_MINOR,
                                 SPDLOG_VER_PATCH)},
          {"nlohmann_json", fmt::format("{}.{}.{}", NLOHMANN_JSON_VERSION_MAJOR,
                                        NLOHMANN_JSON_VERSION_MINOR,
                                        NLOHMANN_JSON_VERSION_PATCH)},
          {"compiler", __VERSION__}};
}

}  // namespace

int RunCli(int argc, const char* const* argv) {
  CLI::App app{"Two-stage zero-shot entity linking"};
  app.fallthrough();
  app.require_subcommand(1);
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<int> threads;
  std::string out = "run";
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "training seed");
  app.add_option("--threads", threads, "worker thread cap (0 = all cores)")
      ->check(CLI::NonNegativeNumber);
  app.add_option("--out", out, "artifact directory")->capture_default_str();
  app.add_option("--set", overrides, "section.key=value override (repeatable)")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  for (const auto& [name, help] : Commands()) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : ExitCodeFor(ErrorKind::kConfig);
  }
  if (!ConfigureLoggingFromEnv()) {
    std::cerr << "LINKSTAGE_LOG must be one of error, info, debug\n";
    return ExitCodeFor(ErrorKind::kConfig);
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    PipelineConfig config =
        config_path.empty() ? DefaultPipelineConfig() : LoadPipelineConfig(config_path);
    for (const auto& assignment : overrides) config = ApplyOverride(std::move(config), assignment);
    if (seed) config.seed = *seed;
    if (threads) config.threads = *threads;
    config.Validate();
    for (const auto& w : config.Warnings()) spdlog::debug("config: {}", w);
    const int cap = config.threads > 0
                        ? config.threads
                        : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    SetThreadCap(cap);

    const Workspace ws = Workspace::Resolve(config, out);
    std::filesystem::create_directories(ws.out);
    spdlog::info("{} (seed {}, {} threads, out {})", command, config.seed, cap, ws.out.string());
    const auto start = std::chrono::steady_clock::now();
    const nlohmann::json summary = StageFor(command)(config, ws);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    const nlohmann::json manifest = {{"command", command},
                                     {"config_hash", fmt::format("{:016x}", ConfigHash(config))},
                                     {"seed", config.seed},
                                     {"data_seed", config.data.seed},
                                     {"threads", cap},
                                     {"versions", Versions()},
                                     {"wall_seconds", wall},
                                     {"summary", summary},
                                     {"config", ToJson(config)}};
    std::ofstream file(ws.out / fmt::format("manifest_{}.json", command));
    file << manifest.dump(2) << '\n';
    if (!file) Fail(ErrorKind::kConfig, "cannot write manifest in " + ws.out.string());
    spdlog::info("{} done in {:.1f}s", command, wall);
    return 0;
  } catch (const Error& e) {
    spdlog::error("{} error: {}", ErrorKindName(e.kind()), e.what());
    return ExitCodeFor(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return ExitCodeFor(ErrorKind::kInternal);
  }
}

}  // namespace linkstage
