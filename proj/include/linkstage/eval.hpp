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

// Retrieval and linking metrics. A mention is "retrieved" when its gold is in
// its ranked list; normalized accuracy is measured over retrieved mentions,
// unnormalized accuracy over all of them, so
//
//   unnormalized = recall@k * normalized.

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "linkstage/ann.hpp"
#include "linkstage/corpus.hpp"

namespace linkstage {

struct RetrievalRun {
  std::vector<std::vector<EntityId>> ranked;  // per mention, best first
  std::vector<EntityId> gold;
  std::vector<std::string> domain;

  size_t size() const { return gold.size(); }
  // Shortest ranked list.
  size_t depth() const;
  // Throws on misaligned fields or duplicate ids within a list.
  void Validate() const;
  // Every list cut to its first k entries.
  RetrievalRun Truncated(size_t k) const;
  // Mentions whose domain equals `domain`, in order.
  RetrievalRun Subset(const std::string& domain) const;
};

RetrievalRun MakeRun(std::span<const Mention> mentions, const std::vector<SearchResult>& results);

bool GoldRetrieved(const RetrievalRun& run, size_t i);

// Throws for k == 0 or k beyond run.depth().
double RecallAtK(const RetrievalRun& run, size_t k);

// predictions[i] is the reranker's pick for mention i (absent means no
// prediction, which counts as wrong).
using Predictions = std::vector<std::optional<EntityId>>;

double UnnormalizedAccuracy(const RetrievalRun& run, const Predictions& predictions);
// Throws a data error when no gold was retrieved.
double NormalizedAccuracy(const RetrievalRun& run, const Predictions& predictions);

// Unweighted mean. Throws on an empty input.
double MacroAverage(std::span<const double> values);

// Reranker scores for each mention's ranked list, computed once at the
// deepest k and reused for every shallower k.
struct RerankCache {
  RetrievalRun run;
  std::vector<std::vector<float>> scores;  // aligned with run.ranked
};

// Reranker pick among the first k candidates; ties go to the earlier one.
Predictions PredictAtK(const RerankCache& cache, size_t k);

struct SweepPoint {
  size_t k = 0;
  double recall = 0.0;
  double normalized = 0.0;  // 0 when no gold is retrieved at this k
  double unnormalized = 0.0;
};

struct SweepResult {
  std::vector<SweepPoint> curve;
  size_t best_k = 0;  // maximizes unnormalized accuracy; smallest k on ties
};

// ks must be non-empty and each <= cache.run.depth().
SweepResult SweepK(const RerankCache& cache, std::vector<size_t> ks);

// Lexical baseline: cosine between log-tf * smoothed-idf vectors of the
// mention (left context, surface, right context) and of each entity (title
// and description). idf is fit on the entity collection. Ties by lower id.
RetrievalRun TfidfRetrieve(const KnowledgeBase& kb, std::span<const Mention> mentions,
                           size_t k);

struct DomainMetrics {
  size_t mentions = 0;
  std::map<size_t, double> recall;  // recall@k for each requested k
  double normalized = 0.0;
  double unnormalized = 0.0;
};

struct LatencyStats {
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p99_ms = 0.0;
};

LatencyStats SummarizeLatency(std::vector<double> ms);

struct EvalReport {
  std::string retriever;
  size_t rerank_k = 0;
  DomainMetrics overall;
  std::map<std::string, DomainMetrics> per_domain;
  DomainMetrics macro;  // unweighted mean over domains (mentions = total)
  LatencyStats retrieval_latency;
  LatencyStats rerank_latency;
};

// Overall, per-domain and macro metrics. `predictions` may be empty, in
// which case reranking metrics use each list's first entry.
EvalReport BuildReport(const RetrievalRun& run, const Predictions& predictions,
                       const std::vector<size_t>& recall_ks, size_t rerank_k);

nlohmann::json ToJson(const DomainMetrics& m);
nlohmann::json ToJson(const EvalReport& report);
nlohmann::json ToJson(const SweepResult& sweep);

// Columns k, recall, norm_acc, unnorm_acc.
void WriteSweepCsv(const SweepResult& sweep, const std::filesystem::path& path);

// Fraction as a percentage with two decimals, e.g. "91.25".
std::string Percent(double fraction);

}  // namespace linkstage
