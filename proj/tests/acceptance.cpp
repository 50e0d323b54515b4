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

// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails. Pass criterion numbers as arguments to
// run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "gradcheck_cases.hpp"
#include "linkstage/ann.hpp"
#include "linkstage/biencoder.hpp"
#include "linkstage/crossencoder.hpp"
#include "linkstage/distill.hpp"
#include "linkstage/eval.hpp"
#include "linkstage/parallel.hpp"
#include "linkstage/pipeline.hpp"
#include "linkstage/random.hpp"

#ifndef LINKSTAGE_CLI_PATH
#define LINKSTAGE_CLI_PATH "linkstage"
#endif

namespace linkstage {
namespace {

using Json = nlohmann::json;
using Clock = std::chrono::steady_clock;
namespace fs = std::filesystem;

double SecondsSince(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void Check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back((ok ? "" : "MISSED ") + what);
  }
};

fs::path WorkDir() { return fs::temp_directory_path() / "linkstage_acceptance"; }

// ---------------------------------------------------------------------------
// 1. Gradient correctness

Outcome GradientCorrectness() {
  Outcome o;
  const auto start = Clock::now();
  nn::GradCheckOptions f32;
  f32.epsilon = 1e-4;
  f32.samples_per_tensor = 16;
  // Entries that are exactly zero by symmetry (e.g. attention key biases)
  // carry float32 rounding noise around 1e-8; the floor keeps them from
  // dominating the relative error.
  f32.floor = 1e-4;

  const auto bi = testing::CheckInBatchGradients<float>(4, 2, f32);
  o.Check(bi.max() <= 1e-3, fmt::format("in-batch loss through encoder: max rel err {:.2e}",
                                        bi.max()));
  const auto cross = testing::CheckCandidateGradients<float>(5, 3, f32);
  o.Check(cross.max() <= 1e-3, fmt::format("cross-encoder softmax (encoder + head): {:.2e}",
                                           cross.max()));
  KdConfig kd;
  kd.alpha = 0.5;
  kd.temperature = 2.0;
  const auto distill = testing::CheckDistillGradients<float>(5, 1, kd, f32);
  o.Check(distill.max() <= 1e-3, fmt::format("distillation loss through encoder: {:.2e}",
                                             distill.max()));

  Rng rng(21);
  auto random_row = [&](Eigen::Index r, Eigen::Index c) {
    nn::Matrix<double> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.UniformReal(-3.0, 3.0);
    return m;
  };
  double loss_only = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    loss_only = std::max(loss_only, testing::InBatchLogitCheck(random_row(4, 6)));
    loss_only = std::max(loss_only, testing::CandidateLogitCheck(random_row(1, 8), trial));
    for (bool t2 : {false, true}) {
      KdConfig c;
      c.alpha = 0.25 * trial;
      c.temperature = 1.0 + trial;
      c.scale_by_t_squared = t2;
      loss_only = std::max(loss_only,
                           testing::KdLogitCheck(random_row(1, 6), random_row(1, 6), 2, c));
    }
  }
  o.Check(loss_only <= 1e-6, fmt::format("loss-only gradients at 64-bit: {:.2e}", loss_only));
  const double seconds = SecondsSince(start);
  o.Check(seconds < 60.0, fmt::format("runtime {:.1f}s", seconds));
  return o;
}

// ---------------------------------------------------------------------------
// 2. Loss identities

Outcome LossIdentities() {
  Outcome o;
  nn::Matrix<float> one(1, 1);
  one << 4.75f;
  const float single = InBatchLoss(one).loss;
  o.Check(std::abs(single) <= 1e-7f, fmt::format("in-batch loss with B=1, H=0: {:.1e}", single));

  nn::Matrix<float> teacher(1, 4), student(1, 4);
  teacher << 0.5f, 2.0f, -1.0f, 0.0f;
  student << 1.25f, -0.5f, 0.75f, 3.0f;
  KdConfig c;
  c.alpha = 1.0;
  const auto kd = KdLoss(teacher, student, 1, c);
  const auto ce = SoftmaxCrossEntropy(student, 1);
  const bool bitwise = std::memcmp(&kd.total, &ce.loss, sizeof(float)) == 0 && kd.grad == ce.grad;
  o.Check(bitwise, "kd loss at alpha=1 equals student cross-entropy bitwise");

  nn::Matrix<double> z(1, 2);
  z << 2.0, 0.0;
  const auto p = TemperedSoftmax(z, 2.0);
  const double err = std::max(std::abs(p(0, 0) - 0.731059), std::abs(p(0, 1) - 0.268941));
  o.Check(err <= 1e-6, fmt::format("tempered softmax([2,0], T=2) = [{:.6f}, {:.6f}]", p(0, 0),
                                   p(0, 1)));
  return o;
}

// ---------------------------------------------------------------------------
// 3 and 4. Search

std::shared_ptr<const EntityEmbeddingTable> RandomTable(size_t n, size_t dim, uint64_t seed,
                                                        bool quantized = false) {
  Rng rng(seed);
  EmbeddingMatrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = quantized ? static_cast<float>(static_cast<int>(rng.Uniform(3)) - 1)
                            : static_cast<float>(rng.UniformReal(-1.0, 1.0));
  }
  std::vector<EntityId> ids(n);
  for (size_t i = 0; i < n; ++i) ids[i] = static_cast<EntityId>(7 * i + 3);
  rng.Shuffle(ids);
  return std::make_shared<const EntityEmbeddingTable>(std::move(m), std::move(ids), 0);
}

std::span<const float> Row(const EmbeddingMatrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<size_t>(m.cols())};
}

Outcome ExactSearchOracle() {
  Outcome o;
  const auto start = Clock::now();
  for (bool quantized : {false, true}) {
    const auto table = RandomTable(1000, 64, quantized ? 32 : 31, quantized);
    const auto queries = RandomTable(200, 64, quantized ? 34 : 33, quantized)->vectors();
    size_t matched = 0;
    for (Eigen::Index q = 0; q < queries.rows(); ++q) {
      // Naive full scan: score every row, sort by (score desc, id asc).
      std::vector<SearchHit> all;
      for (size_t r = 0; r < table->size(); ++r) {
        all.push_back({table->IdOf(r), InnerProduct(Row(queries, q), table->Row(r))});
      }
      std::sort(all.begin(), all.end(), RanksBefore);
      const auto got = ExactSearch(*table, Row(queries, q), table->size());
      bool same = got.size() == all.size();
      for (size_t i = 0; same && i < got.size(); ++i) same = got[i].id == all[i].id;
      matched += same;
    }
    o.Check(matched == 200, fmt::format("{} vectors: {}/200 queries match the full ranking",
                                        quantized ? "tied (quantized)" : "continuous", matched));
  }
  const double seconds = SecondsSince(start);
  o.Check(seconds < 10.0, fmt::format("runtime {:.1f}s", seconds));
  return o;
}

double RecallAt10(const HnswIndex& index, const EntityEmbeddingTable& table,
                  const EmbeddingMatrix& queries, size_t ef) {
  double total = 0.0;
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    const auto exact = ExactSearch(table, Row(queries, q), 10);
    const auto approx = index.Search(Row(queries, q), 10, ef);
    std::set<EntityId> ids;
    for (const auto& h : exact) ids.insert(h.id);
    size_t hit = 0;
    for (const auto& h : approx) hit += ids.count(h.id);
    total += static_cast<double>(hit) / 10.0;
  }
  return total / static_cast<double>(queries.rows());
}

Outcome HnswQuality() {
  Outcome o;
  HnswParams params;
  params.m_neighbors = 16;
  params.ef_construction = 200;
  params.ef_search = 256;

  auto start = Clock::now();
  const auto table = RandomTable(10000, 64, 41);
  const auto queries = RandomTable(1000, 64, 42)->vectors();
  const auto index = HnswIndex::Build(table, params);
  const double recall = RecallAt10(index, *table, queries, 256);
  o.Check(recall >= 0.95, fmt::format("10k vectors, ef_search=256: recall@10 {:.4f}", recall));
  const double full = RecallAt10(index, *table, queries, table->size());
  o.Check(full >= 0.99, fmt::format("ef_search=n: recall@10 {:.4f}", full));
  const double seconds = SecondsSince(start);
  o.Check(seconds < 120.0, fmt::format("10k runtime {:.1f}s", seconds));

  start = Clock::now();
  const auto big = RandomTable(100000, 64, 43);
  const auto big_queries = RandomTable(1000, 64, 44)->vectors();
  const auto big_index = HnswIndex::Build(big, params);
  const auto exact = BenchmarkQueries(
      "exact", [&](std::span<const float> q, size_t k) { return ExactSearch(*big, q, k); }, *big,
      big_queries, 10);
  const auto hnsw = BenchmarkQueries(
      "hnsw", [&](std::span<const float> q, size_t k) { return big_index.Search(q, k); }, *big,
      big_queries, 10);
  o.Check(hnsw.mean_ms < exact.mean_ms,
          fmt::format("100k vectors: hnsw {:.3f} ms/query vs exact {:.3f} ms/query "
                      "(build {:.1f}s, recall@10 {:.4f})",
                      hnsw.mean_ms, exact.mean_ms, big_index.build_seconds(), hnsw.recall_at_10));
  return o;
}

// ---------------------------------------------------------------------------
// 5, 6 and 8. CLI pipeline

const std::vector<std::string>& PipelineStages() {
  static const std::vector<std::string> stages = {
      "gen-data",         "validate",           "baseline-tfidf", "train-biencoder",
      "mine-negatives",   "build-index",        "train-crossencoder",
      "evaluate",         "sweep-k",            "distill",
      "build-index --set eval.retriever=distilled",
      "evaluate --set eval.retriever=distilled",
      "sweep-k --set eval.retriever=distilled"};
  return stages;
}

struct PipelineRun {
  fs::path dir;
  bool ok = true;
  std::string failed_stage;
  double seconds = 0.0;
};

PipelineRun RunPipeline(const fs::path& dir) {
  PipelineRun run;
  run.dir = dir;
  fs::remove_all(dir);
  const auto start = Clock::now();
  for (const auto& stage : PipelineStages()) {
    const std::string cmd = fmt::format("LINKSTAGE_LOG=error '{}' {} --seed 1 --out '{}'",
                                        LINKSTAGE_CLI_PATH, stage, dir.string());
    const auto t = Clock::now();
    const int rc = std::system(cmd.c_str());
    std::cout << fmt::format("    [{:.1f}s] linkstage {} -> {}\n", SecondsSince(t), stage, rc)
              << std::flush;
    if (rc != 0) {
      run.ok = false;
      run.failed_stage = stage;
      break;
    }
  }
  run.seconds = SecondsSince(start);
  return run;
}

Json ReadJson(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return Json();
  return Json::parse(in, nullptr, false);
}

PipelineRun& FirstRun() {
  static PipelineRun run = RunPipeline(WorkDir() / "pipeline_a");
  return run;
}

PipelineRun& SecondRun() {
  static PipelineRun run = RunPipeline(WorkDir() / "pipeline_b");
  return run;
}

Outcome EndToEnd() {
  Outcome o;
  const auto& run = FirstRun();
  o.Check(run.ok, run.ok ? "all stages exit 0" : "stage failed: " + run.failed_stage);
  if (!run.ok) return o;
  const Json bi = ReadJson(run.dir / "metrics_biencoder.json");
  const Json tfidf = ReadJson(run.dir / "metrics_tfidf.json");
  const double bi_recall = bi["overall"]["recall"]["64"].get<double>();
  const double tfidf_recall = tfidf["overall"]["recall"]["64"].get<double>();
  o.Check(bi_recall >= 0.90, fmt::format("bi-encoder test recall@64 {:.4f}", bi_recall));
  o.Check(bi_recall > tfidf_recall,
          fmt::format("bi-encoder recall@64 {:.4f} > tf-idf {:.4f}", bi_recall, tfidf_recall));
  const double top1 = bi["retriever_top1"].get<double>();
  const double reranked = bi["overall"]["unnormalized_accuracy"].get<double>();
  o.Check(reranked >= top1, fmt::format("reranked unnormalized top-1 {:.4f} >= bi-encoder top-1 "
                                        "{:.4f}",
                                        reranked, top1));
  o.Check(run.seconds <= 600.0,
          fmt::format("pipeline runtime {:.0f}s on {} core(s)", run.seconds, std::max(1u, std::thread::hardware_concurrency())));
  return o;
}

void CheckMetricsFile(Outcome& o, const fs::path& path) {
  const Json m = ReadJson(path);
  if (m.is_null() || m.is_discarded()) {
    o.Check(false, "missing " + path.filename().string());
    return;
  }
  const std::string k = std::to_string(m.value("rerank_k", 0));
  auto check = [&](const Json& block, const std::string& where) {
    if (!block["recall"].contains(k)) return;
    const double recall = block["recall"][k].get<double>();
    const double u = block["unnormalized_accuracy"].get<double>();
    const double n = block["normalized_accuracy"].get<double>();
    o.Check(std::abs(u - recall * n) <= 1e-12,
            fmt::format("{} {}: {:.6f} = {:.6f} x {:.6f}", path.filename().string(), where, u,
                        recall, n));
  };
  check(m["overall"], "overall");
  for (const auto& [domain, block] : m["per_domain"].items()) check(block, domain);
}

void CheckSweepFile(Outcome& o, const fs::path& path) {
  const Json s = ReadJson(path);
  if (s.is_null() || s.is_discarded()) {
    o.Check(false, "missing " + path.filename().string());
    return;
  }
  double previous = 0.0, worst = 0.0;
  bool monotone = true;
  for (const auto& p : s["curve"]) {
    const double r = p["recall"].get<double>();
    worst = std::max(worst, std::abs(p["unnorm_acc"].get<double>() - r * p["norm_acc"].get<double>()));
    monotone = monotone && r >= previous;
    previous = r;
  }
  const std::string name = path.filename().string();
  o.Check(worst <= 1e-12, fmt::format("{}: identity at every k (max gap {:.1e})", name, worst));
  o.Check(monotone, name + ": recall non-decreasing in k");
  const auto& first = s["curve"][0];
  o.Check(first["k"] == 1 && first["norm_acc"].get<double>() == 1.0,
          fmt::format("{}: normalized accuracy at k=1 is {}", name,
                      first["norm_acc"].get<double>()));
}

Outcome MetricIdentity() {
  Outcome o;
  const auto& run = FirstRun();
  o.Check(run.ok, run.ok ? "pipeline outputs available" : "stage failed: " + run.failed_stage);
  if (!run.ok) return o;
  for (const char* f : {"metrics_biencoder.json", "metrics_distilled.json", "metrics_tfidf.json"}) {
    CheckMetricsFile(o, run.dir / f);
  }
  for (const char* f : {"sweep_biencoder.json", "sweep_distilled.json"}) {
    CheckSweepFile(o, run.dir / f);
  }
  // A reranker that is right at random on a random run.
  Rng rng(61);
  RerankCache cache;
  for (int i = 0; i < 500; ++i) {
    std::vector<EntityId> list(32);
    for (int j = 0; j < 32; ++j) list[j] = j;
    rng.Shuffle(list);
    cache.run.ranked.push_back(list);
    cache.run.gold.push_back(static_cast<EntityId>(rng.Uniform(40)));
    cache.run.domain.push_back(i % 2 ? "a" : "b");
    std::vector<float> scores(32);
    for (auto& x : scores) x = static_cast<float>(rng.UniformReal());
    cache.scores.push_back(scores);
  }
  const auto sweep = SweepK(cache, {1, 2, 4, 8, 16, 32});
  double worst = 0.0;
  bool monotone = true;
  for (size_t i = 0; i < sweep.curve.size(); ++i) {
    const auto& p = sweep.curve[i];
    worst = std::max(worst, std::abs(p.unnormalized - p.recall * p.normalized));
    if (i > 0) monotone = monotone && p.recall >= sweep.curve[i - 1].recall;
  }
  o.Check(worst <= 1e-12 && monotone && sweep.curve[0].normalized == 1.0,
          "synthetic rerank cache: identity, monotone recall, normalized = 1 at k=1");
  return o;
}

bool JsonClose(const Json& a, const Json& b, double tol, std::string& where,
               const std::string& path = "") {
  if (a.is_number() && b.is_number()) {
    if (std::abs(a.get<double>() - b.get<double>()) <= tol) return true;
    where = path;
    return false;
  }
  if (a.type() != b.type() || a.size() != b.size()) {
    where = path;
    return false;
  }
  if (a.is_object()) {
    for (const auto& [k, v] : a.items()) {
      if (!b.contains(k) || !JsonClose(v, b[k], tol, where, path + "/" + k)) {
        if (where.empty()) where = path + "/" + k;
        return false;
      }
    }
    return true;
  }
  if (a.is_array()) {
    for (size_t i = 0; i < a.size(); ++i) {
      if (!JsonClose(a[i], b[i], tol, where, path + "/" + std::to_string(i))) return false;
    }
    return true;
  }
  if (a != b) where = path;
  return a == b;
}

Outcome Determinism() {
  Outcome o;
  const auto& a = FirstRun();
  const auto& b = SecondRun();
  o.Check(a.ok && b.ok, "both pipeline runs completed");
  if (!a.ok || !b.ok) return o;
  size_t files = 0;
  for (const auto& entry : fs::directory_iterator(a.dir)) {
    const std::string name = entry.path().filename().string();
    if (!(name.starts_with("metrics_") || name.starts_with("sweep_")) ||
        entry.path().extension() != ".json") {
      continue;
    }
    ++files;
    std::string where;
    const bool same =
        JsonClose(ReadJson(entry.path()), ReadJson(b.dir / name), 1e-6, where);
    o.Check(same, same ? name + " identical" : name + " differs at " + where);
  }
  o.Check(files >= 5, fmt::format("{} metric files compared", files));
  return o;
}

// ---------------------------------------------------------------------------
// 7. Distillation direction

double TestTop1(const BiEncoder& model, const ZeroShotSplit& split) {
  const auto table = BuildEmbeddingTable(model, split.test_kb);
  const auto hits = RetrieveTopK(model, split.test_examples, table, 1);
  size_t correct = 0;
  for (size_t i = 0; i < hits.size(); ++i) {
    correct += hits[i][0].id == split.test_examples[i].gold_entity_id;
  }
  return static_cast<double>(correct) / static_cast<double>(hits.size());
}

Outcome DistillationDirection() {
  Outcome o;
  const auto start = Clock::now();
  const auto& run = FirstRun();
  o.Check(run.ok, run.ok ? "teacher and student checkpoints available"
                         : "stage failed: " + run.failed_stage);
  if (!run.ok) return o;
  const auto split = LoadDataset(run.dir / "data");
  const auto teacher = CrossEncoder::Load(run.dir / "checkpoints");
  const auto initial = BiEncoder::Load(run.dir / "checkpoints", "biencoder");
  const KdConfig base = DefaultPipelineConfig().distill;
  double sum_kd = 0.0, sum_plain = 0.0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    KdConfig kd = base;
    kd.seed = seed;
    kd.alpha = 0.5;
    kd.temperature = 2.0;
    KdConfig plain = kd;
    plain.alpha = 1.0;
    const double a = TestTop1(TrainDistilled(&teacher, initial, split, kd).student, split);
    const double b = TestTop1(TrainDistilled(nullptr, initial, split, plain).student, split);
    std::cout << fmt::format("    seed {}: distilled {:.4f}, plain {:.4f}\n", seed, a, b)
              << std::flush;
    sum_kd += a;
    sum_plain += b;
  }
  o.Check(sum_kd >= sum_plain, fmt::format("mean top-1 distilled {:.4f} >= plain {:.4f}",
                                           sum_kd / 5, sum_plain / 5));
  const double seconds = SecondsSince(start);
  o.Check(seconds <= 1800.0, fmt::format("runtime {:.0f}s", seconds));
  return o;
}

struct Criterion {
  int id;
  const char* title;
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace linkstage

int main(int argc, char** argv) {
  using namespace linkstage;
  spdlog::set_level(spdlog::level::err);
  SetThreadCap(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", GradientCorrectness},
      {2, "loss identities", LossIdentities},
      {3, "exact-search oracle", ExactSearchOracle},
      {4, "HNSW quality and speed", HnswQuality},
      {5, "end-to-end zero-shot run", EndToEnd},
      {6, "metric identity", MetricIdentity},
      {7, "distillation direction", DistillationDirection},
      {8, "determinism", Determinism},
  };
  std::filesystem::create_directories(WorkDir());
  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.Check(false, std::string("exception: ") + e.what());
    }
    std::cout << fmt::format("{} criterion {}: {} ({:.1f}s)\n", o.pass ? "PASS" : "FAIL", c.id,
                             c.title, SecondsSince(start));
    for (const auto& note : o.notes) std::cout << "    " << note << "\n";
    std::cout << std::flush;
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
