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

#include "linkstage/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <thread>
#include <type_traits>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "linkstage/eval.hpp"
#include "linkstage/log.hpp"
#include "linkstage/parallel.hpp"
#include "linkstage/random.hpp"
#include "linkstage/text.hpp"

namespace linkstage {

namespace {

using Json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double MillisSince(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

// Calls v(section, key, field) for every serialized field; an empty section
// is the top level. Module seeds are not listed: they derive from `seed`.
template <typename Config, typename Visitor>
void VisitFields(Config& c, Visitor&& v) {
  v("", "seed", c.seed);
  v("", "threads", c.threads);

  v("paths", "data", c.data_dir);
  v("paths", "checkpoints", c.checkpoint_dir);
  v("paths", "index", c.index_dir);

  v("data", "n_entities", c.data.n_entities);
  v("data", "n_mentions", c.data.n_mentions);
  v("data", "alias_noise_rate", c.data.alias_noise_rate);
  v("data", "vocab_pool_size", c.data.vocab_pool_size);
  v("data", "seed", c.data.seed);
  v("data", "train_worlds", c.data.train_worlds);
  v("data", "test_worlds", c.data.test_worlds);

  v("text", "vocab_size", c.vocab_size);
  v("text", "mention_max_len", c.mention_max_len);
  v("text", "entity_max_len", c.entity_max_len);
  v("text", "cross_max_len", c.cross_max_len);

  v("biencoder", "embed_dim", c.biencoder_encoder.embed_dim);
  v("biencoder", "n_layers", c.biencoder_encoder.n_layers);
  v("biencoder", "n_heads", c.biencoder_encoder.n_heads);
  v("biencoder", "ff_dim", c.biencoder_encoder.ff_dim);
  v("biencoder", "max_positions", c.biencoder_encoder.max_positions);
  v("biencoder", "epochs", c.biencoder.epochs);
  v("biencoder", "batch_size", c.biencoder.batch_size);
  v("biencoder", "learning_rate", c.biencoder.learning_rate);
  v("biencoder", "hard_negatives", c.biencoder.hard_negatives);
  v("biencoder", "hard_negative_start", c.biencoder.hard_negative_start);
  v("biencoder", "hard_negative_refresh", c.biencoder.hard_negative_refresh);
  v("biencoder", "validation_fraction", c.biencoder.validation_fraction);
  v("biencoder", "validation_k", c.biencoder.validation_k);
  v("biencoder", "anonymize_domain_tokens", c.biencoder.anonymize_domain_tokens);

  v("mining", "top_n", c.mining.top_n);
  v("mining", "epochs", c.mining.epochs);
  v("mining", "hard_negatives", c.mining.hard_negatives);

  v("crossencoder", "embed_dim", c.crossencoder_encoder.embed_dim);
  v("crossencoder", "n_layers", c.crossencoder_encoder.n_layers);
  v("crossencoder", "n_heads", c.crossencoder_encoder.n_heads);
  v("crossencoder", "ff_dim", c.crossencoder_encoder.ff_dim);
  v("crossencoder", "max_positions", c.crossencoder_encoder.max_positions);
  v("crossencoder", "epochs", c.crossencoder.epochs);
  v("crossencoder", "learning_rate", c.crossencoder.learning_rate);
  v("crossencoder", "k", c.crossencoder.k);
  v("crossencoder", "insert_gold", c.crossencoder.insert_gold);
  v("crossencoder", "init_from_biencoder", c.cross_init_from_biencoder);
  v("crossencoder", "anonymize_domain_tokens", c.cross_anonymize_domain_tokens);

  v("index", "m_neighbors", c.hnsw.m_neighbors);
  v("index", "ef_construction", c.hnsw.ef_construction);
  v("index", "ef_search", c.hnsw.ef_search);

  v("distill", "temperature", c.distill.temperature);
  v("distill", "alpha", c.distill.alpha);
  v("distill", "k", c.distill.k);
  v("distill", "scale_by_t_squared", c.distill.scale_by_t_squared);
  v("distill", "epochs", c.distill.epochs);
  v("distill", "batch_size", c.distill.batch_size);
  v("distill", "learning_rate", c.distill.learning_rate);
  v("distill", "refresh_interval", c.distill.refresh_interval);
  v("distill", "validation_fraction", c.distill.validation_fraction);
  v("distill", "anonymize_domain_tokens", c.distill.anonymize_domain_tokens);

  v("eval", "retriever", c.eval.retriever);
  v("eval", "use_hnsw", c.eval.use_hnsw);
  v("eval", "rerank", c.eval.rerank);
  v("eval", "retrieve_k", c.eval.retrieve_k);
  v("eval", "rerank_k", c.eval.rerank_k);
  v("eval", "recall_ks", c.eval.recall_ks);
  v("eval", "sweep_ks", c.eval.sweep_ks);

  v("bench", "n_vectors", c.bench.n_vectors);
  v("bench", "dim", c.bench.dim);
  v("bench", "queries", c.bench.queries);
  v("bench", "k", c.bench.k);
}

std::string FieldName(const char* section, const char* key) {
  return *section ? fmt::format("{}.{}", section, key) : std::string(key);
}

template <typename T>
Json Put(const T& value) {
  if constexpr (std::is_same_v<T, std::filesystem::path>) {
    return value.string();
  } else {
    return value;
  }
}

template <typename T>
void Take(const Json& j, T& value, const std::string& name) {
  auto bad = [&](const char* expected) {
    Fail(ErrorKind::kConfig, fmt::format("{} must be {}, got {}", name, expected, j.dump()));
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) bad("a boolean");
    value = j.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) bad("an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (j.is_number_unsigned() == false && j.get<int64_t>() < 0) bad("non-negative");
    }
    value = j.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) bad("a number");
    value = j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) bad("a string");
    value = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
    if (!j.is_string()) bad("a path string");
    value = j.get<std::string>();
  } else {
    if (!j.is_array()) bad("an array of integers");
    T out;
    for (const auto& e : j) {
      if (!e.is_number_integer() || (!e.is_number_unsigned() && e.get<int64_t>() < 0)) {
        bad("an array of non-negative integers");
      }
      out.push_back(e.get<typename T::value_type>());
    }
    value = std::move(out);
  }
}

// Module seeds follow the top-level training seed.
PipelineConfig Seeded(PipelineConfig c) {
  c.biencoder_encoder.seed = c.seed;
  c.biencoder.seed = c.seed;
  c.crossencoder_encoder.seed = c.seed + 1;
  c.crossencoder.seed = c.seed + 1;
  c.hnsw.seed = c.seed;
  c.distill.seed = c.seed;
  return c;
}

void WriteJson(const Json& j, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) Fail(ErrorKind::kConfig, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void WriteJsonLines(const std::vector<Json>& rows, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) Fail(ErrorKind::kConfig, "cannot write " + path.string());
  for (const auto& row : rows) out << row.dump() << '\n';
}

ZeroShotSplit LoadSplit(const Workspace& ws) {
  if (!std::filesystem::exists(ws.data / "train_entities.jsonl")) {
    Fail(ErrorKind::kData, "no dataset in " + ws.data.string() + " (run gen-data)");
  }
  return LoadDataset(ws.data);
}

BiEncoder LoadBi(const Workspace& ws, const std::string& prefix) {
  if (!std::filesystem::exists(ws.checkpoints / (prefix + "_mention.ckpt"))) {
    Fail(ErrorKind::kModel, fmt::format("no {} checkpoint in {}", prefix, ws.checkpoints.string()));
  }
  return BiEncoder::Load(ws.checkpoints, prefix);
}

CrossEncoder LoadCross(const Workspace& ws) {
  if (!std::filesystem::exists(ws.checkpoints / "crossencoder.ckpt")) {
    Fail(ErrorKind::kModel, "no crossencoder checkpoint in " + ws.checkpoints.string());
  }
  return CrossEncoder::Load(ws.checkpoints);
}

std::filesystem::path TablePath(const Workspace& ws, const std::string& retriever,
                                const std::string& side) {
  return ws.index / fmt::format("{}_{}_entities.emb", retriever, side);
}

std::filesystem::path HnswPath(const Workspace& ws, const std::string& retriever) {
  return ws.index / fmt::format("{}_test_entities.hnsw", retriever);
}

std::shared_ptr<const EntityEmbeddingTable> LoadTable(const Workspace& ws,
                                                      const std::string& retriever,
                                                      const std::string& side,
                                                      const BiEncoder& model) {
  const auto path = TablePath(ws, retriever, side);
  if (!std::filesystem::exists(path)) {
    Fail(ErrorKind::kIndex, fmt::format("no index {} (run build-index)", path.string()));
  }
  auto table = std::make_shared<const EntityEmbeddingTable>(EntityEmbeddingTable::Load(path));
  if (table->model_fingerprint() != nn::ModelFingerprint(model.entity_encoder)) {
    Fail(ErrorKind::kIndex, fmt::format("{} was built by another model (rerun build-index)",
                                        path.string()));
  }
  return table;
}

Json EpochLogJson(const BiEncoderEpochLog& e) {
  return {{"epoch", e.epoch},
          {"loss", e.loss},
          {"steps", e.steps},
          {"validation_recall", e.validation_recall}};
}

struct TestRetrieval {
  RetrievalRun run;
  std::vector<double> latency_ms;
};

// Mention vectors are computed up front; latency covers the search only.
TestRetrieval RetrieveTest(const PipelineConfig& c, const Workspace& ws, const BiEncoder& model,
                           const ZeroShotSplit& split) {
  auto table = LoadTable(ws, c.eval.retriever, "test", model);
  std::optional<HnswIndex> index;
  if (c.eval.use_hnsw) {
    const auto path = HnswPath(ws, c.eval.retriever);
    if (!std::filesystem::exists(path)) {
      Fail(ErrorKind::kIndex, fmt::format("no index {} (run build-index)", path.string()));
    }
    index = HnswIndex::Load(path, table);
  }
  const EmbeddingMatrix queries = EmbedMentions(model, split.test_examples);
  const size_t k = std::min(c.eval.retrieve_k, table->size());
  std::vector<SearchResult> results(queries.rows());
  std::vector<double> latency(queries.rows());
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    const std::span<const float> q(queries.data() + i * queries.cols(),
                                   static_cast<size_t>(queries.cols()));
    const auto start = Clock::now();
    results[i] = index ? index->Search(q, k) : ExactSearch(*table, q, k);
    latency[i] = MillisSince(start);
  }
  return {MakeRun(split.test_examples, results), std::move(latency)};
}

// Cross-encoder scores for every list of `run`.
RerankCache ScoreRun(const CrossEncoder& cross, const RetrievalRun& run,
                     std::span<const Mention> mentions, const KnowledgeBase& kb,
                     std::vector<double>* latency_ms) {
  RerankCache cache;
  cache.run = run;
  cache.scores.resize(run.size());
  if (latency_ms) latency_ms->assign(run.size(), 0.0);
  ParallelFor(run.size(), [&](size_t begin, size_t end, int) {
    for (size_t i = begin; i < end; ++i) {
      const auto start = Clock::now();
      const auto logits = ScoreCandidates(cross, mentions[i], kb, run.ranked[i]);
      cache.scores[i].assign(logits.data(), logits.data() + logits.size());
      if (latency_ms) (*latency_ms)[i] = MillisSince(start);
    }
  });
  return cache;
}

void CheckIdentity(double recall, double normalized, double unnormalized, size_t k) {
  if (std::abs(unnormalized - recall * normalized) > 1e-12) {
    Fail(ErrorKind::kInternal,
         fmt::format("metric identity broken at k={}: {} != {} * {}", k, unnormalized, recall,
                     normalized));
  }
}

Json LatencyJson(const LatencyStats& s) {
  return {{"mean_ms", s.mean_ms}, {"median_ms", s.median_ms}, {"p99_ms", s.p99_ms}};
}

Json BenchJson(const BenchmarkReport& r) {
  return {{"backend", r.backend},         {"queries", r.queries},
          {"mean_ms", r.mean_ms},         {"median_ms", r.median_ms},
          {"p99_ms", r.p99_ms},           {"recall_at_1", r.recall_at_1},
          {"recall_at_10", r.recall_at_10}, {"recall_at_30", r.recall_at_30},
          {"recall_at_100", r.recall_at_100}};
}

}  // namespace

void PipelineConfig::Validate() const {
  auto bad = [](const std::string& what) { Fail(ErrorKind::kConfig, what); };
  data.Validate();
  if (threads < 0) bad("threads must be >= 0");
  if (vocab_size <= special::kCount) bad("text.vocab_size must exceed the reserved tokens");
  auto check_encoder = [&](nn::EncoderConfig e, size_t max_len, const char* name) {
    e.vocab_size = static_cast<uint32_t>(special::kCount + 1);
    e.Validate();
    if (max_len < 3 || max_len > e.max_positions) {
      bad(fmt::format("{} input length must be in [3, max_positions]", name));
    }
  };
  check_encoder(biencoder_encoder, std::max(mention_max_len, entity_max_len), "biencoder");
  check_encoder(crossencoder_encoder, cross_max_len, "crossencoder");
  biencoder.Validate();
  crossencoder.Validate();
  hnsw.Validate();
  distill.Validate();
  if (cross_init_from_biencoder) {
    nn::EncoderConfig a = biencoder_encoder, b = crossencoder_encoder;
    a.seed = b.seed = 0;
    if (!(a == b)) bad("crossencoder.init_from_biencoder needs identical encoder shapes");
  }
  if (eval.retriever != "biencoder" && eval.retriever != "distilled") {
    bad("eval.retriever must be \"biencoder\" or \"distilled\"");
  }
  if (eval.rerank_k < 1 || eval.rerank_k > eval.retrieve_k) {
    bad("eval.rerank_k must be in [1, retrieve_k]");
  }
  if (eval.use_hnsw && eval.retrieve_k > hnsw.ef_search) {
    bad("eval.retrieve_k must not exceed index.ef_search");
  }
  for (const auto* ks : {&eval.recall_ks, &eval.sweep_ks}) {
    if (ks->empty()) bad("eval recall_ks and sweep_ks must be non-empty");
    for (size_t k : *ks) {
      if (k < 1 || k > eval.retrieve_k) bad("eval ks must be in [1, retrieve_k]");
    }
  }
  if (bench.n_vectors < 1 || bench.dim < 1 || bench.queries < 1 || bench.k < 1) {
    bad("bench fields must be >= 1");
  }
  if (mining.top_n < 1) bad("mining.top_n must be >= 1");
}

std::vector<std::string> PipelineConfig::Warnings() const {
  std::vector<std::string> out;
  auto lr = [&](double v, const char* name) {
    if (v < 2e-6 || v > 2e-5) {
      out.push_back(fmt::format("{}.learning_rate {} is outside [2e-6, 2e-5]", name, v));
    }
  };
  lr(biencoder.learning_rate, "biencoder");
  lr(crossencoder.learning_rate, "crossencoder");
  if (biencoder.batch_size < 128 || biencoder.batch_size > 256) {
    out.push_back(fmt::format("biencoder.batch_size {} is outside [128, 256]",
                              biencoder.batch_size));
  }
  if (distill.temperature < 2.0 || distill.temperature > 5.0) {
    out.push_back(fmt::format("distill.temperature {} is outside [2, 5]", distill.temperature));
  }
  if (mention_max_len != 32 && mention_max_len != 64 && mention_max_len != 128) {
    out.push_back(fmt::format("text.mention_max_len {} is not one of 32, 64, 128",
                              mention_max_len));
  }
  return out;
}

PipelineConfig DefaultPipelineConfig() {
  PipelineConfig c;
  c.biencoder.epochs = 40;
  c.biencoder.batch_size = 16;
  c.biencoder.hard_negatives = 0;
  c.crossencoder.epochs = 4;
  c.crossencoder.learning_rate = 2e-4;
  c.crossencoder.k = 16;
  return c;
}

Json ToJson(const PipelineConfig& config) {
  Json j = Json::object();
  VisitFields(config, [&](const char* section, const char* key, const auto& value) {
    if (*section) {
      j[section][key] = Put(value);
    } else {
      j[key] = Put(value);
    }
  });
  return j;
}

PipelineConfig ApplyJson(PipelineConfig base, const Json& j) {
  if (!j.is_object()) Fail(ErrorKind::kConfig, "config must be a JSON object");
  std::set<std::string> known;
  VisitFields(base, [&](const char* section, const char* key, auto& value) {
    known.insert(FieldName(section, key));
    const Json* node = &j;
    if (*section) {
      auto it = j.find(section);
      if (it == j.end()) return;
      node = &*it;
    }
    auto it = node->find(key);
    if (it != node->end()) Take(*it, value, FieldName(section, key));
  });
  for (const auto& [name, value] : j.items()) {
    if (value.is_object()) {
      for (const auto& [key, ignored] : value.items()) {
        if (!known.count(name + "." + key)) {
          Fail(ErrorKind::kConfig, "unknown config key " + name + "." + key);
        }
      }
    } else if (!known.count(name)) {
      Fail(ErrorKind::kConfig, "unknown config key " + name);
    }
  }
  return base;
}

PipelineConfig ApplyOverride(PipelineConfig base, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    Fail(ErrorKind::kConfig, "--set expects section.key=value, got " + assignment);
  }
  const std::string name = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = text;
  Json patch;
  const auto dot = name.find('.');
  if (dot == std::string::npos) {
    patch[name] = value;
  } else {
    patch[name.substr(0, dot)][name.substr(dot + 1)] = value;
  }
  return ApplyJson(std::move(base), patch);
}

PipelineConfig LoadPipelineConfig(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kConfig, "cannot read config " + path.string());
  Json j = Json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) Fail(ErrorKind::kConfig, "config is not valid JSON: " + path.string());
  return ApplyJson(DefaultPipelineConfig(), j);
}

uint64_t ConfigHash(const PipelineConfig& config) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : ToJson(config).dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

Workspace Workspace::Resolve(const PipelineConfig& config, const std::filesystem::path& out) {
  auto under = [&](const std::filesystem::path& p) { return p.is_absolute() ? p : out / p; };
  return {out, under(config.data_dir), under(config.checkpoint_dir), under(config.index_dir)};
}

Json RunGenData(const PipelineConfig& config, const Workspace& ws) {
  const auto split = GenerateSyntheticWorld(config.data);
  SaveDataset(split, ws.data);
  spdlog::info("wrote {} + {} entities, {} + {} mentions to {}", split.train_kb.size(),
               split.test_kb.size(), split.train_examples.size(), split.test_examples.size(),
               ws.data.string());
  return {{"train_entities", split.train_kb.size()},
          {"train_mentions", split.train_examples.size()},
          {"test_entities", split.test_kb.size()},
          {"test_mentions", split.test_examples.size()}};
}

Json RunValidate(const PipelineConfig&, const Workspace& ws) {
  const auto split = LoadSplit(ws);
  const auto report = ValidateZeroShotSplit(split);
  for (const auto& v : report.violations) spdlog::error("{}", v);
  if (!report.ok()) {
    Fail(ErrorKind::kData, fmt::format("{} violations, first: {}", report.violations.size(),
                                       report.violations.front()));
  }
  spdlog::info("dataset ok");
  return {{"violations", 0}};
}

Json RunTrainBiEncoder(const PipelineConfig& config, const Workspace& ws) {
  const PipelineConfig c = Seeded(config);
  const auto split = LoadSplit(ws);
  auto vocab = std::make_shared<const Vocab>(BuildVocab(split, c.vocab_size));
  auto model = BiEncoder::Init(c.biencoder_encoder, vocab, c.mention_max_len, c.entity_max_len);
  auto result = TrainBiEncoder(split, std::move(model), c.biencoder);
  result.model.Save(ws.checkpoints, "biencoder");
  std::vector<Json> rows;
  for (const auto& e : result.log) rows.push_back(EpochLogJson(e));
  WriteJsonLines(rows, ws.out / "biencoder_log.jsonl");
  return {{"vocab", vocab->size()}, {"log", rows.back()}};
}

Json RunMineNegatives(const PipelineConfig& config, const Workspace& ws) {
  const PipelineConfig c = Seeded(config);
  const auto split = LoadSplit(ws);
  auto model = LoadBi(ws, "biencoder");
  const auto table = BuildEmbeddingTable(model, split.train_kb);
  const auto negatives = MineHardNegatives(model, split.train_examples, table, c.mining.top_n);
  std::vector<Json> rows;
  for (size_t i = 0; i < negatives.size(); ++i) {
    rows.push_back({{"mention_id", split.train_examples[i].id}, {"negatives", negatives[i]}});
  }
  WriteJsonLines(rows, ws.out / "negatives.jsonl");
  Json summary = {{"mentions", negatives.size()}, {"top_n", c.mining.top_n}};
  if (c.mining.epochs > 0) {
    BiEncoderTrainConfig tc = c.biencoder;
    tc.epochs = c.mining.epochs;
    tc.hard_negatives = c.mining.hard_negatives;
    tc.hard_negative_start = 0;
    tc.hard_negative_refresh = 1;
    auto result = TrainBiEncoder(split, std::move(model), tc);
    result.model.Save(ws.checkpoints, "biencoder");
    std::vector<Json> log;
    for (const auto& e : result.log) log.push_back(EpochLogJson(e));
    WriteJsonLines(log, ws.out / "mining_log.jsonl");
    summary["log"] = log.back();
  }
  return summary;
}

Json RunBuildIndex(const PipelineConfig& config, const Workspace& ws) {
  const PipelineConfig c = Seeded(config);
  const auto split = LoadSplit(ws);
  const auto model = LoadBi(ws, c.eval.retriever);
  std::filesystem::create_directories(ws.index);
  const auto train = BuildEmbeddingTable(model, split.train_kb);
  train.Save(TablePath(ws, c.eval.retriever, "train"));
  auto test = std::make_shared<const EntityEmbeddingTable>(
      BuildEmbeddingTable(model, split.test_kb));
  test->Save(TablePath(ws, c.eval.retriever, "test"));
  const auto index = HnswIndex::Build(test, c.hnsw);
  index.Save(HnswPath(ws, c.eval.retriever));
  spdlog::info("indexed {} test entities in {:.2f}s", index.size(), index.build_seconds());
  return {{"retriever", c.eval.retriever},
          {"train_entities", train.size()},
          {"test_entities", test->size()},
          {"max_level", index.max_level()},
          {"repaired_links", index.repaired_links()},
          {"build_seconds", index.build_seconds()}};
}

Json RunTrainCrossEncoder(const PipelineConfig& config, const Workspace& ws) {
  const PipelineConfig c = Seeded(config);
  const auto split = LoadSplit(ws);
  const auto bi = LoadBi(ws, "biencoder");
  const auto table = LoadTable(ws, "biencoder", "train", bi);
  const size_t k = std::min(c.crossencoder.k, table->size());
  const auto retrieved = RetrieveTopK(bi, split.train_examples, *table, k);
  std::vector<CandidateSet> candidates;
  candidates.reserve(retrieved.size());
  size_t hits = 0;
  for (size_t i = 0; i < retrieved.size(); ++i) {
    candidates.push_back(MakeCandidateSet(split.train_examples[i], retrieved[i], k));
    hits += candidates.back().gold_position.has_value();
  }
  nn::EncoderConfig enc = c.crossencoder_encoder;
  enc.vocab_size = static_cast<uint32_t>(bi.vocab->size());
  auto cross = CrossEncoder::Init(enc, bi.vocab, c.cross_max_len);
  if (c.cross_init_from_biencoder) {
    cross.encoder = bi.mention_encoder;
    cross.encoder.config.seed = enc.seed;
  }
  const std::vector<TokenId> anonymous = c.cross_anonymize_domain_tokens
                                             ? DomainSpecificTokens(split, *bi.vocab)
                                             : std::vector<TokenId>{};
  auto result = TrainCrossEncoder(std::move(cross), split.train_kb, split.train_examples,
                                  candidates, c.crossencoder, anonymous);
  result.model.Save(ws.checkpoints);
  std::vector<Json> rows;
  for (const auto& e : result.log) {
    rows.push_back(
        {{"epoch", e.epoch}, {"loss", e.loss}, {"steps", e.steps}, {"skipped", e.skipped}});
  }
  WriteJsonLines(rows, ws.out / "crossencoder_log.jsonl");
  return {{"train_recall_at_k", static_cast<double>(hits) / candidates.size()},
          {"k", k},
          {"log", rows.empty() ? Json() : rows.back()}};
}

Json RunDistill(const PipelineConfig& config, const Workspace& ws) {
  const PipelineConfig c = Seeded(config);
  const auto split = LoadSplit(ws);
  auto student = LoadBi(ws, "biencoder");
  std::optional<CrossEncoder> teacher;
  if (c.distill.alpha < 1.0) teacher = LoadCross(ws);
  auto result =
      TrainDistilled(teacher ? &*teacher : nullptr, std::move(student), split, c.distill);
  result.student.Save(ws.checkpoints, "distilled");
  WriteKdLog(result.log, ws.out / "kd_log.jsonl");
  const auto& last = result.log.back();
  return {{"epochs", last.epoch}, {"l_total", last.l_total}, {"val_acc", last.val_acc}};
}

Json RunEvaluate(const PipelineConfig& config, const Workspace& ws) {
  const PipelineConfig c = Seeded(config);
  const auto split = LoadSplit(ws);
  const auto model = LoadBi(ws, c.eval.retriever);
  std::optional<CrossEncoder> cross;
  if (c.eval.rerank) cross = LoadCross(ws);
  auto retrieval = RetrieveTest(c, ws, model, split);
  const RetrievalRun& run = retrieval.run;
  const size_t rerank_k = std::min(c.eval.rerank_k, run.depth());
  std::vector<size_t> recall_ks;
  for (size_t k : c.eval.recall_ks) recall_ks.push_back(std::min(k, run.depth()));

  Predictions predictions;
  std::vector<double> rerank_ms;
  if (cross) {
    const auto cache =
        ScoreRun(*cross, run.Truncated(rerank_k), split.test_examples, split.test_kb, &rerank_ms);
    predictions = PredictAtK(cache, rerank_k);
  }
  EvalReport report = BuildReport(run, predictions, recall_ks, rerank_k);
  report.retriever = c.eval.retriever;
  const EvalReport retriever_only = BuildReport(run, {}, recall_ks, 1);
  CheckIdentity(RecallAtK(run, rerank_k), report.overall.normalized, report.overall.unnormalized,
                rerank_k);

  Json metrics = ToJson(report);
  metrics.erase("retrieval_latency");
  metrics.erase("rerank_latency");
  metrics["reranked"] = cross.has_value();
  metrics["retriever_top1"] = retriever_only.overall.unnormalized;
  WriteJson(metrics, ws.out / fmt::format("metrics_{}.json", c.eval.retriever));

  report.retrieval_latency = SummarizeLatency(retrieval.latency_ms);
  if (!rerank_ms.empty()) report.rerank_latency = SummarizeLatency(rerank_ms);
  WriteJson({{"backend", c.eval.use_hnsw ? "hnsw" : "exact"},
             {"retrieval", LatencyJson(report.retrieval_latency)},
             {"rerank", LatencyJson(report.rerank_latency)}},
            ws.out / fmt::format("timing_{}.json", c.eval.retriever));
  spdlog::info("{}: recall@{} {}%, top-1 {}%, reranked@{} unnormalized {}% normalized {}%",
               c.eval.retriever, run.depth(), Percent(RecallAtK(run, run.depth())),
               Percent(retriever_only.overall.unnormalized), rerank_k,
               Percent(report.overall.unnormalized), Percent(report.overall.normalized));
  return metrics;
}

Json RunSweepK(const PipelineConfig& config, const Workspace& ws) {
  const PipelineConfig c = Seeded(config);
  const auto split = LoadSplit(ws);
  const auto model = LoadBi(ws, c.eval.retriever);
  const auto cross = LoadCross(ws);
  const auto retrieval = RetrieveTest(c, ws, model, split);
  std::vector<size_t> ks;
  for (size_t k : c.eval.sweep_ks) ks.push_back(std::min(k, retrieval.run.depth()));
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  const auto cache = ScoreRun(cross, retrieval.run.Truncated(ks.back()), split.test_examples,
                              split.test_kb, nullptr);
  const auto sweep = SweepK(cache, ks);
  double previous = 0.0;
  for (const auto& p : sweep.curve) {
    CheckIdentity(p.recall, p.normalized, p.unnormalized, p.k);
    if (p.recall < previous) Fail(ErrorKind::kInternal, "recall decreased along the sweep");
    previous = p.recall;
  }
  const Json j = ToJson(sweep);
  WriteJson(j, ws.out / fmt::format("sweep_{}.json", c.eval.retriever));
  WriteSweepCsv(sweep, ws.out / fmt::format("sweep_{}.csv", c.eval.retriever));
  spdlog::info("best k {}", sweep.best_k);
  return j;
}

Json RunBenchAnn(const PipelineConfig& config, const Workspace& ws) {
  const PipelineConfig c = Seeded(config);
  Rng rng(c.seed);
  auto random_matrix = [&](size_t rows) {
    EmbeddingMatrix m(rows, c.bench.dim);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<float>(rng.UniformReal(-1.0, 1.0));
    }
    return m;
  };
  EmbeddingMatrix vectors = random_matrix(c.bench.n_vectors);
  const EmbeddingMatrix queries = random_matrix(c.bench.queries);
  std::vector<EntityId> ids(c.bench.n_vectors);
  for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<EntityId>(i);
  auto table = std::make_shared<const EntityEmbeddingTable>(std::move(vectors), ids, 0);
  const auto index = HnswIndex::Build(table, c.hnsw);
  const auto exact = BenchmarkQueries(
      "exact", [&](std::span<const float> q, size_t k) { return ExactSearch(*table, q, k); },
      *table, queries, c.bench.k);
  const auto hnsw = BenchmarkQueries(
      "hnsw", [&](std::span<const float> q, size_t k) { return index.Search(q, k); }, *table,
      queries, c.bench.k);
  const Json j = {{"n_vectors", c.bench.n_vectors},
                  {"dim", c.bench.dim},
                  {"build_seconds", index.build_seconds()},
                  {"exact", BenchJson(exact)},
                  {"hnsw", BenchJson(hnsw)}};
  WriteJson(j, ws.out / "bench_ann.json");
  spdlog::info("exact {:.3f} ms/query, hnsw {:.3f} ms/query, hnsw recall@10 {:.4f}",
               exact.mean_ms, hnsw.mean_ms, hnsw.recall_at_10);
  return j;
}

Json RunBaselineTfidf(const PipelineConfig& config, const Workspace& ws) {
  const auto split = LoadSplit(ws);
  const size_t k = std::min(config.eval.retrieve_k, split.test_kb.size());
  const auto run = TfidfRetrieve(split.test_kb, split.test_examples, k);
  std::vector<size_t> recall_ks;
  for (size_t r : config.eval.recall_ks) recall_ks.push_back(std::min(r, k));
  EvalReport report = BuildReport(run, {}, recall_ks, 1);
  report.retriever = "tfidf";
  Json metrics = ToJson(report);
  metrics.erase("retrieval_latency");
  metrics.erase("rerank_latency");
  WriteJson(metrics, ws.out / "metrics_tfidf.json");
  spdlog::info("tfidf recall@{} {}%", k, Percent(RecallAtK(run, k)));
  return metrics;
}

int ExitCodeFor(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return 2;
    case ErrorKind::kData:
    case ErrorKind::kModel:
    case ErrorKind::kIndex: return 3;
    case ErrorKind::kInternal: return 4;
  }
  return 4;
}

}  // namespace linkstage
