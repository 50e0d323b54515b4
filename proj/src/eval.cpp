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

#include "linkstage/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

#include "linkstage/error.hpp"
#include "linkstage/text.hpp"

namespace linkstage {

size_t RetrievalRun::depth() const {
  if (ranked.empty()) return 0;
  size_t d = ranked[0].size();
  for (const auto& r : ranked) d = std::min(d, r.size());
  return d;
}

void RetrievalRun::Validate() const {
  if (ranked.size() != gold.size() || domain.size() != gold.size()) {
    Fail(ErrorKind::kInternal, "retrieval run fields are misaligned");
  }
  for (const auto& list : ranked) {
    std::unordered_set<EntityId> seen;
    for (EntityId id : list) {
      if (!seen.insert(id).second) Fail(ErrorKind::kInternal, "duplicate id in ranked list");
    }
  }
}

RetrievalRun RetrievalRun::Truncated(size_t k) const {
  RetrievalRun out = *this;
  for (auto& list : out.ranked) {
    if (list.size() > k) list.resize(k);
  }
  return out;
}

RetrievalRun RetrievalRun::Subset(const std::string& name) const {
  RetrievalRun out;
  for (size_t i = 0; i < size(); ++i) {
    if (domain[i] != name) continue;
    out.ranked.push_back(ranked[i]);
    out.gold.push_back(gold[i]);
    out.domain.push_back(domain[i]);
  }
  return out;
}

RetrievalRun MakeRun(std::span<const Mention> mentions, const std::vector<SearchResult>& results) {
  if (mentions.size() != results.size()) {
    Fail(ErrorKind::kInternal, "one search result per mention is required");
  }
  RetrievalRun run;
  for (size_t i = 0; i < mentions.size(); ++i) {
    std::vector<EntityId> ids;
    ids.reserve(results[i].size());
    for (const auto& h : results[i]) ids.push_back(h.id);
    run.ranked.push_back(std::move(ids));
    run.gold.push_back(mentions[i].gold_entity_id);
    run.domain.push_back(mentions[i].domain);
  }
  return run;
}

bool GoldRetrieved(const RetrievalRun& run, size_t i) {
  const auto& list = run.ranked[i];
  return std::find(list.begin(), list.end(), run.gold[i]) != list.end();
}

double RecallAtK(const RetrievalRun& run, size_t k) {
  if (k == 0) Fail(ErrorKind::kConfig, "recall@k needs k >= 1");
  if (run.size() == 0) return 0.0;
  if (k > run.depth()) {
    Fail(ErrorKind::kConfig, "recall@" + std::to_string(k) + " exceeds ranked depth " +
                                 std::to_string(run.depth()));
  }
  size_t hits = 0;
  for (size_t i = 0; i < run.size(); ++i) {
    const auto& list = run.ranked[i];
    if (std::find(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(k), run.gold[i]) !=
        list.begin() + static_cast<std::ptrdiff_t>(k)) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(run.size());
}

namespace {

struct Counts {
  size_t total = 0;
  size_t retrieved = 0;
  size_t correct = 0;  // retrieved and predicted gold
};

Counts Count(const RetrievalRun& run, const Predictions& predictions) {
  if (predictions.size() != run.size()) {
    Fail(ErrorKind::kInternal, "one prediction per mention is required");
  }
  Counts c;
  c.total = run.size();
  for (size_t i = 0; i < run.size(); ++i) {
    if (!GoldRetrieved(run, i)) continue;
    ++c.retrieved;
    if (predictions[i] && *predictions[i] == run.gold[i]) ++c.correct;
  }
  return c;
}

Predictions FirstEntries(const RetrievalRun& run) {
  Predictions p(run.size());
  for (size_t i = 0; i < run.size(); ++i) {
    if (!run.ranked[i].empty()) p[i] = run.ranked[i][0];
  }
  return p;
}

}  // namespace

double UnnormalizedAccuracy(const RetrievalRun& run, const Predictions& predictions) {
  const Counts c = Count(run, predictions);
  if (c.total == 0) return 0.0;
  return static_cast<double>(c.correct) / static_cast<double>(c.total);
}

double NormalizedAccuracy(const RetrievalRun& run, const Predictions& predictions) {
  const Counts c = Count(run, predictions);
  if (c.retrieved == 0) {
    Fail(ErrorKind::kData, "normalized accuracy is undefined: no gold was retrieved");
  }
  return static_cast<double>(c.correct) / static_cast<double>(c.retrieved);
}

double MacroAverage(std::span<const double> values) {
  if (values.empty()) Fail(ErrorKind::kData, "macro average of no domains");
  return std::accumulate(values.begin(), values.end(), 0.0) /
         static_cast<double>(values.size());
}

Predictions PredictAtK(const RerankCache& cache, size_t k) {
  Predictions out(cache.run.size());
  for (size_t i = 0; i < cache.run.size(); ++i) {
    const auto& list = cache.run.ranked[i];
    const auto& scores = cache.scores[i];
    const size_t n = std::min({k, list.size(), scores.size()});
    if (n == 0) continue;
    size_t best = 0;
    for (size_t j = 1; j < n; ++j) {
      if (scores[j] > scores[best]) best = j;
    }
    out[i] = list[best];
  }
  return out;
}

SweepResult SweepK(const RerankCache& cache, std::vector<size_t> ks) {
  if (ks.empty()) Fail(ErrorKind::kConfig, "sweep needs at least one k");
  if (cache.scores.size() != cache.run.size()) {
    Fail(ErrorKind::kInternal, "rerank cache is misaligned");
  }
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  SweepResult result;
  double best = -1.0;
  for (size_t k : ks) {
    const RetrievalRun cut = cache.run.Truncated(k);
    const Predictions preds = PredictAtK(cache, k);
    SweepPoint p;
    p.k = k;
    p.recall = RecallAtK(cache.run, k);
    const Counts c = Count(cut, preds);
    p.unnormalized = c.total == 0 ? 0.0 : static_cast<double>(c.correct) / static_cast<double>(c.total);
    p.normalized =
        c.retrieved == 0 ? 0.0 : static_cast<double>(c.correct) / static_cast<double>(c.retrieved);
    if (p.unnormalized > best) {
      best = p.unnormalized;
      result.best_k = k;
    }
    result.curve.push_back(p);
  }
  return result;
}

RetrievalRun TfidfRetrieve(const KnowledgeBase& kb, std::span<const Mention> mentions,
                           size_t k) {
  if (k == 0) Fail(ErrorKind::kConfig, "tf-idf retrieval needs k >= 1");
  // Term ids over the entity collection; mention-only terms carry no weight.
  std::unordered_map<std::string, uint32_t> term_ids;
  using Sparse = std::vector<std::pair<uint32_t, double>>;
  auto term_counts = [&](const std::string& text, bool add) {
    std::unordered_map<uint32_t, double> counts;
    for (const auto& tok : Tokenize(text)) {
      auto it = term_ids.find(tok);
      if (it == term_ids.end()) {
        if (!add) continue;
        it = term_ids.emplace(tok, static_cast<uint32_t>(term_ids.size())).first;
      }
      counts[it->second] += 1.0;
    }
    return counts;
  };
  std::vector<std::unordered_map<uint32_t, double>> docs;
  docs.reserve(kb.size());
  for (const auto& e : kb.entities()) docs.push_back(term_counts(e.title + " " + e.description, true));
  std::vector<double> df(term_ids.size(), 0.0);
  for (const auto& d : docs) {
    for (const auto& [t, c] : d) df[t] += 1.0;
  }
  const double n = static_cast<double>(kb.size());
  std::vector<double> idf(df.size());
  for (size_t t = 0; t < df.size(); ++t) idf[t] = std::log((1.0 + n) / (1.0 + df[t])) + 1.0;
  auto weigh = [&](const std::unordered_map<uint32_t, double>& counts) {
    Sparse v;
    double norm = 0.0;
    for (const auto& [t, c] : counts) {
      const double w = (1.0 + std::log(c)) * idf[t];
      v.emplace_back(t, w);
      norm += w * w;
    }
    norm = std::sqrt(norm);
    if (norm > 0) {
      for (auto& [t, w] : v) w /= norm;
    }
    return v;
  };
  // Inverted index: term -> (entity position, weight).
  std::vector<std::vector<std::pair<uint32_t, double>>> postings(term_ids.size());
  for (size_t e = 0; e < docs.size(); ++e) {
    for (const auto& [t, w] : weigh(docs[e])) postings[t].emplace_back(static_cast<uint32_t>(e), w);
  }

  RetrievalRun run;
  const size_t depth = std::min(k, kb.size());
  std::vector<double> score(kb.size());
  std::vector<uint32_t> order(kb.size());
  for (const auto& m : mentions) {
    std::fill(score.begin(), score.end(), 0.0);
    const auto q = weigh(term_counts(m.context_left + " " + m.surface + " " + m.context_right, false));
    for (const auto& [t, w] : q) {
      for (const auto& [e, we] : postings[t]) score[e] += w * we;
    }
    std::iota(order.begin(), order.end(), 0u);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(depth), order.end(),
                      [&](uint32_t a, uint32_t b) {
                        if (score[a] != score[b]) return score[a] > score[b];
                        return kb[a].id < kb[b].id;
                      });
    std::vector<EntityId> ids;
    for (size_t j = 0; j < depth; ++j) ids.push_back(kb[order[j]].id);
    run.ranked.push_back(std::move(ids));
    run.gold.push_back(m.gold_entity_id);
    run.domain.push_back(m.domain);
  }
  return run;
}

LatencyStats SummarizeLatency(std::vector<double> ms) {
  LatencyStats s;
  if (ms.empty()) return s;
  std::sort(ms.begin(), ms.end());
  s.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  const size_t mid = ms.size() / 2;
  s.median_ms = ms.size() % 2 == 1 ? ms[mid] : 0.5 * (ms[mid - 1] + ms[mid]);
  const size_t p99 = static_cast<size_t>(std::ceil(0.99 * static_cast<double>(ms.size()))) - 1;
  s.p99_ms = ms[std::min(p99, ms.size() - 1)];
  return s;
}

namespace {

// Accuracy counts only golds inside the first `rerank_k` candidates.
DomainMetrics Metrics(const RetrievalRun& run, const Predictions& predictions,
                      const std::vector<size_t>& recall_ks, size_t rerank_k) {
  DomainMetrics m;
  m.mentions = run.size();
  for (size_t k : recall_ks) {
    if (k <= run.depth()) m.recall[k] = RecallAtK(run, k);
  }
  const Counts c = Count(run.Truncated(std::min(rerank_k, run.depth())), predictions);
  m.unnormalized = c.total == 0 ? 0.0 : static_cast<double>(c.correct) / static_cast<double>(c.total);
  m.normalized =
      c.retrieved == 0 ? 0.0 : static_cast<double>(c.correct) / static_cast<double>(c.retrieved);
  return m;
}

}  // namespace

EvalReport BuildReport(const RetrievalRun& run, const Predictions& predictions,
                       const std::vector<size_t>& recall_ks, size_t rerank_k) {
  run.Validate();
  if (rerank_k == 0) Fail(ErrorKind::kConfig, "rerank_k must be >= 1");
  const Predictions preds = predictions.empty() ? FirstEntries(run) : predictions;
  EvalReport report;
  report.rerank_k = rerank_k;
  report.overall = Metrics(run, preds, recall_ks, rerank_k);
  std::vector<std::string> domains = run.domain;
  std::sort(domains.begin(), domains.end());
  domains.erase(std::unique(domains.begin(), domains.end()), domains.end());
  for (const auto& d : domains) {
    RetrievalRun sub;
    Predictions sub_preds;
    for (size_t i = 0; i < run.size(); ++i) {
      if (run.domain[i] != d) continue;
      sub.ranked.push_back(run.ranked[i]);
      sub.gold.push_back(run.gold[i]);
      sub.domain.push_back(d);
      sub_preds.push_back(preds[i]);
    }
    report.per_domain[d] = Metrics(sub, sub_preds, recall_ks, rerank_k);
  }
  if (!domains.empty()) {
    report.macro.mentions = run.size();
    std::vector<double> u, nrm;
    for (const auto& [d, m] : report.per_domain) {
      u.push_back(m.unnormalized);
      nrm.push_back(m.normalized);
    }
    report.macro.unnormalized = MacroAverage(u);
    report.macro.normalized = MacroAverage(nrm);
    for (const auto& [k, _] : report.overall.recall) {
      std::vector<double> r;
      for (const auto& [d, m] : report.per_domain) {
        if (m.recall.count(k)) r.push_back(m.recall.at(k));
      }
      if (!r.empty()) report.macro.recall[k] = MacroAverage(r);
    }
  }
  return report;
}

nlohmann::json ToJson(const DomainMetrics& m) {
  nlohmann::json recall = nlohmann::json::object();
  for (const auto& [k, v] : m.recall) recall[std::to_string(k)] = v;
  return {{"mentions", m.mentions},
          {"recall", recall},
          {"normalized_accuracy", m.normalized},
          {"unnormalized_accuracy", m.unnormalized}};
}

namespace {

nlohmann::json ToJson(const LatencyStats& s) {
  return {{"mean_ms", s.mean_ms}, {"median_ms", s.median_ms}, {"p99_ms", s.p99_ms}};
}

}  // namespace

nlohmann::json ToJson(const EvalReport& report) {
  nlohmann::json domains = nlohmann::json::object();
  for (const auto& [d, m] : report.per_domain) domains[d] = ToJson(m);
  return {{"retriever", report.retriever},
          {"rerank_k", report.rerank_k},
          {"overall", ToJson(report.overall)},
          {"per_domain", domains},
          {"macro", ToJson(report.macro)},
          {"retrieval_latency", ToJson(report.retrieval_latency)},
          {"rerank_latency", ToJson(report.rerank_latency)}};
}

nlohmann::json ToJson(const SweepResult& sweep) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : sweep.curve) {
    curve.push_back({{"k", p.k},
                     {"recall", p.recall},
                     {"norm_acc", p.normalized},
                     {"unnorm_acc", p.unnormalized}});
  }
  return {{"curve", curve}, {"best_k", sweep.best_k}};
}

void WriteSweepCsv(const SweepResult& sweep, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) Fail(ErrorKind::kConfig, "cannot write " + path.string());
  out << "k,recall,norm_acc,unnorm_acc\n";
  for (const auto& p : sweep.curve) {
    out << fmt::format("{},{:.6f},{:.6f},{:.6f}\n", p.k, p.recall, p.normalized, p.unnormalized);
  }
}

std::string Percent(double fraction) { return fmt::format("{:.2f}", 100.0 * fraction); }

}  // namespace linkstage
