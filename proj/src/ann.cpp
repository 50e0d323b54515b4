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

#include "linkstage/ann.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <queue>
#include <unordered_set>

#include "linkstage/binary_io.hpp"
#include "linkstage/error.hpp"
#include "linkstage/random.hpp"

namespace linkstage {

float InnerProduct(std::span<const float> a, std::span<const float> b) {
  using Vec = Eigen::Map<const Eigen::VectorXf>;
  return Vec(a.data(), static_cast<Eigen::Index>(a.size()))
      .dot(Vec(b.data(), static_cast<Eigen::Index>(b.size())));
}

SearchResult ExactSearch(const EntityEmbeddingTable& table,
                         std::span<const float> query, size_t k) {
  if (table.empty()) Fail(ErrorKind::kIndex, "exact search on an empty table");
  if (k == 0) Fail(ErrorKind::kConfig, "k must be >= 1");
  if (query.size() != table.dim()) {
    Fail(ErrorKind::kIndex, "query dimension " + std::to_string(query.size()) +
                                " does not match table dimension " +
                                std::to_string(table.dim()));
  }
  k = std::min(k, table.size());
  // Bounded heap whose top is the worst retained hit.
  std::vector<SearchHit> heap;
  heap.reserve(k + 1);
  for (size_t r = 0; r < table.size(); ++r) {
    // Same scoring function as the HNSW graph, so both agree bitwise.
    SearchHit hit{table.IdOf(r), InnerProduct(query, table.Row(r))};
    if (heap.size() < k) {
      heap.push_back(hit);
      std::push_heap(heap.begin(), heap.end(), RanksBefore);
    } else if (RanksBefore(hit, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), RanksBefore);
      heap.back() = hit;
      std::push_heap(heap.begin(), heap.end(), RanksBefore);
    }
  }
  std::sort(heap.begin(), heap.end(), RanksBefore);
  return heap;
}

void HnswParams::Validate() const {
  if (m_neighbors < 2) Fail(ErrorKind::kConfig, "HNSW m_neighbors must be >= 2");
  if (ef_construction < 1 || ef_search < 1) {
    Fail(ErrorKind::kConfig, "HNSW ef parameters must be >= 1");
  }
}

namespace {

// Per-thread visited marks, reset in O(1) by bumping an epoch.
class VisitedSet {
 public:
  void Reset(size_t n) {
    if (marks_.size() < n) marks_.assign(n, 0);
    if (++epoch_ == 0) {
      std::fill(marks_.begin(), marks_.end(), 0);
      epoch_ = 1;
    }
  }
  // Returns true the first time a node is seen since Reset.
  bool Insert(uint32_t node) {
    if (marks_[node] == epoch_) return false;
    marks_[node] = epoch_;
    return true;
  }

 private:
  std::vector<uint32_t> marks_;
  uint32_t epoch_ = 0;
};

VisitedSet& ThreadVisited() {
  thread_local VisitedSet visited;
  return visited;
}

}  // namespace

float HnswIndex::Sim(std::span<const float> query, uint32_t node) const {
  return InnerProduct(query, table_->Row(node));
}

bool HnswIndex::Better(const Candidate& a, const Candidate& b) const {
  if (a.sim != b.sim) return a.sim > b.sim;
  return table_->IdOf(a.node) < table_->IdOf(b.node);
}

uint32_t HnswIndex::GreedyClosest(std::span<const float> query, uint32_t start,
                                  int layer) const {
  Candidate best{Sim(query, start), start};
  for (bool improved = true; improved;) {
    improved = false;
    for (uint32_t nb : links_[best.node][static_cast<size_t>(layer)]) {
      Candidate c{Sim(query, nb), nb};
      if (Better(c, best)) {
        best = c;
        improved = true;
      }
    }
  }
  return best.node;
}

std::vector<HnswIndex::Candidate> HnswIndex::SearchLayer(
    std::span<const float> query, const std::vector<Candidate>& entries,
    size_t ef, int layer) const {
  auto better = [this](const Candidate& a, const Candidate& b) { return Better(a, b); };
  auto worse = [this](const Candidate& a, const Candidate& b) { return Better(b, a); };
  // Frontier pops the best candidate first; results keep the worst on top.
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> frontier(worse);
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(better)> results(better);
  VisitedSet& visited = ThreadVisited();
  visited.Reset(levels_.size());
  for (const Candidate& e : entries) {
    if (!visited.Insert(e.node)) continue;
    frontier.push(e);
    results.push(e);
    if (results.size() > ef) results.pop();
  }
  while (!frontier.empty()) {
    const Candidate current = frontier.top();
    if (results.size() >= ef && Better(results.top(), current)) break;
    frontier.pop();
    for (uint32_t nb : links_[current.node][static_cast<size_t>(layer)]) {
      if (!visited.Insert(nb)) continue;
      const Candidate c{Sim(query, nb), nb};
      if (results.size() < ef || Better(c, results.top())) {
        frontier.push(c);
        results.push(c);
        if (results.size() > ef) results.pop();
      }
    }
  }
  std::vector<Candidate> out;
  out.reserve(results.size());
  while (!results.empty()) {
    out.push_back(results.top());
    results.pop();
  }
  std::reverse(out.begin(), out.end());  // best first
  return out;
}

// Standard HNSW neighbor-selection heuristic: walk candidates best-first and
// keep one only if it is more similar to the base point than to every
// neighbor kept so far.
std::vector<uint32_t> HnswIndex::SelectNeighbors(std::vector<Candidate> candidates,
                                                 size_t max_count) const {
  std::sort(candidates.begin(), candidates.end(),
            [this](const Candidate& a, const Candidate& b) { return Better(a, b); });
  std::vector<uint32_t> kept;
  kept.reserve(max_count);
  for (const Candidate& c : candidates) {
    if (kept.size() >= max_count) break;
    bool diverse = true;
    for (uint32_t r : kept) {
      if (InnerProduct(table_->Row(c.node), table_->Row(r)) > c.sim) {
        diverse = false;
        break;
      }
    }
    if (diverse) kept.push_back(c.node);
  }
  return kept;
}

void HnswIndex::ShrinkLinks(uint32_t node, int layer) {
  auto& links = links_[node][static_cast<size_t>(layer)];
  if (links.size() <= MaxLinks(layer)) return;
  std::vector<Candidate> candidates;
  candidates.reserve(links.size());
  const auto base = table_->Row(node);
  for (uint32_t nb : links) candidates.push_back({InnerProduct(base, table_->Row(nb)), nb});
  links = SelectNeighbors(std::move(candidates), MaxLinks(layer));
}

void HnswIndex::Insert(uint32_t node) {
  const int level = levels_[node];
  links_[node].resize(static_cast<size_t>(level) + 1);
  if (max_level_ < 0) {
    entry_point_ = node;
    max_level_ = level;
    return;
  }
  const auto query = table_->Row(node);
  uint32_t ep = entry_point_;
  for (int layer = max_level_; layer > level; --layer) {
    ep = GreedyClosest(query, ep, layer);
  }
  std::vector<Candidate> entries{{Sim(query, ep), ep}};
  for (int layer = std::min(level, max_level_); layer >= 0; --layer) {
    std::vector<Candidate> found =
        SearchLayer(query, entries, params_.ef_construction, layer);
    std::vector<uint32_t> chosen = SelectNeighbors(found, params_.m_neighbors);
    links_[node][static_cast<size_t>(layer)] = chosen;
    for (uint32_t nb : chosen) {
      links_[nb][static_cast<size_t>(layer)].push_back(node);
      ShrinkLinks(nb, layer);
    }
    entries = std::move(found);
  }
  if (level > max_level_) {
    max_level_ = level;
    entry_point_ = node;
  }
}

size_t HnswIndex::ReachableAtLayer0() const {
  if (levels_.empty()) return 0;
  std::vector<char> seen(levels_.size(), 0);
  std::deque<uint32_t> queue{entry_point_};
  seen[entry_point_] = 1;
  size_t count = 1;
  while (!queue.empty()) {
    const uint32_t u = queue.front();
    queue.pop_front();
    for (uint32_t v : links_[u][0]) {
      if (!seen[v]) {
        seen[v] = 1;
        ++count;
        queue.push_back(v);
      }
    }
  }
  return count;
}

// Links every layer-0 node that the entry point cannot reach from its most
// similar reachable node that still has a free slot.
void HnswIndex::RepairReachability() {
  const size_t n = levels_.size();
  std::vector<char> seen(n, 0);
  auto flood = [&](uint32_t start) {
    std::deque<uint32_t> queue{start};
    seen[start] = 1;
    while (!queue.empty()) {
      const uint32_t u = queue.front();
      queue.pop_front();
      for (uint32_t v : links_[u][0]) {
        if (!seen[v]) {
          seen[v] = 1;
          queue.push_back(v);
        }
      }
    }
  };
  flood(entry_point_);
  for (uint32_t u = 0; u < n; ++u) {
    if (seen[u]) continue;
    const auto query = table_->Row(u);
    std::optional<Candidate> best;
    for (uint32_t v = 0; v < n; ++v) {
      if (!seen[v] || links_[v][0].size() >= MaxLinks(0)) continue;
      const Candidate c{Sim(query, v), v};
      if (!best || Better(c, *best)) best = c;
    }
    if (!best) Fail(ErrorKind::kInternal, "HNSW repair found no node with a free link slot");
    links_[best->node][0].push_back(u);
    ++repaired_links_;
    flood(u);
  }
}

HnswIndex HnswIndex::Build(std::shared_ptr<const EntityEmbeddingTable> table,
                           const HnswParams& params) {
  params.Validate();
  if (!table || table->empty()) Fail(ErrorKind::kIndex, "cannot build HNSW over an empty table");
  const auto start = std::chrono::steady_clock::now();
  HnswIndex index;
  index.table_ = std::move(table);
  index.params_ = params;
  const size_t n = index.table_->size();
  index.levels_.resize(n);
  index.links_.resize(n);
  Rng rng(params.seed);
  const double level_mult = 1.0 / std::log(static_cast<double>(params.m_neighbors));
  for (auto& level : index.levels_) {
    const double u = 1.0 - rng.UniformReal();  // (0, 1]
    level = static_cast<int>(std::floor(-std::log(u) * level_mult));
  }
  for (uint32_t node = 0; node < n; ++node) index.Insert(node);
  index.RepairReachability();
  index.build_seconds_ =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return index;
}

SearchResult HnswIndex::Search(std::span<const float> query, size_t k) const {
  return Search(query, k, std::max<size_t>(params_.ef_search, k));
}

SearchResult HnswIndex::Search(std::span<const float> query, size_t k,
                               size_t ef_search) const {
  if (k == 0) Fail(ErrorKind::kConfig, "k must be >= 1");
  if (ef_search < k) Fail(ErrorKind::kConfig, "ef_search must be >= k");
  if (query.size() != table_->dim()) Fail(ErrorKind::kIndex, "query dimension mismatch");
  uint32_t ep = entry_point_;
  for (int layer = max_level_; layer > 0; --layer) ep = GreedyClosest(query, ep, layer);
  const auto found = SearchLayer(query, {{Sim(query, ep), ep}}, ef_search, 0);
  SearchResult out;
  out.reserve(std::min(k, found.size()));
  for (size_t i = 0; i < found.size() && i < k; ++i) {
    out.push_back({table_->IdOf(found[i].node), found[i].sim});
  }
  return out;
}

namespace {
constexpr uint32_t kIndexVersion = 1;
}

void HnswIndex::Save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIndex, "cannot write " + path.string());
  io::WriteMagic(out, "BLNK-HNSW");
  io::WritePod(out, kIndexVersion);
  io::WritePod(out, params_.m_neighbors);
  io::WritePod(out, params_.ef_construction);
  io::WritePod(out, params_.ef_search);
  io::WritePod(out, params_.seed);
  io::WritePod<uint64_t>(out, table_->ContentFingerprint());
  io::WritePod<uint64_t>(out, levels_.size());
  io::WritePod<uint32_t>(out, entry_point_);
  io::WritePod<int32_t>(out, max_level_);
  for (int level : levels_) io::WriteVarint(out, static_cast<uint64_t>(level));
  for (const auto& layers : links_) {
    for (const auto& nbs : layers) {
      io::WriteVarint(out, nbs.size());
      for (uint32_t nb : nbs) io::WriteVarint(out, nb);
    }
  }
  if (!out) Fail(ErrorKind::kIndex, "failed writing " + path.string());
}

HnswIndex HnswIndex::Load(const std::filesystem::path& path,
                          std::shared_ptr<const EntityEmbeddingTable> table) {
  constexpr auto k = ErrorKind::kIndex;
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(k, "index not found: " + path.string());
  io::ExpectMagic(in, "BLNK-HNSW", k);
  if (io::ReadPod<uint32_t>(in, k) != kIndexVersion) Fail(k, "unsupported index version");
  HnswIndex index;
  index.params_.m_neighbors = io::ReadPod<uint32_t>(in, k);
  index.params_.ef_construction = io::ReadPod<uint32_t>(in, k);
  index.params_.ef_search = io::ReadPod<uint32_t>(in, k);
  index.params_.seed = io::ReadPod<uint64_t>(in, k);
  index.params_.Validate();
  const auto fingerprint = io::ReadPod<uint64_t>(in, k);
  if (!table || table->ContentFingerprint() != fingerprint) {
    Fail(k, "index was built from a different embedding table");
  }
  const auto n = io::ReadPod<uint64_t>(in, k);
  if (n != table->size()) Fail(k, "index size does not match table");
  index.table_ = std::move(table);
  index.entry_point_ = io::ReadPod<uint32_t>(in, k);
  index.max_level_ = io::ReadPod<int32_t>(in, k);
  index.levels_.resize(n);
  for (auto& level : index.levels_) {
    level = static_cast<int>(io::ReadVarint(in, k));
    if (level > index.max_level_) Fail(k, "node level exceeds max level");
  }
  index.links_.resize(n);
  for (size_t node = 0; node < n; ++node) {
    index.links_[node].resize(static_cast<size_t>(index.levels_[node]) + 1);
    for (auto& nbs : index.links_[node]) {
      const uint64_t degree = io::ReadVarint(in, k);
      if (degree > n) Fail(k, "corrupt adjacency list");
      nbs.resize(degree);
      for (auto& nb : nbs) {
        const uint64_t v = io::ReadVarint(in, k);
        if (v >= n) Fail(k, "neighbor id out of range");
        nb = static_cast<uint32_t>(v);
      }
    }
  }
  if (n > 0 && index.entry_point_ >= n) Fail(k, "entry point out of range");
  return index;
}

BenchmarkReport BenchmarkQueries(const std::string& backend, const Searcher& search,
                                 const EntityEmbeddingTable& table,
                                 const EmbeddingMatrix& queries, size_t k) {
  if (queries.rows() < 1) Fail(ErrorKind::kConfig, "benchmark needs at least one query");
  const size_t n_queries = static_cast<size_t>(queries.rows());
  const size_t depth = std::min(std::max<size_t>(k, 100), table.size());
  std::vector<double> latencies(n_queries);
  std::vector<SearchResult> results(n_queries);
  for (size_t i = 0; i < n_queries; ++i) {
    std::span<const float> q(queries.data() + i * queries.cols(),
                             static_cast<size_t>(queries.cols()));
    const auto t0 = std::chrono::steady_clock::now();
    results[i] = search(q, depth);
    const auto t1 = std::chrono::steady_clock::now();
    latencies[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  BenchmarkReport report;
  report.backend = backend;
  report.queries = n_queries;
  double total = 0.0;
  for (double l : latencies) total += l;
  report.mean_ms = total / static_cast<double>(n_queries);
  std::vector<double> sorted = latencies;
  std::sort(sorted.begin(), sorted.end());
  report.median_ms = n_queries % 2 == 1
                         ? sorted[n_queries / 2]
                         : 0.5 * (sorted[n_queries / 2 - 1] + sorted[n_queries / 2]);
  const size_t p99_rank = static_cast<size_t>(
      std::ceil(0.99 * static_cast<double>(n_queries)));
  report.p99_ms = sorted[std::max<size_t>(p99_rank, 1) - 1];

  double* columns[4] = {&report.recall_at_1, &report.recall_at_10,
                        &report.recall_at_30, &report.recall_at_100};
  const size_t depths[4] = {1, 10, 30, 100};
  for (size_t i = 0; i < n_queries; ++i) {
    std::span<const float> q(queries.data() + i * queries.cols(),
                             static_cast<size_t>(queries.cols()));
    const SearchResult exact = ExactSearch(table, q, depth);
    for (int c = 0; c < 4; ++c) {
      const size_t r = std::min(depths[c], table.size());
      std::unordered_set<EntityId> truth;
      for (size_t j = 0; j < r && j < exact.size(); ++j) truth.insert(exact[j].id);
      size_t hits = 0;
      for (size_t j = 0; j < r && j < results[i].size(); ++j) {
        hits += truth.count(results[i][j].id);
      }
      *columns[c] += static_cast<double>(hits) / static_cast<double>(r);
    }
  }
  for (double* c : columns) *c /= static_cast<double>(n_queries);
  return report;
}

}  // namespace linkstage
