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

// Maximum-inner-product search over an EntityEmbeddingTable: a brute-force
// exact scan and a hierarchical navigable small-world (HNSW) graph.
//
// HNSW ranks neighbors by raw inner product. Inner product is not a metric
// (no triangle inequality), so recall is an empirical property of the data;
// layer-0 reachability is enforced explicitly after construction.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "linkstage/embedding_table.hpp"

namespace linkstage {

struct SearchHit {
  EntityId id = 0;
  float score = 0.0f;

  bool operator==(const SearchHit&) const = default;
};

// Descending score, ties by ascending entity id; at most k entries.
using SearchResult = std::vector<SearchHit>;

// True when `a` ranks before `b`.
inline bool RanksBefore(const SearchHit& a, const SearchHit& b) {
  return a.score > b.score || (a.score == b.score && a.id < b.id);
}

float InnerProduct(std::span<const float> a, std::span<const float> b);

// Exact top-k by inner product. Throws on an empty table, k == 0, or a
// dimension mismatch.
SearchResult ExactSearch(const EntityEmbeddingTable& table,
                         std::span<const float> query, size_t k);

struct HnswParams {
  uint32_t m_neighbors = 16;        // links per node above layer 0 (2x at 0)
  uint32_t ef_construction = 200;
  uint32_t ef_search = 256;
  uint64_t seed = 1;

  void Validate() const;
  bool operator==(const HnswParams&) const = default;
};

class HnswIndex {
 public:
  // Deterministic for a fixed table and seed.
  static HnswIndex Build(std::shared_ptr<const EntityEmbeddingTable> table,
                         const HnswParams& params);

  // Uses params().ef_search.
  SearchResult Search(std::span<const float> query, size_t k) const;
  // Throws when ef_search < k.
  SearchResult Search(std::span<const float> query, size_t k,
                      size_t ef_search) const;

  const HnswParams& params() const { return params_; }
  const EntityEmbeddingTable& table() const { return *table_; }
  size_t size() const { return levels_.size(); }
  uint32_t entry_point() const { return entry_point_; }
  int max_level() const { return max_level_; }
  int level(uint32_t node) const { return levels_[node]; }
  const std::vector<uint32_t>& Neighbors(uint32_t node, int layer) const {
    return links_[node][static_cast<size_t>(layer)];
  }
  double build_seconds() const { return build_seconds_; }
  // Edges added after construction to restore layer-0 reachability.
  size_t repaired_links() const { return repaired_links_; }

  // Number of nodes reachable from the entry point on layer 0.
  size_t ReachableAtLayer0() const;

  // "BLNK-HNSW", version, params, table fingerprint, entry point, varint
  // level table and varint adjacency lists.
  void Save(const std::filesystem::path& path) const;
  // Fails unless `table` has the fingerprint recorded at build time.
  static HnswIndex Load(const std::filesystem::path& path,
                        std::shared_ptr<const EntityEmbeddingTable> table);

  bool SameGraph(const HnswIndex& other) const {
    return levels_ == other.levels_ && links_ == other.links_ &&
           entry_point_ == other.entry_point_;
  }

 private:
  struct Candidate {
    float sim;
    uint32_t node;
  };

  HnswIndex() = default;

  float Sim(std::span<const float> query, uint32_t node) const;
  bool Better(const Candidate& a, const Candidate& b) const;
  uint32_t GreedyClosest(std::span<const float> query, uint32_t start,
                         int layer) const;
  std::vector<Candidate> SearchLayer(std::span<const float> query,
                                     const std::vector<Candidate>& entries,
                                     size_t ef, int layer) const;
  std::vector<uint32_t> SelectNeighbors(std::vector<Candidate> candidates,
                                        size_t max_count) const;
  void Insert(uint32_t node);
  void ShrinkLinks(uint32_t node, int layer);
  void RepairReachability();
  size_t MaxLinks(int layer) const {
    return layer == 0 ? 2 * params_.m_neighbors : params_.m_neighbors;
  }

  std::shared_ptr<const EntityEmbeddingTable> table_;
  HnswParams params_;
  std::vector<int> levels_;
  // links_[node][layer] -> neighbor rows
  std::vector<std::vector<std::vector<uint32_t>>> links_;
  uint32_t entry_point_ = 0;
  int max_level_ = -1;
  double build_seconds_ = 0.0;
  size_t repaired_links_ = 0;
};

// Latency and quality of a search backend against the exact oracle.
struct BenchmarkReport {
  std::string backend;
  size_t queries = 0;
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p99_ms = 0.0;
  // Overlap of the backend's top-r with the exact top-r, for r in
  // {1, 10, 30, 100}; r is clipped to the table size.
  double recall_at_1 = 0.0;
  double recall_at_10 = 0.0;
  double recall_at_30 = 0.0;
  double recall_at_100 = 0.0;
};

using Searcher = std::function<SearchResult(std::span<const float>, size_t)>;

// Times `search` per query (k is raised to 100 so every recall column is
// defined) and scores it against ExactSearch. Requires >= 1 query.
BenchmarkReport BenchmarkQueries(const std::string& backend,
                                 const Searcher& search,
                                 const EntityEmbeddingTable& table,
                                 const EmbeddingMatrix& queries, size_t k);

}  // namespace linkstage
