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

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "linkstage/corpus.hpp"

namespace linkstage {

using EmbeddingMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Cached entity vectors, one row per entity, plus the fingerprint of the
// model that produced them.
class EntityEmbeddingTable {
 public:
  EntityEmbeddingTable() = default;
  EntityEmbeddingTable(EmbeddingMatrix vectors, std::vector<EntityId> row_ids,
                       uint64_t model_fingerprint);

  size_t size() const { return row_ids_.size(); }
  bool empty() const { return row_ids_.empty(); }
  size_t dim() const { return static_cast<size_t>(vectors_.cols()); }

  const EmbeddingMatrix& vectors() const { return vectors_; }
  std::span<const float> Row(size_t row) const {
    return {vectors_.data() + row * dim(), dim()};
  }
  EntityId IdOf(size_t row) const { return row_ids_[row]; }
  const std::vector<EntityId>& row_ids() const { return row_ids_; }
  std::optional<size_t> RowOf(EntityId id) const;

  uint64_t model_fingerprint() const { return model_fingerprint_; }
  // Hash of dims, vectors and ids; index files record it.
  uint64_t ContentFingerprint() const;

  // "BLNK-EMB", u32 d, u64 n, n*d float32, n int64 ids, u64 model fingerprint.
  void Save(const std::filesystem::path& path) const;
  static EntityEmbeddingTable Load(const std::filesystem::path& path);

  bool operator==(const EntityEmbeddingTable& other) const {
    return row_ids_ == other.row_ids_ && vectors_ == other.vectors_ &&
           model_fingerprint_ == other.model_fingerprint_;
  }

 private:
  EmbeddingMatrix vectors_;
  std::vector<EntityId> row_ids_;
  std::unordered_map<EntityId, size_t> rows_;
  uint64_t model_fingerprint_ = 0;
};

}  // namespace linkstage
