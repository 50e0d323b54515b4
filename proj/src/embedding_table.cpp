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

#include "linkstage/embedding_table.hpp"

#include <fstream>

#include "linkstage/binary_io.hpp"
#include "linkstage/error.hpp"

namespace linkstage {

EntityEmbeddingTable::EntityEmbeddingTable(EmbeddingMatrix vectors,
                                           std::vector<EntityId> row_ids,
                                           uint64_t model_fingerprint)
    : vectors_(std::move(vectors)),
      row_ids_(std::move(row_ids)),
      model_fingerprint_(model_fingerprint) {
  if (static_cast<size_t>(vectors_.rows()) != row_ids_.size()) {
    Fail(ErrorKind::kInternal, "embedding table rows and ids differ in count");
  }
  if (!vectors_.allFinite()) Fail(ErrorKind::kModel, "embedding table has non-finite rows");
  rows_.reserve(row_ids_.size());
  for (size_t r = 0; r < row_ids_.size(); ++r) {
    if (!rows_.emplace(row_ids_[r], r).second) {
      Fail(ErrorKind::kInternal, "duplicate entity id in embedding table");
    }
  }
}

std::optional<size_t> EntityEmbeddingTable::RowOf(EntityId id) const {
  auto it = rows_.find(id);
  if (it == rows_.end()) return std::nullopt;
  return it->second;
}

uint64_t EntityEmbeddingTable::ContentFingerprint() const {
  io::Fingerprint fp;
  fp.UpdatePod<uint64_t>(dim());
  fp.UpdatePod<uint64_t>(size());
  fp.Update(vectors_.data(), static_cast<size_t>(vectors_.size()) * sizeof(float));
  fp.Update(row_ids_.data(), row_ids_.size() * sizeof(EntityId));
  return fp.value();
}

void EntityEmbeddingTable::Save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIndex, "cannot write " + path.string());
  io::WriteMagic(out, "BLNK-EMB");
  io::WritePod<uint32_t>(out, static_cast<uint32_t>(dim()));
  io::WritePod<uint64_t>(out, size());
  io::WriteFloats(out, {vectors_.data(), static_cast<size_t>(vectors_.size())});
  for (EntityId id : row_ids_) io::WritePod<int64_t>(out, id);
  io::WritePod<uint64_t>(out, model_fingerprint_);
}

EntityEmbeddingTable EntityEmbeddingTable::Load(const std::filesystem::path& path) {
  constexpr auto k = ErrorKind::kIndex;
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(k, "embedding table not found: " + path.string());
  io::ExpectMagic(in, "BLNK-EMB", k);
  const auto d = io::ReadPod<uint32_t>(in, k);
  const auto n = io::ReadPod<uint64_t>(in, k);
  if (n > (1ULL << 32) || static_cast<uint64_t>(d) * n > (1ULL << 34)) {
    Fail(k, "embedding table header out of range");
  }
  EmbeddingMatrix vectors(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  io::ReadFloats(in, {vectors.data(), static_cast<size_t>(vectors.size())}, k);
  std::vector<EntityId> ids(n);
  for (auto& id : ids) id = io::ReadPod<int64_t>(in, k);
  const auto fingerprint = io::ReadPod<uint64_t>(in, k);
  return EntityEmbeddingTable(std::move(vectors), std::move(ids), fingerprint);
}

}  // namespace linkstage
