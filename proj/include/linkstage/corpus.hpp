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

// Entity-linking data model: entities, mentions, knowledge bases and
// zero-shot splits whose train and test entity sets are disjoint.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace linkstage {

using EntityId = int64_t;

struct Entity {
  EntityId id = 0;
  std::string title;
  std::string description;
  std::string domain;

  bool operator==(const Entity&) const = default;
};

struct Mention {
  int64_t id = 0;
  std::string context_left;
  std::string surface;
  std::string context_right;
  EntityId gold_entity_id = 0;
  std::string domain;

  bool operator==(const Mention&) const = default;
};

// Ordered entity collection with an id -> position index. Construction
// rejects duplicate ids and empty titles.
class KnowledgeBase {
 public:
  KnowledgeBase() = default;
  explicit KnowledgeBase(std::vector<Entity> entities);

  const std::vector<Entity>& entities() const { return entities_; }
  size_t size() const { return entities_.size(); }
  bool empty() const { return entities_.empty(); }

  bool Contains(EntityId id) const { return id_index_.count(id) != 0; }
  std::optional<size_t> Position(EntityId id) const;
  // Throws a data error for unknown ids.
  const Entity& ById(EntityId id) const;
  const Entity& operator[](size_t position) const { return entities_[position]; }

  bool operator==(const KnowledgeBase& other) const {
    return entities_ == other.entities_;
  }

 private:
  std::vector<Entity> entities_;
  std::unordered_map<EntityId, size_t> id_index_;
};

struct ZeroShotSplit {
  KnowledgeBase train_kb;
  KnowledgeBase test_kb;
  std::vector<Mention> train_examples;
  std::vector<Mention> test_examples;

  bool operator==(const ZeroShotSplit&) const = default;
};

struct ValidationReport {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

// Checks train/test entity-id disjointness and that every example's gold
// entity lives in its own side's KB. Violations are collected, never thrown.
ValidationReport ValidateZeroShotSplit(const ZeroShotSplit& split);

struct SynthConfig {
  size_t n_entities = 500;      // per world
  size_t n_mentions = 4;        // per entity
  double alias_noise_rate = 0.3;
  size_t vocab_pool_size = 4000;  // world-specific pseudo-words per world
  uint64_t seed = 7;
  size_t train_worlds = 1;
  size_t test_worlds = 1;

  // Throws a config error when a field is out of range.
  void Validate() const;
};

// Deterministic desk-scale stand-in for multi-domain linking data. Every
// world draws titles, descriptions and contexts from its own token pool
// (plus a small shared pool of function words), so train and test worlds
// share almost no content vocabulary.
ZeroShotSplit GenerateSyntheticWorld(const SynthConfig& config);

// JSONL directory layout: train_entities.jsonl, train_mentions.jsonl,
// test_entities.jsonl, test_mentions.jsonl.
void SaveDataset(const ZeroShotSplit& split, const std::filesystem::path& dir);
ZeroShotSplit LoadDataset(const std::filesystem::path& dir);

}  // namespace linkstage
