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

#include "linkstage/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "linkstage/error.hpp"
#include "linkstage/random.hpp"

namespace linkstage {

using json = nlohmann::json;

KnowledgeBase::KnowledgeBase(std::vector<Entity> entities)
    : entities_(std::move(entities)) {
  id_index_.reserve(entities_.size());
  for (size_t i = 0; i < entities_.size(); ++i) {
    const Entity& e = entities_[i];
    if (e.title.empty()) {
      Fail(ErrorKind::kData, "entity " + std::to_string(e.id) + " has an empty title");
    }
    if (!id_index_.emplace(e.id, i).second) {
      Fail(ErrorKind::kData, "duplicate entity id " + std::to_string(e.id));
    }
  }
}

std::optional<size_t> KnowledgeBase::Position(EntityId id) const {
  auto it = id_index_.find(id);
  if (it == id_index_.end()) return std::nullopt;
  return it->second;
}

const Entity& KnowledgeBase::ById(EntityId id) const {
  auto it = id_index_.find(id);
  if (it == id_index_.end()) {
    Fail(ErrorKind::kData, "unknown entity id " + std::to_string(id));
  }
  return entities_[it->second];
}

ValidationReport ValidateZeroShotSplit(const ZeroShotSplit& split) {
  ValidationReport report;
  for (const Entity& e : split.test_kb.entities()) {
    if (split.train_kb.Contains(e.id)) {
      report.violations.push_back("entity " + std::to_string(e.id) +
                                  " in both KBs");
    }
  }
  auto check_gold = [&](const std::vector<Mention>& mentions,
                        const KnowledgeBase& kb, const char* side) {
    for (const Mention& m : mentions) {
      if (!kb.Contains(m.gold_entity_id)) {
        report.violations.push_back(
            std::string(side) + " mention " + std::to_string(m.id) + ": gold " +
            std::to_string(m.gold_entity_id) + " not in KB");
      }
      if (m.surface.empty()) {
        report.violations.push_back(std::string(side) + " mention " +
                                    std::to_string(m.id) +
                                    ": empty surface");
      }
    }
  };
  check_gold(split.train_examples, split.train_kb, "train");
  check_gold(split.test_examples, split.test_kb, "test");
  return report;
}

void SynthConfig::Validate() const {
  auto bad = [](const std::string& what) {
    Fail(ErrorKind::kConfig, "invalid synthetic config: " + what);
  };
  if (n_entities < 1) bad("n_entities must be >= 1");
  if (n_mentions < 1) bad("n_mentions must be >= 1");
  if (train_worlds < 1 || test_worlds < 1) bad("world counts must be >= 1");
  if (!(alias_noise_rate >= 0.0 && alias_noise_rate <= 1.0)) {
    bad("alias_noise_rate must lie in [0, 1]");
  }
  if (vocab_pool_size < 1) bad("vocab_pool_size must be >= 1");
}

namespace {

// Function words shared by every world.
const std::vector<std::string>& SharedWords() {
  static const std::vector<std::string> words = {
      "the",   "of",    "and",   "a",      "in",    "to",     "was",
      "is",    "for",   "on",    "with",   "as",    "by",     "at",
      "from",  "it",    "its",   "that",   "which", "also",   "after",
      "first", "later", "one",   "new",    "an",    "known",  "called",
      "near",  "under", "their", "during", "where", "became", "this",
      "some",  "many",  "there", "when",   "who"};
  return words;
}

class WordFactory {
 public:
  explicit WordFactory(Rng& rng) : rng_(rng) {
    for (const auto& w : SharedWords()) used_.insert(w);
  }

  std::string Fresh() {
    static const std::vector<std::string> onsets = {
        "b", "c",  "d",  "f",  "g",  "h",  "j",  "k",  "l",  "m",
        "n", "p",  "r",  "s",  "t",  "v",  "z",  "br", "ch", "dr",
        "gr", "kr", "st", "th", "tr", "sh", "qu", "bl", "fl", "w"};
    static const std::vector<std::string> vowels = {"a",  "e",  "i",  "o",
                                                    "u",  "ai", "ou", "ea",
                                                    "y",  "io"};
    static const std::vector<std::string> codas = {"", "", "", "n", "r",
                                                   "s", "l", "th", "x", "m"};
    for (;;) {
      const size_t syllables = 2 + rng_.Uniform(2);
      std::string word;
      for (size_t s = 0; s < syllables; ++s) {
        word += rng_.Pick(onsets);
        word += rng_.Pick(vowels);
        if (s + 1 == syllables) word += rng_.Pick(codas);
      }
      if (used_.insert(word).second) return word;
    }
  }

 private:
  Rng& rng_;
  std::unordered_set<std::string> used_;
};

// Generation constants. Titles, attributes and topics are world-specific,
// while every world describes its entities with one global concept lexicon.
// Each concept has a formal word (used in descriptions) and an informal
// synonym (used by descriptive mentions), so a descriptive mention shares no
// content word with its gold entity.
constexpr size_t kTopicSize = 50;           // entities per topic cluster
constexpr size_t kTopicTokens = 10;         // vocabulary per topic
constexpr size_t kAttributeTokens = 4;      // per-entity description tokens
constexpr size_t kGenericTokens = 100;      // world-level filler words
constexpr size_t kConcepts = 48;            // global concept lexicon size
constexpr size_t kConceptsPerEntity = 3;

struct Concept {
  std::string formal;
  std::string informal;
};

struct WorldEntity {
  std::vector<std::string> title;
  std::vector<std::string> attributes;
  std::vector<size_t> concepts;  // distinct, sorted; unique set per world
  size_t topic = 0;
};

struct World {
  std::string name;
  std::vector<std::vector<std::string>> topics;
  std::vector<std::string> generic;
  std::vector<WorldEntity> entities;
};

std::string Join(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (t == "." || t == ",") {
      out += t;
      continue;
    }
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::vector<Concept> MakeLexicon(WordFactory& words) {
  std::vector<Concept> lexicon(kConcepts);
  for (auto& c : lexicon) {
    c.formal = words.Fresh();
    c.informal = words.Fresh();
  }
  return lexicon;
}

World MakeWorld(const std::string& name, const SynthConfig& config,
                WordFactory& words, Rng& rng) {
  World world;
  world.name = name;
  const size_t n_topics = std::max<size_t>(1, config.n_entities / kTopicSize);

  std::vector<std::string> pool(config.vocab_pool_size);
  for (auto& w : pool) w = words.Fresh();
  size_t cursor = 0;
  // Titles must be unique within a world, so title words are never reused;
  // the rest of the pool cycles when it runs out.
  auto take_unique = [&]() -> std::string {
    if (cursor < pool.size()) return pool[cursor++];
    return words.Fresh();
  };

  world.topics.resize(n_topics);
  for (auto& topic : world.topics) {
    for (size_t i = 0; i < kTopicTokens; ++i) topic.push_back(take_unique());
  }
  for (size_t i = 0; i < kGenericTokens; ++i) {
    world.generic.push_back(take_unique());
  }
  world.entities.resize(config.n_entities);
  for (size_t i = 0; i < config.n_entities; ++i) {
    WorldEntity& e = world.entities[i];
    e.topic = i % n_topics;
    const size_t title_len = rng.Bernoulli(0.6) ? 2 : 1;
    for (size_t t = 0; t < title_len; ++t) e.title.push_back(take_unique());
  }
  for (auto& e : world.entities) {
    for (size_t a = 0; a < kAttributeTokens; ++a) {
      e.attributes.push_back(cursor < pool.size() ? pool[cursor++]
                                                  : rng.Pick(pool));
    }
  }
  // Concept sets are unique within the world while they last (there are
  // C(48, 3) = 17296 of them).
  std::set<std::vector<size_t>> used;
  for (auto& e : world.entities) {
    for (int attempt = 0;; ++attempt) {
      std::vector<size_t> all(kConcepts);
      for (size_t c = 0; c < kConcepts; ++c) all[c] = c;
      rng.Shuffle(all);
      std::vector<size_t> chosen(all.begin(), all.begin() + kConceptsPerEntity);
      std::sort(chosen.begin(), chosen.end());
      if (used.insert(chosen).second || attempt >= 100) {
        e.concepts = std::move(chosen);
        break;
      }
    }
  }
  return world;
}

std::string Describe(const World& world, const WorldEntity& e,
                     const std::vector<Concept>& lexicon, Rng& rng) {
  const auto& topic = world.topics[e.topic];
  const auto& shared = SharedWords();
  auto formal = [&](size_t i) { return lexicon[e.concepts[i]].formal; };
  std::vector<std::string> out;
  out.insert(out.end(), e.title.begin(), e.title.end());
  out.insert(out.end(), {"is", "a", formal(0), rng.Pick(topic), e.attributes[0],
                         "of", "the", rng.Pick(topic), "."});
  out.insert(out.end(), {"it", rng.Pick(shared), formal(1), e.attributes[1], "and",
                         formal(2), e.attributes[2], "."});
  if (rng.Bernoulli(0.5)) {
    out.insert(out.end(), {"the", e.attributes[3], rng.Pick(shared),
                           rng.Pick(topic), "in", rng.Pick(world.generic), "."});
  } else {
    out.insert(out.end(), {"also", "known", "for", e.attributes[3], "."});
  }
  return Join(out);
}

enum class SurfaceKind { kTitle, kPartial, kAttribute, kTitlePlusWord, kDescriptive };

SurfaceKind PickSurfaceKind(double noise, Rng& rng) {
  if (!rng.Bernoulli(noise)) return SurfaceKind::kTitle;
  switch (rng.Uniform(6)) {
    case 0:
      return SurfaceKind::kPartial;
    case 1:
      return SurfaceKind::kAttribute;
    case 2:
      return SurfaceKind::kTitlePlusWord;
    default:
      return SurfaceKind::kDescriptive;
  }
}

std::vector<std::string> Surface(const World& world, const WorldEntity& e,
                                 const std::vector<Concept>& lexicon,
                                 SurfaceKind kind, Rng& rng) {
  switch (kind) {
    case SurfaceKind::kTitle:
      return e.title;
    case SurfaceKind::kPartial:
      // Partial title, or a title word plus an alias-like attribute.
      if (e.title.size() > 1) return {rng.Pick(e.title)};
      return {e.title[0], rng.Pick(e.attributes)};
    case SurfaceKind::kAttribute:
      return {rng.Pick(e.attributes)};
    case SurfaceKind::kTitlePlusWord: {
      auto s = e.title;
      s.push_back(rng.Pick(world.generic));
      return s;
    }
    case SurfaceKind::kDescriptive: {
      std::vector<std::string> s;
      for (size_t c : e.concepts) s.push_back(lexicon[c].informal);
      rng.Shuffle(s);
      s.push_back("one");
      return s;
    }
  }
  return e.title;
}

// Context mixes function words, a little gold-related vocabulary and a
// distractor entity's vocabulary. Descriptive mentions get no gold-related
// words at all. `ambiguity` in [0, 1] scales the share of function-word,
// generic and distractor slots; the slots it drops take gold attributes.
std::vector<std::string> Context(const World& world, const WorldEntity& gold,
                                 const WorldEntity& distractor, bool gold_words,
                                 double ambiguity, Rng& rng) {
  const size_t len = 3 + rng.Uniform(6);
  const auto& gold_topic = world.topics[gold.topic];
  const auto& other_topic = world.topics[distractor.topic];
  auto gold_attribute = [&] {
    return gold_words ? rng.Pick(gold.attributes) : rng.Pick(SharedWords());
  };
  std::vector<std::string> out;
  for (size_t i = 0; i < len; ++i) {
    const double u = rng.UniformReal();
    if (u < 0.40) {
      out.push_back(u < 0.40 * ambiguity ? rng.Pick(SharedWords()) : gold_attribute());
    } else if (u < 0.50) {
      out.push_back(gold_words ? rng.Pick(gold_topic) : rng.Pick(SharedWords()));
    } else if (u < 0.55) {
      out.push_back(gold_words ? rng.Pick(gold.attributes) : rng.Pick(world.generic));
    } else if (u < 0.55 + 0.30 * ambiguity) {
      out.push_back(rng.Pick(other_topic));
    } else if (u < 0.55 + 0.40 * ambiguity) {
      out.push_back(rng.Pick(distractor.attributes));
    } else if (u < 0.95) {
      out.push_back(gold_attribute());
    } else {
      out.push_back(u < 0.95 + 0.05 * ambiguity ? rng.Pick(world.generic) : gold_attribute());
    }
  }
  return out;
}

void EmitWorld(const World& world, const std::vector<Concept>& lexicon,
               const SynthConfig& config, Rng& rng, EntityId& next_entity,
               int64_t& next_mention, std::vector<Entity>& entities,
               std::vector<Mention>& mentions) {
  const EntityId first = next_entity;
  for (const auto& e : world.entities) {
    entities.push_back({next_entity++, Join(e.title), Describe(world, e, lexicon, rng),
                        world.name});
  }
  for (size_t i = 0; i < world.entities.size(); ++i) {
    const WorldEntity& gold = world.entities[i];
    for (size_t j = 0; j < config.n_mentions; ++j) {
      size_t d = rng.Uniform(world.entities.size());
      if (world.entities.size() > 1 && d == i) d = (d + 1) % world.entities.size();
      const WorldEntity& distractor = world.entities[d];
      const SurfaceKind kind = PickSurfaceKind(config.alias_noise_rate, rng);
      const bool gold_words = kind != SurfaceKind::kDescriptive;
      // Contextual ambiguity grows with the noise rate and saturates at the
      // default rate; noise-free mentions only use gold vocabulary.
      const double ambiguity = std::min(1.0, config.alias_noise_rate / 0.3);
      Mention m;
      m.id = next_mention++;
      m.context_left = Join(Context(world, gold, distractor, gold_words, ambiguity, rng));
      m.surface = Join(Surface(world, gold, lexicon, kind, rng));
      m.context_right = Join(Context(world, gold, distractor, gold_words, ambiguity, rng));
      m.gold_entity_id = first + static_cast<EntityId>(i);
      m.domain = world.name;
      mentions.push_back(std::move(m));
    }
  }
}

}  // namespace

ZeroShotSplit GenerateSyntheticWorld(const SynthConfig& config) {
  config.Validate();
  Rng rng(config.seed);
  WordFactory words(rng);
  const std::vector<Concept> lexicon = MakeLexicon(words);
  ZeroShotSplit split;
  std::vector<Entity> train_entities, test_entities;
  EntityId next_entity = 0;
  int64_t next_mention = 0;
  for (size_t w = 0; w < config.train_worlds; ++w) {
    World world = MakeWorld("train_world_" + std::to_string(w), config, words, rng);
    EmitWorld(world, lexicon, config, rng, next_entity, next_mention, train_entities,
              split.train_examples);
  }
  for (size_t w = 0; w < config.test_worlds; ++w) {
    World world = MakeWorld("test_world_" + std::to_string(w), config, words, rng);
    EmitWorld(world, lexicon, config, rng, next_entity, next_mention, test_entities,
              split.test_examples);
  }
  split.train_kb = KnowledgeBase(std::move(train_entities));
  split.test_kb = KnowledgeBase(std::move(test_entities));
  return split;
}

// ---------------------------------------------------------------------------
// JSONL persistence

namespace {

// Maps textual ids to dense integers in first-seen order; integer ids pass
// through unchanged.
class IdMapper {
 public:
  int64_t Map(const json& value, const std::string& where) {
    if (value.is_number_integer()) return value.get<int64_t>();
    if (value.is_string()) {
      auto [it, inserted] = keys_.emplace(value.get<std::string>(), next_);
      if (inserted) ++next_;
      return it->second;
    }
    Fail(ErrorKind::kData, where + ": id must be an integer or string");
  }

 private:
  std::unordered_map<std::string, int64_t> keys_;
  int64_t next_ = 0;
};

template <typename Fn>
void ForEachRecord(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kData, "cannot open " + path.string());
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      Fail(ErrorKind::kData, where + ": malformed record: " + e.what());
    }
    if (!record.is_object()) Fail(ErrorKind::kData, where + ": record is not an object");
    fn(record, where);
  }
}

const json& Field(const json& record, const char* name, const std::string& where) {
  auto it = record.find(name);
  if (it == record.end()) {
    Fail(ErrorKind::kData, where + ": missing field \"" + name + "\"");
  }
  return *it;
}

std::string StringField(const json& record, const char* name, const std::string& where) {
  const json& v = Field(record, name, where);
  if (!v.is_string()) {
    Fail(ErrorKind::kData, where + ": field \"" + name + "\" must be a string");
  }
  return v.get<std::string>();
}

KnowledgeBase LoadEntities(const std::filesystem::path& path, IdMapper& ids) {
  std::vector<Entity> entities;
  std::unordered_set<EntityId> seen;
  ForEachRecord(path, [&](const json& r, const std::string& where) {
    Entity e;
    e.id = ids.Map(Field(r, "id", where), where);
    e.title = StringField(r, "title", where);
    e.description = StringField(r, "description", where);
    e.domain = StringField(r, "domain", where);
    if (e.title.empty()) Fail(ErrorKind::kData, where + ": empty title");
    if (!seen.insert(e.id).second) {
      Fail(ErrorKind::kData, where + ": duplicate id " + std::to_string(e.id));
    }
    entities.push_back(std::move(e));
  });
  return KnowledgeBase(std::move(entities));
}

std::vector<Mention> LoadMentions(const std::filesystem::path& path,
                                  IdMapper& entity_ids, IdMapper& mention_ids,
                                  std::unordered_set<int64_t>& seen) {
  std::vector<Mention> mentions;
  ForEachRecord(path, [&](const json& r, const std::string& where) {
    Mention m;
    m.id = mention_ids.Map(Field(r, "id", where), where);
    m.context_left = StringField(r, "context_left", where);
    m.surface = StringField(r, "mention", where);
    m.context_right = StringField(r, "context_right", where);
    m.gold_entity_id = entity_ids.Map(Field(r, "label_id", where), where);
    m.domain = StringField(r, "domain", where);
    if (!seen.insert(m.id).second) {
      Fail(ErrorKind::kData, where + ": duplicate id " + std::to_string(m.id));
    }
    mentions.push_back(std::move(m));
  });
  return mentions;
}

void WriteLines(const std::filesystem::path& path, const std::vector<json>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kData, "cannot write " + path.string());
  for (const auto& row : rows) out << row.dump() << '\n';
}

std::vector<json> EntityRows(const KnowledgeBase& kb) {
  std::vector<json> rows;
  for (const Entity& e : kb.entities()) {
    rows.push_back({{"id", e.id},
                    {"title", e.title},
                    {"description", e.description},
                    {"domain", e.domain}});
  }
  return rows;
}

std::vector<json> MentionRows(const std::vector<Mention>& mentions) {
  std::vector<json> rows;
  for (const Mention& m : mentions) {
    rows.push_back({{"id", m.id},
                    {"context_left", m.context_left},
                    {"mention", m.surface},
                    {"context_right", m.context_right},
                    {"label_id", m.gold_entity_id},
                    {"domain", m.domain}});
  }
  return rows;
}

}  // namespace

void SaveDataset(const ZeroShotSplit& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  WriteLines(dir / "train_entities.jsonl", EntityRows(split.train_kb));
  WriteLines(dir / "train_mentions.jsonl", MentionRows(split.train_examples));
  WriteLines(dir / "test_entities.jsonl", EntityRows(split.test_kb));
  WriteLines(dir / "test_mentions.jsonl", MentionRows(split.test_examples));
}

ZeroShotSplit LoadDataset(const std::filesystem::path& dir) {
  IdMapper entity_ids, mention_ids;
  ZeroShotSplit split;
  split.train_kb = LoadEntities(dir / "train_entities.jsonl", entity_ids);
  split.test_kb = LoadEntities(dir / "test_entities.jsonl", entity_ids);
  std::unordered_set<int64_t> seen_mentions;
  split.train_examples = LoadMentions(dir / "train_mentions.jsonl", entity_ids,
                                      mention_ids, seen_mentions);
  split.test_examples = LoadMentions(dir / "test_mentions.jsonl", entity_ids,
                                     mention_ids, seen_mentions);
  return split;
}

}  // namespace linkstage
